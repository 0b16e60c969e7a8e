#include "fuselm/corpus.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace fuselm {
namespace {

Waveform flat(double seconds, double value, int rate = kSampleRate) {
  Waveform w;
  w.sample_rate = rate;
  w.samples.assign(static_cast<size_t>(seconds * rate), value);
  return w;
}

// --- cleaning ---------------------------------------------------------------

TEST(Clean, RemovesTagsAndListedParensKeepsParticles) {
  EXPECT_EQ(clean_transcript("<mandarin> hello (ppb) world"), "hello world");
  EXPECT_EQ(clean_transcript("[oh] !walao! (um) nice"), "[oh] !walao! (um) nice");
  EXPECT_EQ(clean_transcript(""), "");
}

TEST(Clean, RemovesEveryAngleTagRegardlessOfContent) {
  EXPECT_EQ(clean_transcript("<S> a <noise> b <anything at all> c"), "a b c");
  EXPECT_EQ(clean_transcript("x<S>y"), "xy");
}

TEST(Clean, UnknownParenGroupsAreKept) {
  EXPECT_EQ(clean_transcript("(hello) there"), "(hello) there");
  EXPECT_EQ(clean_transcript("(er) fine"), "(er) fine");  // keepable filler
}

TEST(Clean, ConfiguredListsDriveRemoval) {
  CleaningConfig cfg;
  cfg.removable_parens = {"ppb", "static"};
  EXPECT_EQ(clean_transcript("a (static) b (ppb) c (um) d", cfg), "a b c (um) d");
  // Internal spacing of a token must not defeat the removal list.
  EXPECT_EQ(clean_transcript("a ( ppb ) b", cfg), "a b");
}

TEST(Clean, UnmatchedDelimitersAreLiteral) {
  EXPECT_EQ(clean_transcript("a < b"), "a < b");
  EXPECT_EQ(clean_transcript("a ( b"), "a ( b");
  EXPECT_EQ(clean_transcript("a ) b > c"), "a ) b > c");
}

TEST(Clean, CollapsesWhitespaceRuns) {
  EXPECT_EQ(clean_transcript("  a \t\t b\n\nc  "), "a b c");
}

TEST(Clean, IdempotentOnRandomNoisyStrings) {
  const std::string alphabet = "ab <>()[]! \t(ppb)(um)xyz";
  Rng rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    std::string s;
    int len = static_cast<int>(rng.uniform_int(0, 40));
    for (int i = 0; i < len; ++i)
      s.push_back(alphabet[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(alphabet.size())))]);
    std::string once = clean_transcript(s);
    EXPECT_EQ(clean_transcript(once), once) << "input: " << s;
  }
}

// --- superimposition ---------------------------------------------------------

TEST(Superimpose, AddingSilenceIsExactIdentity) {
  Waveform x = flat(0.01, 0.0);
  Rng rng(1);
  for (double& v : x.samples) v = 0.9 * (rng.uniform() * 2 - 1);
  Waveform silence = flat(0.005, 0.0);  // shorter; zero-padded
  Waveform sum = superimpose(x, silence);
  ASSERT_EQ(sum.samples.size(), x.samples.size());
  for (size_t i = 0; i < x.samples.size(); ++i) EXPECT_EQ(sum.samples[i], x.samples[i]);
}

TEST(Superimpose, OppositeSignalsCancelToDigitalSilence) {
  Waveform x = flat(0.01, 0.0);
  Rng rng(2);
  for (double& v : x.samples) v = rng.uniform() - 0.5;
  Waveform y = x;
  for (double& v : y.samples) v = -v;
  Waveform sum = superimpose(x, y);
  for (double v : sum.samples) EXPECT_EQ(v, 0.0);
}

TEST(Superimpose, ClippingSumIsRescaledToUnitPeak) {
  // Two 0.8-amplitude DC signals: raw sum 1.6 everywhere, rescaled to 1.0.
  Waveform sum = superimpose(flat(0.002, 0.8), flat(0.002, 0.8));
  for (double v : sum.samples) EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(Superimpose, NonClippingSumIsNotRescaled) {
  Waveform sum = superimpose(flat(0.002, 0.3), flat(0.002, 0.4));
  for (double v : sum.samples) EXPECT_DOUBLE_EQ(v, 0.7);
}

TEST(Superimpose, CommutesExactlyWhenNotClipping) {
  Waveform a = flat(0.004, 0.0), b = flat(0.002, 0.0);
  Rng rng(3);
  for (double& v : a.samples) v = 0.4 * (rng.uniform() * 2 - 1);
  for (double& v : b.samples) v = 0.4 * (rng.uniform() * 2 - 1);
  Waveform ab = superimpose(a, b), ba = superimpose(b, a);
  ASSERT_EQ(ab.samples.size(), ba.samples.size());
  for (size_t i = 0; i < ab.samples.size(); ++i) EXPECT_EQ(ab.samples[i], ba.samples[i]);
}

TEST(Superimpose, SampleRateMismatchIsAFormatError) {
  try {
    superimpose(flat(0.01, 0.1), flat(0.01, 0.1, 8000));
    FAIL() << "expected format error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::format);
  }
}

// --- segmentation -------------------------------------------------------------

RawUtterance timed_utterance(const std::vector<TimedSegment>& segs, double audio_seconds) {
  RawUtterance u;
  u.audio.sample_rate = kSampleRate;
  u.audio.samples.resize(static_cast<size_t>(audio_seconds * kSampleRate));
  for (size_t i = 0; i < u.audio.samples.size(); ++i)
    u.audio.samples[i] = std::sin(0.001 * static_cast<double>(i));
  for (const auto& s : segs) {
    if (!u.transcript.empty()) u.transcript += ' ';
    u.transcript += s.text;
  }
  u.segment_times = segs;
  return u;
}

TEST(Segment, ShortUntimedUtteranceIsASingleChunk) {
  RawUtterance u;
  u.audio = flat(10.0, 0.1);
  u.transcript = "short one";
  DropReport report;
  auto chunks = segment(u, 30.0, report);
  ASSERT_EQ(chunks.size(), 1u);
  EXPECT_EQ(chunks[0].transcript, "short one");
  EXPECT_EQ(chunks[0].audio.samples.size(), u.audio.samples.size());
  EXPECT_EQ(report.size(), 0u);
}

TEST(Segment, GreedyPackingTraceTwelveTwelveTwelve) {
  auto u = timed_utterance({{0, 12, "a"}, {12, 24, "b"}, {24, 36, "c"}}, 36.0);
  DropReport report;
  auto chunks = segment(u, 30.0, report);
  ASSERT_EQ(chunks.size(), 2u);
  EXPECT_EQ(chunks[0].transcript, "a b");
  EXPECT_EQ(chunks[1].transcript, "c");
  EXPECT_EQ(chunks[0].audio.samples.size(), static_cast<size_t>(24 * kSampleRate));
  EXPECT_EQ(chunks[1].audio.samples.size(), static_cast<size_t>(12 * kSampleRate));
  // Sliced audio matches the original sample-for-sample.
  for (size_t i = 0; i < 100; ++i) {
    EXPECT_EQ(chunks[0].audio.samples[i], u.audio.samples[i]);
    EXPECT_EQ(chunks[1].audio.samples[i], u.audio.samples[static_cast<size_t>(24 * kSampleRate) + i]);
  }
  // Timestamps are rebased to the chunk start.
  EXPECT_DOUBLE_EQ(chunks[1].segment_times[0].start_s, 0.0);
  EXPECT_DOUBLE_EQ(chunks[1].segment_times[0].end_s, 12.0);
  EXPECT_EQ(report.size(), 0u);
}

TEST(Segment, OversizeSingleSegmentIsDroppedWithReportEntry) {
  auto u = timed_utterance({{0, 31, "too long"}}, 31.0);
  DropReport report;
  auto chunks = segment(u, 30.0, report);
  EXPECT_TRUE(chunks.empty());
  ASSERT_EQ(report.size(), 1u);
  EXPECT_NE(report.entries[0].find("31"), std::string::npos);

  // Oversize in the middle: neighbors survive, chunking cannot span the gap.
  auto v = timed_utterance({{0, 10, "a"}, {10, 41, "x"}, {41, 51, "b"}}, 51.0);
  DropReport report2;
  auto chunks2 = segment(v, 30.0, report2);
  ASSERT_EQ(chunks2.size(), 2u);
  EXPECT_EQ(chunks2[0].transcript, "a");
  EXPECT_EQ(chunks2[1].transcript, "b");
  EXPECT_EQ(report2.size(), 1u);
}

TEST(Segment, KeptTextIsConservedInOrder) {
  Rng rng(77);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<TimedSegment> segs;
    double t = 0.0;
    std::string want;
    for (int i = 0; i < 12; ++i) {
      double len = 1.0 + 28.0 * rng.uniform();  // every segment individually fits
      std::string text = "w" + std::to_string(i);
      segs.push_back({t, t + len, text});
      if (!want.empty()) want += ' ';
      want += text;
      t += len;
    }
    auto u = timed_utterance(segs, t);
    DropReport report;
    auto chunks = segment(u, 30.0, report);
    std::string got;
    for (const auto& c : chunks) {
      if (!got.empty()) got += ' ';
      got += c.transcript;
    }
    EXPECT_EQ(got, want);
    EXPECT_EQ(report.size(), 0u);
  }
}

TEST(Segment, OverlappingTimestampsAreInvalid) {
  auto u = timed_utterance({{0, 10, "a"}, {9, 20, "b"}}, 20.0);
  DropReport report;
  try {
    segment(u, 30.0, report);
    FAIL() << "expected invalid-record error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::invalid);
  }
}

// --- split assignment -----------------------------------------------------------

TEST(Splits, SameTranscriptAlwaysSharesASplit) {
  SplitSpec spec;
  for (uint64_t seed = 0; seed < 50; ++seed) {
    std::string a = assign_split("the same sentence", spec, seed);
    std::string b = assign_split("the same sentence", spec, seed);
    EXPECT_EQ(a, b);
  }
}

TEST(Splits, NormalizationMakesCaseAndSpacingIrrelevant) {
  SplitSpec spec;
  for (uint64_t seed = 0; seed < 20; ++seed)
    EXPECT_EQ(assign_split("Hello  World", spec, seed), assign_split("hello world", spec, seed));
}

TEST(Splits, ProportionsMatchRatiosOverManyTranscripts) {
  SplitSpec spec;  // 0.9 / 0.05 / 0.05
  std::map<std::string, int> counts;
  const int n = 10000;
  for (int i = 0; i < n; ++i) counts[assign_split("utterance number " + std::to_string(i), spec, 42)]++;
  EXPECT_NEAR(counts["train"] / double(n), 0.90, 0.01);
  EXPECT_NEAR(counts["dev"] / double(n), 0.05, 0.01);
  EXPECT_NEAR(counts["test"] / double(n), 0.05, 0.01);
}

TEST(Splits, DifferentSeedsReshuffleAssignments) {
  SplitSpec spec;
  int moved = 0;
  for (int i = 0; i < 200; ++i) {
    std::string t = "sentence " + std::to_string(i);
    if (assign_split(t, spec, 1) != assign_split(t, spec, 2)) ++moved;
  }
  EXPECT_GT(moved, 0);
}

TEST(Splits, RatiosMustSumToOne) {
  SplitSpec spec;
  spec.ratios = {{"train", 0.9}, {"dev", 0.2}};
  try {
    assign_split("x", spec, 0);
    FAIL() << "expected config error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::config);
  }
}

// --- duration filter ---------------------------------------------------------

TEST(DurationFilter, AcceptsExactAndTolerantRejectsDrift) {
  auto make = [](double audio_s, double span_s) {
    RawUtterance u;
    u.audio = flat(audio_s, 0.1);
    u.segment_times = {{0.0, span_s, "t"}};
    return u;
  };
  EXPECT_TRUE(duration_filter(make(10.0, 10.0), 0.0));
  EXPECT_FALSE(duration_filter(make(12.0, 10.0), 0.1));  // 20% drift > 10%
  EXPECT_TRUE(duration_filter(make(10.5, 10.0), 0.1));   // 5% drift <= 10%
}

TEST(DurationFilter, ZeroSpanIsInvalid) {
  RawUtterance u;
  u.audio = flat(1.0, 0.1);
  u.segment_times = {{2.0, 2.0, "t"}};
  try {
    duration_filter(u);
    FAIL() << "expected invalid-record error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::invalid);
  }
}

TEST(DurationFilter, MissingTimestampsAreInvalid) {
  RawUtterance u;
  u.audio = flat(1.0, 0.1);
  EXPECT_THROW(duration_filter(u), Error);
}

// --- manifest ------------------------------------------------------------------

TEST(Manifest, ParsesFullEntry) {
  std::istringstream in(
      R"({"audio_path":"a.wav","transcript":"hi there","audio_path_b":"b.wav",)"
      R"("speaker_meta":{"gender":"F","age":"30","ethnic_group":"X","first_language":"Y"},)"
      R"("segments":[{"start":0.0,"end":2.5,"text":"hi"},{"start":2.5,"end":4.0,"text":"there"}]})"
      "\n");
  auto entries = read_manifest(in);
  ASSERT_EQ(entries.size(), 1u);
  const auto& e = entries[0];
  EXPECT_EQ(e.audio_path, "a.wav");
  EXPECT_EQ(e.transcript, "hi there");
  ASSERT_TRUE(e.audio_path_b.has_value());
  EXPECT_EQ(*e.audio_path_b, "b.wav");
  ASSERT_TRUE(e.speaker_meta.has_value());
  EXPECT_EQ(e.speaker_meta->gender, "F");
  ASSERT_EQ(e.segments.size(), 2u);
  EXPECT_DOUBLE_EQ(e.segments[1].end_s, 4.0);
  EXPECT_EQ(e.segments[1].text, "there");
}

TEST(Manifest, SkipsBlankLinesAndNumbersErrorsByLine) {
  std::istringstream in(
      "{\"audio_path\":\"a.wav\",\"transcript\":\"one\"}\n"
      "\n"
      "this is not json\n");
  try {
    read_manifest(in);
    FAIL() << "expected format error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::format);
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
  }
}

TEST(Manifest, MissingRequiredFieldNamesIt) {
  std::istringstream in(R"({"transcript":"no audio"})" "\n");
  try {
    read_manifest(in);
    FAIL() << "expected format error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::format);
    EXPECT_NE(std::string(e.what()).find("audio_path"), std::string::npos);
  }
}

}  // namespace
}  // namespace fuselm
