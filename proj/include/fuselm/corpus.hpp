#pragma once

// Dataset preparation: transcript cleaning, two-sided conversation
// superimposition, packing timed segments into <=30 s chunks, leakage-safe
// split assignment by transcript hash, and duration-consistency filtering.
// Inputs arrive as a JSONL manifest; rejected records go to a drop report.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fuselm/audio.hpp"
#include "fuselm/common.hpp"

namespace fuselm {

struct SpeakerMeta {
  std::string gender;
  std::string age;
  std::string ethnic_group;
  std::string first_language;
};

struct TimedSegment {
  double start_s = 0.0;
  double end_s = 0.0;
  std::string text;
};

struct RawUtterance {
  Waveform audio;
  std::string transcript;
  std::optional<SpeakerMeta> speaker_meta;
  std::vector<TimedSegment> segment_times;  // empty means "not provided"
};

// Segment lists must be increasing and non-overlapping to be usable.
inline void validate_segment_times(const std::vector<TimedSegment>& segs) {
  for (size_t i = 0; i < segs.size(); ++i) {
    if (segs[i].end_s < segs[i].start_s)
      fail(ErrorKind::invalid, "segment ", i, " ends at ", segs[i].end_s, " s before it starts at ",
           segs[i].start_s, " s");
    if (i > 0 && segs[i].start_s < segs[i - 1].end_s)
      fail(ErrorKind::invalid, "segment ", i, " starts at ", segs[i].start_s,
           " s, overlapping the previous segment ending at ", segs[i - 1].end_s, " s");
  }
}

// ---------------------------------------------------------------------------
// Transcript cleaning.

// Which parenthesized tokens are stripped vs kept is list-driven; anything
// not on the removable list (including unlisted tokens) is preserved.
struct CleaningConfig {
  std::vector<std::string> removable_parens = {"ppb"};
  std::vector<std::string> keepable_parens = {"um", "uh", "er", "mm"};
};

namespace detail {

inline std::string collapse_whitespace(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  bool in_space = true;  // also swallows leading whitespace
  for (unsigned char c : s) {
    if (std::isspace(c)) {
      in_space = true;
      continue;
    }
    if (in_space && !out.empty()) out.push_back(' ');
    in_space = false;
    out.push_back(static_cast<char>(c));
  }
  return out;
}

inline std::string trim(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

}  // namespace detail

// Total and idempotent. Removes every <...> tag and the configured removable
// (...) tokens; keeps [particles], !interjections!, and any other (...) group
// verbatim. Unmatched '<' or '(' are treated as literal characters.
inline std::string clean_transcript(const std::string& text, const CleaningConfig& cfg = {}) {
  std::string out;
  out.reserve(text.size());
  size_t i = 0;
  while (i < text.size()) {
    char c = text[i];
    if (c == '<') {
      size_t close = text.find('>', i + 1);
      if (close != std::string::npos) {
        i = close + 1;  // drop the whole tag
        continue;
      }
    } else if (c == '(') {
      size_t close = text.find(')', i + 1);
      if (close != std::string::npos) {
        // Compare against the whitespace-collapsed token: the output is
        // collapsed too, so matching must not depend on inner spacing.
        std::string token = detail::collapse_whitespace(text.substr(i + 1, close - i - 1));
        bool removable = std::find(cfg.removable_parens.begin(), cfg.removable_parens.end(), token) !=
                         cfg.removable_parens.end();
        if (!removable) out.append(text, i, close - i + 1);  // keep the group verbatim
        i = close + 1;
        continue;
      }
    }
    out.push_back(c);
    ++i;
  }
  return detail::collapse_whitespace(out);
}

// ---------------------------------------------------------------------------
// Conversation-side superimposition.

// Sums two sides sample-wise (the shorter zero-padded) and rescales to peak
// 1.0 only if the raw sum clips.
inline Waveform superimpose(const Waveform& a, const Waveform& b) {
  if (a.sample_rate != b.sample_rate)
    fail(ErrorKind::format, "superimpose: sample rate ", a.sample_rate, " vs ", b.sample_rate);
  Waveform out;
  out.sample_rate = a.sample_rate;
  out.samples.resize(std::max(a.samples.size(), b.samples.size()), 0.0);
  for (size_t i = 0; i < out.samples.size(); ++i) {
    double va = i < a.samples.size() ? a.samples[i] : 0.0;
    double vb = i < b.samples.size() ? b.samples[i] : 0.0;
    out.samples[i] = va + vb;
  }
  double peak = 0.0;
  for (double v : out.samples) peak = std::max(peak, std::abs(v));
  if (peak > 1.0)
    for (double& v : out.samples) v /= peak;
  return out;
}

// ---------------------------------------------------------------------------
// Segmentation into bounded chunks.

struct DropReport {
  std::vector<std::string> entries;

  void add(std::string reason) { entries.push_back(std::move(reason)); }
  size_t size() const { return entries.size(); }

  void write(const std::string& path) const {
    std::ofstream f(path);
    if (!f) fail(ErrorKind::io, "cannot open drop report '", path, "' for writing");
    for (const auto& e : entries) f << e << '\n';
  }
};

namespace detail {

inline size_t sample_index(double seconds, int sample_rate, size_t limit) {
  auto idx = static_cast<long long>(std::llround(seconds * sample_rate));
  if (idx < 0) idx = 0;
  return std::min(static_cast<size_t>(idx), limit);
}

}  // namespace detail

// Greedily packs consecutive timed segments into chunks spanning at most
// max_s seconds of audio; cuts happen only at segment boundaries. A single
// segment longer than max_s is dropped and reported. Inputs without timing
// are treated as one segment covering the whole recording. Chunk timestamps
// are rebased so each chunk starts at 0.
inline std::vector<RawUtterance> segment(const RawUtterance& u, double max_s, DropReport& report) {
  if (max_s <= 0) fail(ErrorKind::config, "segment: max_s must be positive, got ", max_s);
  std::vector<TimedSegment> segs = u.segment_times;
  if (segs.empty())
    segs.push_back({0.0, static_cast<double>(u.audio.samples.size()) / u.audio.sample_rate, u.transcript});
  validate_segment_times(segs);

  std::vector<RawUtterance> out;
  std::vector<TimedSegment> chunk;
  auto flush = [&]() {
    if (chunk.empty()) return;
    double t0 = chunk.front().start_s;
    double t1 = chunk.back().end_s;
    RawUtterance piece;
    piece.audio.sample_rate = u.audio.sample_rate;
    size_t a = detail::sample_index(t0, u.audio.sample_rate, u.audio.samples.size());
    size_t b = detail::sample_index(t1, u.audio.sample_rate, u.audio.samples.size());
    piece.audio.samples.assign(u.audio.samples.begin() + static_cast<long>(a),
                               u.audio.samples.begin() + static_cast<long>(b));
    std::string text;
    for (const auto& s : chunk) {
      if (!text.empty() && !s.text.empty()) text += ' ';
      text += s.text;
    }
    piece.transcript = text;
    piece.speaker_meta = u.speaker_meta;
    for (TimedSegment s : chunk) {
      s.start_s -= t0;
      s.end_s -= t0;
      piece.segment_times.push_back(std::move(s));
    }
    out.push_back(std::move(piece));
    chunk.clear();
  };

  for (const TimedSegment& s : segs) {
    if (s.end_s - s.start_s > max_s) {
      flush();
      std::ostringstream reason;
      reason << "dropped segment [" << s.start_s << ", " << s.end_s << "] s: single segment of "
             << (s.end_s - s.start_s) << " s exceeds the " << max_s << " s limit";
      report.add(reason.str());
      continue;
    }
    if (!chunk.empty() && s.end_s - chunk.front().start_s > max_s) flush();
    chunk.push_back(s);
  }
  flush();
  return out;
}

// ---------------------------------------------------------------------------
// Leakage-safe split assignment.

struct SplitSpec {
  std::vector<std::pair<std::string, double>> ratios = {{"train", 0.9}, {"dev", 0.05}, {"test", 0.05}};

  void validate() const {
    if (ratios.empty()) fail(ErrorKind::config, "splits: at least one split is required");
    double total = 0.0;
    for (const auto& [name, r] : ratios) {
      if (r < 0) fail(ErrorKind::config, "splits: negative ratio ", r, " for '", name, "'");
      total += r;
    }
    if (std::abs(total - 1.0) > 1e-9)
      fail(ErrorKind::config, "splits: ratios sum to ", total, ", expected 1");
  }
};

// The key two samples must share for consistent assignment: lowercased,
// whitespace-collapsed transcript.
inline std::string split_key(const std::string& transcript) {
  std::string k = detail::collapse_whitespace(transcript);
  for (char& c : k) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return k;
}

// Pure function of (transcript, ratios, seed): identical transcripts always
// land in the same split, and over many distinct transcripts the split sizes
// match the requested ratios.
inline std::string assign_split(const std::string& transcript, const SplitSpec& spec, uint64_t seed) {
  spec.validate();
  uint64_t h = mix64(fnv1a64(split_key(transcript)) ^ mix64(seed));
  double m = static_cast<double>(h >> 11) * 0x1.0p-53;  // uniform in [0, 1)
  double cum = 0.0;
  for (const auto& [name, r] : spec.ratios) {
    cum += r;
    if (m < cum) return name;
  }
  return spec.ratios.back().first;  // guard against rounding at the top edge
}

// ---------------------------------------------------------------------------
// Duration-consistency filter.

// Accepts a record iff its audio duration matches the span of its timestamps
// within tol_ratio (relative).
inline bool duration_filter(const RawUtterance& u, double tol_ratio = 0.05) {
  if (u.segment_times.empty())
    fail(ErrorKind::invalid, "duration filter: record has no segment timestamps");
  validate_segment_times(u.segment_times);
  double span = u.segment_times.back().end_s - u.segment_times.front().start_s;
  if (span <= 0.0) fail(ErrorKind::invalid, "duration filter: timestamp span is ", span, " s");
  double dur = static_cast<double>(u.audio.samples.size()) / u.audio.sample_rate;
  return std::abs(dur - span) / span <= tol_ratio;
}

// ---------------------------------------------------------------------------
// JSONL manifest.

// One JSON object per line: {audio_path, transcript, speaker_meta?,
// segments?: [{start, end, text}], audio_path_b?}. audio_path_b names the
// other conversation side for superimposition.
struct ManifestEntry {
  std::string audio_path;
  std::string transcript;
  std::optional<std::string> audio_path_b;
  std::optional<SpeakerMeta> speaker_meta;
  std::vector<TimedSegment> segments;
};

inline ManifestEntry parse_manifest_line(const std::string& line, size_t line_number) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, "manifest line ", line_number, ": ", e.what());
  }
  if (!j.is_object()) fail(ErrorKind::format, "manifest line ", line_number, ": not a JSON object");

  auto require_string = [&](const char* key) -> std::string {
    if (!j.contains(key) || !j[key].is_string())
      fail(ErrorKind::format, "manifest line ", line_number, ": missing or non-string field '", key, "'");
    return j[key].get<std::string>();
  };

  ManifestEntry e;
  e.audio_path = require_string("audio_path");
  e.transcript = require_string("transcript");
  try {
    if (j.contains("audio_path_b")) e.audio_path_b = j["audio_path_b"].get<std::string>();
    if (j.contains("speaker_meta")) {
      const auto& m = j["speaker_meta"];
      SpeakerMeta meta;
      meta.gender = m.value("gender", "");
      meta.age = m.value("age", "");
      meta.ethnic_group = m.value("ethnic_group", "");
      meta.first_language = m.value("first_language", "");
      e.speaker_meta = meta;
    }
    if (j.contains("segments")) {
      for (const auto& s : j["segments"]) {
        TimedSegment seg;
        seg.start_s = s.at("start").get<double>();
        seg.end_s = s.at("end").get<double>();
        seg.text = s.at("text").get<std::string>();
        e.segments.push_back(std::move(seg));
      }
    }
  } catch (const nlohmann::json::exception& ex) {
    fail(ErrorKind::format, "manifest line ", line_number, ": ", ex.what());
  }
  return e;
}

inline std::vector<ManifestEntry> read_manifest(std::istream& in) {
  std::vector<ManifestEntry> entries;
  std::string line;
  size_t line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (detail::trim(line).empty()) continue;
    entries.push_back(parse_manifest_line(line, line_number));
  }
  return entries;
}

inline std::vector<ManifestEntry> read_manifest_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail(ErrorKind::io, "cannot open manifest '", path, "'");
  return read_manifest(f);
}

}  // namespace fuselm
