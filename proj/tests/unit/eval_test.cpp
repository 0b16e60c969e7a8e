#include "fuselm/eval.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "fuselm/judge_http.hpp"

namespace fuselm {
namespace {

// Independent edit-distance oracle: memoized top-down recursion, structured
// nothing like the iterative two-row table in the implementation.
size_t edit_oracle(const std::vector<std::string>& a, const std::vector<std::string>& b, size_t i, size_t j,
                   std::map<std::pair<size_t, size_t>, size_t>& memo) {
  if (i == a.size()) return b.size() - j;
  if (j == b.size()) return a.size() - i;
  auto key = std::make_pair(i, j);
  auto it = memo.find(key);
  if (it != memo.end()) return it->second;
  size_t best;
  if (a[i] == b[j]) {
    best = edit_oracle(a, b, i + 1, j + 1, memo);
  } else {
    size_t sub = edit_oracle(a, b, i + 1, j + 1, memo);
    size_t del = edit_oracle(a, b, i + 1, j, memo);
    size_t ins = edit_oracle(a, b, i, j + 1, memo);
    best = 1 + std::min({sub, del, ins});
  }
  memo[key] = best;
  return best;
}

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

TEST(Wer, GoldenCases) {
  EXPECT_EQ(wer("a b c", "a b c"), 0.0);
  EXPECT_EQ(wer("a b c", "a x c"), 1.0 / 3.0);
  EXPECT_EQ(wer("a b", ""), 1.0);
  EXPECT_GT(wer("a", "a a a"), 1.0);  // insertions can push WER past 1
}

TEST(Wer, NormalizationFoldsCaseAndPunctuation) {
  EXPECT_EQ(wer("Hello, WORLD!", "hello world"), 0.0);
  EXPECT_EQ(wer("so  many   spaces", "so many spaces"), 0.0);
  WerNormalization keep_case;
  keep_case.lowercase = false;
  EXPECT_GT(wer("Hello", "hello", keep_case), 0.0);
}

TEST(Wer, ZeroIffNormalizedTokensEqual) {
  EXPECT_EQ(wer("The cat.", "the cat"), 0.0);
  EXPECT_GT(wer("the cat", "the cats"), 0.0);
}

TEST(Wer, EmptyNormalizedReferenceIsUndefined) {
  for (const std::string& ref : {"", "  ", ".,!?"}) {
    try {
      wer(ref, "anything");
      FAIL() << "expected undefined-metric error for '" << ref << "'";
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::invalid);
    }
  }
}

TEST(Wer, MatchesRecursiveOracleOnAThousandRandomPairs) {
  Rng rng(808);
  const std::vector<std::string> vocab = {"a", "b", "c"};
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<std::string> ref, hyp;
    auto ref_len = static_cast<size_t>(rng.uniform_int(1, 9));
    auto hyp_len = static_cast<size_t>(rng.uniform_int(0, 9));
    for (size_t i = 0; i < ref_len; ++i) ref.push_back(vocab[rng.uniform_int(0, 3)]);
    for (size_t i = 0; i < hyp_len; ++i) hyp.push_back(vocab[rng.uniform_int(0, 3)]);
    std::map<std::pair<size_t, size_t>, size_t> memo;
    size_t dist = edit_oracle(ref, hyp, 0, 0, memo);
    double expected = static_cast<double>(dist) / static_cast<double>(ref.size());
    EXPECT_EQ(wer(join(ref), join(hyp)), expected) << "ref=" << join(ref) << " hyp=" << join(hyp);
  }
}

TEST(Bleu, SelfScoresExactlyOneHundred) {
  std::vector<std::string> corpus = {"the quick brown fox jumps", "over the lazy dog today",
                                     "four token sentence here"};
  EXPECT_EQ(corpus_bleu(corpus, corpus), 100.0);
}

TEST(Bleu, ClippedRepetitionMatchesHandComputation) {
  // hyp "the the the the" vs ref "the cat sat down": p1 = 1/4 (clipped to the
  // single ref "the"), higher orders have zero matches and smooth to epsilon;
  // equal lengths make the brevity penalty 1.
  double got = corpus_bleu({"the cat sat down"}, {"the the the the"});
  double expected = 100.0 * std::exp(0.25 * (std::log(0.25) + 3.0 * std::log(kBleuEpsilon)));
  EXPECT_NEAR(got, expected, expected * 1e-12);  // summation order differs from the oracle's
}

TEST(Bleu, ShortAndEmptyCorporaNeverDivideByZero) {
  EXPECT_GT(corpus_bleu({"hi"}, {"hi"}), 0.0);
  EXPECT_EQ(corpus_bleu({"hi there"}, {""}), 0.0);  // empty hypothesis corpus
  double shorter = corpus_bleu({"a b c d e f"}, {"a b c d"});
  double full = corpus_bleu({"a b c d e f"}, {"a b c d e f"});
  EXPECT_LT(shorter, full);  // brevity penalty bites
}

TEST(Bleu, LengthMismatchIsAContractError) {
  try {
    corpus_bleu({"a", "b"}, {"a"});
    FAIL() << "expected contract error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::contract);
  }
}

TEST(Judge, StubIsTokenF1TimesOneHundred) {
  StubJudgeClient stub;
  JudgeRequest same{"q", "the answer is yes", "the answer is yes", ""};
  EXPECT_EQ(judge_score(same, stub), 100.0);
  JudgeRequest half{"q", "a b c d", "a b x y", ""};
  EXPECT_DOUBLE_EQ(judge_score(half, stub), 50.0);  // overlap 2, F1 = 2*2/8
  JudgeRequest none{"q", "a b", "x y", ""};
  EXPECT_EQ(judge_score(none, stub), 0.0);
}

TEST(Judge, ParsesFirstNumberAndClamps) {
  FixedReplyClient a({"87"});
  EXPECT_EQ(judge_score({"q", "r", "x", ""}, a), 87.0);
  FixedReplyClient b({"Score: 93.5 out of 100"});
  EXPECT_EQ(judge_score({"q", "r", "x", ""}, b), 93.5);
  FixedReplyClient c({"150"});
  EXPECT_EQ(judge_score({"q", "r", "x", ""}, c), 100.0);
  FixedReplyClient d({"-3"});
  EXPECT_EQ(judge_score({"q", "r", "x", ""}, d), 0.0);
}

TEST(Judge, RetriesThenFailsOnWordyReplies) {
  FixedReplyClient wordy({"score: eighty"});
  try {
    judge_score({"q", "r", "x", ""}, wordy, 3);
    FAIL() << "expected judge error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::judge);
    EXPECT_NE(std::string(e.what()).find("eighty"), std::string::npos);
  }
  EXPECT_EQ(wordy.calls(), 3);

  // A malformed reply followed by a good one succeeds on the retry.
  FixedReplyClient recovers({"hmm", "42"});
  EXPECT_EQ(judge_score({"q", "r", "x", ""}, recovers, 3), 42.0);
  EXPECT_EQ(recovers.calls(), 2);
}

TEST(Judge, HttpTransportRoundTripsTheJsonBody) {
  httplib::Server server;
  nlohmann::json seen;
  server.Post("/score", [&](const httplib::Request& req, httplib::Response& res) {
    seen = nlohmann::json::parse(req.body);
    res.set_content("score: 73.5", "text/plain");
  });
  int port = server.bind_to_any_port("127.0.0.1");
  if (port <= 0) GTEST_SKIP() << "cannot bind a loopback port in this environment";
  std::thread serve([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  HttpJudgeClient client("127.0.0.1", port);
  double score = judge_score({"why", "because", "since", "be brief"}, client);
  server.stop();
  serve.join();

  EXPECT_EQ(score, 73.5);
  EXPECT_EQ(seen.at("question"), "why");
  EXPECT_EQ(seen.at("reference"), "because");
  EXPECT_EQ(seen.at("response"), "since");
  EXPECT_EQ(seen.at("rubric"), "be brief");
}

// Untrained byte-level models answer with arbitrary bytes. The transport must
// still deliver a well-formed JSON body (invalid sequences become U+FFFD)
// instead of aborting the whole evaluation.
TEST(Judge, InvalidUtf8InTheAnswerStillReachesTheJudge) {
  httplib::Server server;
  nlohmann::json seen;
  server.Post("/score", [&](const httplib::Request& req, httplib::Response& res) {
    seen = nlohmann::json::parse(req.body);
    res.set_content("score: 12", "text/plain");
  });
  int port = server.bind_to_any_port("127.0.0.1");
  if (port <= 0) GTEST_SKIP() << "cannot bind a loopback port in this environment";
  std::thread serve([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  HttpJudgeClient client("127.0.0.1", port);
  std::string garbage = std::string("ok\x94\xff\x01 then") + '\0' + "tail";
  double score = judge_score({"q", "r", garbage, ""}, client);
  server.stop();
  serve.join();

  EXPECT_EQ(score, 12.0);
  std::string delivered = seen.at("response").get<std::string>();
  EXPECT_NE(delivered.find("ok"), std::string::npos);
  EXPECT_NE(delivered.find("then"), std::string::npos);
  EXPECT_NE(delivered.find("tail"), std::string::npos);
  EXPECT_NE(delivered.find("\xEF\xBF\xBD"), std::string::npos);  // U+FFFD marker
}

TEST(Judge, UnreachableEndpointIsAServiceError) {
  HttpJudgeClient client("127.0.0.1", 9);  // discard port: nothing listens
  try {
    judge_score({"q", "r", "x", ""}, client);
    FAIL() << "expected service error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::service);
  }
}

// --- run_eval ----------------------------------------------------------------

EvalTask make_task(const std::string& name, TaskTag tag, std::vector<std::pair<std::string, std::string>> iref) {
  EvalTask t;
  t.name = name;
  t.tag = tag;
  t.metric = metric_for_task(tag);
  for (auto& [instruction, reference] : iref) {
    EvalSample s;
    s.instruction = instruction;
    s.reference = reference;
    t.samples.push_back(std::move(s));
  }
  return t;
}

TEST(RunEval, PerfectEchoScoresPerfectlyOnEveryMetric) {
  StubJudgeClient judge;
  std::vector<EvalTask> tasks = {
      make_task("asr-fixture", TaskTag::ASR, {{"t", "hello world out there"}, {"t", "more words here now"}}),
      make_task("st-fixture", TaskTag::ST, {{"t", "four tokens right here"}, {"t", "another four token line"}}),
      make_task("sqa-fixture", TaskTag::SQA, {{"q", "the answer"}}),
  };
  AnswerFn echo = [](const EvalSample& s) { return s.reference; };
  EvalReport report = run_eval(echo, tasks, judge);
  ASSERT_EQ(report.rows.size(), 3u);
  EXPECT_EQ(report.rows[0].dataset, "asr-fixture");
  EXPECT_EQ(report.rows[0].metric, "WER");
  EXPECT_EQ(report.rows[0].value, 0.0);
  EXPECT_EQ(report.rows[0].direction, "↓");
  EXPECT_EQ(report.rows[1].metric, "BLEU");
  EXPECT_EQ(report.rows[1].value, 100.0);
  EXPECT_EQ(report.rows[1].direction, "↑");
  EXPECT_EQ(report.rows[2].metric, "JUDGE");
  EXPECT_EQ(report.rows[2].value, 100.0);
}

TEST(RunEval, RowsKeepInputOrderAndCounts) {
  StubJudgeClient judge;
  std::vector<EvalTask> tasks = {
      make_task("b-second", TaskTag::SI, {{"q", "r"}}),
      make_task("a-first", TaskTag::ASR, {{"t", "x y"}, {"t", "z w"}}),
  };
  AnswerFn echo = [](const EvalSample& s) { return s.reference; };
  EvalReport report = run_eval(echo, tasks, judge);
  ASSERT_EQ(report.rows.size(), 2u);
  EXPECT_EQ(report.rows[0].dataset, "b-second");
  EXPECT_EQ(report.rows[1].dataset, "a-first");
  EXPECT_EQ(report.rows[1].sample_count, 2u);
}

TEST(RunEval, ModelErrorsBecomeRowLevelFailures) {
  StubJudgeClient judge;
  std::vector<EvalTask> tasks = {
      make_task("asr", TaskTag::ASR, {{"ok", "right answer"}, {"boom", "other"}, {"ok", "right answer"}})};
  AnswerFn flaky = [](const EvalSample& s) -> std::string {
    if (s.instruction == "boom") fail(ErrorKind::capacity, "audio too long");
    return s.reference;
  };
  EvalReport report = run_eval(flaky, tasks, judge);
  ASSERT_EQ(report.rows.size(), 1u);
  EXPECT_EQ(report.rows[0].failures, 1u);
  EXPECT_EQ(report.rows[0].sample_count, 3u);
  EXPECT_EQ(report.rows[0].value, 0.0);  // the two surviving samples echoed perfectly
}

TEST(RunEval, EmptyTaskIsAConfigErrorNamingIt) {
  StubJudgeClient judge;
  std::vector<EvalTask> tasks = {make_task("hollow-task", TaskTag::ASR, {})};
  AnswerFn echo = [](const EvalSample& s) { return s.reference; };
  try {
    run_eval(echo, tasks, judge);
    FAIL() << "expected config error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::config);
    EXPECT_NE(std::string(e.what()).find("hollow-task"), std::string::npos);
  }
}

TEST(RunEval, MetricMustMatchTaskFamily) {
  StubJudgeClient judge;
  EvalTask bad = make_task("asr-as-bleu", TaskTag::ASR, {{"t", "r"}});
  bad.metric = Metric::BLEU;
  AnswerFn echo = [](const EvalSample& s) { return s.reference; };
  try {
    run_eval(echo, {bad}, judge);
    FAIL() << "expected config error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::config);
  }
}

TEST(Report, RendersTextAndJson) {
  EvalReport report;
  report.rows.push_back({"asr-a", "WER", 0.25, 4, 0, "↓"});
  report.rows.push_back({"sqa-b", "JUDGE", 88.5, 2, 1, "↑"});
  std::string text = report.to_text();
  EXPECT_NE(text.find("asr-a"), std::string::npos);
  EXPECT_NE(text.find("WER ↓"), std::string::npos);
  EXPECT_NE(text.find("0.2500"), std::string::npos);
  nlohmann::json j = report.to_json();
  ASSERT_EQ(j.at("rows").size(), 2u);
  EXPECT_EQ(j["rows"][1]["failures"], 1);
  EXPECT_EQ(j["rows"][1]["dataset"], "sqa-b");
}

}  // namespace
}  // namespace fuselm
