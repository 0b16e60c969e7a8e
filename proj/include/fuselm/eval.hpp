#pragma once

// Evaluation harness: word error rate for transcription tasks, corpus BLEU
// for translation, and a pluggable judge client (offline deterministic stub
// or HTTP transport) for open-ended tasks. Produces a report with one row
// per task, rendered as aligned text and JSON.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <regex>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fuselm/common.hpp"
#include "fuselm/corpus.hpp"  // read_manifest helpers share the JSONL idiom
#include "fuselm/fusion.hpp"

namespace fuselm {

// ---------------------------------------------------------------------------
// Text normalization and WER.

struct WerNormalization {
  bool lowercase = true;
  std::string strip_chars = ".,!?;:\"'()";  // removed before tokenizing
};

inline std::vector<std::string> normalize_words(const std::string& text, const WerNormalization& rules = {}) {
  std::string cleaned;
  cleaned.reserve(text.size());
  for (char c : text) {
    if (rules.strip_chars.find(c) != std::string::npos) continue;
    cleaned.push_back(rules.lowercase ? static_cast<char>(std::tolower(static_cast<unsigned char>(c))) : c);
  }
  std::vector<std::string> words;
  std::istringstream in(cleaned);
  std::string w;
  while (in >> w) words.push_back(w);
  return words;
}

// Word-level edit distance (substitutions + insertions + deletions) divided
// by the reference length.
inline double wer(const std::string& reference, const std::string& hypothesis,
                  const WerNormalization& rules = {}) {
  std::vector<std::string> ref = normalize_words(reference, rules);
  std::vector<std::string> hyp = normalize_words(hypothesis, rules);
  if (ref.empty())
    fail(ErrorKind::invalid, "wer is undefined: reference '", reference, "' normalizes to zero words");
  size_t m = ref.size(), n = hyp.size();
  std::vector<size_t> prev(n + 1), cur(n + 1);
  for (size_t j = 0; j <= n; ++j) prev[j] = j;
  for (size_t i = 1; i <= m; ++i) {
    cur[0] = i;
    for (size_t j = 1; j <= n; ++j) {
      size_t sub = prev[j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return static_cast<double>(prev[n]) / static_cast<double>(m);
}

// ---------------------------------------------------------------------------
// Corpus BLEU.

constexpr double kBleuEpsilon = 1e-9;

// Corpus-level BLEU-4: uniform weights, brevity penalty, epsilon smoothing
// when an n-gram order has no matches (or no candidates). Tokens are
// lowercased whitespace words. An all-empty hypothesis corpus scores 0.
inline double corpus_bleu(const std::vector<std::string>& references,
                          const std::vector<std::string>& hypotheses) {
  if (references.size() != hypotheses.size() || references.empty())
    fail(ErrorKind::contract, "corpus_bleu: ", references.size(), " references vs ", hypotheses.size(),
         " hypotheses");
  WerNormalization lc;
  lc.strip_chars.clear();

  uint64_t hyp_len = 0, ref_len = 0;
  uint64_t clipped[4] = {0, 0, 0, 0}, total[4] = {0, 0, 0, 0};
  for (size_t k = 0; k < references.size(); ++k) {
    std::vector<std::string> ref = normalize_words(references[k], lc);
    std::vector<std::string> hyp = normalize_words(hypotheses[k], lc);
    hyp_len += hyp.size();
    ref_len += ref.size();
    for (size_t n = 1; n <= 4; ++n) {
      std::map<std::string, uint64_t> ref_counts;
      auto gram = [&](const std::vector<std::string>& words, size_t at) {
        std::string g = words[at];
        for (size_t t = 1; t < n; ++t) g += '\x1f' + words[at + t];
        return g;
      };
      for (size_t i = 0; i + n <= ref.size(); ++i) ref_counts[gram(ref, i)]++;
      std::map<std::string, uint64_t> hyp_counts;
      for (size_t i = 0; i + n <= hyp.size(); ++i) hyp_counts[gram(hyp, i)]++;
      for (const auto& [g, c] : hyp_counts) {
        auto it = ref_counts.find(g);
        clipped[n - 1] += std::min(c, it == ref_counts.end() ? 0 : it->second);
        total[n - 1] += c;
      }
    }
  }
  if (hyp_len == 0) return 0.0;

  double log_sum = 0.0;
  for (int n = 0; n < 4; ++n) {
    double p = (total[n] > 0 && clipped[n] > 0)
                   ? static_cast<double>(clipped[n]) / static_cast<double>(total[n])
                   : kBleuEpsilon;
    log_sum += 0.25 * std::log(p);
  }
  double bp = hyp_len >= ref_len
                  ? 1.0
                  : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
  return 100.0 * bp * std::exp(log_sum);
}

// ---------------------------------------------------------------------------
// Judge clients.

struct JudgeRequest {
  std::string question;
  std::string reference;
  std::string response;
  std::string rubric;
};

// Returns raw reply text containing a numeric score somewhere.
class JudgeClient {
 public:
  virtual ~JudgeClient() = default;
  virtual std::string score_text(const JudgeRequest& request) = 0;
};

// Offline deterministic judge: token-level F1 between response and reference,
// scaled to [0, 100]. Identical texts score exactly 100.
class StubJudgeClient : public JudgeClient {
 public:
  std::string score_text(const JudgeRequest& request) override {
    std::vector<std::string> ref = normalize_words(request.reference);
    std::vector<std::string> resp = normalize_words(request.response);
    double score = 0.0;
    if (!ref.empty() || !resp.empty()) {
      std::map<std::string, int64_t> counts;
      for (const auto& w : ref) counts[w]++;
      int64_t overlap = 0;
      for (const auto& w : resp) {
        auto it = counts.find(w);
        if (it != counts.end() && it->second > 0) {
          --it->second;
          ++overlap;
        }
      }
      score = 200.0 * static_cast<double>(overlap) /
              static_cast<double>(ref.size() + resp.size());
    }
    std::ostringstream out;
    out << score;
    return out.str();
  }
};

// Test/diagnostic client replaying canned replies.
class FixedReplyClient : public JudgeClient {
 public:
  explicit FixedReplyClient(std::vector<std::string> replies) : replies_(std::move(replies)) {}

  std::string score_text(const JudgeRequest&) override {
    ++calls_;
    if (replies_.empty()) fail(ErrorKind::io, "judge transport: no reply configured");
    std::string r = replies_.front();
    if (replies_.size() > 1) replies_.erase(replies_.begin());
    return r;
  }

  int calls() const { return calls_; }

 private:
  std::vector<std::string> replies_;
  int calls_ = 0;
};

// Parses the first number out of a judge reply and clamps it to [0, 100].
// Malformed replies are retried; persistent failure is a judge error.
inline double judge_score(const JudgeRequest& request, JudgeClient& client, int max_attempts = 3) {
  if (max_attempts < 1) fail(ErrorKind::contract, "judge: max_attempts must be >= 1");
  static const std::regex number_re(R"([-+]?\d+(\.\d+)?)");
  std::string last;
  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    last = client.score_text(request);
    std::smatch m;
    if (std::regex_search(last, m, number_re)) {
      double v = std::stod(m.str());
      return std::min(100.0, std::max(0.0, v));
    }
  }
  fail(ErrorKind::judge, "judge reply carries no numeric score after ", max_attempts, " attempts; last reply: '",
       last, "'");
}

// ---------------------------------------------------------------------------
// Task specs, report, and the evaluation driver.

enum class Metric { WER, BLEU, JUDGE };

inline const char* metric_name(Metric m) {
  switch (m) {
    case Metric::WER: return "WER";
    case Metric::BLEU: return "BLEU";
    case Metric::JUDGE: return "JUDGE";
  }
  fail(ErrorKind::invalid, "metric out of range");
}

// Which metric each task family reports.
inline Metric metric_for_task(TaskTag tag) {
  switch (tag) {
    case TaskTag::ASR: return Metric::WER;
    case TaskTag::ST: return Metric::BLEU;
    default: return Metric::JUDGE;
  }
}

struct EvalSample {
  Waveform audio;
  std::string instruction;
  std::string reference;
};

struct EvalTask {
  std::string name;
  TaskTag tag = TaskTag::ASR;
  Metric metric = Metric::WER;
  std::string rubric;
  WerNormalization norm;
  std::vector<EvalSample> samples;

  void validate() const {
    if (metric != metric_for_task(tag))
      fail(ErrorKind::config, "task '", name, "': metric ", metric_name(metric), " does not match the ",
           task_tag_name(tag), " family (expected ", metric_name(metric_for_task(tag)), ")");
    if (samples.empty()) fail(ErrorKind::config, "task '", name, "': no samples");
  }
};

struct EvalRow {
  std::string dataset;
  std::string metric;
  double value = 0.0;
  size_t sample_count = 0;
  size_t failures = 0;
  std::string direction;  // UTF-8 arrow: down = lower-is-better, up = higher-is-better
};

struct EvalReport {
  std::vector<EvalRow> rows;

  std::string to_text() const {
    size_t name_w = 7;
    for (const auto& r : rows) name_w = std::max(name_w, r.dataset.size());
    std::ostringstream out;
    out << std::left;
    out.width(static_cast<std::streamsize>(name_w + 2));
    out << "dataset";
    out << "metric      value      n    failures\n";
    for (const auto& r : rows) {
      out.width(static_cast<std::streamsize>(name_w + 2));
      out << r.dataset;
      std::ostringstream metric;
      metric << r.metric << " " << r.direction;
      out.width(12);
      out << metric.str();
      std::ostringstream value;
      value.setf(std::ios::fixed);
      value.precision(4);
      value << r.value;
      out.width(11);
      out << value.str();
      out.width(5);
      out << r.sample_count;
      out << r.failures << "\n";
    }
    return out.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json rows_json = nlohmann::json::array();
    for (const auto& r : rows)
      rows_json.push_back({{"dataset", r.dataset},
                           {"metric", r.metric},
                           {"value", r.value},
                           {"sample_count", r.sample_count},
                           {"failures", r.failures},
                           {"direction", r.direction}});
    return {{"rows", rows_json}};
  }
};

using AnswerFn = std::function<std::string(const EvalSample&)>;

// Runs each task's samples through `answer`, scores with the task's metric
// (mean WER, corpus BLEU, mean judge score), and emits one row per task in
// input order. A sample whose answer throws is counted as a row-level
// failure instead of aborting the run.
inline EvalReport run_eval(const AnswerFn& answer, const std::vector<EvalTask>& tasks, JudgeClient& judge) {
  EvalReport report;
  for (const auto& task : tasks) {
    task.validate();
    EvalRow row;
    row.dataset = task.name;
    row.metric = metric_name(task.metric);
    row.direction = task.metric == Metric::WER ? "\u2193" : "\u2191";
    row.sample_count = task.samples.size();

    std::vector<std::string> refs, hyps;
    std::vector<double> per_sample;
    for (const auto& sample : task.samples) {
      std::string response;
      try {
        response = answer(sample);
        switch (task.metric) {
          case Metric::WER:
            per_sample.push_back(wer(sample.reference, response, task.norm));
            break;
          case Metric::BLEU:
            refs.push_back(sample.reference);
            hyps.push_back(response);
            break;
          case Metric::JUDGE: {
            JudgeRequest req{sample.instruction, sample.reference, response, task.rubric};
            per_sample.push_back(judge_score(req, judge));
            break;
          }
        }
      } catch (const Error&) {
        ++row.failures;
      }
    }

    if (task.metric == Metric::BLEU) {
      row.value = refs.empty() ? 0.0 : corpus_bleu(refs, hyps);
    } else {
      double sum = 0.0;
      for (double v : per_sample) sum += v;
      row.value = per_sample.empty() ? 0.0 : sum / static_cast<double>(per_sample.size());
    }
    report.rows.push_back(std::move(row));
  }
  return report;
}

inline EvalReport run_eval(FusionModel& model, const std::vector<EvalTask>& tasks, JudgeClient& judge) {
  return run_eval([&](const EvalSample& s) { return model.answer(s.audio, s.instruction); }, tasks, judge);
}

// Task manifest: JSON lines {audio_path, instruction, reference}; audio paths
// resolve relative to the manifest's directory.
inline std::vector<EvalSample> load_eval_samples(const std::string& manifest_path) {
  std::ifstream f(manifest_path);
  if (!f) fail(ErrorKind::io, "cannot open eval manifest '", manifest_path, "'");
  auto base = std::filesystem::path(manifest_path).parent_path();
  std::vector<EvalSample> samples;
  std::string line;
  size_t line_number = 0;
  while (std::getline(f, line)) {
    ++line_number;
    if (detail::trim(line).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      EvalSample s;
      std::filesystem::path audio = j.at("audio_path").get<std::string>();
      if (audio.is_relative()) audio = base / audio;
      s.audio = read_wav(audio.string());
      s.instruction = j.at("instruction").get<std::string>();
      s.reference = j.at("reference").get<std::string>();
      samples.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::format, "eval manifest line ", line_number, ": ", e.what());
    }
  }
  return samples;
}

}  // namespace fuselm
