// fuselm command-line entry point: four workflows over the header-only
// library.
//
//   prep   JSONL manifest -> cleaned, segmented, split, sharded dataset
//   train  shard dataset  -> checkpoint + loss log
//   eval   task list      -> metric report (text + JSON)
//   infer  wav + text     -> model answer on stdout
//
// Settings come from an optional TOML-style key/value config file plus
// command-line flags; flags win on conflict. Path-valued config keys resolve
// relative to the config file's directory. Exit codes: 0 success, 2 for
// usage and input validation problems, 1 for internal failures.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fuselm/audio.hpp"
#include "fuselm/corpus.hpp"
#include "fuselm/eval.hpp"
#include "fuselm/fusion.hpp"
#include "fuselm/judge_http.hpp"
#include "fuselm/shard.hpp"
#include "fuselm/trainer.hpp"

namespace fs = std::filesystem;

namespace {

using namespace fuselm;

constexpr const char* kDefaultInstruction = "Transcribe the audio.";

// Desk-scale model defaults: 2 s of audio at a 10 ms hop, small enough to
// train on one CPU core. Raise model.encoder_frames for longer clips.
FusionConfig desk_model() {
  FusionConfig c;
  c.mel.n_mels = 20;
  c.mel.n_fft = 256;
  c.mel.hop = 160;
  c.mel.target_frames = 200;
  c.mel.whisper_norm = true;
  c.encoder.n_mels = 20;
  c.encoder.d_model = 32;
  c.encoder.n_layers = 1;
  c.encoder.n_heads = 2;
  c.encoder.output_frames = 100;
  c.adaptor.d = 32;
  c.adaptor.s = 5;
  c.adaptor.gamma = 48;
  c.decoder.gamma = 48;
  c.decoder.n_layers = 1;
  c.decoder.n_heads = 2;
  c.decoder.max_seq = 160;
  c.decoder.lora_rank = 4;
  c.decoder.lora_alpha = 16.0;
  c.augment.mask_width = 20;
  c.augment.mask_probability = 0.05;
  c.augment.mask_value = 0.0;
  c.max_answer_tokens = 64;
  return c;
}

struct Settings {
  uint64_t seed = 0;
  std::string out_dir = "out";

  FusionConfig model = desk_model();
  TrainConfig train;

  // train
  std::string train_data;
  std::string resume;
  int64_t save_every = 0;  // 0 = checkpoint only at the end

  // prep
  std::string prep_manifest;
  uint64_t shard_target = kMinShardTargetBytes;
  bool allow_small_shards = false;
  double max_seconds = kMaxAudioSeconds;
  double duration_tolerance = 0.05;
  std::string instruction = kDefaultInstruction;
  double split_train = 0.9;
  double split_dev = 0.05;
  double split_test = 0.05;
  CleaningConfig cleaning;

  // eval
  std::string eval_tasks;
  std::string eval_checkpoint;
  bool stub_judge = false;
  std::string judge_host;
  int judge_port = 0;
  std::string judge_path = "/score";
  std::string report_path;  // default: <out_dir>/report.json

  // infer
  std::string infer_checkpoint;
  std::string infer_audio;
  std::string infer_instruction;
};

// ---------------------------------------------------------------------------
// TOML-style config file: [section] headers, key = value lines, # comments.

struct ConfigEntry {
  std::string key;
  std::string value;
  size_t line = 0;
};

std::string strip_comment(const std::string& line) {
  bool in_quotes = false;
  for (size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') in_quotes = !in_quotes;
    if (line[i] == '#' && !in_quotes) return line.substr(0, i);
  }
  return line;
}

std::vector<ConfigEntry> parse_kv_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail(ErrorKind::io, "cannot open config file '", path, "'");
  std::vector<ConfigEntry> out;
  std::string section;
  std::string line;
  size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    std::string body = detail::trim(strip_comment(line));
    if (body.empty()) continue;
    if (body.front() == '[') {
      if (body.back() != ']' || body.size() < 3)
        fail(ErrorKind::format, "config file ", path, " line ", line_no, ": malformed section header '", body,
             "'");
      section = detail::trim(body.substr(1, body.size() - 2)) + ".";
      continue;
    }
    size_t eq = body.find('=');
    if (eq == std::string::npos)
      fail(ErrorKind::format, "config file ", path, " line ", line_no, ": expected key = value, got '", body,
           "'");
    std::string key = detail::trim(body.substr(0, eq));
    std::string value = detail::trim(body.substr(eq + 1));
    if (key.empty())
      fail(ErrorKind::format, "config file ", path, " line ", line_no, ": empty key");
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"')
      value = value.substr(1, value.size() - 2);
    out.push_back({section + key, value, line_no});
  }
  return out;
}

int64_t config_int(const std::string& key, const std::string& v) {
  int64_t out{};
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    fail(ErrorKind::config, "config key '", key, "': cannot parse '", v, "' as an integer");
  return out;
}

uint64_t config_uint(const std::string& key, const std::string& v) {
  uint64_t out{};
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    fail(ErrorKind::config, "config key '", key, "': cannot parse '", v, "' as a non-negative integer");
  return out;
}

double config_double(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    fail(ErrorKind::config, "config key '", key, "': cannot parse '", v, "' as a number");
  }
}

bool config_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  fail(ErrorKind::config, "config key '", key, "': cannot parse '", v, "' as true/false");
}

std::vector<std::string> config_list(const std::string& v) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(v);
  while (std::getline(in, item, ',')) {
    item = detail::trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

struct KeyBinding {
  std::function<void(const std::string&)> set;
  CLI::Option* flag = nullptr;  // when given on the command line, the flag wins
  bool is_path = false;
};

using KeyMap = std::map<std::string, KeyBinding>;

fs::path resolve_near(const fs::path& base, const std::string& p) {
  fs::path q(p);
  return q.is_absolute() ? q : base / q;
}

void apply_config_file(const std::string& path, const KeyMap& keys) {
  fs::path base = fs::absolute(fs::path(path)).parent_path();
  for (const ConfigEntry& e : parse_kv_file(path)) {
    auto it = keys.find(e.key);
    if (it == keys.end())
      fail(ErrorKind::config, "config file ", path, " line ", e.line, ": unknown key '", e.key, "'");
    if (it->second.flag != nullptr && it->second.flag->count() > 0) continue;  // flags win
    std::string value = e.value;
    if (it->second.is_path && !value.empty()) value = resolve_near(base, value).string();
    it->second.set(value);
  }
}

// ---------------------------------------------------------------------------
// Shared helpers for the subcommands.

FusionModel load_model(const std::string& checkpoint, const FusionConfig& fallback, uint64_t seed,
                       TrainerState* state_out = nullptr) {
  if (checkpoint.empty()) {
    FusionConfig cfg = fallback;
    cfg.validate();
    return FusionModel::init(cfg, seed);
  }
  CheckpointHeader header = read_checkpoint_header(checkpoint);
  FusionModel model = FusionModel::init(header.fusion_config, seed);
  TrainerState state;
  load_checkpoint(checkpoint, model, state);
  if (state_out != nullptr) *state_out = state;
  return model;
}

// ---------------------------------------------------------------------------
// prep: manifest -> clean -> (superimpose) -> duration filter -> segment ->
// split -> shards + drop report.

int run_prep(const Settings& s) {
  if (s.prep_manifest.empty())
    fail(ErrorKind::config, "prep: an input manifest is required (--manifest or prep.manifest)");
  SplitSpec splits;
  splits.ratios = {{"train", s.split_train}, {"dev", s.split_dev}, {"test", s.split_test}};
  splits.validate();

  std::vector<ManifestEntry> entries = read_manifest_file(s.prep_manifest);
  fs::path audio_base = fs::absolute(fs::path(s.prep_manifest)).parent_path();

  DropReport report;
  std::map<std::string, std::vector<ShardRecord>> per_split;
  size_t chunks_total = 0;
  for (const ManifestEntry& entry : entries) {
    Waveform audio = read_wav(resolve_near(audio_base, entry.audio_path).string());
    if (entry.audio_path_b)
      audio = superimpose(audio, read_wav(resolve_near(audio_base, *entry.audio_path_b).string()));

    RawUtterance u;
    u.audio = std::move(audio);
    u.transcript = clean_transcript(entry.transcript, s.cleaning);
    u.speaker_meta = entry.speaker_meta;
    for (const TimedSegment& seg : entry.segments)
      u.segment_times.push_back({seg.start_s, seg.end_s, clean_transcript(seg.text, s.cleaning)});

    if (!u.segment_times.empty() && !duration_filter(u, s.duration_tolerance)) {
      double span = u.segment_times.back().end_s - u.segment_times.front().start_s;
      double dur = static_cast<double>(u.audio.samples.size()) / u.audio.sample_rate;
      std::ostringstream reason;
      reason << "dropped utterance " << entry.audio_path << ": audio duration " << dur
             << " s does not match the timestamp span " << span << " s within "
             << (s.duration_tolerance * 100) << "%";
      report.add(reason.str());
      continue;
    }

    for (const RawUtterance& piece : segment(u, s.max_seconds, report)) {
      if (piece.transcript.empty()) {
        report.add("dropped chunk of " + entry.audio_path + ": transcript empty after cleaning");
        continue;
      }
      nlohmann::json meta = {{"task", "ASR"},
                             {"transcript", piece.transcript},
                             {"instruction", s.instruction}};
      if (piece.speaker_meta) {
        meta["speaker"] = {{"gender", piece.speaker_meta->gender},
                           {"age", piece.speaker_meta->age},
                           {"ethnic_group", piece.speaker_meta->ethnic_group},
                           {"first_language", piece.speaker_meta->first_language}};
      }
      ShardRecord record;
      std::string meta_text = meta.dump();
      record.meta.assign(meta_text.begin(), meta_text.end());
      record.audio = waveform_to_pcm16(piece.audio);
      per_split[assign_split(piece.transcript, splits, s.seed)].push_back(std::move(record));
      ++chunks_total;
    }
  }

  fs::create_directories(s.out_dir);
  for (const auto& [split, records] : per_split) {
    ShardManifest manifest = write_shards(records, s.shard_target, (fs::path(s.out_dir) / split).string(),
                                          s.allow_small_shards);
    std::cout << split << ": " << records.size() << " records in " << manifest.shards.size() << " shard"
              << (manifest.shards.size() == 1 ? "" : "s") << "\n";
  }
  std::string report_path = (fs::path(s.out_dir) / "drop_report.txt").string();
  report.write(report_path);
  std::cout << entries.size() << " utterances -> " << chunks_total << " chunks, " << report.size()
            << " drop" << (report.size() == 1 ? "" : "s") << " (see " << report_path << ")\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train: shards -> checkpoint + loss log.

DatasetCollection load_training_data(const std::string& dir) {
  ShardManifest manifest = load_manifest(dir);
  std::map<TaskTag, std::vector<TrainingSample>> grouped;
  ShardStream stream(manifest, 1);
  ShardRecord record;
  size_t index = 0;
  while (stream.next(record)) {
    try {
      nlohmann::json meta = nlohmann::json::parse(record.meta.begin(), record.meta.end());
      TrainingSample sample;
      sample.audio = pcm16_to_waveform(record.audio);
      sample.target = meta.at("transcript").get<std::string>();
      sample.instruction = meta.value("instruction", std::string(kDefaultInstruction));
      grouped[parse_task_tag(meta.value("task", "ASR"))].push_back(std::move(sample));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::format, "shard record ", index, ": ", e.what());
    }
    ++index;
  }
  DatasetCollection data;
  for (auto& [tag, samples] : grouped) data.datasets.push_back({tag, std::move(samples)});
  return data;
}

int run_train(const Settings& s) {
  if (s.train_data.empty())
    fail(ErrorKind::config, "train: a shard directory is required (--data or train.data)");
  DatasetCollection data = load_training_data(s.train_data);

  TrainConfig cfg = s.train;
  cfg.seed = s.seed;
  cfg.validate();

  TrainerState state;
  FusionModel model = load_model(s.resume, s.model, s.seed, &state);

  fs::create_directories(s.out_dir);
  std::string log_path = (fs::path(s.out_dir) / "train_log.jsonl").string();
  std::string ckpt_path = (fs::path(s.out_dir) / "checkpoint.bin").string();
  std::ofstream log_file(log_path, state.step == 0 ? std::ios::trunc : std::ios::app);
  if (!log_file) fail(ErrorKind::io, "cannot open '", log_path, "' for writing");

  double last_loss = 0.0;
  bool saved = false;
  while (state.step < cfg.total_steps) {
    int64_t remaining = cfg.total_steps - state.step;
    int64_t run = s.save_every > 0 ? std::min(s.save_every, remaining) : remaining;
    std::vector<TrainLogEntry> logs = train_steps(model, data, cfg, state, run);
    for (const TrainLogEntry& e : logs) {
      nlohmann::json row = {{"step", e.step}, {"lr", e.lr}, {"loss", e.loss}};
      log_file << row.dump() << "\n";
      last_loss = e.loss;
    }
    log_file.flush();
    save_checkpoint(ckpt_path, model, state, cfg);
    saved = true;
    std::cout << "step " << state.step << "/" << cfg.total_steps << " loss " << last_loss << "\n";
  }
  if (!saved) save_checkpoint(ckpt_path, model, state, cfg);
  std::cout << "checkpoint: " << ckpt_path << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval: task list -> report.

std::vector<EvalTask> load_tasks(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail(ErrorKind::io, "cannot open task list '", path, "'");
  fs::path base = fs::absolute(fs::path(path)).parent_path();
  nlohmann::json doc;
  std::vector<EvalTask> tasks;
  try {
    f >> doc;
    if (!doc.is_array()) fail(ErrorKind::format, "task list ", path, ": expected a JSON array of tasks");
    for (const nlohmann::json& item : doc) {
      EvalTask t;
      t.name = item.at("name").get<std::string>();
      t.tag = parse_task_tag(item.at("task").get<std::string>());
      t.metric = metric_for_task(t.tag);
      t.rubric = item.value("rubric", "");
      std::string manifest = item.at("manifest").get<std::string>();
      t.samples = load_eval_samples(resolve_near(base, manifest).string());
      tasks.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, "task list ", path, ": ", e.what());
  }
  return tasks;
}

int run_eval_cmd(const Settings& s) {
  if (s.eval_tasks.empty())
    fail(ErrorKind::config, "eval: a task list is required (--tasks or eval.tasks)");
  std::vector<EvalTask> tasks = load_tasks(s.eval_tasks);
  FusionModel model = load_model(s.eval_checkpoint, s.model, s.seed);

  StubJudgeClient stub;
  std::optional<HttpJudgeClient> http;
  JudgeClient* judge = &stub;
  if (!s.stub_judge && !s.judge_host.empty()) {
    http.emplace(s.judge_host, s.judge_port, s.judge_path);
    judge = &*http;
  }

  EvalReport report = run_eval(model, tasks, *judge);
  std::cout << report.to_text();
  fs::create_directories(s.out_dir);
  std::string report_path =
      s.report_path.empty() ? (fs::path(s.out_dir) / "report.json").string() : s.report_path;
  std::ofstream out(report_path, std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot open '", report_path, "' for writing");
  out << report.to_json().dump(2) << "\n";
  std::cout << "report: " << report_path << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// infer: one answer to stdout.

int run_infer(const Settings& s) {
  if (s.infer_audio.empty()) fail(ErrorKind::config, "infer: an audio file is required (--audio)");
  Waveform audio = read_wav(s.infer_audio);
  FusionModel model = load_model(s.infer_checkpoint, s.model, s.seed);
  std::cout << model.answer(audio, s.infer_instruction) << "\n";
  return 0;
}

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::format:
    case ErrorKind::config:
    case ErrorKind::contract:
    case ErrorKind::capacity:
    case ErrorKind::invalid:
    case ErrorKind::io:
      return 2;
    default:
      return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  Settings s;
  std::string config_path;

  CLI::App app{"fuselm: audio-conditioned language model workflows (prep / train / eval / infer)"};
  app.require_subcommand(1);
  CLI::Option* seed_flag = app.add_option("--seed", s.seed, "RNG seed; every workflow is deterministic under it");
  CLI::Option* out_flag = app.add_option("--out-dir", s.out_dir, "directory for artifacts (default: out)");
  app.add_option("--config", config_path,
                 "TOML-style key/value settings file; command-line flags override it");

  CLI::App* prep = app.add_subcommand("prep", "turn a JSONL manifest into cleaned, split shard datasets");
  prep->fallthrough();
  CLI::Option* manifest_flag =
      prep->add_option("--manifest", s.prep_manifest, "input JSONL manifest (audio paths resolve next to it)");
  CLI::Option* shard_target_flag =
      prep->add_option("--shard-target", s.shard_target, "target shard payload size in bytes");
  CLI::Option* allow_small_flag = prep->add_flag("--allow-small-shards", s.allow_small_shards,
                                                 "permit shard targets below the 1 MiB floor");
  CLI::Option* max_seconds_flag =
      prep->add_option("--max-seconds", s.max_seconds, "maximum chunk duration in seconds");
  CLI::Option* tolerance_flag = prep->add_option(
      "--tolerance", s.duration_tolerance, "relative audio-duration vs timestamp-span tolerance");
  CLI::Option* instruction_flag =
      prep->add_option("--instruction", s.instruction, "instruction text stored with every record");
  CLI::Option* split_train_flag = prep->add_option("--split-train", s.split_train, "train split ratio");
  CLI::Option* split_dev_flag = prep->add_option("--split-dev", s.split_dev, "dev split ratio");
  CLI::Option* split_test_flag = prep->add_option("--split-test", s.split_test, "test split ratio");

  CLI::App* train = app.add_subcommand("train", "train on a shard dataset and write a checkpoint");
  train->fallthrough();
  CLI::Option* data_flag = train->add_option("--data", s.train_data, "shard directory (holds manifest.json)");
  CLI::Option* steps_flag = train->add_option("--steps", s.train.total_steps, "total optimization steps");
  CLI::Option* warmup_flag = train->add_option("--warmup", s.train.warmup_steps, "linear warmup steps");
  CLI::Option* peak_lr_flag = train->add_option("--peak-lr", s.train.peak_lr, "peak learning rate");
  CLI::Option* batch_flag = train->add_option("--batch", s.train.batch_size, "samples per step");
  CLI::Option* resume_flag = train->add_option(
      "--resume", s.resume, "checkpoint to continue from (hyperparameters come from this invocation)");
  CLI::Option* save_every_flag =
      train->add_option("--save-every", s.save_every, "checkpoint every N steps (0 = only at the end)");

  CLI::App* eval_cmd = app.add_subcommand("eval", "score a model on a JSON task list");
  eval_cmd->fallthrough();
  CLI::Option* tasks_flag = eval_cmd->add_option("--tasks", s.eval_tasks, "JSON task list file");
  CLI::Option* eval_ckpt_flag = eval_cmd->add_option(
      "--checkpoint", s.eval_checkpoint, "checkpoint to evaluate (omit for a fresh seeded model)");
  CLI::Option* stub_judge_flag =
      eval_cmd->add_flag("--stub-judge", s.stub_judge, "use the offline token-overlap judge (default)");
  CLI::Option* judge_host_flag =
      eval_cmd->add_option("--judge-host", s.judge_host, "HTTP judge host (switches off the stub)");
  CLI::Option* judge_port_flag = eval_cmd->add_option("--judge-port", s.judge_port, "HTTP judge port");
  CLI::Option* judge_path_flag =
      eval_cmd->add_option("--judge-path", s.judge_path, "HTTP judge endpoint path");
  CLI::Option* report_flag =
      eval_cmd->add_option("--report", s.report_path, "report JSON path (default: <out-dir>/report.json)");

  CLI::App* infer = app.add_subcommand("infer", "answer one instruction about one audio file");
  infer->fallthrough();
  CLI::Option* audio_flag = infer->add_option("--audio", s.infer_audio, "16 kHz mono PCM16 wav file");
  CLI::Option* infer_instruction_flag =
      infer->add_option("--instruction", s.infer_instruction, "instruction text (may be empty)");
  CLI::Option* infer_ckpt_flag = infer->add_option(
      "--checkpoint", s.infer_checkpoint, "checkpoint to answer with (omit for a fresh seeded model)");

  KeyMap keys;
  auto add_key = [&](const std::string& name, CLI::Option* flag, bool is_path,
                     std::function<void(const std::string&)> set) {
    keys.emplace(name, KeyBinding{std::move(set), flag, is_path});
  };

  add_key("seed", seed_flag, false, [&](const std::string& v) { s.seed = config_uint("seed", v); });
  add_key("out_dir", out_flag, true, [&](const std::string& v) { s.out_dir = v; });

  add_key("model.n_mels", nullptr, false, [&](const std::string& v) {
    s.model.mel.n_mels = s.model.encoder.n_mels = config_int("model.n_mels", v);
  });
  add_key("model.n_fft", nullptr, false,
          [&](const std::string& v) { s.model.mel.n_fft = config_int("model.n_fft", v); });
  add_key("model.hop", nullptr, false,
          [&](const std::string& v) { s.model.mel.hop = config_int("model.hop", v); });
  add_key("model.whisper_norm", nullptr, false,
          [&](const std::string& v) { s.model.mel.whisper_norm = config_bool("model.whisper_norm", v); });
  add_key("model.encoder_frames", nullptr, false, [&](const std::string& v) {
    s.model.encoder.output_frames = config_int("model.encoder_frames", v);
  });
  add_key("model.encoder_d", nullptr, false, [&](const std::string& v) {
    s.model.encoder.d_model = s.model.adaptor.d = config_int("model.encoder_d", v);
  });
  add_key("model.encoder_layers", nullptr, false, [&](const std::string& v) {
    s.model.encoder.n_layers = config_int("model.encoder_layers", v);
  });
  add_key("model.encoder_heads", nullptr, false, [&](const std::string& v) {
    s.model.encoder.n_heads = config_int("model.encoder_heads", v);
  });
  add_key("model.fold_s", nullptr, false,
          [&](const std::string& v) { s.model.adaptor.s = config_int("model.fold_s", v); });
  add_key("model.gamma", nullptr, false, [&](const std::string& v) {
    s.model.adaptor.gamma = s.model.decoder.gamma = config_int("model.gamma", v);
  });
  add_key("model.decoder_layers", nullptr, false, [&](const std::string& v) {
    s.model.decoder.n_layers = config_int("model.decoder_layers", v);
  });
  add_key("model.decoder_heads", nullptr, false, [&](const std::string& v) {
    s.model.decoder.n_heads = config_int("model.decoder_heads", v);
  });
  add_key("model.max_seq", nullptr, false,
          [&](const std::string& v) { s.model.decoder.max_seq = config_int("model.max_seq", v); });
  add_key("model.lora_rank", nullptr, false,
          [&](const std::string& v) { s.model.decoder.lora_rank = config_int("model.lora_rank", v); });
  add_key("model.lora_alpha", nullptr, false,
          [&](const std::string& v) { s.model.decoder.lora_alpha = config_double("model.lora_alpha", v); });
  add_key("model.head_init_std", nullptr, false, [&](const std::string& v) {
    s.model.decoder.head_init_std = config_double("model.head_init_std", v);
  });
  add_key("model.augment_probability", nullptr, false, [&](const std::string& v) {
    s.model.augment.mask_probability = config_double("model.augment_probability", v);
  });
  add_key("model.augment_width", nullptr, false, [&](const std::string& v) {
    s.model.augment.mask_width = config_int("model.augment_width", v);
  });
  add_key("model.augment_value", nullptr, false, [&](const std::string& v) {
    s.model.augment.mask_value = config_double("model.augment_value", v);
  });
  add_key("model.augment_per_frame", nullptr, false, [&](const std::string& v) {
    s.model.augment.per_frame = config_bool("model.augment_per_frame", v);
  });
  add_key("model.max_answer_tokens", nullptr, false, [&](const std::string& v) {
    s.model.max_answer_tokens = config_int("model.max_answer_tokens", v);
  });

  add_key("train.data", data_flag, true, [&](const std::string& v) { s.train_data = v; });
  add_key("train.resume", resume_flag, true, [&](const std::string& v) { s.resume = v; });
  add_key("train.total_steps", steps_flag, false,
          [&](const std::string& v) { s.train.total_steps = config_int("train.total_steps", v); });
  add_key("train.warmup_steps", warmup_flag, false,
          [&](const std::string& v) { s.train.warmup_steps = config_int("train.warmup_steps", v); });
  add_key("train.peak_lr", peak_lr_flag, false,
          [&](const std::string& v) { s.train.peak_lr = config_double("train.peak_lr", v); });
  add_key("train.batch_size", batch_flag, false,
          [&](const std::string& v) { s.train.batch_size = config_int("train.batch_size", v); });
  add_key("train.weight_decay", nullptr, false,
          [&](const std::string& v) { s.train.weight_decay = config_double("train.weight_decay", v); });
  add_key("train.beta1", nullptr, false,
          [&](const std::string& v) { s.train.beta1 = config_double("train.beta1", v); });
  add_key("train.beta2", nullptr, false,
          [&](const std::string& v) { s.train.beta2 = config_double("train.beta2", v); });
  add_key("train.eps", nullptr, false,
          [&](const std::string& v) { s.train.eps = config_double("train.eps", v); });
  add_key("train.grad_clip", nullptr, false,
          [&](const std::string& v) { s.train.grad_clip = config_double("train.grad_clip", v); });
  add_key("train.save_every", save_every_flag, false,
          [&](const std::string& v) { s.save_every = config_int("train.save_every", v); });

  add_key("prep.manifest", manifest_flag, true, [&](const std::string& v) { s.prep_manifest = v; });
  add_key("prep.shard_target", shard_target_flag, false,
          [&](const std::string& v) { s.shard_target = config_uint("prep.shard_target", v); });
  add_key("prep.allow_small_shards", allow_small_flag, false, [&](const std::string& v) {
    s.allow_small_shards = config_bool("prep.allow_small_shards", v);
  });
  add_key("prep.max_seconds", max_seconds_flag, false,
          [&](const std::string& v) { s.max_seconds = config_double("prep.max_seconds", v); });
  add_key("prep.tolerance", tolerance_flag, false,
          [&](const std::string& v) { s.duration_tolerance = config_double("prep.tolerance", v); });
  add_key("prep.instruction", instruction_flag, false, [&](const std::string& v) { s.instruction = v; });
  add_key("prep.split_train", split_train_flag, false,
          [&](const std::string& v) { s.split_train = config_double("prep.split_train", v); });
  add_key("prep.split_dev", split_dev_flag, false,
          [&](const std::string& v) { s.split_dev = config_double("prep.split_dev", v); });
  add_key("prep.split_test", split_test_flag, false,
          [&](const std::string& v) { s.split_test = config_double("prep.split_test", v); });
  add_key("prep.removable", nullptr, false,
          [&](const std::string& v) { s.cleaning.removable_parens = config_list(v); });
  add_key("prep.keepable", nullptr, false,
          [&](const std::string& v) { s.cleaning.keepable_parens = config_list(v); });

  add_key("eval.tasks", tasks_flag, true, [&](const std::string& v) { s.eval_tasks = v; });
  add_key("eval.checkpoint", eval_ckpt_flag, true, [&](const std::string& v) { s.eval_checkpoint = v; });
  add_key("eval.stub_judge", stub_judge_flag, false,
          [&](const std::string& v) { s.stub_judge = config_bool("eval.stub_judge", v); });
  add_key("eval.judge_host", judge_host_flag, false, [&](const std::string& v) { s.judge_host = v; });
  add_key("eval.judge_port", judge_port_flag, false, [&](const std::string& v) {
    s.judge_port = static_cast<int>(config_int("eval.judge_port", v));
  });
  add_key("eval.judge_path", judge_path_flag, false, [&](const std::string& v) { s.judge_path = v; });
  add_key("eval.report", report_flag, true, [&](const std::string& v) { s.report_path = v; });

  add_key("infer.checkpoint", infer_ckpt_flag, true, [&](const std::string& v) { s.infer_checkpoint = v; });
  add_key("infer.audio", audio_flag, true, [&](const std::string& v) { s.infer_audio = v; });
  add_key("infer.instruction", infer_instruction_flag, false,
          [&](const std::string& v) { s.infer_instruction = v; });

  std::ostringstream footer;
  footer << "Config file keys (key = value; [section] headers or dotted names; flags win):\n ";
  size_t width = 0;
  for (const auto& [name, binding] : keys) {
    if (width + name.size() + 1 > 78) {
      footer << "\n ";
      width = 0;
    }
    footer << " " << name;
    width += name.size() + 1;
  }
  app.footer(footer.str());

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (!config_path.empty()) apply_config_file(config_path, keys);
    // The mel frontend must produce exactly twice the encoder's output frame
    // count; derive it instead of exposing a second knob to keep in sync.
    s.model.mel.target_frames = 2 * s.model.encoder.output_frames;

    if (prep->parsed()) return run_prep(s);
    if (train->parsed()) return run_train(s);
    if (eval_cmd->parsed()) return run_eval_cmd(s);
    if (infer->parsed()) return run_infer(s);
    std::cerr << "error: no subcommand given\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
}
