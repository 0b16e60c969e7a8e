#pragma once

// Optimization loop: linear warmup/decay schedule, AdamW with decoupled
// weight decay, global gradient clipping, uniform batch sampling over the
// dataset pool, and bit-exact checkpoint/resume. The trainable set is the
// full encoder, the full adaptor, and the decoder's low-rank factors.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fuselm/common.hpp"
#include "fuselm/fusion.hpp"
#include "fuselm/shard.hpp"  // crc32 helper

namespace fuselm {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are written in little-endian layout");

struct TrainConfig {
  double peak_lr = 5e-5;    // reference recipe value (reference batch size: 640)
  int64_t warmup_steps = 100;
  int64_t total_steps = 1000;
  int64_t batch_size = 4;   // desk-scale default
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 1.0;
  uint64_t seed = 0;

  void validate() const {
    if (total_steps < 1) fail(ErrorKind::config, "train: total_steps must be >= 1, got ", total_steps);
    if (warmup_steps < 0 || warmup_steps > total_steps)
      fail(ErrorKind::config, "train: warmup_steps ", warmup_steps, " outside [0, ", total_steps, "]");
    if (batch_size < 1) fail(ErrorKind::config, "train: batch_size must be >= 1, got ", batch_size);
    if (peak_lr <= 0) fail(ErrorKind::config, "train: peak_lr must be positive, got ", peak_lr);
    if (grad_clip <= 0) fail(ErrorKind::config, "train: grad_clip must be positive, got ", grad_clip);
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
      fail(ErrorKind::config, "train: betas must lie in [0, 1)");
    if (eps <= 0) fail(ErrorKind::config, "train: eps must be positive");
  }
};

// Piecewise-linear schedule: 0 -> peak over warmup_steps, then peak -> 0 at
// total_steps. Exact at the corners (step/warmup and the decay fraction are
// computed as single divisions).
inline double lr_at(int64_t step, const TrainConfig& cfg) {
  if (step < 0 || step > cfg.total_steps)
    fail(ErrorKind::contract, "lr_at: step ", step, " outside [0, ", cfg.total_steps, "]");
  if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps && step != cfg.total_steps)
    return cfg.peak_lr * (static_cast<double>(step) / static_cast<double>(cfg.warmup_steps));
  if (step == cfg.total_steps) return 0.0;
  return cfg.peak_lr * (static_cast<double>(cfg.total_steps - step) /
                        static_cast<double>(cfg.total_steps - cfg.warmup_steps));
}

// ---------------------------------------------------------------------------
// AdamW.

struct OptimizerSlot {
  std::vector<double> m, v;
};

struct TrainerState {
  int64_t step = 0;  // completed steps
  std::map<std::string, OptimizerSlot> slots;
};

// Returns the pre-clip global gradient norm; scales all gradients so the
// post-clip norm is at most max_norm.
inline double clip_gradients(const NamedParams& params, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, p] : params)
    for (double g : p->grad()) sq += g * g;
  double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    double scale = max_norm / norm;
    for (const auto& [name, p] : params)
      for (double& g : p->grad()) g *= scale;
  }
  return norm;
}

// One AdamW update with bias correction folded into the step size
// (alpha_t = lr * sqrt(1 - beta2^t) / (1 - beta1^t)) and decoupled weight
// decay. Decay skips one-dimensional tensors (biases, norm gains).
inline void adamw_step(const NamedParams& params, TrainerState& state, int64_t t, double lr,
                       const TrainConfig& cfg) {
  if (t < 1) fail(ErrorKind::contract, "adamw: bias-correction step index must be >= 1, got ", t);
  double alpha = lr * std::sqrt(1.0 - std::pow(cfg.beta2, static_cast<double>(t))) /
                 (1.0 - std::pow(cfg.beta1, static_cast<double>(t)));
  for (const auto& [name, p] : params) {
    auto& data = p->data();
    auto& grad = p->grad();
    if (grad.empty()) grad.assign(data.size(), 0.0);  // untouched parameter: zero gradient
    if (grad.size() != data.size())
      fail(ErrorKind::shape, "adamw: gradient of ", grad.size(), " values for parameter '", name,
           "' of ", data.size());
    OptimizerSlot& slot = state.slots[name];
    if (slot.m.empty()) {
      slot.m.assign(data.size(), 0.0);
      slot.v.assign(data.size(), 0.0);
    }
    bool decay = cfg.weight_decay != 0.0 && p->shape().size() >= 2;
    for (size_t i = 0; i < data.size(); ++i) {
      double g = grad[i];
      slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g;
      slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g * g;
      data[i] -= alpha * slot.m[i] / (std::sqrt(slot.v[i]) + cfg.eps);
      if (decay) data[i] -= lr * cfg.weight_decay * data[i];
    }
  }
}

// ---------------------------------------------------------------------------
// Training loop.

struct TrainLogEntry {
  int64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;  // mean over the batch of per-sample token-mean losses

  bool operator==(const TrainLogEntry&) const = default;
};

namespace detail {

inline std::vector<const TrainingSample*> flatten_pool(const DatasetCollection& data) {
  std::vector<const TrainingSample*> pool;
  for (const auto& d : data.datasets)
    for (const auto& s : d.samples) pool.push_back(&s);
  if (pool.empty()) fail(ErrorKind::config, "train: the dataset collection is empty");
  return pool;
}

}  // namespace detail

// Runs up to max_steps optimization steps (all remaining if max_steps < 0),
// appending one log entry per step. Resuming from a restored TrainerState
// continues the exact same trajectory as an uninterrupted run.
inline std::vector<TrainLogEntry> train_steps(FusionModel& model, const DatasetCollection& data,
                                              const TrainConfig& cfg, TrainerState& state,
                                              int64_t max_steps = -1) {
  cfg.validate();
  std::vector<const TrainingSample*> pool = detail::flatten_pool(data);
  NamedParams trainable = model.trainable_parameters();
  model.mark_trainable();

  std::vector<TrainLogEntry> log;
  while (state.step < cfg.total_steps && (max_steps < 0 || static_cast<int64_t>(log.size()) < max_steps)) {
    int64_t step = state.step + 1;
    for (auto& [name, p] : trainable) p->zero_grad();

    // Uniform sampling over the concatenated pool, derived statelessly from
    // (seed, step) so a resumed run draws identical batches.
    Rng pick(derive_seed(cfg.seed, 0xBA7C, static_cast<uint64_t>(step)));
    double batch_loss = 0.0;
    for (int64_t slot = 0; slot < cfg.batch_size; ++slot) {
      auto idx = static_cast<size_t>(pick.uniform_int(0, static_cast<int64_t>(pool.size())));
      GradTape tape;
      LossBreakdown lb;
      try {
        lb = model.forward_loss(tape, *pool[idx], /*training=*/true,
                                derive_seed(cfg.seed, static_cast<uint64_t>(step), slot + 1));
      } catch (const Error& e) {
        fail(e.kind(), "step ", step, ", sample ", idx, ": ", e.what());
      }
      double weight = 1.0 / (static_cast<double>(cfg.batch_size) * static_cast<double>(lb.target_tokens));
      batch_loss += lb.loss_sum.item() * weight;
      tape.backward(lb.loss_sum, weight);
    }

    if (!std::isfinite(batch_loss))
      fail(ErrorKind::training, "non-finite loss at step ", step);
    for (const auto& [name, p] : trainable)
      for (double g : p->grad())
        if (!std::isfinite(g))
          fail(ErrorKind::training, "non-finite gradient for '", name, "' at step ", step);

    clip_gradients(trainable, cfg.grad_clip);
    double lr = lr_at(step, cfg);
    adamw_step(trainable, state, step, lr, cfg);
    state.step = step;
    log.push_back({step, lr, batch_loss});
  }
  return log;
}

// ---------------------------------------------------------------------------
// Config snapshots (JSON) for the checkpoint header.

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"peak_lr", c.peak_lr},         {"warmup_steps", c.warmup_steps},
          {"total_steps", c.total_steps}, {"batch_size", c.batch_size},
          {"weight_decay", c.weight_decay}, {"beta1", c.beta1},
          {"beta2", c.beta2},             {"eps", c.eps},
          {"grad_clip", c.grad_clip},     {"seed", c.seed}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.peak_lr = j.at("peak_lr").get<double>();
  c.warmup_steps = j.at("warmup_steps").get<int64_t>();
  c.total_steps = j.at("total_steps").get<int64_t>();
  c.batch_size = j.at("batch_size").get<int64_t>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.beta1 = j.at("beta1").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.eps = j.at("eps").get<double>();
  c.grad_clip = j.at("grad_clip").get<double>();
  c.seed = j.at("seed").get<uint64_t>();
  return c;
}

inline nlohmann::json fusion_config_to_json(const FusionConfig& c) {
  return {
      {"mel",
       {{"n_mels", c.mel.n_mels},
        {"n_fft", c.mel.n_fft},
        {"hop", c.mel.hop},
        {"target_frames", c.mel.target_frames},
        {"whisper_norm", c.mel.whisper_norm}}},
      {"encoder",
       {{"n_mels", c.encoder.n_mels},
        {"d_model", c.encoder.d_model},
        {"n_layers", c.encoder.n_layers},
        {"n_heads", c.encoder.n_heads},
        {"output_frames", c.encoder.output_frames}}},
      {"adaptor", {{"d", c.adaptor.d}, {"s", c.adaptor.s}, {"gamma", c.adaptor.gamma}}},
      {"decoder",
       {{"vocab_size", c.decoder.vocab_size},
        {"gamma", c.decoder.gamma},
        {"n_layers", c.decoder.n_layers},
        {"n_heads", c.decoder.n_heads},
        {"max_seq", c.decoder.max_seq},
        {"lora_rank", c.decoder.lora_rank},
        {"lora_alpha", c.decoder.lora_alpha},
        {"head_init_std", c.decoder.head_init_std}}},
      {"augment",
       {{"mask_width", c.augment.mask_width},
        {"mask_probability", c.augment.mask_probability},
        {"mask_value", c.augment.mask_value},
        {"per_frame", c.augment.per_frame}}},
      {"max_answer_tokens", c.max_answer_tokens}};
}

inline FusionConfig fusion_config_from_json(const nlohmann::json& j) {
  FusionConfig c;
  const auto& mel = j.at("mel");
  c.mel.n_mels = mel.at("n_mels").get<int64_t>();
  c.mel.n_fft = mel.at("n_fft").get<int64_t>();
  c.mel.hop = mel.at("hop").get<int64_t>();
  c.mel.target_frames = mel.at("target_frames").get<int64_t>();
  c.mel.whisper_norm = mel.at("whisper_norm").get<bool>();
  const auto& enc = j.at("encoder");
  c.encoder.n_mels = enc.at("n_mels").get<int64_t>();
  c.encoder.d_model = enc.at("d_model").get<int64_t>();
  c.encoder.n_layers = enc.at("n_layers").get<int64_t>();
  c.encoder.n_heads = enc.at("n_heads").get<int64_t>();
  c.encoder.output_frames = enc.at("output_frames").get<int64_t>();
  const auto& ada = j.at("adaptor");
  c.adaptor.d = ada.at("d").get<int64_t>();
  c.adaptor.s = ada.at("s").get<int64_t>();
  c.adaptor.gamma = ada.at("gamma").get<int64_t>();
  const auto& dec = j.at("decoder");
  c.decoder.vocab_size = dec.at("vocab_size").get<int64_t>();
  c.decoder.gamma = dec.at("gamma").get<int64_t>();
  c.decoder.n_layers = dec.at("n_layers").get<int64_t>();
  c.decoder.n_heads = dec.at("n_heads").get<int64_t>();
  c.decoder.max_seq = dec.at("max_seq").get<int64_t>();
  c.decoder.lora_rank = dec.at("lora_rank").get<int64_t>();
  c.decoder.lora_alpha = dec.at("lora_alpha").get<double>();
  c.decoder.head_init_std = dec.at("head_init_std").get<double>();
  const auto& aug = j.at("augment");
  c.augment.mask_width = aug.at("mask_width").get<int64_t>();
  c.augment.mask_probability = aug.at("mask_probability").get<double>();
  c.augment.mask_value = aug.at("mask_value").get<double>();
  c.augment.per_frame = aug.at("per_frame").get<bool>();
  c.max_answer_tokens = j.at("max_answer_tokens").get<int64_t>();
  return c;
}

// ---------------------------------------------------------------------------
// Checkpoints: [u32 header_len][JSON header][sections...][u32 CRC32].
// Each section is [u32 name_len][name][u64 blob_len][f64 little-endian data].
// The header records format version, completed steps, and config snapshots;
// sections cover every model parameter plus the optimizer moments under
// "optim.m/" and "optim.v/" prefixes. The CRC32 covers all preceding bytes.

constexpr int kCheckpointFormatVersion = 1;

namespace detail {

inline void put_u32(std::vector<uint8_t>& buf, uint32_t v) { append_u32le(buf, v); }

inline void put_u64(std::vector<uint8_t>& buf, uint64_t v) {
  for (int k = 0; k < 8; ++k) buf.push_back(static_cast<uint8_t>((v >> (8 * k)) & 0xff));
}

inline void put_blob(std::vector<uint8_t>& buf, const std::string& name, const std::vector<double>& data) {
  put_u32(buf, static_cast<uint32_t>(name.size()));
  buf.insert(buf.end(), name.begin(), name.end());
  put_u64(buf, static_cast<uint64_t>(data.size() * sizeof(double)));
  size_t at = buf.size();
  buf.resize(buf.size() + data.size() * sizeof(double));
  std::memcpy(buf.data() + at, data.data(), data.size() * sizeof(double));
}

class BlobReader {
 public:
  BlobReader(const std::vector<uint8_t>& buf, size_t off) : buf_(buf), off_(off) {}

  bool done() const { return off_ >= buf_.size(); }

  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int k = 0; k < 4; ++k) v |= static_cast<uint32_t>(buf_[off_ + k]) << (8 * k);
    off_ += 4;
    return v;
  }

  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int k = 0; k < 8; ++k) v |= static_cast<uint64_t>(buf_[off_ + k]) << (8 * k);
    off_ += 8;
    return v;
  }

  std::string bytes(size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(buf_.data() + off_), n);
    off_ += n;
    return s;
  }

  std::vector<double> doubles(size_t byte_len) {
    need(byte_len);
    if (byte_len % sizeof(double) != 0)
      fail(ErrorKind::format, "checkpoint: blob of ", byte_len, " bytes is not a whole number of doubles");
    std::vector<double> out(byte_len / sizeof(double));
    std::memcpy(out.data(), buf_.data() + off_, byte_len);
    off_ += byte_len;
    return out;
  }

 private:
  void need(size_t n) const {
    if (off_ + n > buf_.size()) fail(ErrorKind::format, "checkpoint: truncated at byte ", off_);
  }
  const std::vector<uint8_t>& buf_;
  size_t off_;
};

}  // namespace detail

inline void save_checkpoint(const std::string& path, FusionModel& model, const TrainerState& state,
                            const TrainConfig& cfg) {
  nlohmann::json header = {{"format_version", kCheckpointFormatVersion},
                           {"step", state.step},
                           {"train_config", train_config_to_json(cfg)},
                           {"fusion_config", fusion_config_to_json(model.cfg)}};
  std::string header_str = header.dump();

  std::vector<uint8_t> buf;
  detail::put_u32(buf, static_cast<uint32_t>(header_str.size()));
  buf.insert(buf.end(), header_str.begin(), header_str.end());
  for (auto& [name, p] : model.named_parameters()) detail::put_blob(buf, name, p->data());
  for (const auto& [name, slot] : state.slots) {
    detail::put_blob(buf, "optim.m/" + name, slot.m);
    detail::put_blob(buf, "optim.v/" + name, slot.v);
  }
  detail::put_u32(buf, detail::crc32_of(buf));

  auto tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) fail(ErrorKind::io, "cannot write checkpoint '", path, "'");
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) fail(ErrorKind::io, "short write to checkpoint '", path, "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorKind::io, "cannot move checkpoint into place: ", ec.message());
}

struct CheckpointHeader {
  int64_t step = 0;
  TrainConfig train_config;
  FusionConfig fusion_config;
};

// Reads the header without restoring anything (for model reconstruction).
inline CheckpointHeader read_checkpoint_header(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::io, "cannot open checkpoint '", path, "'");
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 8) fail(ErrorKind::format, "checkpoint '", path, "' is too short");

  std::vector<uint8_t> body(buf.begin(), buf.end() - 4);
  detail::BlobReader tail(buf, buf.size() - 4);
  if (tail.u32() != detail::crc32_of(body))
    fail(ErrorKind::corruption, "checkpoint '", path, "': checksum mismatch");

  detail::BlobReader r(buf, 0);
  uint32_t header_len = r.u32();
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.bytes(header_len));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, "checkpoint '", path, "': bad header: ", e.what());
  }
  if (header.value("format_version", -1) != kCheckpointFormatVersion)
    fail(ErrorKind::format, "checkpoint '", path, "': unsupported format version");
  CheckpointHeader out;
  out.step = header.at("step").get<int64_t>();
  out.train_config = train_config_from_json(header.at("train_config"));
  out.fusion_config = fusion_config_from_json(header.at("fusion_config"));
  return out;
}

// Restores parameters and optimizer state in place. The model must have been
// built with the same configuration the checkpoint was saved under.
inline CheckpointHeader load_checkpoint(const std::string& path, FusionModel& model, TrainerState& state) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::io, "cannot open checkpoint '", path, "'");
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 8) fail(ErrorKind::format, "checkpoint '", path, "' is too short");

  std::vector<uint8_t> body(buf.begin(), buf.end() - 4);
  {
    detail::BlobReader tail(buf, buf.size() - 4);
    if (tail.u32() != detail::crc32_of(body))
      fail(ErrorKind::corruption, "checkpoint '", path, "': checksum mismatch");
  }

  detail::BlobReader r(body, 0);
  uint32_t header_len = r.u32();
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.bytes(header_len));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, "checkpoint '", path, "': bad header: ", e.what());
  }
  if (header.value("format_version", -1) != kCheckpointFormatVersion)
    fail(ErrorKind::format, "checkpoint '", path, "': unsupported format version");

  std::map<std::string, std::vector<double>> blobs;
  while (!r.done()) {
    std::string name = r.bytes(r.u32());
    blobs[name] = r.doubles(r.u64());
  }

  for (auto& [name, p] : model.named_parameters()) {
    auto it = blobs.find(name);
    if (it == blobs.end()) fail(ErrorKind::format, "checkpoint '", path, "' lacks parameter '", name, "'");
    if (it->second.size() != p->data().size())
      fail(ErrorKind::shape, "checkpoint parameter '", name, "' has ", it->second.size(), " values, model needs ",
           p->data().size());
    p->data() = it->second;
    p->zero_grad();
  }

  state = TrainerState{};
  state.step = header.at("step").get<int64_t>();
  for (const auto& [name, blob] : blobs) {
    if (name.rfind("optim.m/", 0) == 0) state.slots[name.substr(8)].m = blob;
    if (name.rfind("optim.v/", 0) == 0) state.slots[name.substr(8)].v = blob;
  }

  CheckpointHeader out;
  out.step = state.step;
  out.train_config = train_config_from_json(header.at("train_config"));
  out.fusion_config = fusion_config_from_json(header.at("fusion_config"));
  return out;
}

}  // namespace fuselm
