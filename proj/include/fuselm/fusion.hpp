#pragma once

// Fuses frontend -> encoder -> adaptor -> decoder into one trainable model
// over (audio, instruction, target) triples, computes the masked
// next-token loss with teacher forcing, and answers (audio, instruction)
// queries by greedy decoding.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fuselm/adaptor.hpp"
#include "fuselm/audio.hpp"
#include "fuselm/common.hpp"
#include "fuselm/decoder.hpp"
#include "fuselm/encoder.hpp"
#include "fuselm/tensor.hpp"

namespace fuselm {

constexpr double kMaxAudioSeconds = 30.0;

struct TrainingSample {
  Waveform audio;
  std::string instruction;
  std::string target;
};

inline void validate_training_sample(const TrainingSample& s, bool require_target = true) {
  validate_waveform(s.audio);
  double seconds = static_cast<double>(s.audio.samples.size()) / s.audio.sample_rate;
  if (seconds > kMaxAudioSeconds)
    fail(ErrorKind::capacity, "sample: audio of ", seconds, " s exceeds the ", kMaxAudioSeconds,
         " s context limit");
  if (require_target && s.target.empty()) fail(ErrorKind::contract, "sample: target text is empty");
}

// Task taxonomy used to tag datasets.
enum class TaskTag { ASR, ST, SQA, SDS, SI, PARA };

inline const char* task_tag_name(TaskTag t) {
  switch (t) {
    case TaskTag::ASR: return "ASR";
    case TaskTag::ST: return "ST";
    case TaskTag::SQA: return "SQA";
    case TaskTag::SDS: return "SDS";
    case TaskTag::SI: return "SI";
    case TaskTag::PARA: return "PARA";
  }
  fail(ErrorKind::invalid, "task tag out of range");
}

inline TaskTag parse_task_tag(const std::string& name) {
  for (TaskTag t : {TaskTag::ASR, TaskTag::ST, TaskTag::SQA, TaskTag::SDS, TaskTag::SI, TaskTag::PARA})
    if (name == task_tag_name(t)) return t;
  fail(ErrorKind::config, "unknown task tag '", name, "', expected one of ASR/ST/SQA/SDS/SI/PARA");
}

struct TaggedDataset {
  TaskTag tag = TaskTag::ASR;
  std::vector<TrainingSample> samples;
};

struct DatasetCollection {
  std::vector<TaggedDataset> datasets;

  size_t total_samples() const {
    size_t n = 0;
    for (const auto& d : datasets) n += d.samples.size();
    return n;
  }
};

// Fixed prompt template:
//   [audio_begin][audio rows][audio_end][inst_begin][instruction][inst_end]
//   [target bytes][eos]
// ids carry -1 at audio rows (those positions have no token id); loss_mask
// is 1 exactly on the target bytes and the closing eos.
struct PromptLayout {
  std::vector<int> ids;
  std::vector<double> loss_mask;
  int64_t audio_rows = 0;

  int64_t size() const { return static_cast<int64_t>(ids.size()); }
};

inline PromptLayout build_prompt_layout(int64_t audio_rows, const std::string& instruction,
                                        const std::optional<std::string>& target) {
  if (audio_rows < 1) fail(ErrorKind::contract, "prompt: need at least one audio row, got ", audio_rows);
  PromptLayout layout;
  layout.audio_rows = audio_rows;
  auto push = [&](int id, double mask) {
    layout.ids.push_back(id);
    layout.loss_mask.push_back(mask);
  };
  push(ByteTokenizer::kAudioBegin, 0.0);
  for (int64_t i = 0; i < audio_rows; ++i) push(-1, 0.0);
  push(ByteTokenizer::kAudioEnd, 0.0);
  push(ByteTokenizer::kInstBegin, 0.0);
  for (int id : ByteTokenizer::encode(instruction)) push(id, 0.0);
  push(ByteTokenizer::kInstEnd, 0.0);
  if (target) {
    for (int id : ByteTokenizer::encode(*target)) push(id, 1.0);
    push(ByteTokenizer::kEos, 1.0);
  }
  return layout;
}

// Next-token loss over a laid-out sequence: position p is scored against
// ids[p+1] with weight loss_mask[p+1], i.e. exactly the positions that must
// *produce* a masked token. Returns the Eq.-style per-sample sum.
inline Tensor masked_next_token_loss(GradTape& tape, const Tensor& logits, const PromptLayout& layout) {
  int64_t l = layout.size();
  if (logits.rows() != l)
    fail(ErrorKind::shape, "loss: ", logits.rows(), " logit rows for a layout of ", l, " positions");
  std::vector<int> targets(static_cast<size_t>(l), -1);
  std::vector<double> weights(static_cast<size_t>(l), 0.0);
  for (int64_t p = 0; p + 1 < l; ++p) {
    targets[p] = layout.ids[p + 1];
    weights[p] = layout.loss_mask[p + 1];
  }
  return softmax_cross_entropy(tape, logits, targets, Reduction::sum, &weights);
}

struct FusionConfig {
  MelConfig mel;
  EncoderConfig encoder;
  AdaptorConfig adaptor;
  DecoderConfig decoder;
  SpecAugmentConfig augment;
  int64_t max_answer_tokens = 64;

  void validate() const {
    encoder.validate();
    decoder.validate();
    if (mel.n_mels != encoder.n_mels)
      fail(ErrorKind::config, "fusion: mel bins ", mel.n_mels, " != encoder n_mels ", encoder.n_mels);
    if (mel.target_frames != 2 * encoder.output_frames)
      fail(ErrorKind::config, "fusion: mel target_frames ", mel.target_frames, " must be twice encoder output ",
           encoder.output_frames);
    if (adaptor.d != encoder.d_model)
      fail(ErrorKind::config, "fusion: adaptor width ", adaptor.d, " != encoder width ", encoder.d_model);
    if (adaptor.gamma != decoder.gamma)
      fail(ErrorKind::config, "fusion: adaptor output width ", adaptor.gamma, " != decoder width ",
           decoder.gamma);
    if (decoder.vocab_size < ByteTokenizer::kVocabSize)
      fail(ErrorKind::config, "fusion: decoder vocabulary ", decoder.vocab_size, " cannot hold the byte tokenizer's ",
           ByteTokenizer::kVocabSize, " tokens");
    if (max_answer_tokens < 1)
      fail(ErrorKind::config, "fusion: max_answer_tokens must be >= 1, got ", max_answer_tokens);
  }
};

struct LossBreakdown {
  Tensor loss_sum;             // tape-connected scalar: sum over masked positions
  int64_t target_tokens = 0;   // number of masked positions
};

inline int64_t count_masked(const PromptLayout& layout) {
  int64_t n = 0;
  for (double m : layout.loss_mask) n += (m != 0.0) ? 1 : 0;
  return n;
}

struct FusionModel {
  FusionConfig cfg;
  EncoderParams encoder;
  AdaptorParams adaptor;
  DecoderParams decoder;

  static FusionModel init(const FusionConfig& cfg, uint64_t seed) {
    cfg.validate();
    FusionModel m;
    m.cfg = cfg;
    Rng enc_rng(derive_seed(seed, 1));
    m.encoder = EncoderParams::init(cfg.encoder, enc_rng);
    Rng ada_rng(derive_seed(seed, 2));
    m.adaptor = AdaptorParams::init(cfg.adaptor, ada_rng);
    Rng dec_rng(derive_seed(seed, 3));
    m.decoder = DecoderParams::init(cfg.decoder, dec_rng);
    return m;
  }

  NamedParams named_parameters() {
    NamedParams out = encoder.named_parameters("encoder");
    NamedParams ada;
    ada.emplace_back("adaptor.w1", &adaptor.w1);
    ada.emplace_back("adaptor.b1", &adaptor.b1);
    ada.emplace_back("adaptor.wu", &adaptor.wu);
    ada.emplace_back("adaptor.bu", &adaptor.bu);
    ada.emplace_back("adaptor.wd", &adaptor.wd);
    ada.emplace_back("adaptor.bd", &adaptor.bd);
    out.insert(out.end(), ada.begin(), ada.end());
    NamedParams dec = decoder.named_parameters("decoder");
    out.insert(out.end(), dec.begin(), dec.end());
    return out;
  }

  // The fusion-training trainable set: full encoder, full adaptor, decoder
  // low-rank factors only. The decoder base (embeddings, attention, MLP
  // weights, head) stays frozen.
  NamedParams trainable_parameters() {
    NamedParams out = encoder.named_parameters("encoder");
    out.emplace_back("adaptor.w1", &adaptor.w1);
    out.emplace_back("adaptor.b1", &adaptor.b1);
    out.emplace_back("adaptor.wu", &adaptor.wu);
    out.emplace_back("adaptor.bu", &adaptor.bu);
    out.emplace_back("adaptor.wd", &adaptor.wd);
    out.emplace_back("adaptor.bd", &adaptor.bd);
    NamedParams lora = decoder.lora_parameters("decoder");
    out.insert(out.end(), lora.begin(), lora.end());
    return out;
  }

  void mark_trainable() {
    for (auto& [name, param] : trainable_parameters()) param->set_requires_grad(true);
  }

  // frontend (+ augmentation when training) -> encoder -> fold -> adaptor.
  Tensor audio_embeddings(GradTape& tape, const Waveform& audio, bool training, uint64_t augment_seed) {
    MelSpectrogram mel = log_mel(audio, cfg.mel);
    if (training) {
      SpecAugmentConfig aug = cfg.augment;
      aug.rng_seed = augment_seed;
      mel = spec_augment(mel, aug);
    }
    Tensor h = encode(tape, mel, cfg.encoder, encoder);
    Tensor padded = pad_to_fold(tape, h, cfg.adaptor.s);
    return adapt(tape, padded, adaptor, cfg.adaptor.s);
  }

  // Embedding rows for a layout: token rows come from the (frozen) token
  // table, audio rows from the adaptor output.
  Tensor assemble_embeddings(GradTape& tape, const Tensor& audio_rows, const PromptLayout& layout) {
    if (audio_rows.rows() != layout.audio_rows)
      fail(ErrorKind::shape, "assemble: ", audio_rows.rows(), " audio rows for a layout expecting ",
           layout.audio_rows);
    std::vector<int> head_ids = {layout.ids.front()};
    std::vector<int> tail_ids(layout.ids.begin() + 1 + layout.audio_rows, layout.ids.end());
    return concat_rows(tape, {decoder.embed_tokens(tape, head_ids), audio_rows,
                              decoder.embed_tokens(tape, tail_ids)});
  }

  LossBreakdown forward_loss(GradTape& tape, const TrainingSample& sample, bool training,
                             uint64_t augment_seed = 0) {
    validate_training_sample(sample);
    Tensor audio_rows = audio_embeddings(tape, sample.audio, training, augment_seed);
    PromptLayout layout = build_prompt_layout(audio_rows.rows(), sample.instruction, sample.target);
    Tensor embeddings = assemble_embeddings(tape, audio_rows, layout);
    Tensor logits = decode_step(tape, embeddings, cfg.decoder, decoder);
    LossBreakdown out;
    out.loss_sum = masked_next_token_loss(tape, logits, layout);
    out.target_tokens = count_masked(layout);
    return out;
  }

  std::string answer(const Waveform& audio, const std::string& instruction) {
    TrainingSample probe{audio, instruction, ""};
    validate_training_sample(probe, /*require_target=*/false);
    GradTape tape(false);
    Tensor audio_rows = audio_embeddings(tape, audio, /*training=*/false, 0);
    PromptLayout layout = build_prompt_layout(audio_rows.rows(), instruction, std::nullopt);
    Tensor embeddings = assemble_embeddings(tape, audio_rows, layout);
    std::vector<int> ids = generate_greedy(embeddings, cfg.decoder, decoder, cfg.max_answer_tokens);
    return ByteTokenizer::decode(ids);
  }
};

}  // namespace fuselm
