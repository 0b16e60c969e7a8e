#pragma once

// Toy decoder-only text model with low-rank adapters on the feed-forward
// linears. The base weights stay frozen during fusion training; only the
// adapters (plus encoder and adaptor) receive gradients. Inputs are
// embedding rows, not token ids, because fused audio positions have no ids.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fuselm/common.hpp"
#include "fuselm/encoder.hpp"  // TransformerBlockParams, NamedParams
#include "fuselm/tensor.hpp"

namespace fuselm {

// Byte-level tokenizer: 256 byte tokens plus seven specials. Zero external
// assets, exact round-trip on arbitrary byte strings.
class ByteTokenizer {
 public:
  static constexpr int kPad = 256;
  static constexpr int kBos = 257;
  static constexpr int kEos = 258;
  static constexpr int kAudioBegin = 259;
  static constexpr int kAudioEnd = 260;
  static constexpr int kInstBegin = 261;
  static constexpr int kInstEnd = 262;
  static constexpr int kVocabSize = 263;

  static bool is_special(int id) { return id >= 256 && id < kVocabSize; }

  static std::vector<int> encode(const std::string& text) {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(static_cast<int>(c));
    return ids;
  }

  // Inverse of encode; special tokens carry no bytes and are dropped.
  static std::string decode(const std::vector<int>& ids) {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
      if (id < 0 || id >= kVocabSize) fail(ErrorKind::index, "tokenizer: id ", id, " outside vocabulary");
      if (id < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    }
    return out;
  }
};

struct LoraAdapter {
  Tensor a;  // [r x d_in]
  Tensor b;  // [d_out x r]
  int64_t rank = 8;
  double alpha = 16.0;

  // Standard recipe: A random, B zero, so the adapter starts as a no-op.
  static LoraAdapter init(int64_t d_in, int64_t d_out, int64_t rank, double alpha, Rng& rng,
                          double stddev = 0.02) {
    if (rank < 1) fail(ErrorKind::config, "lora: rank must be >= 1, got ", rank);
    LoraAdapter l;
    l.rank = rank;
    l.alpha = alpha;
    l.a = Tensor::randn({rank, d_in}, rng, stddev);
    l.b = Tensor::zeros({d_out, rank});
    return l;
  }

  int64_t parameter_count() const { return a.numel() + b.numel(); }
};

// x*W^T + (alpha/r) * x*A^T*B^T. The frozen weight must not be marked
// trainable; that is the module's freezing guarantee.
inline Tensor lora_linear(GradTape& tape, const Tensor& x, const Tensor& w_frozen,
                          const LoraAdapter& adapter) {
  if (w_frozen.requires_grad())
    fail(ErrorKind::contract, "lora_linear: frozen weight is marked trainable");
  if (adapter.a.rows() != adapter.rank || adapter.b.cols() != adapter.rank)
    fail(ErrorKind::shape, "lora_linear: adapter factors disagree with rank ", adapter.rank);
  if (adapter.a.cols() != w_frozen.cols() || adapter.b.rows() != w_frozen.rows())
    fail(ErrorKind::shape, "lora_linear: adapter delta is [", adapter.b.rows(), ", ", adapter.a.cols(),
         "], frozen weight is ", shape_str(w_frozen.shape()));
  Tensor base = matmul_nt(tape, x, w_frozen);
  Tensor low = matmul_nt(tape, x, adapter.a);      // x*A^T, [L x r]
  Tensor delta = matmul_nt(tape, low, adapter.b);  // (x*A^T)*B^T, [L x d_out]
  return add(tape, base, scale(tape, delta, adapter.alpha / static_cast<double>(adapter.rank)));
}

struct DecoderConfig {
  int64_t vocab_size = ByteTokenizer::kVocabSize;
  int64_t gamma = 3854;  // embedding width
  int64_t n_layers = 2;
  int64_t n_heads = 2;
  int64_t max_seq = 512;
  int64_t lora_rank = 8;
  double lora_alpha = 16.0;
  double head_init_std = 0.02;

  void validate() const {
    // Even a desk-scale vocabulary must be able to host the special tokens.
    if (vocab_size < 7)
      fail(ErrorKind::config, "decoder: vocab_size ", vocab_size, " cannot hold the 7 special tokens");
    if (n_layers < 1) fail(ErrorKind::config, "decoder: n_layers must be >= 1, got ", n_layers);
    if (max_seq < 1) fail(ErrorKind::config, "decoder: max_seq must be >= 1, got ", max_seq);
    if (n_heads < 1 || gamma % n_heads != 0)
      fail(ErrorKind::config, "decoder: width ", gamma, " not divisible by n_heads ", n_heads);
  }
};

struct DecoderBlockParams {
  Tensor ln1_g, ln1_b;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_g, ln2_b;
  Tensor fc1_w, fc1_b;  // [4g x g], frozen
  Tensor fc2_w, fc2_b;  // [g x 4g], frozen
  LoraAdapter fc1_lora;
  LoraAdapter fc2_lora;

  static DecoderBlockParams init(const DecoderConfig& cfg, Rng& rng, double stddev) {
    int64_t g = cfg.gamma;
    DecoderBlockParams b;
    b.ln1_g = Tensor::full({g}, 1.0);
    b.ln1_b = Tensor::zeros({g});
    b.wq = Tensor::randn({g, g}, rng, stddev);
    b.bq = Tensor::zeros({g});
    b.wk = Tensor::randn({g, g}, rng, stddev);
    b.bk = Tensor::zeros({g});
    b.wv = Tensor::randn({g, g}, rng, stddev);
    b.bv = Tensor::zeros({g});
    b.wo = Tensor::randn({g, g}, rng, stddev);
    b.bo = Tensor::zeros({g});
    b.ln2_g = Tensor::full({g}, 1.0);
    b.ln2_b = Tensor::zeros({g});
    b.fc1_w = Tensor::randn({4 * g, g}, rng, stddev);
    b.fc1_b = Tensor::zeros({4 * g});
    b.fc2_w = Tensor::randn({g, 4 * g}, rng, stddev);
    b.fc2_b = Tensor::zeros({g});
    b.fc1_lora = LoraAdapter::init(g, 4 * g, cfg.lora_rank, cfg.lora_alpha, rng);
    b.fc2_lora = LoraAdapter::init(4 * g, g, cfg.lora_rank, cfg.lora_alpha, rng);
    return b;
  }
};

struct DecoderParams {
  Tensor tok_emb;  // [vocab x gamma]
  Tensor pos_emb;  // [max_seq x gamma], learned
  std::vector<DecoderBlockParams> blocks;
  Tensor ln_f_g, ln_f_b;
  Tensor head_w;  // [vocab x gamma], not adapted

  static DecoderParams init(const DecoderConfig& cfg, Rng& rng, double stddev = 0.02) {
    cfg.validate();
    DecoderParams p;
    p.tok_emb = Tensor::randn({cfg.vocab_size, cfg.gamma}, rng, stddev);
    p.pos_emb = Tensor::randn({cfg.max_seq, cfg.gamma}, rng, stddev);
    for (int64_t l = 0; l < cfg.n_layers; ++l) p.blocks.push_back(DecoderBlockParams::init(cfg, rng, stddev));
    p.ln_f_g = Tensor::full({cfg.gamma}, 1.0);
    p.ln_f_b = Tensor::zeros({cfg.gamma});
    p.head_w = Tensor::randn({cfg.vocab_size, cfg.gamma}, rng, cfg.head_init_std);
    return p;
  }

  // Every tensor, for checkpointing.
  NamedParams named_parameters(const std::string& prefix = "decoder") {
    NamedParams out;
    out.emplace_back(prefix + ".tok_emb", &tok_emb);
    out.emplace_back(prefix + ".pos_emb", &pos_emb);
    for (size_t l = 0; l < blocks.size(); ++l) {
      std::string bp = prefix + ".block" + std::to_string(l);
      DecoderBlockParams& b = blocks[l];
      out.emplace_back(bp + ".ln1.g", &b.ln1_g);
      out.emplace_back(bp + ".ln1.b", &b.ln1_b);
      out.emplace_back(bp + ".attn.wq", &b.wq);
      out.emplace_back(bp + ".attn.bq", &b.bq);
      out.emplace_back(bp + ".attn.wk", &b.wk);
      out.emplace_back(bp + ".attn.bk", &b.bk);
      out.emplace_back(bp + ".attn.wv", &b.wv);
      out.emplace_back(bp + ".attn.bv", &b.bv);
      out.emplace_back(bp + ".attn.wo", &b.wo);
      out.emplace_back(bp + ".attn.bo", &b.bo);
      out.emplace_back(bp + ".ln2.g", &b.ln2_g);
      out.emplace_back(bp + ".ln2.b", &b.ln2_b);
      out.emplace_back(bp + ".fc1.w", &b.fc1_w);
      out.emplace_back(bp + ".fc1.b", &b.fc1_b);
      out.emplace_back(bp + ".fc2.w", &b.fc2_w);
      out.emplace_back(bp + ".fc2.b", &b.fc2_b);
      out.emplace_back(bp + ".fc1.lora.a", &b.fc1_lora.a);
      out.emplace_back(bp + ".fc1.lora.b", &b.fc1_lora.b);
      out.emplace_back(bp + ".fc2.lora.a", &b.fc2_lora.a);
      out.emplace_back(bp + ".fc2.lora.b", &b.fc2_lora.b);
    }
    out.emplace_back(prefix + ".ln_f.g", &ln_f_g);
    out.emplace_back(prefix + ".ln_f.b", &ln_f_b);
    out.emplace_back(prefix + ".head.w", &head_w);
    return out;
  }

  // Only the adapter factors: the trainable subset during fusion training.
  NamedParams lora_parameters(const std::string& prefix = "decoder") {
    NamedParams out;
    for (size_t l = 0; l < blocks.size(); ++l) {
      std::string bp = prefix + ".block" + std::to_string(l);
      out.emplace_back(bp + ".fc1.lora.a", &blocks[l].fc1_lora.a);
      out.emplace_back(bp + ".fc1.lora.b", &blocks[l].fc1_lora.b);
      out.emplace_back(bp + ".fc2.lora.a", &blocks[l].fc2_lora.a);
      out.emplace_back(bp + ".fc2.lora.b", &blocks[l].fc2_lora.b);
    }
    return out;
  }

  Tensor embed_tokens(GradTape& tape, const std::vector<int>& ids) {
    return embedding(tape, tok_emb, ids);
  }
};

// One pre-norm causal block with low-rank-adapted feed-forward linears.
inline Tensor decoder_block(GradTape& tape, const Tensor& x, DecoderBlockParams& p, int64_t n_heads) {
  Tensor attn_in = layer_norm(tape, x, p.ln1_g, p.ln1_b);
  Tensor attn = multi_head_self_attention(tape, attn_in, p.wq, p.bq, p.wk, p.bk, p.wv, p.bv, p.wo, p.bo,
                                          n_heads, /*causal=*/true);
  Tensor mid = add(tape, x, attn);
  Tensor mlp_in = layer_norm(tape, mid, p.ln2_g, p.ln2_b);
  Tensor up = gelu(tape, add_bias(tape, lora_linear(tape, mlp_in, p.fc1_w, p.fc1_lora), p.fc1_b));
  Tensor down = add_bias(tape, lora_linear(tape, up, p.fc2_w, p.fc2_lora), p.fc2_b);
  return add(tape, mid, down);
}

// Causal pass over embedding rows; next-token logits at every position.
inline Tensor decode_step(GradTape& tape, const Tensor& prefix_embeddings, const DecoderConfig& cfg,
                          DecoderParams& p) {
  cfg.validate();
  check_2d(prefix_embeddings, "decode_step");
  int64_t l = prefix_embeddings.rows();
  if (l > cfg.max_seq)
    fail(ErrorKind::capacity, "decode_step: sequence of ", l, " exceeds max_seq ", cfg.max_seq);
  if (prefix_embeddings.cols() != cfg.gamma)
    fail(ErrorKind::shape, "decode_step: embedding width ", prefix_embeddings.cols(), ", expected ",
         cfg.gamma);
  Tensor x = add(tape, prefix_embeddings, slice_rows(tape, p.pos_emb, 0, l));
  for (auto& block : p.blocks) x = decoder_block(tape, x, block, cfg.n_heads);
  x = layer_norm(tape, x, p.ln_f_g, p.ln_f_b);
  return matmul_nt(tape, x, p.head_w);  // [L x vocab]
}

// Greedy decoding: append the argmax continuation (ties to the lowest id)
// until eos_id or max_new tokens. Returns the generated ids, including the
// terminating eos when one is produced.
inline std::vector<int> generate_greedy(const Tensor& prefix_embeddings, const DecoderConfig& cfg,
                                        DecoderParams& p, int64_t max_new,
                                        int eos_id = ByteTokenizer::kEos) {
  if (max_new < 1) fail(ErrorKind::contract, "generate_greedy: max_new must be >= 1, got ", max_new);
  GradTape tape(false);
  Tensor seq = prefix_embeddings;
  std::vector<int> out;
  for (int64_t i = 0; i < max_new; ++i) {
    Tensor logits = decode_step(tape, seq, cfg, p);
    int next = argmax_row(logits, logits.rows() - 1);
    out.push_back(next);
    if (next == eos_id) break;
    seq = concat_rows(tape, {seq, p.embed_tokens(tape, {next})});
  }
  return out;
}

}  // namespace fuselm
