#pragma once

// Miniature acoustic encoder: two 1-D convolutions (the second with stride
// 2), fixed sinusoidal positions, a stack of pre-norm bidirectional
// transformer blocks, and a final layer norm. Maps [2*tau x n_mels] mel
// frames to [tau x d_model] hidden vectors.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fuselm/audio.hpp"
#include "fuselm/common.hpp"
#include "fuselm/tensor.hpp"

namespace fuselm {

using NamedParams = std::vector<std::pair<std::string, Tensor*>>;

struct EncoderConfig {
  int64_t n_mels = 80;
  int64_t d_model = 1280;
  int64_t n_layers = 2;
  int64_t n_heads = 4;
  int64_t output_frames = 1500;  // input frame count is exactly twice this

  void validate() const {
    if (n_mels < 1) fail(ErrorKind::config, "encoder: n_mels must be >= 1, got ", n_mels);
    if (n_layers < 1) fail(ErrorKind::config, "encoder: n_layers must be >= 1, got ", n_layers);
    if (output_frames < 1) fail(ErrorKind::config, "encoder: output_frames must be >= 1, got ", output_frames);
    if (n_heads < 1 || d_model % n_heads != 0)
      fail(ErrorKind::config, "encoder: d_model ", d_model, " not divisible by n_heads ", n_heads);
  }
};

struct TransformerBlockParams {
  Tensor ln1_g, ln1_b;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_g, ln2_b;
  Tensor fc1_w, fc1_b;  // [4d x d]
  Tensor fc2_w, fc2_b;  // [d x 4d]

  static TransformerBlockParams init(int64_t d, Rng& rng, double stddev) {
    TransformerBlockParams b;
    b.ln1_g = Tensor::full({d}, 1.0);
    b.ln1_b = Tensor::zeros({d});
    b.wq = Tensor::randn({d, d}, rng, stddev);
    b.bq = Tensor::zeros({d});
    b.wk = Tensor::randn({d, d}, rng, stddev);
    b.bk = Tensor::zeros({d});
    b.wv = Tensor::randn({d, d}, rng, stddev);
    b.bv = Tensor::zeros({d});
    b.wo = Tensor::randn({d, d}, rng, stddev);
    b.bo = Tensor::zeros({d});
    b.ln2_g = Tensor::full({d}, 1.0);
    b.ln2_b = Tensor::zeros({d});
    b.fc1_w = Tensor::randn({4 * d, d}, rng, stddev);
    b.fc1_b = Tensor::zeros({4 * d});
    b.fc2_w = Tensor::randn({d, 4 * d}, rng, stddev);
    b.fc2_b = Tensor::zeros({d});
    return b;
  }

  void collect(const std::string& prefix, NamedParams& out) {
    out.emplace_back(prefix + ".ln1.g", &ln1_g);
    out.emplace_back(prefix + ".ln1.b", &ln1_b);
    out.emplace_back(prefix + ".attn.wq", &wq);
    out.emplace_back(prefix + ".attn.bq", &bq);
    out.emplace_back(prefix + ".attn.wk", &wk);
    out.emplace_back(prefix + ".attn.bk", &bk);
    out.emplace_back(prefix + ".attn.wv", &wv);
    out.emplace_back(prefix + ".attn.bv", &bv);
    out.emplace_back(prefix + ".attn.wo", &wo);
    out.emplace_back(prefix + ".attn.bo", &bo);
    out.emplace_back(prefix + ".ln2.g", &ln2_g);
    out.emplace_back(prefix + ".ln2.b", &ln2_b);
    out.emplace_back(prefix + ".fc1.w", &fc1_w);
    out.emplace_back(prefix + ".fc1.b", &fc1_b);
    out.emplace_back(prefix + ".fc2.w", &fc2_w);
    out.emplace_back(prefix + ".fc2.b", &fc2_b);
  }
};

// One pre-norm block: x += attn(LN(x)); x += mlp(LN(x)), GELU inside.
inline Tensor transformer_block(GradTape& tape, const Tensor& x, TransformerBlockParams& p,
                                int64_t n_heads, bool causal) {
  Tensor attn_in = layer_norm(tape, x, p.ln1_g, p.ln1_b);
  Tensor attn = multi_head_self_attention(tape, attn_in, p.wq, p.bq, p.wk, p.bk, p.wv, p.bv, p.wo, p.bo,
                                          n_heads, causal);
  Tensor mid = add(tape, x, attn);
  Tensor mlp_in = layer_norm(tape, mid, p.ln2_g, p.ln2_b);
  Tensor mlp = linear(tape, gelu(tape, linear(tape, mlp_in, p.fc1_w, p.fc1_b)), p.fc2_w, p.fc2_b);
  return add(tape, mid, mlp);
}

struct EncoderParams {
  Tensor conv1_w, conv1_b;  // [d x n_mels x 3], stride 1
  Tensor conv2_w, conv2_b;  // [d x d x 3], stride 2
  std::vector<TransformerBlockParams> blocks;
  Tensor ln_f_g, ln_f_b;

  static EncoderParams init(const EncoderConfig& cfg, Rng& rng, double stddev = 0.02) {
    cfg.validate();
    EncoderParams p;
    p.conv1_w = Tensor::randn({cfg.d_model, cfg.n_mels, 3}, rng, stddev);
    p.conv1_b = Tensor::zeros({cfg.d_model});
    p.conv2_w = Tensor::randn({cfg.d_model, cfg.d_model, 3}, rng, stddev);
    p.conv2_b = Tensor::zeros({cfg.d_model});
    for (int64_t l = 0; l < cfg.n_layers; ++l)
      p.blocks.push_back(TransformerBlockParams::init(cfg.d_model, rng, stddev));
    p.ln_f_g = Tensor::full({cfg.d_model}, 1.0);
    p.ln_f_b = Tensor::zeros({cfg.d_model});
    return p;
  }

  NamedParams named_parameters(const std::string& prefix = "encoder") {
    NamedParams out;
    out.emplace_back(prefix + ".conv1.w", &conv1_w);
    out.emplace_back(prefix + ".conv1.b", &conv1_b);
    out.emplace_back(prefix + ".conv2.w", &conv2_w);
    out.emplace_back(prefix + ".conv2.b", &conv2_b);
    for (size_t l = 0; l < blocks.size(); ++l)
      blocks[l].collect(prefix + ".block" + std::to_string(l), out);
    out.emplace_back(prefix + ".ln_f.g", &ln_f_g);
    out.emplace_back(prefix + ".ln_f.b", &ln_f_b);
    return out;
  }
};

// Fixed sinusoidal position table [length x d]: first half sine, second
// half cosine, log-spaced timescales from 1 to 10000.
inline Tensor sinusoid_positions(int64_t length, int64_t d) {
  if (d < 2 || d % 2 != 0) fail(ErrorKind::config, "positions: width must be even and >= 2, got ", d);
  int64_t half = d / 2;
  double log_increment = half > 1 ? std::log(10000.0) / static_cast<double>(half - 1) : 0.0;
  Tensor out = Tensor::zeros({length, d});
  for (int64_t i = 0; i < half; ++i) {
    double inv_timescale = std::exp(-log_increment * static_cast<double>(i));
    for (int64_t p = 0; p < length; ++p) {
      double angle = static_cast<double>(p) * inv_timescale;
      out.at(p, i) = std::sin(angle);
      out.at(p, half + i) = std::cos(angle);
    }
  }
  return out;
}

// Full encoder pass. The mel input must carry exactly 2*output_frames rows.
inline Tensor encode(GradTape& tape, const MelSpectrogram& m, const EncoderConfig& cfg, EncoderParams& p) {
  cfg.validate();
  int64_t want_frames = 2 * cfg.output_frames;
  if (m.frames.rows() != want_frames)
    fail(ErrorKind::shape, "encode: expected ", want_frames, " mel frames, got ", m.frames.rows());
  if (m.frames.cols() != cfg.n_mels)
    fail(ErrorKind::shape, "encode: expected ", cfg.n_mels, " mel bins, got ", m.frames.cols());
  Tensor x = gelu(tape, conv1d(tape, m.frames, p.conv1_w, p.conv1_b, /*stride=*/1, /*pad=*/1));
  x = gelu(tape, conv1d(tape, x, p.conv2_w, p.conv2_b, /*stride=*/2, /*pad=*/1));
  x = add(tape, x, sinusoid_positions(x.rows(), cfg.d_model));
  for (auto& block : p.blocks) x = transformer_block(tape, x, block, cfg.n_heads, /*causal=*/false);
  return layer_norm(tape, x, p.ln_f_g, p.ln_f_b);
}

}  // namespace fuselm
