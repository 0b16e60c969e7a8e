#pragma once

// Time-folding MLP adaptor: compresses a [tau x d] acoustic-embedding
// sequence into tau/s fused tokens of decoder width gamma by concatenating
// s consecutive frames and passing them through a three-stage MLP
// (down-fold projection, 4x up projection, down projection to gamma).

#include <cstdint>
#include <vector>

#include "fuselm/common.hpp"
#include "fuselm/tensor.hpp"

namespace fuselm {

struct AdaptorConfig {
  int64_t d = 1280;   // encoder hidden size
  int64_t s = 15;     // time-fold factor
  int64_t gamma = 3854;  // decoder embedding width
};

struct AdaptorParams {
  Tensor w1;  // [d x (d*s)]
  Tensor b1;  // [d]
  Tensor wu;  // [4d x d]
  Tensor bu;  // [4d]
  Tensor wd;  // [gamma x 4d]
  Tensor bd;  // [gamma]

  static AdaptorParams init(const AdaptorConfig& cfg, Rng& rng, double stddev = 0.02) {
    if (cfg.s < 1) fail(ErrorKind::config, "adaptor: fold factor must be >= 1, got ", cfg.s);
    if (cfg.d < 1 || cfg.gamma < 1)
      fail(ErrorKind::config, "adaptor: widths must be >= 1, got d=", cfg.d, " gamma=", cfg.gamma);
    AdaptorParams p;
    p.w1 = Tensor::randn({cfg.d, cfg.d * cfg.s}, rng, stddev);
    p.b1 = Tensor::zeros({cfg.d});
    p.wu = Tensor::randn({4 * cfg.d, cfg.d}, rng, stddev);
    p.bu = Tensor::zeros({4 * cfg.d});
    p.wd = Tensor::randn({cfg.gamma, 4 * cfg.d}, rng, stddev);
    p.bd = Tensor::zeros({cfg.gamma});
    return p;
  }

  std::vector<Tensor*> parameters() { return {&w1, &b1, &wu, &bu, &wd, &bd}; }
};

// Row t of the result is the concatenation, in increasing time order, of
// input rows t*s .. t*s+s-1.
inline Tensor fold_time(GradTape& tape, const Tensor& h, int64_t s) {
  check_2d(h, "fold_time");
  if (s < 1) fail(ErrorKind::config, "fold_time: fold factor must be >= 1, got ", s);
  int64_t tau = h.rows(), d = h.cols();
  if (tau % s != 0)
    fail(ErrorKind::shape, "fold_time: sequence length ", tau, " not divisible by fold factor ", s);
  // Row-major means the fold is exactly a reshape: s consecutive rows of
  // width d occupy the same storage as one row of width d*s.
  return reshape(tape, h, {tau / s, d * s});
}

// Right-pads with zero rows to the next multiple of s so arbitrary desk
// lengths stay foldable; out_padded_rows reports how many *output* rows of
// the folded sequence are pure padding.
inline Tensor pad_to_fold(GradTape& tape, const Tensor& h, int64_t s, int64_t* out_padded_rows = nullptr) {
  check_2d(h, "pad_to_fold");
  if (s < 1) fail(ErrorKind::config, "pad_to_fold: fold factor must be >= 1, got ", s);
  int64_t tau = h.rows();
  int64_t remainder = tau % s;
  if (out_padded_rows) *out_padded_rows = 0;
  if (remainder == 0) return h;
  int64_t pad_rows = s - remainder;
  if (out_padded_rows) *out_padded_rows = 1;  // padding never spans more than one folded row
  Tensor zeros = Tensor::zeros({pad_rows, h.cols()});
  return concat_rows(tape, {h, zeros});
}

// The three printed stages:
//   z   = SiLU(h_folded * W1^T + b1)   -> [(tau/s) x d]
//   z_u = SiLU(z * Wu^T + bu)          -> [(tau/s) x 4d]
//   z_d = z_u * Wd^T + bd              -> [(tau/s) x gamma]
inline Tensor adapt(GradTape& tape, const Tensor& h, const AdaptorParams& p, int64_t s) {
  check_2d(h, "adapt");
  int64_t d = p.w1.rows();
  if (h.cols() != d)
    fail(ErrorKind::shape, "adapt: encoder width ", h.cols(), " does not match adaptor width ", d);
  if (p.w1.cols() != d * s)
    fail(ErrorKind::shape, "adapt: fold projection expects width ", p.w1.cols(), ", fold factor ", s,
         " gives ", d * s);
  Tensor folded = fold_time(tape, h, s);
  Tensor z;
  try {
    z = silu(tape, linear(tape, folded, p.w1, p.b1));
  } catch (const Error& e) {
    fail(e.kind(), "adapt: fold projection stage: ", e.what());
  }
  Tensor z_u;
  try {
    z_u = silu(tape, linear(tape, z, p.wu, p.bu));
  } catch (const Error& e) {
    fail(e.kind(), "adapt: upward projection stage: ", e.what());
  }
  try {
    return linear(tape, z_u, p.wd, p.bd);
  } catch (const Error& e) {
    fail(e.kind(), "adapt: downward projection stage: ", e.what());
  }
}

}  // namespace fuselm
