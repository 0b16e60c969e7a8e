#pragma once

// Dense f64 tensors with a reverse-mode gradient tape. Kernels are plain
// loops: everything here runs at desk scale where auditability beats speed.
// A tensor graph and its tape belong to one thread; values may be shared
// across threads only after the tape is finalized.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "fuselm/common.hpp"

namespace fuselm {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

struct TensorData {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // empty means "all zero, not yet touched"

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

// Value-semantics handle to a shared tensor node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) {
    Tensor t;
    t.d_ = std::make_shared<TensorData>();
    int64_t n = shape_numel(shape);
    t.d_->shape = std::move(shape);
    t.d_->data.assign(static_cast<size_t>(n), 0.0);
    return t;
  }

  static Tensor full(Shape shape, double value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.data().begin(), t.data().end(), value);
    return t;
  }

  static Tensor scalar(double value) { return from({1}, {value}); }

  static Tensor from(Shape shape, std::vector<double> values) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
      fail(ErrorKind::shape, "tensor: ", values.size(), " values do not fill shape ", shape_str(shape));
    Tensor t;
    t.d_ = std::make_shared<TensorData>();
    t.d_->shape = std::move(shape);
    t.d_->data = std::move(values);
    return t;
  }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
    Tensor t = zeros(std::move(shape));
    for (double& v : t.data()) v = rng.normal() * stddev;
    return t;
  }

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  int64_t numel() const { return static_cast<int64_t>(d_->data.size()); }
  int64_t ndim() const { return static_cast<int64_t>(d_->shape.size()); }

  int64_t rows() const {
    if (ndim() != 2) fail(ErrorKind::shape, "rows: tensor is not 2-D, shape ", shape_str(shape()));
    return d_->shape[0];
  }
  int64_t cols() const {
    if (ndim() != 2) fail(ErrorKind::shape, "cols: tensor is not 2-D, shape ", shape_str(shape()));
    return d_->shape[1];
  }

  std::vector<double>& data() { return d_->data; }
  const std::vector<double>& data() const { return d_->data; }

  double& at(int64_t i) { return d_->data[static_cast<size_t>(i)]; }
  double at(int64_t i) const { return d_->data[static_cast<size_t>(i)]; }
  double& at(int64_t r, int64_t c) { return d_->data[static_cast<size_t>(r * cols() + c)]; }
  double at(int64_t r, int64_t c) const { return d_->data[static_cast<size_t>(r * cols() + c)]; }

  double item() const {
    if (numel() != 1) fail(ErrorKind::contract, "item: tensor has ", numel(), " elements, expected 1");
    return d_->data[0];
  }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool value) { d_->requires_grad = value; }

  bool has_grad() const { return !d_->grad.empty(); }
  std::vector<double>& grad() {
    d_->ensure_grad();
    return d_->grad;
  }
  void zero_grad() { d_->grad.clear(); }

  std::shared_ptr<TensorData> node() const { return d_; }

 private:
  std::shared_ptr<TensorData> d_;
};

// Rejects NaN/Inf. Kernels themselves never check, this is the single
// validation point named by the numeric-safety policy.
inline void validate_finite(const Tensor& t, const std::string& what = "tensor") {
  const auto& v = t.data();
  for (size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i]))
      fail(ErrorKind::invalid, what, ": non-finite value ", v[i], " at flat index ", i, ", shape ",
           shape_str(t.shape()));
  }
}

// Ordered log of backward rules. Replaying in reverse recording order hits
// each recorded op once, and every op accumulates with += into its inputs,
// so a tensor used twice receives both contributions.
class GradTape {
 public:
  explicit GradTape(bool enabled = true) : enabled_(enabled) {}

  bool enabled() const { return enabled_; }
  void set_enabled(bool value) { enabled_ = value; }

  void record(std::function<void()> backward_rule) { ops_.push_back(std::move(backward_rule)); }

  size_t size() const { return ops_.size(); }

  void reset() { ops_.clear(); }

  void backward(const Tensor& root, double seed = 1.0) {
    if (root.numel() != 1)
      fail(ErrorKind::contract, "backward: root has ", root.numel(), " elements, expected scalar");
    root.node()->ensure_grad();
    root.node()->grad[0] += seed;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> ops_;
  bool enabled_ = true;
};

namespace detail {

// Deterministic single-thread matmul kernels. All three use fixed tiling and
// lane-split accumulators: the summation order never depends on the data, so
// results are bit-reproducible run to run, while the independent lanes let
// the compiler vectorize under strict FP semantics.

// c[M x N] += a[M x K] * b[K x N]
inline void mm_nn_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    int64_t l = 0;
    for (; l + 4 <= k; l += 4) {
      double a0 = ai[l], a1 = ai[l + 1], a2 = ai[l + 2], a3 = ai[l + 3];
      const double* b0 = b + l * n;
      const double* b1 = b0 + n;
      const double* b2 = b1 + n;
      const double* b3 = b2 + n;
      for (int64_t j = 0; j < n; ++j)
        ci[j] += (a0 * b0[j] + a1 * b1[j]) + (a2 * b2[j] + a3 * b3[j]);
    }
    for (; l < k; ++l) {
      double av = ai[l];
      const double* bl = b + l * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += av * bl[j];
    }
  }
}

// One dot product with 32 independent accumulator lanes: enough parallel
// FMA chains to hide the unit's latency at full vector width.
inline double dot_lanes(const double* x, const double* y, int64_t n) {
  double s[32] = {};
  int64_t j = 0;
  for (; j + 32 <= n; j += 32)
    for (int64_t t = 0; t < 32; ++t) s[t] += x[j + t] * y[j + t];
  for (; j + 4 <= n; j += 4)
    for (int64_t t = 0; t < 4; ++t) s[t] += x[j + t] * y[j + t];
  double tail = 0.0;
  for (; j < n; ++j) tail += x[j] * y[j];
  for (int64_t w = 16; w >= 1; w /= 2)
    for (int64_t t = 0; t < w; ++t) s[t] += s[t + w];
  return s[0] + tail;
}

// Four dot products sharing one streaming pass over y. The per-row lane
// assignment and reduction tree match dot_lanes exactly, so each result is
// bit-equal to a separate call while y crosses memory once instead of four
// times (the packed panels below are L2-resident; this is what they wait on).
inline void dot_lanes4(const double* x0, const double* x1, const double* x2, const double* x3,
                       const double* y, int64_t n, double* o0, double* o1, double* o2, double* o3) {
  double s0[32] = {}, s1[32] = {}, s2[32] = {}, s3[32] = {};
  int64_t j = 0;
  for (; j + 32 <= n; j += 32) {
    for (int64_t t = 0; t < 32; ++t) s0[t] += x0[j + t] * y[j + t];
    for (int64_t t = 0; t < 32; ++t) s1[t] += x1[j + t] * y[j + t];
    for (int64_t t = 0; t < 32; ++t) s2[t] += x2[j + t] * y[j + t];
    for (int64_t t = 0; t < 32; ++t) s3[t] += x3[j + t] * y[j + t];
  }
  for (; j + 4 <= n; j += 4) {
    for (int64_t t = 0; t < 4; ++t) s0[t] += x0[j + t] * y[j + t];
    for (int64_t t = 0; t < 4; ++t) s1[t] += x1[j + t] * y[j + t];
    for (int64_t t = 0; t < 4; ++t) s2[t] += x2[j + t] * y[j + t];
    for (int64_t t = 0; t < 4; ++t) s3[t] += x3[j + t] * y[j + t];
  }
  double t0 = 0.0, t1 = 0.0, t2 = 0.0, t3 = 0.0;
  for (; j < n; ++j) {
    t0 += x0[j] * y[j];
    t1 += x1[j] * y[j];
    t2 += x2[j] * y[j];
    t3 += x3[j] * y[j];
  }
  for (int64_t w = 16; w >= 1; w /= 2) {
    for (int64_t t = 0; t < w; ++t) s0[t] += s0[t + w];
    for (int64_t t = 0; t < w; ++t) s1[t] += s1[t + w];
    for (int64_t t = 0; t < w; ++t) s2[t] += s2[t + w];
    for (int64_t t = 0; t < w; ++t) s3[t] += s3[t + w];
  }
  *o0 += s0[0] + t0;
  *o1 += s1[0] + t1;
  *o2 += s2[0] + t2;
  *o3 += s3[0] + t3;
}

// c[M x K] += a[M x N] * b[K x N]^T. Blocks of b are packed into a small
// contiguous buffer so every b element crosses memory once and the hot loop
// runs dot products against cache-resident panels, four a-rows per sweep.
inline void mm_nt_acc(const double* a, const double* b, double* c, int64_t m, int64_t n, int64_t k) {
  constexpr int64_t kRows = 64;    // b rows per packed block
  constexpr int64_t kWidth = 512;  // dot-length slice per packed block
  std::vector<double> pack;
  for (int64_t j0 = 0; j0 < n; j0 += kWidth) {
    int64_t nj = std::min(kWidth, n - j0);
    for (int64_t l0 = 0; l0 < k; l0 += kRows) {
      int64_t nl = std::min(kRows, k - l0);
      pack.resize(static_cast<size_t>(nl * nj));
      for (int64_t l = 0; l < nl; ++l)
        std::copy(b + (l0 + l) * n + j0, b + (l0 + l) * n + j0 + nj,
                  pack.begin() + static_cast<size_t>(l * nj));
      int64_t i = 0;
      for (; i + 4 <= m; i += 4) {
        const double* a0 = a + i * n + j0;
        const double* a1 = a0 + n;
        const double* a2 = a1 + n;
        const double* a3 = a2 + n;
        double* ci = c + i * k + l0;
        for (int64_t l = 0; l < nl; ++l) {
          const double* pl = pack.data() + l * nj;
          dot_lanes4(a0, a1, a2, a3, pl, nj, ci + l, ci + k + l, ci + 2 * k + l, ci + 3 * k + l);
        }
      }
      for (; i < m; ++i) {
        const double* ap = a + i * n + j0;
        double* ci = c + i * k + l0;
        for (int64_t l = 0; l < nl; ++l) ci[l] += dot_lanes(ap, pack.data() + l * nj, nj);
      }
    }
  }
}

// c[K x N] += a[M x K]^T * b[M x N]
inline void mm_tn_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  int64_t i = 0;
  for (; i + 4 <= m; i += 4) {
    const double* a0 = a + i * k;
    const double* a1 = a0 + k;
    const double* a2 = a1 + k;
    const double* a3 = a2 + k;
    const double* b0 = b + i * n;
    const double* b1 = b0 + n;
    const double* b2 = b1 + n;
    const double* b3 = b2 + n;
    for (int64_t l = 0; l < k; ++l) {
      double v0 = a0[l], v1 = a1[l], v2 = a2[l], v3 = a3[l];
      double* cl = c + l * n;
      for (int64_t j = 0; j < n; ++j)
        cl[j] += (v0 * b0[j] + v1 * b1[j]) + (v2 * b2[j] + v3 * b3[j]);
    }
  }
  for (; i < m; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * n;
    for (int64_t l = 0; l < k; ++l) {
      double av = ai[l];
      if (av == 0.0) continue;
      double* cl = c + l * n;
      for (int64_t j = 0; j < n; ++j) cl[j] += av * bi[j];
    }
  }
}

inline bool want_grad(const GradTape& tape, std::initializer_list<Tensor> inputs) {
  if (!tape.enabled()) return false;
  for (const Tensor& t : inputs)
    if (t.requires_grad()) return true;
  return false;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace detail

inline void check_2d(const Tensor& t, const char* op) {
  if (t.ndim() != 2) fail(ErrorKind::shape, op, ": expected 2-D tensor, got shape ", shape_str(t.shape()));
}

// out = a * b. Backward: dA += dOut * B^T, dB += A^T * dOut.
inline Tensor matmul(GradTape& tape, const Tensor& a, const Tensor& b) {
  check_2d(a, "matmul");
  check_2d(b, "matmul");
  if (a.cols() != b.rows())
    fail(ErrorKind::shape, "matmul: inner dimensions disagree, ", shape_str(a.shape()), " vs ",
         shape_str(b.shape()));
  int64_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out = Tensor::zeros({m, n});
  detail::mm_nn_acc(a.data().data(), b.data().data(), out.data().data(), m, k, n);
  if (detail::want_grad(tape, {a, b})) {
    out.set_requires_grad(true);
    tape.record([an = a.node(), bn = b.node(), on = out.node(), m, k, n] {
      if (on->grad.empty()) return;
      const double* go = on->grad.data();
      if (an->requires_grad) {
        an->ensure_grad();
        detail::mm_nt_acc(go, bn->data.data(), an->grad.data(), m, n, k);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        detail::mm_tn_acc(an->data.data(), go, bn->grad.data(), m, k, n);
      }
    });
  }
  return out;
}

// out = a * b^T. The natural shape for y = x * W^T with W stored [out x in].
inline Tensor matmul_nt(GradTape& tape, const Tensor& a, const Tensor& b) {
  check_2d(a, "matmul_nt");
  check_2d(b, "matmul_nt");
  if (a.cols() != b.cols())
    fail(ErrorKind::shape, "matmul_nt: inner dimensions disagree, ", shape_str(a.shape()), " vs ",
         shape_str(b.shape()), " transposed");
  int64_t m = a.rows(), n = a.cols(), k = b.rows();
  Tensor out = Tensor::zeros({m, k});
  detail::mm_nt_acc(a.data().data(), b.data().data(), out.data().data(), m, n, k);
  if (detail::want_grad(tape, {a, b})) {
    out.set_requires_grad(true);
    tape.record([an = a.node(), bn = b.node(), on = out.node(), m, n, k] {
      if (on->grad.empty()) return;
      const double* go = on->grad.data();  // [m x k]
      if (an->requires_grad) {
        an->ensure_grad();
        detail::mm_nn_acc(go, bn->data.data(), an->grad.data(), m, k, n);  // dA += dOut * B
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        detail::mm_tn_acc(go, an->data.data(), bn->grad.data(), m, k, n);  // dB += dOut^T * A
      }
    });
  }
  return out;
}

inline Tensor add(GradTape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    fail(ErrorKind::shape, "add: shape mismatch, ", shape_str(a.shape()), " vs ", shape_str(b.shape()));
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  if (detail::want_grad(tape, {a, b})) {
    out.set_requires_grad(true);
    tape.record([an = a.node(), bn = b.node(), on = out.node()] {
      if (on->grad.empty()) return;
      const auto& go = on->grad;
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < go.size(); ++i) an->grad[i] += go[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < go.size(); ++i) bn->grad[i] += go[i];
      }
    });
  }
  return out;
}

// x[R x C] + bias[C], broadcast over the leading axis.
inline Tensor add_bias(GradTape& tape, const Tensor& x, const Tensor& bias) {
  check_2d(x, "add_bias");
  if (bias.ndim() != 1 || bias.shape()[0] != x.cols())
    fail(ErrorKind::shape, "add_bias: bias shape ", shape_str(bias.shape()), " does not match columns of ",
         shape_str(x.shape()));
  int64_t r = x.rows(), c = x.cols();
  Tensor out = Tensor::zeros({r, c});
  const auto& xv = x.data();
  const auto& bv = bias.data();
  auto& ov = out.data();
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) ov[i * c + j] = xv[i * c + j] + bv[j];
  if (detail::want_grad(tape, {x, bias})) {
    out.set_requires_grad(true);
    tape.record([xn = x.node(), bn = bias.node(), on = out.node(), r, c] {
      if (on->grad.empty()) return;
      const auto& go = on->grad;
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (size_t i = 0; i < go.size(); ++i) xn->grad[i] += go[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int64_t i = 0; i < r; ++i)
          for (int64_t j = 0; j < c; ++j) bn->grad[j] += go[i * c + j];
      }
    });
  }
  return out;
}

inline Tensor mul(GradTape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    fail(ErrorKind::shape, "mul: shape mismatch, ", shape_str(a.shape()), " vs ", shape_str(b.shape()));
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  if (detail::want_grad(tape, {a, b})) {
    out.set_requires_grad(true);
    tape.record([an = a.node(), bn = b.node(), on = out.node()] {
      if (on->grad.empty()) return;
      const auto& go = on->grad;
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < go.size(); ++i) an->grad[i] += go[i] * bn->data[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < go.size(); ++i) bn->grad[i] += go[i] * an->data[i];
      }
    });
  }
  return out;
}

inline Tensor scale(GradTape& tape, const Tensor& x, double factor) {
  Tensor out = Tensor::zeros(x.shape());
  const auto& xv = x.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * factor;
  if (detail::want_grad(tape, {x})) {
    out.set_requires_grad(true);
    tape.record([xn = x.node(), on = out.node(), factor] {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i] * factor;
    });
  }
  return out;
}

// x * sigmoid(x); d/dx = s(x) * (1 + x * (1 - s(x))).
inline Tensor silu(GradTape& tape, const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const auto& xv = x.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * detail::sigmoid(xv[i]);
  if (detail::want_grad(tape, {x})) {
    out.set_requires_grad(true);
    tape.record([xn = x.node(), on = out.node()] {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) {
        double s = detail::sigmoid(xn->data[i]);
        xn->grad[i] += on->grad[i] * s * (1.0 + xn->data[i] * (1.0 - s));
      }
    });
  }
  return out;
}

// Exact erf-based GELU; d/dx = Phi(x) + x * phi(x).
inline Tensor gelu(GradTape& tape, const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const auto& xv = x.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * M_SQRT1_2));
  if (detail::want_grad(tape, {x})) {
    out.set_requires_grad(true);
    tape.record([xn = x.node(), on = out.node()] {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) {
        double v = xn->data[i];
        double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
        double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * M_PI);
        xn->grad[i] += on->grad[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

inline Tensor sum(GradTape& tape, const Tensor& x) {
  double total = std::accumulate(x.data().begin(), x.data().end(), 0.0);
  Tensor out = Tensor::scalar(total);
  if (detail::want_grad(tape, {x})) {
    out.set_requires_grad(true);
    tape.record([xn = x.node(), on = out.node()] {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += on->grad[0];
    });
  }
  return out;
}

inline Tensor mean(GradTape& tape, const Tensor& x) {
  return scale(tape, sum(tape, x), 1.0 / static_cast<double>(x.numel()));
}

inline Tensor reshape(GradTape& tape, const Tensor& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel())
    fail(ErrorKind::shape, "reshape: ", shape_str(x.shape()), " cannot be viewed as ", shape_str(new_shape));
  Tensor out = Tensor::from(std::move(new_shape), x.data());
  if (detail::want_grad(tape, {x})) {
    out.set_requires_grad(true);
    tape.record([xn = x.node(), on = out.node()] {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
    });
  }
  return out;
}

inline Tensor slice_rows(GradTape& tape, const Tensor& x, int64_t begin, int64_t end) {
  check_2d(x, "slice_rows");
  if (begin < 0 || end > x.rows() || begin >= end)
    fail(ErrorKind::index, "slice_rows: range [", begin, ", ", end, ") invalid for ", x.rows(), " rows");
  int64_t c = x.cols();
  Tensor out = Tensor::zeros({end - begin, c});
  std::copy(x.data().begin() + begin * c, x.data().begin() + end * c, out.data().begin());
  if (detail::want_grad(tape, {x})) {
    out.set_requires_grad(true);
    tape.record([xn = x.node(), on = out.node(), begin, c] {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[static_cast<size_t>(begin * c) + i] += on->grad[i];
    });
  }
  return out;
}

inline Tensor slice_cols(GradTape& tape, const Tensor& x, int64_t begin, int64_t end) {
  check_2d(x, "slice_cols");
  if (begin < 0 || end > x.cols() || begin >= end)
    fail(ErrorKind::index, "slice_cols: range [", begin, ", ", end, ") invalid for ", x.cols(), " columns");
  int64_t r = x.rows(), c = x.cols(), w = end - begin;
  Tensor out = Tensor::zeros({r, w});
  for (int64_t i = 0; i < r; ++i)
    std::copy(x.data().begin() + i * c + begin, x.data().begin() + i * c + end, out.data().begin() + i * w);
  if (detail::want_grad(tape, {x})) {
    out.set_requires_grad(true);
    tape.record([xn = x.node(), on = out.node(), r, c, w, begin] {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < w; ++j) xn->grad[i * c + begin + j] += on->grad[i * w + j];
    });
  }
  return out;
}

// Concatenate along the sequence (row) axis.
inline Tensor concat_rows(GradTape& tape, const std::vector<Tensor>& parts) {
  if (parts.empty()) fail(ErrorKind::contract, "concat_rows: no inputs");
  int64_t c = parts[0].cols();
  int64_t total = 0;
  for (const Tensor& p : parts) {
    check_2d(p, "concat_rows");
    if (p.cols() != c)
      fail(ErrorKind::shape, "concat_rows: column mismatch, ", c, " vs ", p.cols());
    total += p.rows();
  }
  Tensor out = Tensor::zeros({total, c});
  int64_t row = 0;
  for (const Tensor& p : parts) {
    std::copy(p.data().begin(), p.data().end(), out.data().begin() + row * c);
    row += p.rows();
  }
  bool rg = tape.enabled();
  if (rg) {
    rg = false;
    for (const Tensor& p : parts) rg = rg || p.requires_grad();
  }
  if (rg) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<TensorData>> nodes;
    nodes.reserve(parts.size());
    for (const Tensor& p : parts) nodes.push_back(p.node());
    tape.record([nodes, on = out.node(), c] {
      if (on->grad.empty()) return;
      int64_t row2 = 0;
      for (const auto& pn : nodes) {
        int64_t pr = pn->shape[0];
        if (pn->requires_grad) {
          pn->ensure_grad();
          for (int64_t i = 0; i < pr * c; ++i) pn->grad[i] += on->grad[row2 * c + i];
        }
        row2 += pr;
      }
    });
  }
  return out;
}

inline Tensor concat_cols(GradTape& tape, const std::vector<Tensor>& parts) {
  if (parts.empty()) fail(ErrorKind::contract, "concat_cols: no inputs");
  int64_t r = parts[0].rows();
  int64_t total = 0;
  for (const Tensor& p : parts) {
    check_2d(p, "concat_cols");
    if (p.rows() != r) fail(ErrorKind::shape, "concat_cols: row mismatch, ", r, " vs ", p.rows());
    total += p.cols();
  }
  Tensor out = Tensor::zeros({r, total});
  int64_t col = 0;
  for (const Tensor& p : parts) {
    int64_t pc = p.cols();
    for (int64_t i = 0; i < r; ++i)
      std::copy(p.data().begin() + i * pc, p.data().begin() + (i + 1) * pc,
                out.data().begin() + i * total + col);
    col += pc;
  }
  bool rg = tape.enabled();
  if (rg) {
    rg = false;
    for (const Tensor& p : parts) rg = rg || p.requires_grad();
  }
  if (rg) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<TensorData>> nodes;
    nodes.reserve(parts.size());
    for (const Tensor& p : parts) nodes.push_back(p.node());
    tape.record([nodes, on = out.node(), r, total] {
      if (on->grad.empty()) return;
      int64_t col2 = 0;
      for (const auto& pn : nodes) {
        int64_t pc = pn->shape[1];
        if (pn->requires_grad) {
          pn->ensure_grad();
          for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < pc; ++j) pn->grad[i * pc + j] += on->grad[i * total + col2 + j];
        }
        col2 += pc;
      }
    });
  }
  return out;
}

// Row-wise softmax with max-subtraction. With `causal` set, row i attends to
// columns 0..i only (requires a square matrix); masked cells are exactly 0.
inline Tensor softmax_rows(GradTape& tape, const Tensor& x, bool causal = false) {
  check_2d(x, "softmax_rows");
  int64_t r = x.rows(), c = x.cols();
  if (causal && r != c)
    fail(ErrorKind::shape, "softmax_rows: causal mask needs a square matrix, got ", shape_str(x.shape()));
  Tensor out = Tensor::zeros({r, c});
  const auto& xv = x.data();
  auto& ov = out.data();
  for (int64_t i = 0; i < r; ++i) {
    int64_t valid = causal ? i + 1 : c;
    double mx = xv[i * c];
    for (int64_t j = 1; j < valid; ++j) mx = std::max(mx, xv[i * c + j]);
    double denom = 0.0;
    for (int64_t j = 0; j < valid; ++j) {
      double e = std::exp(xv[i * c + j] - mx);
      ov[i * c + j] = e;
      denom += e;
    }
    for (int64_t j = 0; j < valid; ++j) ov[i * c + j] /= denom;
  }
  if (detail::want_grad(tape, {x})) {
    out.set_requires_grad(true);
    tape.record([xn = x.node(), on = out.node(), r, c, causal] {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (int64_t i = 0; i < r; ++i) {
        int64_t valid = causal ? i + 1 : c;
        double dot = 0.0;
        for (int64_t j = 0; j < valid; ++j) dot += on->grad[i * c + j] * on->data[i * c + j];
        for (int64_t j = 0; j < valid; ++j)
          xn->grad[i * c + j] += on->data[i * c + j] * (on->grad[i * c + j] - dot);
      }
    });
  }
  return out;
}

// Row-wise layer normalization with learned gain/bias.
inline Tensor layer_norm(GradTape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  check_2d(x, "layer_norm");
  int64_t r = x.rows(), c = x.cols();
  if (gain.numel() != c || bias.numel() != c)
    fail(ErrorKind::shape, "layer_norm: gain/bias must have ", c, " elements, got ", gain.numel(), " and ",
         bias.numel());
  Tensor out = Tensor::zeros({r, c});
  std::vector<double> inv_std(static_cast<size_t>(r));
  std::vector<double> norm(static_cast<size_t>(r * c));
  const auto& xv = x.data();
  const auto& gv = gain.data();
  const auto& bv = bias.data();
  auto& ov = out.data();
  for (int64_t i = 0; i < r; ++i) {
    double mu = 0.0;
    for (int64_t j = 0; j < c; ++j) mu += xv[i * c + j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      double d = xv[i * c + j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(c);
    double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(i)] = is;
    for (int64_t j = 0; j < c; ++j) {
      double nh = (xv[i * c + j] - mu) * is;
      norm[static_cast<size_t>(i * c + j)] = nh;
      ov[i * c + j] = nh * gv[j] + bv[j];
    }
  }
  if (detail::want_grad(tape, {x, gain, bias})) {
    out.set_requires_grad(true);
    tape.record([xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node(), r, c,
                 inv_std = std::move(inv_std), norm = std::move(norm)] {
      if (on->grad.empty()) return;
      const auto& go = on->grad;
      if (gn->requires_grad) {
        gn->ensure_grad();
        for (int64_t i = 0; i < r; ++i)
          for (int64_t j = 0; j < c; ++j) gn->grad[j] += go[i * c + j] * norm[i * c + j];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int64_t i = 0; i < r; ++i)
          for (int64_t j = 0; j < c; ++j) bn->grad[j] += go[i * c + j];
      }
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (int64_t i = 0; i < r; ++i) {
          double mean_t = 0.0, mean_tn = 0.0;
          for (int64_t j = 0; j < c; ++j) {
            double t = go[i * c + j] * gn->data[j];
            mean_t += t;
            mean_tn += t * norm[i * c + j];
          }
          mean_t /= static_cast<double>(c);
          mean_tn /= static_cast<double>(c);
          for (int64_t j = 0; j < c; ++j) {
            double t = go[i * c + j] * gn->data[j];
            xn->grad[i * c + j] += (t - mean_t - norm[i * c + j] * mean_tn) * inv_std[i];
          }
        }
      }
    });
  }
  return out;
}

// Gathers rows of `table` by id. Backward scatter-adds, so repeated ids
// accumulate correctly.
inline Tensor embedding(GradTape& tape, const Tensor& table, const std::vector<int>& ids) {
  check_2d(table, "embedding");
  int64_t v = table.rows(), d = table.cols();
  for (size_t i = 0; i < ids.size(); ++i)
    if (ids[i] < 0 || ids[i] >= v)
      fail(ErrorKind::index, "embedding: id ", ids[i], " at position ", i, " outside vocabulary of ", v);
  Tensor out = Tensor::zeros({static_cast<int64_t>(ids.size()), d});
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy(table.data().begin() + ids[i] * d, table.data().begin() + (ids[i] + 1) * d,
              out.data().begin() + static_cast<int64_t>(i) * d);
  if (detail::want_grad(tape, {table})) {
    out.set_requires_grad(true);
    tape.record([tn = table.node(), on = out.node(), ids, d] {
      if (on->grad.empty()) return;
      tn->ensure_grad();
      for (size_t i = 0; i < ids.size(); ++i)
        for (int64_t j = 0; j < d; ++j) tn->grad[ids[i] * d + j] += on->grad[static_cast<int64_t>(i) * d + j];
    });
  }
  return out;
}

// 1-D convolution over a [T x C_in] sequence with kernel [C_out x C_in x K]
// and zero padding. Frames outside [0, T) contribute zeros.
inline Tensor conv1d(GradTape& tape, const Tensor& x, const Tensor& w, const Tensor& b, int64_t stride,
                     int64_t pad) {
  check_2d(x, "conv1d");
  if (w.ndim() != 3) fail(ErrorKind::shape, "conv1d: kernel must be 3-D, got ", shape_str(w.shape()));
  int64_t t_in = x.rows(), c_in = x.cols();
  int64_t c_out = w.shape()[0], k = w.shape()[2];
  if (w.shape()[1] != c_in)
    fail(ErrorKind::shape, "conv1d: kernel expects ", w.shape()[1], " input channels, input has ", c_in);
  if (b.numel() != c_out)
    fail(ErrorKind::shape, "conv1d: bias has ", b.numel(), " elements, kernel has ", c_out, " filters");
  if (stride < 1) fail(ErrorKind::config, "conv1d: stride must be >= 1, got ", stride);
  int64_t t_out = (t_in + 2 * pad - k) / stride + 1;
  if (t_out < 1) fail(ErrorKind::shape, "conv1d: input of ", t_in, " frames too short for kernel ", k);
  Tensor out = Tensor::zeros({t_out, c_out});
  const auto& xv = x.data();
  const auto& wv = w.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (int64_t t = 0; t < t_out; ++t) {
    for (int64_t o = 0; o < c_out; ++o) {
      double acc = bv[o];
      for (int64_t dk = 0; dk < k; ++dk) {
        int64_t s = t * stride + dk - pad;
        if (s < 0 || s >= t_in) continue;
        const double* xr = xv.data() + s * c_in;
        for (int64_t c = 0; c < c_in; ++c) acc += xr[c] * wv[o * c_in * k + c * k + dk];
      }
      ov[t * c_out + o] = acc;
    }
  }
  if (detail::want_grad(tape, {x, w, b})) {
    out.set_requires_grad(true);
    tape.record([xn = x.node(), wn = w.node(), bn = b.node(), on = out.node(), t_in, c_in, c_out, k, stride,
                 pad, t_out] {
      if (on->grad.empty()) return;
      const auto& go = on->grad;
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int64_t t = 0; t < t_out; ++t)
          for (int64_t o = 0; o < c_out; ++o) bn->grad[o] += go[t * c_out + o];
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        for (int64_t t = 0; t < t_out; ++t)
          for (int64_t o = 0; o < c_out; ++o) {
            double g = go[t * c_out + o];
            for (int64_t dk = 0; dk < k; ++dk) {
              int64_t s = t * stride + dk - pad;
              if (s < 0 || s >= t_in) continue;
              for (int64_t c = 0; c < c_in; ++c) wn->grad[o * c_in * k + c * k + dk] += g * xn->data[s * c_in + c];
            }
          }
      }
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (int64_t t = 0; t < t_out; ++t)
          for (int64_t o = 0; o < c_out; ++o) {
            double g = go[t * c_out + o];
            for (int64_t dk = 0; dk < k; ++dk) {
              int64_t s = t * stride + dk - pad;
              if (s < 0 || s >= t_in) continue;
              for (int64_t c = 0; c < c_in; ++c) xn->grad[s * c_in + c] += g * wn->data[o * c_in * k + c * k + dk];
            }
          }
      }
    });
  }
  return out;
}

// y = x * W^T + b with W stored [out_features x in_features].
inline Tensor linear(GradTape& tape, const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_bias(tape, matmul_nt(tape, x, w), b);
}

// Multi-head self-attention over one sequence [T x d], optionally causal.
// All four projections store weights [d x d] in the linear() convention.
// Built from taped primitives, so the backward pass needs no extra rule.
inline Tensor multi_head_self_attention(GradTape& tape, const Tensor& x, const Tensor& wq,
                                        const Tensor& bq, const Tensor& wk, const Tensor& bk,
                                        const Tensor& wv, const Tensor& bv, const Tensor& wo,
                                        const Tensor& bo, int64_t n_heads, bool causal) {
  check_2d(x, "attention");
  int64_t d = x.cols();
  if (n_heads < 1 || d % n_heads != 0)
    fail(ErrorKind::shape, "attention: width ", d, " is not divisible into ", n_heads, " heads");
  int64_t dh = d / n_heads;
  Tensor q = linear(tape, x, wq, bq);
  Tensor k = linear(tape, x, wk, bk);
  Tensor v = linear(tape, x, wv, bv);
  std::vector<Tensor> heads;
  heads.reserve(static_cast<size_t>(n_heads));
  for (int64_t h = 0; h < n_heads; ++h) {
    Tensor qh = slice_cols(tape, q, h * dh, (h + 1) * dh);
    Tensor kh = slice_cols(tape, k, h * dh, (h + 1) * dh);
    Tensor vh = slice_cols(tape, v, h * dh, (h + 1) * dh);
    Tensor scores = scale(tape, matmul_nt(tape, qh, kh), 1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor probs = softmax_rows(tape, scores, causal);
    heads.push_back(matmul(tape, probs, vh));
  }
  return linear(tape, concat_cols(tape, heads), wo, bo);
}

inline Tensor multi_head_causal_attention(GradTape& tape, const Tensor& x, const Tensor& wq,
                                          const Tensor& bq, const Tensor& wk, const Tensor& bk,
                                          const Tensor& wv, const Tensor& bv, const Tensor& wo,
                                          const Tensor& bo, int64_t n_heads) {
  return multi_head_self_attention(tape, x, wq, bq, wk, bk, wv, bv, wo, bo, n_heads, /*causal=*/true);
}

enum class Reduction { sum, token_mean };

// Numerically stabilized -log softmax over target indices. Positions whose
// weight is zero are skipped entirely and their target id is not validated,
// which lets callers mark positions that have no next token.
inline Tensor softmax_cross_entropy(GradTape& tape, const Tensor& logits, const std::vector<int>& targets,
                                    Reduction reduction = Reduction::sum,
                                    const std::vector<double>* weights = nullptr) {
  check_2d(logits, "softmax_cross_entropy");
  int64_t l = logits.rows(), v = logits.cols();
  if (static_cast<int64_t>(targets.size()) != l)
    fail(ErrorKind::shape, "softmax_cross_entropy: ", targets.size(), " targets for ", l, " logit rows");
  if (weights && static_cast<int64_t>(weights->size()) != l)
    fail(ErrorKind::shape, "softmax_cross_entropy: ", weights->size(), " weights for ", l, " logit rows");
  double weight_total = 0.0;
  for (int64_t i = 0; i < l; ++i) {
    double wi = weights ? (*weights)[i] : 1.0;
    if (wi == 0.0) continue;
    weight_total += wi;
    if (targets[i] < 0 || targets[i] >= v)
      fail(ErrorKind::index, "softmax_cross_entropy: target ", targets[i], " at row ", i,
           " outside vocabulary of ", v);
  }
  const auto& xv = logits.data();
  double total = 0.0;
  for (int64_t i = 0; i < l; ++i) {
    double wi = weights ? (*weights)[i] : 1.0;
    if (wi == 0.0) continue;
    double mx = xv[i * v];
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, xv[i * v + j]);
    double denom = 0.0;
    for (int64_t j = 0; j < v; ++j) denom += std::exp(xv[i * v + j] - mx);
    double lse = mx + std::log(denom);
    total += wi * (lse - xv[i * v + targets[i]]);
  }
  // Empty mask: the sum over zero positions is exactly zero.
  double norm = 1.0;
  if (reduction == Reduction::token_mean) norm = weight_total > 0.0 ? 1.0 / weight_total : 0.0;
  Tensor out = Tensor::scalar(total * norm);
  if (detail::want_grad(tape, {logits})) {
    out.set_requires_grad(true);
    tape.record([xn = logits.node(), on = out.node(), targets, l, v, norm,
                 weights = weights ? *weights : std::vector<double>()] {
      if (on->grad.empty()) return;
      double seed = on->grad[0] * norm;
      xn->ensure_grad();
      for (int64_t i = 0; i < l; ++i) {
        double wi = weights.empty() ? 1.0 : weights[i];
        if (wi == 0.0) continue;
        double mx = xn->data[i * v];
        for (int64_t j = 1; j < v; ++j) mx = std::max(mx, xn->data[i * v + j]);
        double denom = 0.0;
        for (int64_t j = 0; j < v; ++j) denom += std::exp(xn->data[i * v + j] - mx);
        for (int64_t j = 0; j < v; ++j) {
          double p = std::exp(xn->data[i * v + j] - mx) / denom;
          xn->grad[i * v + j] += seed * wi * (p - (j == targets[i] ? 1.0 : 0.0));
        }
      }
    });
  }
  return out;
}

// Max relative error between taped gradients and central finite differences.
// `f` must return a scalar and be a pure function of (tape, x).
inline double grad_check(const std::function<Tensor(GradTape&, const Tensor&)>& f, Tensor x,
                         double eps = 1e-5) {
  if (eps <= 0.0) fail(ErrorKind::contract, "grad_check: eps must be positive, got ", eps);
  x.set_requires_grad(true);
  x.zero_grad();
  GradTape tape;
  Tensor out = f(tape, x);
  if (out.numel() != 1)
    fail(ErrorKind::contract, "grad_check: function returned shape ", shape_str(out.shape()),
         ", expected scalar");
  tape.backward(out);
  std::vector<double> analytic = x.grad();
  if (analytic.empty()) analytic.assign(x.data().size(), 0.0);

  GradTape off(false);
  double worst = 0.0;
  for (size_t i = 0; i < x.data().size(); ++i) {
    double saved = x.data()[i];
    x.data()[i] = saved + eps;
    double up = f(off, x).item();
    x.data()[i] = saved - eps;
    double down = f(off, x).item();
    x.data()[i] = saved;
    double numeric = (up - down) / (2.0 * eps);
    double rel = std::abs(analytic[i] - numeric) / (std::abs(analytic[i]) + std::abs(numeric) + 1e-12);
    worst = std::max(worst, rel);
  }
  return worst;
}

inline int argmax_row(const Tensor& t, int64_t row) {
  check_2d(t, "argmax_row");
  int64_t c = t.cols();
  int best = 0;
  double best_v = t.at(row, 0);
  for (int64_t j = 1; j < c; ++j) {
    if (t.at(row, j) > best_v) {  // ties keep the lowest index
      best_v = t.at(row, j);
      best = static_cast<int>(j);
    }
  }
  return best;
}

}  // namespace fuselm
