#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace fsrc {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input whose geometry makes the operation undefined (e.g. a zero-norm feature).
class DegenerateInput : public Error {
 public:
  using Error::Error;
};

class PreconditionError : public Error {
 public:
  using Error::Error;
};

/// Raised when training produces a non-finite loss or gradient.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

/// Dense row-major matrix of doubles.
class Tensor2 {
 public:
  Tensor2() = default;

  Tensor2(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  Tensor2(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw PreconditionError("Tensor2: data length " + std::to_string(data_.size()) +
                              " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }
    if (!all_finite(data_)) throw PreconditionError("Tensor2: non-finite entry on construction");
  }

  static Tensor2 from_rows(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) return {};
    const std::size_t c = rows.front().size();
    std::vector<double> flat;
    flat.reserve(rows.size() * c);
    for (const auto& r : rows) {
      if (r.size() != c) throw PreconditionError("Tensor2::from_rows: ragged rows");
      flat.insert(flat.end(), r.begin(), r.end());
    }
    return Tensor2(rows.size(), c, std::move(flat));
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor2& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  friend bool operator==(const Tensor2&, const Tensor2&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// C = A * B
inline Tensor2 matmul(const Tensor2& a, const Tensor2& b) {
  if (a.cols() != b.rows()) throw PreconditionError("matmul: inner dimension mismatch");
  Tensor2 c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto ci = c.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto bk = b.row(k);
      for (std::size_t j = 0; j < ci.size(); ++j) ci[j] += aik * bk[j];
    }
  }
  return c;
}

/// C += A^T * B
inline void add_matmul_at_b(const Tensor2& a, const Tensor2& b, Tensor2& c) {
  if (a.rows() != b.rows() || c.rows() != a.cols() || c.cols() != b.cols()) {
    throw PreconditionError("add_matmul_at_b: shape mismatch");
  }
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto ar = a.row(r);
    auto br = b.row(r);
    for (std::size_t i = 0; i < ar.size(); ++i) {
      const double ari = ar[i];
      if (ari == 0.0) continue;
      auto ci = c.row(i);
      for (std::size_t j = 0; j < br.size(); ++j) ci[j] += ari * br[j];
    }
  }
}

/// C = A * B^T
inline Tensor2 matmul_a_bt(const Tensor2& a, const Tensor2& b) {
  if (a.cols() != b.cols()) throw PreconditionError("matmul_a_bt: shape mismatch");
  Tensor2 c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto ai = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      auto bj = b.row(j);
      double s = 0.0;
      for (std::size_t k = 0; k < ai.size(); ++k) s += ai[k] * bj[k];
      c(i, j) = s;
    }
  }
  return c;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> v) { return std::sqrt(dot(v, v)); }

/// Trainable tensor with its gradient accumulator and momentum buffer.
struct Param {
  Tensor2 value;
  Tensor2 grad;
  Tensor2 momentum_buf;

  Param() = default;
  explicit Param(Tensor2 v)
      : value(std::move(v)), grad(value.rows(), value.cols()), momentum_buf(value.rows(), value.cols()) {}

  void zero_grad() { grad.fill(0.0); }
};

// ---------------------------------------------------------------------------
// Normalization and similarity

inline constexpr double kMinNorm = 1e-12;

inline std::vector<double> l2_normalize(std::span<const double> v) {
  const double n = norm2(v);
  if (!(n > kMinNorm)) {
    throw DegenerateInput("l2_normalize: input norm " + std::to_string(n) + " is below 1e-12");
  }
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / n;
  return out;
}

/// Vector-Jacobian product of l2_normalize: dv = (dy - y (y . dy)) / ||v||.
inline std::vector<double> l2_normalize_backward(std::span<const double> v, std::span<const double> dy) {
  const double n = norm2(v);
  if (!(n > kMinNorm)) throw DegenerateInput("l2_normalize_backward: near-zero input");
  std::vector<double> y(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) y[i] = v[i] / n;
  const double proj = dot(y, dy);
  std::vector<double> dv(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) dv[i] = (dy[i] - y[i] * proj) / n;
  return dv;
}

/// Full Jacobian d(v/||v||)/dv, entry (i, j) = dy_i / dv_j.
inline Tensor2 l2_normalize_jacobian(std::span<const double> v) {
  const double n = norm2(v);
  if (!(n > kMinNorm)) throw DegenerateInput("l2_normalize_jacobian: near-zero input");
  Tensor2 j(v.size(), v.size());
  for (std::size_t a = 0; a < v.size(); ++a) {
    for (std::size_t b = 0; b < v.size(); ++b) {
      j(a, b) = ((a == b ? 1.0 : 0.0) - v[a] * v[b] / (n * n)) / n;
    }
  }
  return j;
}

/// Pairwise dot products of unit rows. Each pair is computed once and mirrored.
inline Tensor2 cosine_sim_matrix(const Tensor2& z) {
  for (std::size_t i = 0; i < z.rows(); ++i) {
    const double n = norm2(z.row(i));
    if (std::abs(n - 1.0) > 1e-9) {
      throw PreconditionError("cosine_sim_matrix: row " + std::to_string(i) + " has norm " +
                              std::to_string(n));
    }
  }
  Tensor2 s(z.rows(), z.rows());
  for (std::size_t i = 0; i < z.rows(); ++i) {
    for (std::size_t j = i; j < z.rows(); ++j) {
      const double d = std::clamp(dot(z.row(i), z.row(j)), -1.0, 1.0);
      s(i, j) = d;
      s(j, i) = d;
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Losses

struct LossGrad {
  double loss = 0.0;
  std::vector<double> grad;
};

struct ScalarLossGrad {
  double loss = 0.0;
  double grad = 0.0;
};

inline double log_sum_exp(std::span<const double> x) {
  const double m = *std::max_element(x.begin(), x.end());
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  return m + std::log(s);
}

inline LossGrad softmax_cross_entropy(std::span<const double> logits, std::size_t label) {
  if (label >= logits.size()) {
    throw PreconditionError("softmax_cross_entropy: label " + std::to_string(label) + " out of range for " +
                            std::to_string(logits.size()) + " classes");
  }
  const double lse = log_sum_exp(logits);
  LossGrad out;
  out.loss = lse - logits[label];
  out.grad.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out.grad[i] = std::exp(logits[i] - lse);
  out.grad[label] -= 1.0;
  return out;
}

/// Summed smooth-L1 (beta = 1). Gradient w.r.t. pred.
inline LossGrad smooth_l1(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size()) throw PreconditionError("smooth_l1: size mismatch");
  if (!all_finite(pred) || !all_finite(target)) throw PreconditionError("smooth_l1: non-finite input");
  LossGrad out;
  out.grad.resize(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = pred[i] - target[i];
    if (std::abs(e) < 1.0) {
      out.loss += 0.5 * e * e;
      out.grad[i] = e;
    } else {
      out.loss += std::abs(e) - 0.5;
      out.grad[i] = e > 0 ? 1.0 : -1.0;
    }
  }
  return out;
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// Logistic BCE on a logit: max(x,0) - x*y + log(1 + exp(-|x|)).
inline ScalarLossGrad binary_cross_entropy(double logit, int label) {
  if (!std::isfinite(logit)) throw PreconditionError("binary_cross_entropy: non-finite logit");
  const double y = label ? 1.0 : 0.0;
  ScalarLossGrad out;
  out.loss = std::max(logit, 0.0) - logit * y + std::log1p(std::exp(-std::abs(logit)));
  out.grad = sigmoid(logit) - y;
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer

struct SgdOptions {
  double lr = 0.001;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

/// buf <- momentum*buf + (grad + wd*value); value <- value - lr*buf; grads zeroed.
/// A non-finite gradient aborts the step before any parameter is touched.
inline void sgd_step(std::span<Param* const> params, const SgdOptions& opt) {
  for (std::size_t p = 0; p < params.size(); ++p) {
    const auto g = params[p]->grad.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!std::isfinite(g[i])) {
        std::ostringstream msg;
        msg << "sgd_step: non-finite gradient in parameter block " << p << " at flat index " << i
            << " (value " << g[i] << ")";
        throw DivergenceError(msg.str());
      }
    }
  }
  for (Param* p : params) {
    auto v = p->value.data();
    auto g = p->grad.data();
    auto b = p->momentum_buf.data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      b[i] = opt.momentum * b[i] + (g[i] + opt.weight_decay * v[i]);
      v[i] -= opt.lr * b[i];
    }
    p->zero_grad();
  }
}

// ---------------------------------------------------------------------------
// Gradient checking

using ScalarFn = std::function<double(std::span<const double>)>;

inline std::vector<double> central_difference(const ScalarFn& f, std::span<const double> x, double eps) {
  std::vector<double> xp(x.begin(), x.end());
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = xp[i];
    xp[i] = orig + eps;
    const double fp = f(xp);
    xp[i] = orig - eps;
    const double fm = f(xp);
    xp[i] = orig;
    out[i] = (fp - fm) / (2.0 * eps);
  }
  return out;
}

/// Max over coordinates of |analytic - numeric| / max(|numeric|, floor).
/// The floor keeps coordinates whose true derivative is ~0 from dominating.
inline double finite_diff_check(const ScalarFn& f, std::span<const double> x, std::span<const double> analytic,
                                double eps = 1e-5, double floor = 1e-4) {
  if (analytic.size() != x.size()) throw PreconditionError("finite_diff_check: gradient size mismatch");
  const auto numeric = central_difference(f, x, eps);
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double err = std::abs(analytic[i] - numeric[i]) / std::max(std::abs(numeric[i]), floor);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace fsrc
