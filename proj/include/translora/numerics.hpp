#pragma once

// Dense row-major matrices, probability helpers, Adam, the linear schedule and
// the splitmix64 random stream. Everything here is deterministic: summations
// run in a fixed index order so results are reproducible bit for bit.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "translora/errors.hpp"

namespace translora {

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), values_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
      : rows_(rows), cols_(cols), values_(std::move(values)) {
    if (values_.size() != rows_ * cols_) {
      throw DimensionMismatch("value count " + std::to_string(values_.size()) +
                              " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return values_.size(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return values_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return values_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) noexcept { return {values_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {values_.data() + r * cols_, cols_};
  }

  double* data() noexcept { return values_.data(); }
  const double* data() const noexcept { return values_.data(); }
  std::vector<double>& values() noexcept { return values_; }
  const std::vector<double>& values() const noexcept { return values_; }

  void fill(double v) { std::fill(values_.begin(), values_.end(), v); }

  // Keeps the allocation when shrinking; contents are unspecified afterwards.
  void reshape(std::size_t rows, std::size_t cols) {
    rows_ = rows;
    cols_ = cols;
    values_.resize(rows * cols);
  }

  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

inline bool all_finite(std::span<const double> xs) {
  for (double x : xs) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

inline double dot(const double* a, const double* b, std::size_t n) noexcept {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

inline void axpy(double alpha, const double* x, double* y, std::size_t n) noexcept {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

namespace kernels {

// out[rows x n] = a[rows x k] * b[k x n], i-k-j order (each output row is
// accumulated over k ascending, independent of every other row).
inline void matmul(const double* a, const double* b, double* out, std::size_t rows,
                   std::size_t k, std::size_t n) noexcept {
  for (std::size_t i = 0; i < rows; ++i) {
    double* o = out + i * n;
    std::fill(o, o + n, 0.0);
    const double* ai = a + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double s = ai[kk];
      if (s != 0.0) axpy(s, b + kk * n, o, n);
    }
  }
}

// acc[n x m] += g^T x  with g: rows x n, x: rows x m.
inline void accumulate_tn(const double* g, const double* x, double* acc, std::size_t rows,
                          std::size_t n, std::size_t m) noexcept {
  for (std::size_t i = 0; i < rows; ++i) {
    const double* gi = g + i * n;
    const double* xi = x + i * m;
    for (std::size_t o = 0; o < n; ++o) {
      if (gi[o] != 0.0) axpy(gi[o], xi, acc + o * m, m);
    }
  }
}

}  // namespace kernels

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionMismatch("matmul " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                            " by " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  Matrix out(a.rows(), b.cols());
  kernels::matmul(a.data(), b.data(), out.data(), a.rows(), a.cols(), b.cols());
  return out;
}

// ---------------------------------------------------------------------------
// Probability helpers

inline std::vector<double> softmax(std::span<const double> logits, double temperature = 1.0) {
  if (!(temperature > 0.0)) throw InvalidTemperature("temperature must be > 0");
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : logits) mx = std::max(mx, x);
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp((logits[i] - mx) / temperature);
    sum += out[i];
  }
  for (double& p : out) p /= sum;
  return out;
}

inline double log_sum_exp(std::span<const double> xs) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : xs) mx = std::max(mx, x);
  double s = 0.0;
  for (double x : xs) s += std::exp(x - mx);
  return mx + std::log(s);
}

inline double entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

// -sum_i t_i log softmax(logits)_i
inline double soft_cross_entropy(std::span<const double> target_probs,
                                 std::span<const double> logits) {
  if (target_probs.size() != logits.size()) {
    throw LengthMismatch("target has " + std::to_string(target_probs.size()) +
                         " entries, logits " + std::to_string(logits.size()));
  }
  const double lse = log_sum_exp(logits);
  double loss = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (target_probs[i] != 0.0) loss -= target_probs[i] * (logits[i] - lse);
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamState {
  std::size_t step = 0;
  std::vector<double> m;
  std::vector<double> v;

  AdamState() = default;
  explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}
};

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction and zero weight decay.
inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
                      double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
  if (params.size() != grads.size() || state.m.size() != params.size() ||
      state.v.size() != params.size()) {
    throw LengthMismatch("adam buffers disagree: params " + std::to_string(params.size()) +
                         ", grads " + std::to_string(grads.size()) + ", state " +
                         std::to_string(state.m.size()));
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(beta1, t);
  const double c2 = 1.0 - std::pow(beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
    state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

inline double linear_lr(double base_lr, std::size_t step, std::size_t total_steps) {
  if (total_steps < 1 || step > total_steps) {
    throw StepOutOfRange("step " + std::to_string(step) + " outside [0, " +
                         std::to_string(total_steps) + "]");
  }
  return base_lr * (1.0 - static_cast<double>(step) / static_cast<double>(total_steps));
}

// ---------------------------------------------------------------------------
// splitmix64

inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

inline constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

struct RngState {
  std::uint64_t state = 0;
  std::uint64_t stream_id = 0;

  friend bool operator==(const RngState&, const RngState&) = default;
};

inline std::uint64_t rng_next_u64(RngState& s) noexcept {
  s.state += kGolden;
  return mix64(s.state);
}

inline double rng_next_uniform(RngState& s) noexcept {
  return static_cast<double>(rng_next_u64(s) >> 11) * 0x1.0p-53;
}

// Independent child stream; the parent is not advanced.
inline RngState rng_fork(const RngState& s, std::uint64_t tag) noexcept {
  return RngState{mix64(s.state ^ mix64(tag * kGolden + s.stream_id + 1)), tag};
}

inline std::uint64_t fnv1a64(std::string_view bytes) noexcept {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline RngState rng_fork(const RngState& s, std::string_view tag) noexcept { return rng_fork(s, fnv1a64(tag)); }

inline std::size_t rng_below(RngState& s, std::size_t n) noexcept {
  return static_cast<std::size_t>(rng_next_uniform(s) * static_cast<double>(n));
}

inline std::size_t rng_categorical(RngState& s, std::span<const double> probs) {
  double total = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0)) throw InvalidDistribution("negative or NaN probability");
    total += p;
  }
  if (probs.empty() || std::abs(total - 1.0) > 1e-9) {
    throw InvalidDistribution("probabilities sum to " + std::to_string(total));
  }
  const double u = rng_next_uniform(s);
  double cdf = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] > 0.0) last_positive = i;
    cdf += probs[i];
    if (u < cdf) return i;
  }
  return last_positive;
}

// Box-Muller, one draw per call.
inline double rng_normal(RngState& s, double mean = 0.0, double stddev = 1.0) {
  double u1 = rng_next_uniform(s);
  const double u2 = rng_next_uniform(s);
  if (u1 < 1e-300) u1 = 1e-300;
  return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

template <typename T>
void rng_shuffle(RngState& s, std::vector<T>& xs) {
  for (std::size_t i = xs.size(); i > 1; --i) {
    const std::size_t j = rng_below(s, i);
    std::swap(xs[i - 1], xs[j]);
  }
}

}  // namespace translora
