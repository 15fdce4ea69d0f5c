#pragma once

// Distribution diagnostics: mean-pooled model embeddings, the unbiased RBF
// MMD^2 two-sample statistic, and a 2-D PCA projection.

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "translora/model.hpp"
#include "translora/parallel.hpp"
#include "translora/tokenizer.hpp"

namespace translora {

using Embedding = std::vector<double>;

// Mean over token positions of the final-normalized hidden states.
inline Embedding embed(const ForwardContext& ctx, std::string_view x) {
  const TokenSeq ids = tokenize(x);
  if (ids.empty()) throw ShapeMismatch("cannot embed empty text");
  if (ctx.prefix_len() + ids.size() > ctx.config().max_len) throw PromptTooLong("text exceeds max_len");
  const Trace tr = forward_trace(ctx, ids, ctx.prefix_len() + ids.size());
  const std::size_t d = ctx.config().d_model;
  Embedding out(d, 0.0);
  for (std::size_t t = ctx.prefix_len(); t < tr.len; ++t) {
    for (std::size_t c = 0; c < d; ++c) out[c] += tr.nf(t, c);
  }
  for (double& v : out) v /= static_cast<double>(ids.size());
  return out;
}

inline std::vector<Embedding> embed_all(const ForwardContext& ctx, const std::vector<std::string>& xs) {
  std::vector<Embedding> out(xs.size());
  parallel_for(xs.size(), [&](std::size_t i) { out[i] = embed(ctx, xs[i]); });
  return out;
}

inline double squared_distance(const Embedding& a, const Embedding& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

struct MmdResult {
  double mmd2 = 0.0;  // unbiased; small negative values are legitimate
  double bandwidth = 0.0;
  std::size_t n_x = 0, n_y = 0;
};

// Median pairwise Euclidean distance over the pooled sample (1 if degenerate).
inline double median_heuristic(const std::vector<Embedding>& x, const std::vector<Embedding>& y) {
  std::vector<const Embedding*> all;
  for (const auto& v : x) all.push_back(&v);
  for (const auto& v : y) all.push_back(&v);
  std::vector<double> dist;
  dist.reserve(all.size() * (all.size() - 1) / 2);
  for (std::size_t i = 0; i < all.size(); ++i)
    for (std::size_t j = i + 1; j < all.size(); ++j) dist.push_back(std::sqrt(squared_distance(*all[i], *all[j])));
  if (dist.empty()) return 1.0;
  const std::size_t mid = dist.size() / 2;
  std::nth_element(dist.begin(), dist.begin() + static_cast<long>(mid), dist.end());
  double med = dist[mid];
  if (dist.size() % 2 == 0) {
    med = 0.5 * (med + *std::max_element(dist.begin(), dist.begin() + static_cast<long>(mid)));
  }
  return med > 0.0 ? med : 1.0;
}

inline MmdResult mmd2_unbiased(const std::vector<Embedding>& x, const std::vector<Embedding>& y,
                               std::optional<double> bandwidth = std::nullopt) {
  if (x.size() < 2 || y.size() < 2) throw TooFewSamples("MMD needs at least two samples per set");
  const std::size_t d = x[0].size();
  for (const auto* set : {&x, &y})
    for (const auto& v : *set)
      if (v.size() != d) throw DimMismatch("embedding dimensions differ");
  const double sigma = bandwidth ? *bandwidth : median_heuristic(x, y);
  if (!(sigma > 0.0)) throw ConfigError("bandwidth must be > 0");
  const double inv = 1.0 / (2.0 * sigma * sigma);
  auto k = [inv](const Embedding& a, const Embedding& b) { return std::exp(-squared_distance(a, b) * inv); };
  auto within = [&](const std::vector<Embedding>& s) {
    double sum = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i)
      for (std::size_t j = i + 1; j < s.size(); ++j) sum += 2.0 * k(s[i], s[j]);
    return sum / static_cast<double>(s.size() * (s.size() - 1));
  };
  double cross = 0.0;
  for (const auto& a : x)
    for (const auto& b : y) cross += k(a, b);
  cross /= static_cast<double>(x.size() * y.size());
  return MmdResult{within(x) + within(y) - 2.0 * cross, sigma, x.size(), y.size()};
}

struct Pca2d {
  std::vector<std::array<double, 2>> projections;
  std::array<std::vector<double>, 2> components;
  std::array<double, 2> explained_variance{};
};

// Symmetric eigendecomposition by cyclic Jacobi rotations. Returns
// eigenvalues sorted descending and the matching eigenvectors as rows.
inline std::pair<std::vector<double>, Matrix> jacobi_eigen(Matrix a, std::size_t max_sweeps = 100) {
  const std::size_t n = a.rows();
  Matrix v = Matrix::identity(n);
  for (std::size_t sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (a(p, q) == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&a](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });
  std::vector<double> values(n);
  Matrix vectors(n, n);
  for (std::size_t r = 0; r < n; ++r) {
    values[r] = a(order[r], order[r]);
    for (std::size_t k = 0; k < n; ++k) vectors(r, k) = v(k, order[r]);
  }
  return {values, vectors};
}

// Sample covariance uses the 1/(n-1) normalization.
inline Matrix covariance(const std::vector<Embedding>& xs, std::vector<double>* mean_out = nullptr) {
  const std::size_t n = xs.size(), d = xs[0].size();
  std::vector<double> mean(d, 0.0);
  for (const auto& x : xs)
    for (std::size_t c = 0; c < d; ++c) mean[c] += x[c] / static_cast<double>(n);
  Matrix cov(d, d);
  for (const auto& x : xs)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) cov(i, j) += (x[i] - mean[i]) * (x[j] - mean[j]);
  for (double& v : cov.values()) v /= static_cast<double>(n - 1);
  if (mean_out) *mean_out = std::move(mean);
  return cov;
}

inline Pca2d pca2d(const std::vector<Embedding>& xs) {
  if (xs.size() < 3) throw TooFewSamples("PCA needs at least three points");
  const std::size_t d = xs[0].size();
  for (const auto& x : xs)
    if (x.size() != d) throw DimMismatch("embedding dimensions differ");
  if (d < 2) throw DimMismatch("PCA to two dimensions needs d >= 2");
  std::vector<double> mean;
  const Matrix cov = covariance(xs, &mean);
  const auto [values, vectors] = jacobi_eigen(cov);
  Pca2d out;
  for (std::size_t r = 0; r < 2; ++r) {
    std::vector<double> comp(vectors.row(r).begin(), vectors.row(r).end());
    // Sign convention: first entry with non-negligible magnitude is positive.
    for (double c : comp) {
      if (std::abs(c) > 1e-12) {
        if (c < 0) for (double& x : comp) x = -x;
        break;
      }
    }
    out.components[r] = std::move(comp);
    out.explained_variance[r] = std::max(0.0, values[r]);
  }
  for (const auto& x : xs) {
    std::array<double, 2> p{};
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t c = 0; c < d; ++c) p[r] += (x[c] - mean[c]) * out.components[r][c];
    out.projections.push_back(p);
  }
  return out;
}

inline std::string pca_csv(const Pca2d& pca, const std::vector<std::string>& labels) {
  std::ostringstream os;
  os.precision(17);
  os << "label,pc1,pc2\n";
  for (std::size_t i = 0; i < pca.projections.size(); ++i) {
    os << (i < labels.size() ? labels[i] : "") << ',' << pca.projections[i][0] << ',' << pca.projections[i][1]
       << '\n';
  }
  return os.str();
}

}  // namespace translora
