#include <gtest/gtest.h>

#include <cmath>

#include "grad_checks.hpp"
#include "translora/analysis.hpp"

using namespace translora;

namespace {

std::vector<Embedding> gaussian(std::size_t n, std::size_t d, double mean, RngState& rng) {
  std::vector<Embedding> out(n, Embedding(d));
  for (auto& v : out)
    for (double& x : v) x = mean + rng_normal(rng);
  return out;
}

// Direct transcription of the unbiased estimator over all ordered pairs.
double brute_mmd2(const std::vector<Embedding>& x, const std::vector<Embedding>& y, double sigma) {
  auto k = [sigma](const Embedding& a, const Embedding& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::exp(-s / (2 * sigma * sigma));
  };
  double xx = 0, yy = 0, xy = 0;
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < x.size(); ++j)
      if (i != j) xx += k(x[i], x[j]);
  for (std::size_t i = 0; i < y.size(); ++i)
    for (std::size_t j = 0; j < y.size(); ++j)
      if (i != j) yy += k(y[i], y[j]);
  for (const auto& a : x)
    for (const auto& b : y) xy += k(a, b);
  const double m = static_cast<double>(x.size()), n = static_cast<double>(y.size());
  return xx / (m * (m - 1)) + yy / (n * (n - 1)) - 2 * xy / (m * n);
}

double brute_median_distance(const std::vector<Embedding>& x, const std::vector<Embedding>& y) {
  std::vector<Embedding> all = x;
  all.insert(all.end(), y.begin(), y.end());
  std::vector<double> d;
  for (std::size_t i = 0; i < all.size(); ++i)
    for (std::size_t j = i + 1; j < all.size(); ++j) d.push_back(std::sqrt(squared_distance(all[i], all[j])));
  std::sort(d.begin(), d.end());
  return d.size() % 2 ? d[d.size() / 2] : 0.5 * (d[d.size() / 2 - 1] + d[d.size() / 2]);
}

}  // namespace

TEST(Mmd, MatchesBruteForceOracle) {
  RngState rng{1, 0};
  const auto x = gaussian(13, 4, 0.0, rng);
  const auto y = gaussian(9, 4, 0.7, rng);
  for (double sigma : {0.5, 1.3, 4.0}) {
    EXPECT_NEAR(mmd2_unbiased(x, y, sigma).mmd2, brute_mmd2(x, y, sigma), 1e-12);
  }
  const MmdResult r = mmd2_unbiased(x, y);
  EXPECT_NEAR(r.bandwidth, brute_median_distance(x, y), 1e-12);
  EXPECT_NEAR(r.mmd2, brute_mmd2(x, y, r.bandwidth), 1e-12);
  EXPECT_EQ(r.n_x, 13u);
  EXPECT_EQ(r.n_y, 9u);
}

TEST(Mmd, SymmetricAndSeparatesShiftedGaussians) {
  RngState rng{2, 0};
  const auto x = gaussian(200, 1, 0.0, rng);
  const auto y = gaussian(200, 1, 5.0, rng);
  const auto z = gaussian(200, 1, 0.0, rng);
  EXPECT_NEAR(mmd2_unbiased(x, y).mmd2, mmd2_unbiased(y, x).mmd2, 1e-12);
  EXPECT_GT(mmd2_unbiased(x, y).mmd2, 0.5);
  EXPECT_LT(std::abs(mmd2_unbiased(x, z).mmd2), 0.05);
}

TEST(Mmd, Validation) {
  RngState rng{3, 0};
  const auto x = gaussian(5, 3, 0.0, rng);
  EXPECT_THROW(mmd2_unbiased({x[0]}, x), TooFewSamples);
  EXPECT_THROW(mmd2_unbiased(x, gaussian(5, 2, 0.0, rng)), DimMismatch);
  EXPECT_THROW(mmd2_unbiased(x, x, 0.0), ConfigError);
}

TEST(Pca, RankOneDataLiesOnFirstComponent) {
  const std::vector<double> dir{1.0, 2.0, -2.0};
  std::vector<Embedding> xs;
  for (int i = 0; i < 10; ++i) {
    const double t = i - 4.5;
    xs.push_back({1 + t * dir[0], -1 + t * dir[1], 3 + t * dir[2]});
  }
  const Pca2d p = pca2d(xs);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(p.components[0][c], dir[c] / 3.0, 1e-10);
  EXPECT_NEAR(p.explained_variance[1], 0.0, 1e-10);
  // Variance along the line: |dir|^2 * var(t) with the 1/(n-1) normalization.
  EXPECT_NEAR(p.explained_variance[0], 9.0 * 82.5 / 9.0, 1e-9);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    EXPECT_NEAR(p.projections[i][0], 3.0 * (static_cast<double>(i) - 4.5), 1e-9);
    EXPECT_NEAR(p.projections[i][1], 0.0, 1e-9);
  }
}

TEST(Pca, ComponentsOrthonormalAndEigenvaluesMatchCovariance) {
  RngState rng{4, 0};
  std::vector<Embedding> xs(40, Embedding(5));
  for (auto& v : xs)
    for (std::size_t c = 0; c < 5; ++c) v[c] = rng_normal(rng) * static_cast<double>(c + 1);
  const Pca2d p = pca2d(xs);
  const Matrix cov = covariance(xs);
  for (std::size_t r = 0; r < 2; ++r) {
    double norm = 0, cross = 0;
    for (std::size_t c = 0; c < 5; ++c) {
      norm += p.components[r][c] * p.components[r][c];
      cross += p.components[0][c] * p.components[1][c];
    }
    EXPECT_NEAR(norm, 1.0, 1e-10);
    EXPECT_NEAR(cross, 0.0, 1e-10);
    // Rayleigh quotient v^T C v equals the eigenvalue, and C v = lambda v.
    for (std::size_t i = 0; i < 5; ++i) {
      double cv = 0;
      for (std::size_t j = 0; j < 5; ++j) cv += cov(i, j) * p.components[r][j];
      EXPECT_NEAR(cv, p.explained_variance[r] * p.components[r][i], 1e-9);
    }
  }
  EXPECT_GE(p.explained_variance[0], p.explained_variance[1]);
  // The largest eigenvalue bounds every diagonal entry of the covariance.
  for (std::size_t i = 0; i < 5; ++i) EXPECT_GE(p.explained_variance[0] + 1e-12, cov(i, i));
}

TEST(Pca, SignConventionAndDeterminism) {
  RngState rng{5, 0};
  auto xs = gaussian(30, 4, 0.0, rng);
  const Pca2d a = pca2d(xs), b = pca2d(xs);
  EXPECT_EQ(a.projections, b.projections);
  for (const auto& comp : a.components) {
    for (double c : comp) {
      if (std::abs(c) > 1e-12) {
        EXPECT_GT(c, 0.0);
        break;
      }
    }
  }
  EXPECT_THROW(pca2d({{1.0, 2.0}, {3.0, 4.0}}), TooFewSamples);
  EXPECT_THROW(pca2d({{1.0}, {2.0}, {3.0}}), DimMismatch);
  EXPECT_EQ(pca_csv(a, {"x"}).substr(0, 14), "label,pc1,pc2\n");
}

TEST(Embed, MeanOfFinalNormedStates) {
  const ModelConfig cfg = gradcheck::tiny_config();
  const ModelParams p = gradcheck::random_model(cfg, 6);
  ForwardContext ctx(cfg, p);
  const Embedding e = embed(ctx, "True is");
  ASSERT_EQ(e.size(), cfg.d_model);
  const TokenSeq ids = tokenize("True is");
  const Trace tr = forward_trace(ctx, ids, ids.size());
  for (std::size_t c = 0; c < cfg.d_model; ++c) {
    double m = 0;
    for (std::size_t t = 0; t < ids.size(); ++t) m += tr.nf(t, c);
    EXPECT_NEAR(e[c], m / static_cast<double>(ids.size()), 1e-15);
  }
  EXPECT_EQ(embed_all(ctx, {"True is", "False is"})[0], e);
  EXPECT_THROW(embed(ctx, ""), ShapeMismatch);
  EXPECT_THROW(embed(ctx, std::string(30, 'a')), PromptTooLong);
}
