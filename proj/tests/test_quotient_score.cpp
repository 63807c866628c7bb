#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "qdiff/heat_kernel.hpp"
#include "qdiff/quotient_score.hpp"

using namespace qdiff;

namespace {
PointCloud line(std::vector<double> v) {
  std::vector<std::vector<double>> pts;
  for (double x : v) pts.push_back({x});
  return PointCloud::from_points(pts);
}

PermDistribution random_exact_distribution(std::size_t n, Rng& rng) {
  PermDistribution r;
  r.mode = PermDistribution::Mode::exact;
  r.support = oracle::brute_force_permutations(n);
  double z = 0.0;
  std::vector<double> w;
  for (std::size_t k = 0; k < r.support.size(); ++k) {
    w.push_back(-std::log(rng.uniform() + 1e-12));
    z += w.back();
  }
  for (double v : w) r.log_weights.push_back(std::log(v / z));
  return r;
}
}  // namespace

TEST(PerPermScore, Examples) {
  const auto x = line({0.5, 2});
  const auto zero = per_perm_score(Permutation::identity(2), x, x, 0.3);
  for (double v : zero.flat()) EXPECT_EQ(v, 0.0);
  EXPECT_DOUBLE_EQ(per_perm_score(Permutation::identity(1), line({3}), line({1}), 0.5)(0, 0), 2.0);
  EXPECT_THROW(per_perm_score(Permutation::identity(2), x, x, 0.0), DomainError);
}

TEST(PerPermScore, MatchesFiniteDifferencesOfLogWeight) {
  Rng rng({71});
  const auto x = oracle::random_cloud(4, 3, rng), y = oracle::random_cloud(4, 3, rng);
  const auto s = oracle::random_permutation(4, rng);
  const auto score = per_perm_score(s, x, y, 0.7);
  const auto fd = oracle::central_gradient([&](const PointCloud& yy) { return log_weight(s, x, yy, 0.7); }, y, 1e-5);
  for (std::size_t q = 0; q < fd.size(); ++q) EXPECT_NEAR(score.flat()[q], fd[q], 1e-5);
}

TEST(SymmetrizedScore, SinglePointIsEuclidean) {
  const auto x = PointCloud::from_points({{1, 2}}), y = PointCloud::from_points({{0, 0.5}});
  const auto s = symmetrized_score_exact(x, y, 0.25);
  EXPECT_DOUBLE_EQ(s(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(s(0, 1), 3.0);
}

TEST(SymmetrizedScore, LargeTimePullsTowardMean) {
  Rng rng({72});
  const auto x = oracle::random_cloud(4, 2, rng), y = oracle::random_cloud(4, 2, rng);
  const double t = 1e8;
  // uniform-posterior limit by enumeration
  ScoreVector ref(4, 2);
  const auto perms = oracle::brute_force_permutations(4);
  for (const auto& p : perms) {
    auto s = per_perm_score(p, x, y, t);
    s *= 1.0 / 24.0;
    ref += s;
  }
  const auto got = symmetrized_score_exact(x, y, t);
  for (std::size_t j = 0; j < 4; ++j)
    for (std::size_t k = 0; k < 2; ++k) {
      double mean = 0.0;
      for (std::size_t i = 0; i < 4; ++i) mean += x(i, k) / 4.0;
      EXPECT_NEAR(got(j, k), ref(j, k), 1e-14);
      EXPECT_NEAR(got(j, k) * 2.0 * t, mean - y(j, k), 1e-6);
    }
}

TEST(SymmetrizedScore, EqualsGradientOfQuotientLogKernel) {
  Rng rng({73});
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t n = 2 + rng.index(4);
    const std::size_t d = 1 + rng.index(3);
    const double t = std::exp(std::log(1e-2) + rng.uniform() * (std::log(5.0) - std::log(1e-2)));
    const auto x = oracle::random_cloud(n, d, rng);
    const auto y = oracle::heat_noised(x, t, rng);
    const auto s = symmetrized_score_exact(x, y, t);
    const auto fd = oracle::central_gradient(
        [&](const PointCloud& yy) { return quotient_log_heat_kernel_exact(x, yy, t).log_density; }, y, 1e-4);
    for (std::size_t q = 0; q < fd.size(); ++q) EXPECT_NEAR(s.flat()[q], fd[q], 1e-5) << "n=" << n << " t=" << t;
  }
}

TEST(SymmetrizedScore, EquivariantInYInvariantInX) {
  Rng rng({74});
  const auto x = oracle::random_cloud(3, 2, rng), y = oracle::random_cloud(3, 2, rng);
  const auto base = symmetrized_score_exact(x, y, 0.4);
  for (const auto& s : oracle::brute_force_permutations(3)) {
    EXPECT_LT(max_abs_difference(symmetrized_score_exact(x, apply(s, y), 0.4), apply(s, base)), 1e-12);
    EXPECT_LT(max_abs_difference(symmetrized_score_exact(apply(s, x), y, 0.4), base), 1e-12);
  }
}

TEST(SymmetrizedScore, CapacityError) {
  const PointCloud x(10, 1);
  EXPECT_THROW(symmetrized_score_exact(x, x, 1.0), CapacityError);
}

TEST(McmcScore, SinglePointExactRegardlessOfConfig) {
  const auto x = line({3}), y = line({1});
  McmcConfig cfg;
  cfg.samples = 3;
  EXPECT_DOUBLE_EQ(symmetrized_score_mcmc(x, y, 0.5, cfg).score(0, 0), 2.0);
}

TEST(McmcScore, ConcentratedPosteriorMatchesAssignmentScore) {
  const auto x = PointCloud::from_points({{0, 0}, {2, 0}, {0, 2}, {2, 2}, {4, 1}});
  Rng rng({75});
  const auto y = oracle::heat_noised(x, 1e-3, rng);
  McmcConfig cfg;
  cfg.samples = 1;
  cfg.seed = RngSeed{5};
  const auto mc = symmetrized_score_mcmc(x, y, 1e-3, cfg).score;
  EXPECT_LT(max_abs_difference(mc, per_perm_score(Permutation::identity(5), x, y, 1e-3)), 1e-8);
  EXPECT_LT(max_abs_difference(mc, symmetrized_score_exact(x, y, 1e-3)), 1e-8);
}

TEST(McmcScore, ErrorShrinksWithSamples) {
  Rng rng({76});
  const auto x = oracle::random_cloud(5, 2, rng);
  const auto y = oracle::heat_noised(x, 0.5, rng);
  const auto exact = symmetrized_score_exact(x, y, 0.5);
  auto mean_err = [&](std::size_t k) {
    double e = 0.0;
    for (int rep = 0; rep < 100; ++rep) {
      McmcConfig cfg;
      cfg.samples = k;
      cfg.seed = derive_seed(RngSeed{k}, rep);
      e += l2_distance(symmetrized_score_mcmc(x, y, 0.5, cfg).score, exact);
    }
    return e / 100.0;
  };
  EXPECT_LT(mean_err(256), 0.5 * mean_err(16));
}

TEST(Elbo, PosteriorHasZeroGap) {
  Rng rng({77});
  const auto x = oracle::random_cloud(4, 2, rng), y = oracle::random_cloud(4, 2, rng);
  const auto rep = elbo(posterior_exact(x, y, 0.5), x, y, 0.5);
  EXPECT_NEAR(rep.kl, 0.0, 1e-10);
  EXPECT_NEAR(rep.elbo, rep.log_evidence, 1e-10);
}

TEST(Elbo, UniformDistributionByEnumeration) {
  Rng rng({78});
  const auto x = oracle::random_cloud(3, 2, rng), y = oracle::random_cloud(3, 2, rng);
  PermDistribution r;
  r.support = oracle::brute_force_permutations(3);
  r.log_weights.assign(6, -std::log(6.0));
  double mean_i = 0.0, lse_terms = 0.0;
  for (const auto& s : r.support) {
    const double i = -oracle::permuted_distance_sq(x, y, s) / (4 * 0.5);
    mean_i += i / 6.0;
    lse_terms += std::exp(i);
  }
  const auto rep = elbo(r, x, y, 0.5);
  EXPECT_NEAR(rep.elbo, mean_i + std::log(6.0), 1e-12);
  EXPECT_NEAR(rep.log_evidence, std::log(lse_terms), 1e-12);
  EXPECT_NEAR(rep.kl, std::log(lse_terms) - mean_i - std::log(6.0), 1e-12);
}

TEST(Elbo, PointMassOnArgmax) {
  Rng rng({79});
  const auto x = oracle::random_cloud(3, 1, rng), y = oracle::random_cloud(3, 1, rng);
  PermDistribution r;
  r.support = oracle::brute_force_permutations(3);
  std::vector<double> iv;
  for (const auto& s : r.support) iv.push_back(-oracle::permuted_distance_sq(x, y, s) / 2.0);
  const std::size_t best = std::max_element(iv.begin(), iv.end()) - iv.begin();
  for (std::size_t k = 0; k < 6; ++k) r.log_weights.push_back(k == best ? 0.0 : -INFINITY);
  const auto rep = elbo(r, x, y, 0.5);
  EXPECT_NEAR(rep.elbo, iv[best], 1e-12);
  EXPECT_NEAR(rep.kl, log_sum_exp(iv) - iv[best], 1e-12);
  EXPECT_GE(rep.kl, 0.0);
}

TEST(Elbo, DecompositionAndJensenForRandomDistributions) {
  Rng rng({80});
  const auto x = oracle::random_cloud(4, 2, rng), y = oracle::random_cloud(4, 2, rng);
  for (int rep = 0; rep < 50; ++rep) {
    const auto r = random_exact_distribution(4, rng);
    const auto e = elbo(r, x, y, 0.3);
    EXPECT_LT(elbo_decomposition_check(r, x, y, 0.3), 1e-10);
    EXPECT_GE(e.kl, 0.0);
    EXPECT_LE(e.elbo, e.log_evidence);
  }
}

TEST(Elbo, RejectsEmpiricalAndPartialDistributions) {
  const auto x = line({0, 1});
  McmcConfig cfg;
  cfg.samples = 4;
  EXPECT_THROW(elbo(mcmc_sample(x, x, 0.5, cfg).distribution, x, x, 0.5), DomainError);
  PermDistribution partial;
  partial.support = {Permutation::identity(2)};
  partial.log_weights = {0.0};
  EXPECT_THROW(elbo(partial, x, x, 0.5), DomainError);
}
