#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "oracles.hpp"
#include "qdiff/bench.hpp"

using namespace qdiff;

namespace {
DatasetSpec spec_of(DatasetKind kind, std::size_t items, std::size_t n, std::size_t d, double jitter,
                    std::uint64_t seed) {
  DatasetSpec s;
  s.kind = kind;
  s.n_items = items;
  s.n_points = n;
  s.dim = d;
  s.jitter = jitter;
  s.seed = RngSeed{seed};
  return s;
}

FeatureSet gaussian_features(std::size_t count, std::size_t dim, double shift, std::uint64_t seed) {
  Rng rng({seed});
  FeatureSet f(count, std::vector<double>(dim));
  for (auto& v : f)
    for (auto& c : v) c = shift + rng.normal();
  return f;
}

double brute_energy(const FeatureSet& a, const FeatureSet& b) {
  auto dist = [](const std::vector<double>& u, const std::vector<double>& v) {
    double s = 0.0;
    for (std::size_t k = 0; k < u.size(); ++k) s += (u[k] - v[k]) * (u[k] - v[k]);
    return std::sqrt(s);
  };
  double ab = 0, aa = 0, bb = 0;
  for (const auto& u : a)
    for (const auto& v : b) ab += dist(u, v);
  for (const auto& u : a)
    for (const auto& v : a) aa += dist(u, v);
  for (const auto& u : b)
    for (const auto& v : b) bb += dist(u, v);
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  return 2 * ab / (na * nb) - aa / (na * na) - bb / (nb * nb);
}
}  // namespace

TEST(SyntheticData, JitterFreeTemplateItemsEqualTemplate) {
  const auto spec = spec_of(DatasetKind::jittered_template, 20, 4, 3, 0.0, 1);
  const auto tmpl = dataset_template(spec);
  for (const auto& x : make_synthetic_dataset(spec)) EXPECT_EQ(x, tmpl);
}

TEST(SyntheticData, OutputsAreCanonical) {
  for (auto kind : {DatasetKind::gaussian_blobs, DatasetKind::ring, DatasetKind::jittered_template})
    for (const auto& x : make_synthetic_dataset(spec_of(kind, 30, 5, 2, 0.3, 2))) EXPECT_EQ(canonical(x), x);
}

TEST(SyntheticData, RingDistanceMultisetsAgree) {
  const auto items = make_synthetic_dataset(spec_of(DatasetKind::ring, 25, 4, 2, 0.0, 3));
  const std::vector<double> expect{std::sqrt(2.0), std::sqrt(2.0), std::sqrt(2.0), std::sqrt(2.0), 2.0, 2.0};
  for (const auto& x : items) {
    const auto dists = sorted_pairwise_distances(x);
    ASSERT_EQ(dists.size(), expect.size());
    for (std::size_t k = 0; k < dists.size(); ++k) EXPECT_NEAR(dists[k], expect[k], 1e-12);
  }
}

TEST(SyntheticData, BlobItemsScatterAroundFixedCenters) {
  const auto a = make_synthetic_dataset(spec_of(DatasetKind::gaussian_blobs, 400, 3, 2, 0.05, 4));
  // sorted distances concentrate around those of the centers
  std::vector<double> mean(3, 0.0);
  for (const auto& x : a) {
    const auto d = sorted_pairwise_distances(x);
    for (std::size_t k = 0; k < 3; ++k) mean[k] += d[k] / 400.0;
  }
  for (const auto& x : a) {
    const auto d = sorted_pairwise_distances(x);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(d[k], mean[k], 0.5);
  }
  EXPECT_GE(mean[0], 0.8);
}

TEST(SyntheticData, SeedAndSplitSemantics) {
  auto spec = spec_of(DatasetKind::jittered_template, 10, 3, 2, 0.1, 5);
  EXPECT_EQ(make_synthetic_dataset(spec), make_synthetic_dataset(spec));
  auto other = spec;
  other.split = 1;
  EXPECT_EQ(dataset_template(other), dataset_template(spec));
  EXPECT_NE(make_synthetic_dataset(other), make_synthetic_dataset(spec));
}

TEST(SyntheticData, Errors) {
  EXPECT_THROW(parse_dataset_kind("spiral"), DomainError);
  EXPECT_EQ(parse_dataset_kind("ring"), DatasetKind::ring);
  EXPECT_THROW(make_synthetic_dataset(spec_of(DatasetKind::ring, 3, 3, 1, 0.0, 6)), DimensionError);
  EXPECT_THROW(make_synthetic_dataset(spec_of(DatasetKind::ring, 0, 3, 2, 0.0, 6)), DomainError);
}

TEST(EnergyTest, MatchesBruteForceAndIsNonnegative) {
  const auto a = gaussian_features(40, 3, 0.0, 7), b = gaussian_features(50, 3, 0.4, 8);
  EXPECT_NEAR(energy_distance(a, b), brute_energy(a, b), 1e-12);
  EXPECT_GE(energy_distance(a, b), 0.0);
  EXPECT_NEAR(energy_distance(a, a), 0.0, 1e-12);
  // the pooled single-precision statistic used by the permutation test
  const auto test = energy_permutation_test(a, b, 10, RngSeed{9});
  EXPECT_NEAR(test.statistic, brute_energy(a, b), 1e-5);
}

TEST(EnergyTest, PermutationTestSeparatesLaws) {
  const auto same = energy_permutation_test(gaussian_features(150, 2, 0.0, 10), gaussian_features(150, 2, 0.0, 11),
                                            1000, RngSeed{12});
  EXPECT_GT(same.p_value, 0.01);
  const auto shifted = energy_permutation_test(gaussian_features(150, 2, 0.0, 13),
                                               gaussian_features(150, 2, 0.5, 14), 1000, RngSeed{15});
  EXPECT_LT(shifted.p_value, 0.01);
  for (const auto& r : {same, shifted}) {
    EXPECT_GT(r.p_value, 0.0);
    EXPECT_LE(r.p_value, 1.0);
  }
}

TEST(EnergyTest, SeededTestIsReproducible) {
  const auto a = gaussian_features(60, 2, 0.0, 16), b = gaussian_features(60, 2, 0.2, 17);
  const auto r1 = energy_permutation_test(a, b, 200, RngSeed{18}), r2 = energy_permutation_test(a, b, 200, RngSeed{18});
  EXPECT_EQ(r1.statistic, r2.statistic);
  EXPECT_EQ(r1.p_value, r2.p_value);
}

// canonicalize(forward(x0)) and canonicalize(forward(sigma(x0))) have the same law
TEST(QuotientLaw, ForwardSampleIsOrbitInvariantInLaw) {
  Rng rng({19});
  const auto x0 = oracle::random_cloud(3, 2, rng);
  const Permutation sigma(std::vector<std::size_t>{2, 0, 1});
  const auto xs = apply(sigma, x0);
  const double t = 0.3;
  FeatureSet a, b;
  for (std::size_t k = 0; k < 5000; ++k) {
    const auto ya = canonical(forward_sample(x0, t, derive_seed(RngSeed{20}, k)));
    const auto yb = canonical(forward_sample(xs, t, derive_seed(RngSeed{21}, k)));
    a.emplace_back(ya.flat().begin(), ya.flat().end());
    b.emplace_back(yb.flat().begin(), yb.flat().end());
  }
  EXPECT_GT(energy_permutation_test(a, b, 200, RngSeed{22}).p_value, 0.01);
  // the raw (uncanonicalized) draws differ in law
  FeatureSet c;
  for (std::size_t k = 0; k < 500; ++k) {
    const auto y = forward_sample(xs, t, derive_seed(RngSeed{23}, k));
    c.emplace_back(y.flat().begin(), y.flat().end());
  }
  FeatureSet d;
  for (std::size_t k = 0; k < 500; ++k) {
    const auto y = forward_sample(x0, t, derive_seed(RngSeed{24}, k));
    d.emplace_back(y.flat().begin(), y.flat().end());
  }
  EXPECT_LT(energy_permutation_test(c, d, 200, RngSeed{25}).p_value, 0.01);
}

TEST(EstimatorStudy, ErrorShrinksWithK) {
  EstimatorSpec spec;
  spec.k_grid = {1, 100};
  spec.replicates = 100;
  spec.seed = RngSeed{26};
  const auto s = run_estimator_study(spec);
  EXPECT_LT(s.median_error[1], s.median_error[0]);
  for (const auto& row : s.errors)
    for (double e : row) EXPECT_GE(e, 0.0);
}

TEST(EstimatorStudy, SlopeNearHalfOnDefaultInstance) {
  EstimatorSpec spec;
  spec.seed = RngSeed{27};
  const auto s = run_estimator_study(spec);
  RecordProperty("slope", std::to_string(s.slope));
  EXPECT_GE(s.slope, -0.65);
  EXPECT_LE(s.slope, -0.35);
  // Monte Carlo error dominates the finite-difference oracle floor (1e-5)
  EXPECT_GT(s.mean_error.back(), 100 * 1e-5);
}

TEST(EstimatorStudy, ConcentratedPosteriorIsExactAtOneSample) {
  EstimatorSpec spec;
  spec.t = 1e-3;
  spec.k_grid = {1};
  spec.replicates = 20;
  spec.seed = RngSeed{28};
  const auto s = run_estimator_study(spec);
  for (double e : s.errors[0]) EXPECT_LT(e, 1e-8);
}

TEST(EstimatorStudy, ThreadCountDoesNotChangeReport) {
  EstimatorSpec spec;
  spec.k_grid = {4, 16};
  spec.replicates = 12;
  spec.seed = RngSeed{29};
  spec.threads = 1;
  const auto one = run_estimator_study(spec);
  spec.threads = 3;
  const auto three = run_estimator_study(spec);
  EXPECT_EQ(one.errors, three.errors);
  EXPECT_EQ(to_json(one).dump(), to_json(three).dump());
}

TEST(EstimatorStudy, ReportFormats) {
  EstimatorSpec spec;
  spec.k_grid = {2, 8};
  spec.replicates = 5;
  const auto s = run_estimator_study(spec);
  const auto j = to_json(s);
  EXPECT_EQ(j.at("schema_version"), kReportSchemaVersion);
  EXPECT_EQ(j.at("errors").size(), 2u);
  std::ostringstream csv;
  write_csv(csv, s);
  const std::string text = csv.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3);
  EXPECT_EQ(text.rfind("K,mean_error", 0), 0u);
}

TEST(EstimatorStudy, Validation) {
  EstimatorSpec spec;
  spec.k_grid = {8, 8};
  EXPECT_THROW(run_estimator_study(spec), DomainError);
  spec.k_grid = {8};
  spec.n_points = 10;
  EXPECT_THROW(run_estimator_study(spec), CapacityError);
}

TEST(Generation, ZeroNetPassesAgainstStationaryNoise) {
  // data drawn from the stationary law of the sampler: the zero net run from
  // T with no steps reproduces it exactly
  GenSpec spec;
  spec.schedule = NoiseSchedule::uniform(1.0, 1);
  spec.n_samples = 200;
  spec.permutations = 500;
  spec.seed = RngSeed{30};
  const auto ck = untrained_checkpoint(3, 2);
  // the zero-score sampler inflates the variance by (1 + h/2)^2 + h
  const double v = 1.5 * 1.5 + 1.0;
  std::vector<PointCloud> ref;
  Rng rng({31});
  for (int k = 0; k < 200; ++k) {
    PointCloud x(3, 2);
    for (auto& c : x.flat()) c = std::sqrt(v) * rng.normal();
    ref.push_back(canonical(x));
  }
  const auto rep = evaluate_generation(ck, ref, spec);
  EXPECT_GT(rep.energy.p_value, 0.05);
}

TEST(Generation, ZeroNetFailsAgainstStructuredData) {
  GenSpec spec;
  spec.schedule = NoiseSchedule::power(5.0, 50, 2.0);
  spec.n_samples = 100;
  spec.n_reference = 100;
  spec.permutations = 500;
  spec.seed = RngSeed{32};
  const auto rep = evaluate_generation(untrained_checkpoint(3, 2), reference_dataset(spec), spec);
  EXPECT_LT(rep.energy.p_value, 0.01);
}

TEST(Generation, SmallRunIsBitwiseReproducible) {
  GenSpec spec;
  spec.data.n_items = 32;
  spec.train.net.hidden = {8, 8};
  spec.train.iterations = 30;
  spec.train.eval_every = 10;
  spec.train.holdout_draws = 8;
  spec.schedule = NoiseSchedule::power(5.0, 20, 2.0);
  spec.n_samples = 16;
  spec.n_reference = 16;
  spec.permutations = 50;
  const auto a = to_json(run_toy_generation(spec)).dump(), b = to_json(run_toy_generation(spec)).dump();
  EXPECT_EQ(a, b);
  const auto j = nlohmann::json::parse(a);
  EXPECT_EQ(j.at("schema_version"), kReportSchemaVersion);
  EXPECT_GE(j.at("p_value").get<double>(), 0.0);
  EXPECT_LE(j.at("p_value").get<double>(), 1.0);
}
