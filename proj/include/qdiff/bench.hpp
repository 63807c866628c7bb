#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <numbers>
#include <numeric>
#include <ostream>
#include <string>
#include <thread>
#include <tuple>
#include <utility>
#include <vector>

#include <json.hpp>

#include "qdiff/checkpoint.hpp"
#include "qdiff/errors.hpp"
#include "qdiff/ou_sde.hpp"
#include "qdiff/point_cloud.hpp"
#include "qdiff/quotient_score.hpp"
#include "qdiff/rng.hpp"
#include "qdiff/score_model.hpp"

namespace qdiff {

inline constexpr int kReportSchemaVersion = 1;

// ---------------------------------------------------------------------------
// Threads
// ---------------------------------------------------------------------------

/// Explicit request if nonzero, else QDIFF_THREADS, else the hardware count.
inline std::size_t resolve_threads(std::size_t requested = 0) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("QDIFF_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs fn(k) for k in [0, count) on up to `threads` workers. Each task writes
/// only its own output slot, so results do not depend on scheduling.
template <class Fn>
void parallel_for(std::size_t count, std::size_t threads, Fn&& fn) {
  threads = std::min(std::max<std::size_t>(threads, 1), std::max<std::size_t>(count, 1));
  if (threads == 1) {
    for (std::size_t k = 0; k < count; ++k) fn(k);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::size_t w = 0; w < threads; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t k = w; k < count; k += threads) fn(k);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Synthetic datasets
// ---------------------------------------------------------------------------

enum class DatasetKind { gaussian_blobs, ring, jittered_template };

inline const char* to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::gaussian_blobs: return "gaussian-blobs";
    case DatasetKind::ring: return "ring";
    case DatasetKind::jittered_template: return "jittered-template";
  }
  return "?";
}

inline DatasetKind parse_dataset_kind(const std::string& s) {
  if (s == "gaussian-blobs") return DatasetKind::gaussian_blobs;
  if (s == "ring") return DatasetKind::ring;
  if (s == "jittered-template") return DatasetKind::jittered_template;
  throw DomainError("unknown dataset kind '" + s + "' (expected gaussian-blobs, ring or jittered-template)");
}

struct DatasetSpec {
  DatasetKind kind = DatasetKind::jittered_template;
  std::size_t n_items = 512;
  std::size_t n_points = 3;
  std::size_t dim = 2;
  double jitter = 0.1;  ///< per-coordinate noise std (blob spread for gaussian-blobs)
  double radius = 1.0;  ///< ring only
  RngSeed seed{};       ///< fixes the template / blob centers and the item stream
  std::uint64_t split = 0;  ///< nonzero: independent items over the same template
};

namespace detail {

/// N points with entries scale * N(0,1), redrawn until all pairs are at least
/// min_sep apart (gives up on separation after 1000 tries).
inline PointCloud separated_cloud(std::size_t n, std::size_t d, double scale, double min_sep, Rng& rng) {
  PointCloud x(n, d);
  for (int attempt = 0; attempt < 1000; ++attempt) {
    for (auto& v : x.flat()) v = scale * rng.normal();
    bool ok = true;
    for (std::size_t i = 0; i < n && ok; ++i)
      for (std::size_t j = i + 1; j < n && ok; ++j) ok = squared_distance(x.point(i), x.point(j)) >= min_sep * min_sep;
    if (ok) break;
  }
  return x;
}

}  // namespace detail

/// Template shared by every jittered-template item of a given spec.
inline PointCloud dataset_template(const DatasetSpec& spec) {
  Rng rng(derive_seed(spec.seed, 0x7e));
  return canonical(detail::separated_cloud(spec.n_points, spec.dim, 1.0, 1.0, rng));
}

/// gaussian-blobs: N fixed centers (2 * N(0,I), separated by >= 1), each item
///   places point i at center_i + jitter * xi.
/// ring: N equally spaced points on a circle of `radius` in the first two
///   coordinates, rotated by a uniform random angle per item, plus jitter.
/// jittered-template: dataset_template(spec) + jitter * xi.
/// Items are canonicalized.
inline std::vector<PointCloud> make_synthetic_dataset(const DatasetSpec& spec) {
  if (spec.n_items == 0 || spec.n_points == 0 || spec.dim == 0)
    throw DomainError("dataset needs positive item count, N and d");
  if (!(spec.jitter >= 0.0)) throw DomainError("jitter must be nonnegative");
  if (spec.kind == DatasetKind::ring && spec.dim < 2) throw DimensionError("ring dataset needs d >= 2");

  PointCloud centers;
  if (spec.kind == DatasetKind::gaussian_blobs) {
    Rng crng(derive_seed(spec.seed, 0xb1));
    centers = canonical(detail::separated_cloud(spec.n_points, spec.dim, 2.0, 1.0, crng));
  } else if (spec.kind == DatasetKind::jittered_template) {
    centers = dataset_template(spec);
  }

  std::vector<PointCloud> out;
  out.reserve(spec.n_items);
  Rng rng(spec.split == 0 ? spec.seed : derive_seed(spec.seed, 0x5000 + spec.split));
  for (std::size_t m = 0; m < spec.n_items; ++m) {
    PointCloud x(spec.n_points, spec.dim);
    if (spec.kind == DatasetKind::ring) {
      const double phase = 2.0 * std::numbers::pi * rng.uniform();
      for (std::size_t i = 0; i < spec.n_points; ++i) {
        const double a = phase + 2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(spec.n_points);
        x(i, 0) = spec.radius * std::cos(a);
        x(i, 1) = spec.radius * std::sin(a);
      }
    } else {
      x = centers;
    }
    if (spec.jitter > 0.0)
      for (auto& v : x.flat()) v += spec.jitter * rng.normal();
    out.push_back(canonical(x));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Orbit-invariant statistics and the energy test
// ---------------------------------------------------------------------------

/// The N(N-1)/2 pairwise distances, ascending.
inline std::vector<double> sorted_pairwise_distances(const PointCloud& x) {
  std::vector<double> out;
  out.reserve(x.n() * (x.n() - 1) / 2);
  for (std::size_t i = 0; i < x.n(); ++i)
    for (std::size_t j = i + 1; j < x.n(); ++j) out.push_back(std::sqrt(squared_distance(x.point(i), x.point(j))));
  std::sort(out.begin(), out.end());
  return out;
}

/// Per coordinate k, the N values x_{.,k} sorted ascending; concatenated over k.
inline std::vector<double> sorted_marginals(const PointCloud& x) {
  std::vector<double> out;
  out.reserve(x.n() * x.d());
  std::vector<double> col(x.n());
  for (std::size_t k = 0; k < x.d(); ++k) {
    for (std::size_t i = 0; i < x.n(); ++i) col[i] = x(i, k);
    std::sort(col.begin(), col.end());
    out.insert(out.end(), col.begin(), col.end());
  }
  return out;
}

using FeatureSet = std::vector<std::vector<double>>;

inline FeatureSet distance_features(const std::vector<PointCloud>& clouds) {
  FeatureSet f;
  f.reserve(clouds.size());
  for (const auto& c : clouds) f.push_back(sorted_pairwise_distances(c));
  return f;
}

namespace detail {

inline double euclid(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t q = 0; q < a.size(); ++q) s += (a[q] - b[q]) * (a[q] - b[q]);
  return std::sqrt(s);
}

/// Pairwise feature distances of a pooled sample, kept as a packed upper
/// triangle in single precision (sums are accumulated in double).
class PooledDistances {
 public:
  explicit PooledDistances(const FeatureSet& pooled) : n_(pooled.size()), row_sum_(n_, 0.0) {
    tri_.resize(n_ * (n_ - 1) / 2);
    for (std::size_t i = 0; i < n_; ++i)
      for (std::size_t j = i + 1; j < n_; ++j) {
        const double dij = euclid(pooled[i], pooled[j]);
        tri_[offset(i) + (j - i - 1)] = static_cast<float>(dij);
      }
    for (std::size_t i = 0; i < n_; ++i)
      for (std::size_t j = i + 1; j < n_; ++j) {
        const double dij = tri_[offset(i) + (j - i - 1)];
        row_sum_[i] += dij;
        row_sum_[j] += dij;
        total_ += dij;
      }
  }

  /// Energy statistic for the split where label[i] = 1 marks sample A.
  double energy(const std::vector<float>& label) const {
    double na = 0.0, lsum = 0.0, saa = 0.0;
    for (std::size_t i = 0; i < n_; ++i) {
      if (label[i] == 0.0f) continue;
      na += 1.0;
      lsum += row_sum_[i];
      const float* row = &tri_[offset(i)];
      const float* lab = &label[i + 1];
      double s = 0.0;
      for (std::size_t q = 0, m = n_ - i - 1; q < m; ++q) s += static_cast<double>(row[q] * lab[q]);
      saa += s;
    }
    const double nb = static_cast<double>(n_) - na;
    const double sab = lsum - 2.0 * saa;
    const double sbb = total_ - saa - sab;
    return 2.0 * sab / (na * nb) - 2.0 * saa / (na * na) - 2.0 * sbb / (nb * nb);
  }

 private:
  std::size_t offset(std::size_t i) const { return i * n_ - i * (i + 1) / 2; }

  std::size_t n_;
  std::vector<float> tri_;
  std::vector<double> row_sum_;
  double total_ = 0.0;
};

}  // namespace detail

/// 2 E|A-B| - E|A-A'| - E|B-B'| (V-statistic form).
inline double energy_distance(const FeatureSet& a, const FeatureSet& b) {
  if (a.empty() || b.empty()) throw DomainError("energy distance needs two nonempty samples");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (const auto& u : a)
    for (const auto& v : b) ab += detail::euclid(u, v);
  for (const auto& u : a)
    for (const auto& v : a) aa += detail::euclid(u, v);
  for (const auto& u : b)
    for (const auto& v : b) bb += detail::euclid(u, v);
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  return 2.0 * ab / (na * nb) - aa / (na * na) - bb / (nb * nb);
}

struct EnergyTest {
  double statistic = 0.0;
  double p_value = 1.0;
  std::size_t permutations = 0;
};

/// Permutation test of equal laws: p = (1 + #{shuffled stat >= observed}) / (1 + B).
inline EnergyTest energy_permutation_test(const FeatureSet& a, const FeatureSet& b, std::size_t permutations,
                                          RngSeed seed) {
  if (a.empty() || b.empty()) throw DomainError("energy test needs two nonempty samples");
  FeatureSet pooled = a;
  pooled.insert(pooled.end(), b.begin(), b.end());
  const detail::PooledDistances dist(pooled);
  std::vector<float> labels(pooled.size(), 0.0f);
  std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(a.size()), 1.0f);
  EnergyTest out;
  out.statistic = dist.energy(labels);
  out.permutations = permutations;
  Rng rng(seed);
  std::size_t exceed = 0;
  for (std::size_t p = 0; p < permutations; ++p) {
    std::shuffle(labels.begin(), labels.end(), rng.engine());
    exceed += dist.energy(labels) >= out.statistic;
  }
  out.p_value = static_cast<double>(1 + exceed) / static_cast<double>(1 + permutations);
  return out;
}

struct Histogram {
  double lo = 0.0, hi = 1.0;
  std::vector<std::size_t> counts;
};

inline Histogram histogram(const std::vector<double>& values, double lo, double hi, std::size_t bins) {
  Histogram h{lo, hi, std::vector<std::size_t>(bins, 0)};
  for (double v : values) {
    if (v < lo || v > hi) continue;
    auto b = static_cast<std::size_t>((v - lo) / (hi - lo) * static_cast<double>(bins));
    ++h.counts[std::min(b, bins - 1)];
  }
  return h;
}

// ---------------------------------------------------------------------------
// Estimator study
// ---------------------------------------------------------------------------

struct EstimatorSpec {
  std::size_t n_points = 5;
  std::size_t dim = 2;
  double t = 0.5;
  std::vector<std::size_t> k_grid{8, 32, 128, 512};
  std::size_t replicates = 100;
  McmcConfig mcmc{};  ///< burn-in / thinning; samples and seed are set per run
  RngSeed seed{};
  std::size_t threads = 0;
};

struct EstimatorStudy {
  EstimatorSpec spec;
  PointCloud x, y;
  std::vector<double> mean_error;
  std::vector<double> median_error;
  std::vector<double> std_error;
  std::vector<std::vector<double>> errors;  ///< [grid index][replicate]
  double slope = 0.0;
  double intercept = 0.0;
};

/// Clean cloud 2 * N(0,I) with pairwise separation >= 1 and y = x + sqrt(2t) xi.
inline std::pair<PointCloud, PointCloud> estimator_instance(std::size_t n, std::size_t d, double t, RngSeed seed) {
  require_positive_time(t);
  Rng rng(seed);
  PointCloud x = detail::separated_cloud(n, d, 2.0, 1.0, rng);
  PointCloud y = x;
  for (auto& v : y.flat()) v += std::sqrt(2.0 * t) * rng.normal();
  return {std::move(x), std::move(y)};
}

/// Least-squares slope and intercept of log(err) against log(K).
inline std::pair<double, double> loglog_fit(const std::vector<std::size_t>& k, const std::vector<double>& err) {
  const std::size_t m = k.size();
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t q = 0; q < m; ++q) {
    const double lx = std::log(static_cast<double>(k[q])), ly = std::log(err[q]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  const double denom = static_cast<double>(m) * sxx - sx * sx;
  if (denom == 0.0) return {0.0, m ? sy / static_cast<double>(m) : 0.0};
  const double slope = (static_cast<double>(m) * sxy - sx * sy) / denom;
  return {slope, (sy - slope * sx) / static_cast<double>(m)};
}

/// L2 error of the MCMC score against the exact score for every K in the grid
/// over independent replicates; replicate r at grid index g uses the seed
/// derive_seed(spec.seed, 1 + g * replicates + r).
inline EstimatorStudy run_estimator_study(const EstimatorSpec& spec) {
  require_enumerable(spec.n_points);
  if (spec.k_grid.empty() || spec.replicates == 0) throw DomainError("estimator study needs a K grid and replicates");
  for (std::size_t g = 0; g < spec.k_grid.size(); ++g)
    if (spec.k_grid[g] == 0 || (g > 0 && spec.k_grid[g] <= spec.k_grid[g - 1]))
      throw DomainError("K grid must be positive and strictly increasing");

  EstimatorStudy out;
  out.spec = spec;
  std::tie(out.x, out.y) = estimator_instance(spec.n_points, spec.dim, spec.t, derive_seed(spec.seed, 0));
  const ScoreVector exact = symmetrized_score_exact(out.x, out.y, spec.t);
  const std::size_t G = spec.k_grid.size(), R = spec.replicates;
  std::vector<double> flat(G * R);
  parallel_for(G * R, resolve_threads(spec.threads), [&](std::size_t task) {
    McmcConfig cfg = spec.mcmc;
    cfg.samples = spec.k_grid[task / R];
    cfg.seed = derive_seed(spec.seed, 1 + task);
    flat[task] = l2_distance(symmetrized_score_mcmc(out.x, out.y, spec.t, cfg).score, exact);
  });
  for (std::size_t g = 0; g < G; ++g) {
    std::vector<double> e(flat.begin() + static_cast<std::ptrdiff_t>(g * R),
                          flat.begin() + static_cast<std::ptrdiff_t>((g + 1) * R));
    const double mean = std::accumulate(e.begin(), e.end(), 0.0) / static_cast<double>(R);
    double var = 0.0;
    for (double v : e) var += (v - mean) * (v - mean);
    var = R > 1 ? var / static_cast<double>(R - 1) : 0.0;
    std::vector<double> sorted = e;
    std::sort(sorted.begin(), sorted.end());
    const double median = R % 2 ? sorted[R / 2] : 0.5 * (sorted[R / 2 - 1] + sorted[R / 2]);
    out.mean_error.push_back(mean);
    out.median_error.push_back(median);
    out.std_error.push_back(std::sqrt(var / static_cast<double>(R)));
    out.errors.push_back(std::move(e));
  }
  std::tie(out.slope, out.intercept) = loglog_fit(spec.k_grid, out.mean_error);
  return out;
}

inline nlohmann::json to_json(const EstimatorStudy& s) {
  nlohmann::json j;
  j["schema_version"] = kReportSchemaVersion;
  j["report"] = "estimator-study";
  j["instance"] = {{"n_points", s.spec.n_points}, {"dim", s.spec.dim}, {"t", s.spec.t}, {"seed", s.spec.seed.value}};
  j["replicates"] = s.spec.replicates;
  j["burn_in"] = s.spec.mcmc.burn_in_for(s.spec.n_points);
  j["thinning"] = s.spec.mcmc.thinning_for(s.spec.n_points);
  auto& rows = j["errors"] = nlohmann::json::array();
  for (std::size_t g = 0; g < s.spec.k_grid.size(); ++g)
    rows.push_back({{"K", s.spec.k_grid[g]},
                    {"mean", s.mean_error[g]},
                    {"median", s.median_error[g]},
                    {"std_error", s.std_error[g]}});
  j["slope"] = s.slope;
  j["intercept"] = s.intercept;
  return j;
}

inline void write_csv(std::ostream& out, const EstimatorStudy& s) {
  out << "K,mean_error,median_error,std_error\n";
  out.precision(17);
  for (std::size_t g = 0; g < s.spec.k_grid.size(); ++g)
    out << s.spec.k_grid[g] << ',' << s.mean_error[g] << ',' << s.median_error[g] << ',' << s.std_error[g] << '\n';
}

// ---------------------------------------------------------------------------
// Toy generation
// ---------------------------------------------------------------------------

struct GenSpec {
  DatasetSpec data{};
  TrainConfig train{};
  NoiseSchedule schedule = NoiseSchedule::power(5.0, 200, 2.0);
  std::size_t n_samples = 256;
  std::size_t n_reference = 256;  ///< fresh held-out draws from the data generator
  std::size_t permutations = 1000;
  std::size_t histogram_bins = 20;
  RngSeed seed{};
};

struct GenReport {
  std::size_t n_samples = 0;
  std::size_t n_reference = 0;
  EnergyTest energy;
  Histogram distance_histogram_generated;
  Histogram distance_histogram_reference;
  std::vector<double> sorted_marginal_means_generated;
  std::vector<double> sorted_marginal_means_reference;
  std::size_t train_iterations = 0;
  double initial_holdout_loss = 0.0;
  double final_holdout_loss = 0.0;
};

/// Held-out reference clouds: same generator, independent seed.
inline std::vector<PointCloud> reference_dataset(const GenSpec& spec) {
  DatasetSpec ref = spec.data;
  ref.n_items = spec.n_reference;
  ref.split = spec.data.split + 1;
  return make_synthetic_dataset(ref);
}

/// Samples the checkpoint and compares against `reference` with the
/// permutation energy test on sorted pairwise distances.
inline GenReport evaluate_generation(const Checkpoint& ck, const std::vector<PointCloud>& reference,
                                     const GenSpec& spec) {
  if (reference.empty()) throw DomainError("generation report needs reference clouds");
  const auto q = sample_from_model(ck, spec.n_samples, spec.schedule, derive_seed(spec.seed, 1));
  std::vector<PointCloud> gen;
  gen.reserve(q.size());
  for (const auto& p : q) gen.push_back(p.representative());

  GenReport rep;
  rep.n_samples = gen.size();
  rep.n_reference = reference.size();
  const auto fg = distance_features(gen), fr = distance_features(reference);
  rep.energy = energy_permutation_test(fg, fr, spec.permutations, derive_seed(spec.seed, 2));

  std::vector<double> dg, dr;
  for (const auto& f : fg) dg.insert(dg.end(), f.begin(), f.end());
  for (const auto& f : fr) dr.insert(dr.end(), f.begin(), f.end());
  const double hi = std::max(*std::max_element(dr.begin(), dr.end()), 1e-12) * 1.5;
  const std::size_t bins = std::max<std::size_t>(spec.histogram_bins, 1);
  rep.distance_histogram_generated = histogram(dg, 0.0, hi, bins);
  rep.distance_histogram_reference = histogram(dr, 0.0, hi, bins);

  auto marginal_means = [](const std::vector<PointCloud>& cs) {
    std::vector<double> m(cs.front().n() * cs.front().d(), 0.0);
    for (const auto& c : cs) {
      const auto s = sorted_marginals(c);
      for (std::size_t q = 0; q < m.size(); ++q) m[q] += s[q];
    }
    for (auto& v : m) v /= static_cast<double>(cs.size());
    return m;
  };
  rep.sorted_marginal_means_generated = marginal_means(gen);
  rep.sorted_marginal_means_reference = marginal_means(reference);
  rep.train_iterations = ck.iteration;
  rep.initial_holdout_loss = ck.initial_holdout_loss();
  rep.final_holdout_loss = ck.final_holdout_loss();
  return rep;
}

/// Generates the dataset, trains, samples and scores.
inline GenReport run_toy_generation(const GenSpec& spec, Checkpoint* trained = nullptr) {
  const auto data = make_synthetic_dataset(spec.data);
  const Checkpoint ck = train(data, spec.train);
  if (trained) *trained = ck;
  return evaluate_generation(ck, reference_dataset(spec), spec);
}

/// Zero-output network for the given shape (the untrained negative control).
inline Checkpoint untrained_checkpoint(std::size_t n_points, std::size_t dim, const NetConfig& net = {}) {
  Checkpoint ck;
  NetConfig cfg = net;
  cfg.point_dim = dim;
  cfg.zero_final = true;
  ck.net = EquivariantNet::initialize(cfg, RngSeed{0});
  ck.config.net = cfg;
  ck.n_points = n_points;
  return ck;
}

inline nlohmann::json to_json(const Histogram& h) { return {{"lo", h.lo}, {"hi", h.hi}, {"counts", h.counts}}; }

inline nlohmann::json to_json(const GenReport& r) {
  nlohmann::json j;
  j["schema_version"] = kReportSchemaVersion;
  j["report"] = "generation";
  j["n_samples"] = r.n_samples;
  j["n_reference"] = r.n_reference;
  j["energy_distance"] = r.energy.statistic;
  j["p_value"] = r.energy.p_value;
  j["permutations"] = r.energy.permutations;
  j["distance_histogram"] = {{"generated", to_json(r.distance_histogram_generated)},
                             {"reference", to_json(r.distance_histogram_reference)}};
  j["sorted_marginal_means"] = {{"generated", r.sorted_marginal_means_generated},
                                {"reference", r.sorted_marginal_means_reference}};
  j["training"] = {{"iterations", r.train_iterations},
                   {"initial_holdout_loss", r.initial_holdout_loss},
                   {"final_holdout_loss", r.final_holdout_loss}};
  return j;
}

}  // namespace qdiff
