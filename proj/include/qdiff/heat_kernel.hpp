#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <vector>

#include "qdiff/errors.hpp"
#include "qdiff/point_cloud.hpp"
#include "qdiff/rng.hpp"
#include "qdiff/symmetric_group.hpp"

namespace qdiff {

/// Log-domain kernel value. `terms` is the number of Euclidean summands that
/// were accumulated (1 for the Euclidean kernel, N! for the exact quotient).
struct KernelEval {
  double log_density = 0.0;
  double t = 0.0;
  std::uint64_t terms = 0;
};

inline void require_positive_time(double t, const char* name = "t") {
  if (!(t > 0.0) || !std::isfinite(t))
    throw DomainError(std::string(name) + " must be a finite positive time");
}

/// log of the Gaussian heat kernel on R^(dN): -(dN/2) log(4 pi t) - |x-y|^2 / (4t).
inline double euclid_log_heat_kernel(const PointCloud& x, const PointCloud& y, double t) {
  require_positive_time(t);
  require_same_shape(x, y);
  const double dim = static_cast<double>(x.n() * x.d());
  return -0.5 * dim * std::log(4.0 * std::numbers::pi * t) - squared_distance(x, y) / (4.0 * t);
}

/// Row-major table D[i*N + j] = |x_i - y_j|^2.
inline std::vector<double> pairwise_squared_distances(const PointCloud& x, const PointCloud& y) {
  require_same_shape(x, y);
  const std::size_t n = x.n();
  std::vector<double> dist(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) dist[i * n + j] = squared_distance(x.point(i), y.point(j));
  return dist;
}

/// Heat kernel of R^(d x N)/S_N: log sum over sigma of K(t, x, sigma(y)),
/// evaluated by log-sum-exp over all N! permutations.
inline KernelEval quotient_log_heat_kernel_exact(const PointCloud& x, const PointCloud& y, double t,
                                                 std::size_t cap = kEnumerationCap) {
  require_positive_time(t);
  require_same_shape(x, y);
  require_enumerable(x.n(), cap);
  const std::size_t n = x.n();
  const auto dist = pairwise_squared_distances(x, y);
  const double inv4t = 1.0 / (4.0 * t);
  LogSumExp acc;
  // sigma(y) places y_j in slot m[j], so |x - sigma(y)|^2 = sum_j D[m[j], j].
  const std::uint64_t terms = for_each_permutation(n, [&](const std::vector<std::size_t>& m) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += dist[m[j] * n + j];
    acc.add(-s * inv4t);
  });
  const double dim = static_cast<double>(n * x.d());
  return {acc.value() - 0.5 * dim * std::log(4.0 * std::numbers::pi * t), t, terms};
}

struct MonteCarloEstimate {
  double mean = 0.0;
  double std_error = 0.0;
};

/// Chapman-Kolmogorov residual of the quotient kernel, relative to K~(s+t, x, y).
///
/// The quotient integral of K~(s,x,.)K~(t,.,y) equals the Euclidean integral of
/// K(s,x,z) K~(t,z,y) dz (the 1/|S_N| volume factor cancels against the N!
/// equal terms), so it is estimated as E_{z ~ N(x, 2sI)}[K~(t,z,y)].
struct SemigroupResidual {
  double residual = 0.0;       ///< |estimate / K~(s+t,x,y) - 1|
  double std_error = 0.0;      ///< standard error of the normalized estimate
  double log_reference = 0.0;  ///< log K~(s+t, x, y)
};

inline SemigroupResidual quotient_kernel_semigroup_residual(const PointCloud& x, const PointCloud& y, double s,
                                                            double t, std::size_t samples, RngSeed seed) {
  require_positive_time(s, "s");
  require_positive_time(t);
  require_same_shape(x, y);
  if (samples == 0) throw DomainError("sample count must be >= 1");
  const double log_ref = quotient_log_heat_kernel_exact(x, y, s + t).log_density;
  Rng rng(seed);
  const double scale = std::sqrt(2.0 * s);
  PointCloud z = x;
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t k = 0; k < samples; ++k) {
    auto zf = z.flat();
    auto xf = x.flat();
    for (std::size_t q = 0; q < zf.size(); ++q) zf[q] = xf[q] + scale * rng.normal();
    const double w = std::exp(quotient_log_heat_kernel_exact(z, y, t).log_density - log_ref);
    sum += w;
    sum_sq += w * w;
  }
  const double m = static_cast<double>(samples);
  const double mean = sum / m;
  const double var = samples > 1 ? std::max(0.0, (sum_sq - m * mean * mean) / (m - 1.0)) : 0.0;
  return {std::abs(mean - 1.0), std::sqrt(var / m), log_ref};
}

using CloudFunction = std::function<double(const PointCloud&)>;

/// Monte Carlo estimates of the quotient heat semigroup applied to an
/// S_N-invariant test function, one per time in `times`. For invariant f the
/// quotient integral reduces to E_{z ~ N(x, 2tI)}[f(z)]. The same normal draws
/// are reused across times.
inline std::vector<MonteCarloEstimate> initial_condition_check(const CloudFunction& f, const PointCloud& x,
                                                               const std::vector<double>& times,
                                                               std::size_t samples, RngSeed seed) {
  if (samples == 0) throw DomainError("sample count must be >= 1");
  for (std::size_t k = 0; k < times.size(); ++k) {
    require_positive_time(times[k]);
    if (k > 0 && !(times[k] < times[k - 1])) throw DomainError("times must be strictly decreasing");
  }
  std::vector<double> sum(times.size(), 0.0), sum_sq(times.size(), 0.0);
  Rng rng(seed);
  std::vector<double> xi(x.size());
  PointCloud z = x;
  for (std::size_t k = 0; k < samples; ++k) {
    for (auto& v : xi) v = rng.normal();
    for (std::size_t q = 0; q < times.size(); ++q) {
      const double scale = std::sqrt(2.0 * times[q]);
      auto zf = z.flat();
      auto xf = x.flat();
      for (std::size_t c = 0; c < zf.size(); ++c) zf[c] = xf[c] + scale * xi[c];
      const double v = f(z);
      sum[q] += v;
      sum_sq[q] += v * v;
    }
  }
  std::vector<MonteCarloEstimate> out(times.size());
  const double m = static_cast<double>(samples);
  for (std::size_t q = 0; q < times.size(); ++q) {
    const double mean = sum[q] / m;
    const double var = samples > 1 ? std::max(0.0, (sum_sq[q] - m * mean * mean) / (m - 1.0)) : 0.0;
    out[q] = {mean, std::sqrt(var / m)};
  }
  return out;
}

}  // namespace qdiff
