#pragma once

#include <cmath>
#include <cstddef>
#include <set>
#include <span>
#include <vector>

#include "qdiff/errors.hpp"
#include "qdiff/perm_mcmc.hpp"
#include "qdiff/point_cloud.hpp"
#include "qdiff/symmetric_group.hpp"

namespace qdiff {

/// Gradient with respect to a noised cloud y; same N x d layout as the cloud.
class ScoreVector {
 public:
  ScoreVector() = default;
  ScoreVector(std::size_t n, std::size_t d) : n_(n), d_(d), values_(n * d, 0.0) {}

  std::size_t n() const noexcept { return n_; }
  std::size_t d() const noexcept { return d_; }
  double operator()(std::size_t i, std::size_t k) const { return values_[i * d_ + k]; }
  double& operator()(std::size_t i, std::size_t k) { return values_[i * d_ + k]; }
  std::span<const double> flat() const noexcept { return values_; }
  std::span<double> flat() noexcept { return values_; }

  ScoreVector& operator+=(const ScoreVector& o) {
    for (std::size_t q = 0; q < values_.size(); ++q) values_[q] += o.values_[q];
    return *this;
  }
  ScoreVector& operator*=(double s) {
    for (auto& v : values_) v *= s;
    return *this;
  }

  friend bool operator==(const ScoreVector&, const ScoreVector&) = default;

 private:
  std::size_t n_ = 0;
  std::size_t d_ = 0;
  std::vector<double> values_;
};

/// Row j of the output is row j of the input moved to slot sigma(j), matching
/// the action on clouds.
inline ScoreVector apply(const Permutation& sigma, const ScoreVector& s) {
  if (sigma.size() != s.n()) throw DimensionError("permutation size does not match score");
  ScoreVector out(s.n(), s.d());
  for (std::size_t j = 0; j < s.n(); ++j)
    for (std::size_t k = 0; k < s.d(); ++k) out(sigma(j), k) = s(j, k);
  return out;
}

inline double max_abs_difference(const ScoreVector& a, const ScoreVector& b) {
  double m = 0.0;
  for (std::size_t q = 0; q < a.flat().size(); ++q) m = std::max(m, std::abs(a.flat()[q] - b.flat()[q]));
  return m;
}

inline double l2_distance(const ScoreVector& a, const ScoreVector& b) {
  double s = 0.0;
  for (std::size_t q = 0; q < a.flat().size(); ++q) {
    const double diff = a.flat()[q] - b.flat()[q];
    s += diff * diff;
  }
  return std::sqrt(s);
}

/// Gradient of I(sigma) in y: row j is (x_{sigma(j)} - y_j) / (2t).
inline ScoreVector per_perm_score(const Permutation& sigma, const PointCloud& x, const PointCloud& y, double t) {
  require_positive_time(t);
  require_same_shape(x, y);
  if (sigma.size() != x.n()) throw DimensionError("permutation size does not match clouds");
  ScoreVector s(x.n(), x.d());
  const double inv2t = 1.0 / (2.0 * t);
  for (std::size_t j = 0; j < x.n(); ++j)
    for (std::size_t k = 0; k < x.d(); ++k) s(j, k) = (x(sigma(j), k) - y(j, k)) * inv2t;
  return s;
}

/// E_r[grad_y I(sigma)] for any distribution r over S_N. Uses linearity: only
/// the assignment marginals of r are needed.
inline ScoreVector expected_score(const PermDistribution& r, const PointCloud& x, const PointCloud& y, double t) {
  require_positive_time(t);
  require_same_shape(x, y);
  const std::size_t n = x.n(), d = x.d();
  const auto marg = assignment_marginals(r);
  ScoreVector s(n, d);
  const double inv2t = 1.0 / (2.0 * t);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t k = 0; k < d; ++k) {
      double target = 0.0;
      for (std::size_t i = 0; i < n; ++i) target += marg[i * n + j] * x(i, k);
      s(j, k) = (target - y(j, k)) * inv2t;
    }
  return s;
}

/// grad_y log sum_sigma exp I(sigma), by enumeration of the posterior.
inline ScoreVector symmetrized_score_exact(const PointCloud& x, const PointCloud& y, double t,
                                           std::size_t cap = kEnumerationCap) {
  return expected_score(posterior_exact(x, y, t, cap), x, y, t);
}

struct McmcScore {
  ScoreVector score;
  McmcDiagnostics diagnostics;
};

/// (1/K) sum_k grad_y I(sigma_k) over MCMC draws sigma_k ~ q.
inline McmcScore symmetrized_score_mcmc(const PointCloud& x, const PointCloud& y, double t, const McmcConfig& cfg) {
  const McmcResult res = mcmc_sample(x, y, t, cfg);
  return {expected_score(res.distribution, x, y, t), res.diagnostics};
}

struct ElboReport {
  double elbo = 0.0;
  double kl = 0.0;
  double log_evidence = 0.0;
};

/// ELBO(r) = E_r[I] + H(r), KL(r || q), and log sum exp I, with the shared
/// additive constant (Gaussian prefactor, uniform prior) dropped on both sides.
inline ElboReport elbo(const PermDistribution& r, const PointCloud& x, const PointCloud& y, double t,
                       std::size_t cap = kEnumerationCap) {
  if (r.mode != PermDistribution::Mode::exact)
    throw DomainError("elbo needs an explicit distribution over S_N; empirical sample sets have no entropy");
  const CostMatrix cost(x, y, t);
  require_enumerable(x.n(), cap);
  if (r.size() != factorial(x.n()) || r.log_weights.size() != r.size())
    throw DomainError("variational distribution must cover all of S_N");
  if (std::set<Permutation>(r.support.begin(), r.support.end()).size() != r.size())
    throw DomainError("variational distribution has repeated permutations");

  std::vector<double> log_w(r.size());
  for (std::size_t k = 0; k < r.size(); ++k) log_w[k] = cost.log_weight(r.support[k]);
  ElboReport rep;
  rep.log_evidence = log_sum_exp(log_w);
  double expected_i = 0.0, entropy = 0.0, kl = 0.0;
  for (std::size_t k = 0; k < r.size(); ++k) {
    const double lr = r.log_weights[k];
    const double p = std::exp(lr);
    if (p == 0.0) continue;
    expected_i += p * log_w[k];
    entropy -= p * lr;
    kl += p * (lr - (log_w[k] - rep.log_evidence));
  }
  rep.elbo = expected_i + entropy;
  rep.kl = kl;
  return rep;
}

/// |log_evidence - (elbo + kl)|; zero up to rounding for any valid r.
inline double elbo_decomposition_check(const PermDistribution& r, const PointCloud& x, const PointCloud& y,
                                       double t) {
  const ElboReport rep = elbo(r, x, y, t);
  return std::abs(rep.log_evidence - (rep.elbo + rep.kl));
}

}  // namespace qdiff
