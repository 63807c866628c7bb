#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "qdiff/errors.hpp"
#include "qdiff/heat_kernel.hpp"
#include "qdiff/point_cloud.hpp"
#include "qdiff/rng.hpp"
#include "qdiff/symmetric_group.hpp"

namespace qdiff {

/// C_ij = -|x_i - y_j|^2 / (4t). Row i indexes points of the clean cloud x,
/// column j points of the noised cloud y.
class CostMatrix {
 public:
  CostMatrix(const PointCloud& x, const PointCloud& y, double t) : n_(x.n()), t_(t) {
    require_positive_time(t);
    require_same_shape(x, y);
    entries_ = pairwise_squared_distances(x, y);
    const double inv4t = 1.0 / (4.0 * t);
    for (auto& e : entries_) e = -e * inv4t;
  }

  std::size_t n() const noexcept { return n_; }
  double t() const noexcept { return t_; }
  double operator()(std::size_t i, std::size_t j) const { return entries_[i * n_ + j]; }
  const std::vector<double>& entries() const noexcept { return entries_; }

  /// I(sigma) = sum_j C_{sigma(j), j}.
  double log_weight(const Permutation& sigma) const {
    if (sigma.size() != n_) throw DimensionError("permutation size does not match cost matrix");
    double s = 0.0;
    for (std::size_t j = 0; j < n_; ++j) s += (*this)(sigma(j), j);
    return s;
  }

 private:
  std::size_t n_;
  double t_;
  std::vector<double> entries_;
};

inline CostMatrix cost_matrix(const PointCloud& x, const PointCloud& y, double t) { return {x, y, t}; }

/// I(sigma) = -|x - sigma(y)|^2 / (4t), computed from the permuted cloud.
inline double log_weight(const Permutation& sigma, const PointCloud& x, const PointCloud& y, double t) {
  require_positive_time(t);
  return -squared_distance(x, apply(sigma, y)) / (4.0 * t);
}

/// Distribution over S_N: either the full normalized posterior (exact) or a
/// set of retained MCMC states with uniform weights (empirical).
struct PermDistribution {
  enum class Mode { exact, empirical };

  Mode mode = Mode::exact;
  std::vector<Permutation> support;
  std::vector<double> log_weights;

  std::size_t size() const noexcept { return support.size(); }
  double weight(std::size_t k) const { return std::exp(log_weights[k]); }
};

inline const char* to_string(PermDistribution::Mode m) {
  return m == PermDistribution::Mode::exact ? "exact" : "empirical";
}

/// q(sigma | x, y) proportional to exp I(sigma), over all of S_N.
inline PermDistribution posterior_exact(const PointCloud& x, const PointCloud& y, double t,
                                        std::size_t cap = kEnumerationCap) {
  const CostMatrix cost(x, y, t);
  require_enumerable(x.n(), cap);
  PermDistribution out;
  out.mode = PermDistribution::Mode::exact;
  out.support.reserve(factorial(x.n()));
  for_each_permutation(x.n(), [&](const std::vector<std::size_t>& m) {
    out.support.emplace_back(m);
    out.log_weights.push_back(cost.log_weight(out.support.back()));
  });
  const double z = log_sum_exp(out.log_weights);
  for (auto& w : out.log_weights) w -= z;
  return out;
}

struct McmcConfig {
  std::optional<std::size_t> burn_in;   ///< default 50 * N
  std::optional<std::size_t> thinning;  ///< default N
  std::size_t samples = 32;             ///< K, number of retained states
  RngSeed seed{};
  /// Ablation only: accept every proposal (does not target q).
  bool always_accept = false;

  std::size_t burn_in_for(std::size_t n) const { return burn_in.value_or(50 * n); }
  std::size_t thinning_for(std::size_t n) const { return thinning.value_or(n); }
};

struct McmcDiagnostics {
  double acceptance_rate = 0.0;
  std::size_t proposal_count = 0;
  std::size_t unique_states = 0;
};

/// Metropolis-Hastings chain on S_N targeting q(sigma) proportional to exp I(sigma).
///
/// Proposal: draw a clean index i uniformly and a noised index j with
/// probability exp(C_ij) / sum_k exp(C_ik), then re-pair so that y_j is matched
/// to x_i and the former partner of y_j takes the old partner of x_i. In terms
/// of the image table this is sigma' = sigma o (sigma^-1(i) j). Drawing
/// j = sigma^-1(i) is the identity move and counts as accepted.
class SwapChain {
 public:
  SwapChain(CostMatrix cost, RngSeed seed, bool always_accept = false)
      : cost_(std::move(cost)),
        n_(cost_.n()),
        rng_(seed),
        always_accept_(always_accept),
        state_(Permutation::identity(n_)),
        inverse_(Permutation::identity(n_).mapping()) {
    row_log_norm_.resize(n_);
    row_cdf_.resize(n_ * n_);
    for (std::size_t i = 0; i < n_; ++i) {
      std::vector<double> row(n_);
      for (std::size_t j = 0; j < n_; ++j) row[j] = cost_(i, j);
      row_log_norm_[i] = log_sum_exp(row);
      double c = 0.0;
      for (std::size_t j = 0; j < n_; ++j) {
        c += std::exp(row[j] - row_log_norm_[i]);
        row_cdf_[i * n_ + j] = c;
      }
    }
    log_weight_ = cost_.log_weight(state_);
  }

  const Permutation& state() const noexcept { return state_; }
  double state_log_weight() const noexcept { return log_weight_; }
  std::size_t proposals() const noexcept { return proposals_; }
  std::size_t accepted() const noexcept { return accepted_; }

  /// Probability that j is drawn given i.
  double row_probability(std::size_t i, std::size_t j) const {
    return std::exp(cost_(i, j) - row_log_norm_[i]);
  }

  /// sigma' produced from `from` by the draw (i, j).
  static Permutation propose(const Permutation& from, std::size_t i, std::size_t j) {
    const std::size_t a = from.inverse()(i);
    return from.with_swapped_images(a, j);
  }

  /// Q(from -> to) for to = from o (a b), a != b.
  double proposal_probability_swap(const Permutation& from, std::size_t a, std::size_t b) const {
    return (row_probability(from(a), b) + row_probability(from(b), a)) / static_cast<double>(n_);
  }

  /// MH acceptance probability for the move from o (a b), a != b.
  double acceptance_probability_swap(const Permutation& from, std::size_t a, std::size_t b) const {
    if (always_accept_) return 1.0;
    const std::size_t ia = from(a), ib = from(b);
    const double delta_i = cost_(ib, a) + cost_(ia, b) - cost_(ia, a) - cost_(ib, b);
    const Permutation to = from.with_swapped_images(a, b);
    const double q_fwd = proposal_probability_swap(from, a, b);
    const double q_rev = proposal_probability_swap(to, a, b);
    // Both proposal terms underflow only when the move is essentially impossible.
    if (q_fwd == 0.0) return 1.0;
    const double ratio = std::exp(delta_i) * q_rev / q_fwd;
    return ratio < 1.0 ? ratio : 1.0;
  }

  /// One proposal/accept step.
  void step() {
    ++proposals_;
    const std::size_t i = rng_.index(n_);
    const double u = rng_.uniform();
    std::size_t j = 0;
    const double* cdf = &row_cdf_[i * n_];
    while (j + 1 < n_ && u >= cdf[j]) ++j;
    const std::size_t a = inverse_[i];
    if (a == j) {
      ++accepted_;
      return;
    }
    const double alpha = acceptance_probability_swap(state_, a, j);
    const double v = always_accept_ ? 0.0 : rng_.uniform();
    if (v < alpha) {
      const std::size_t ia = state_(a), ib = state_(j);
      log_weight_ += cost_(ib, a) + cost_(ia, j) - cost_(ia, a) - cost_(ib, j);
      state_ = state_.with_swapped_images(a, j);
      inverse_[ia] = j;
      inverse_[ib] = a;
      ++accepted_;
    }
  }

 private:
  CostMatrix cost_;
  std::size_t n_;
  Rng rng_;
  bool always_accept_;
  Permutation state_;
  std::vector<std::size_t> inverse_;
  std::vector<double> row_log_norm_;
  std::vector<double> row_cdf_;
  double log_weight_ = 0.0;
  std::size_t proposals_ = 0;
  std::size_t accepted_ = 0;
};

struct McmcResult {
  PermDistribution distribution;
  McmcDiagnostics diagnostics;
  /// I(sigma_k) for each retained state.
  std::vector<double> state_log_weights;
};

/// Runs one chain from the identity and keeps cfg.samples states after
/// burn-in, one every `thinning` steps.
inline McmcResult mcmc_sample(const PointCloud& x, const PointCloud& y, double t, const McmcConfig& cfg) {
  require_positive_time(t);
  require_same_shape(x, y);
  if (cfg.samples == 0) throw DomainError("MCMC sample count K must be >= 1");
  const std::size_t n = x.n();
  const std::size_t thin = cfg.thinning_for(n);
  if (thin == 0) throw DomainError("MCMC thinning must be >= 1");
  SwapChain chain(CostMatrix(x, y, t), cfg.seed, cfg.always_accept);
  for (std::size_t s = 0, burn = cfg.burn_in_for(n); s < burn; ++s) chain.step();

  McmcResult out;
  out.distribution.mode = PermDistribution::Mode::empirical;
  out.distribution.support.reserve(cfg.samples);
  const double lw = -std::log(static_cast<double>(cfg.samples));
  std::set<Permutation> unique;
  for (std::size_t k = 0; k < cfg.samples; ++k) {
    for (std::size_t s = 0; s < thin; ++s) chain.step();
    out.distribution.support.push_back(chain.state());
    out.distribution.log_weights.push_back(lw);
    out.state_log_weights.push_back(chain.state_log_weight());
    unique.insert(chain.state());
  }
  out.diagnostics.proposal_count = chain.proposals();
  out.diagnostics.acceptance_rate =
      chain.proposals() ? static_cast<double>(chain.accepted()) / static_cast<double>(chain.proposals()) : 1.0;
  out.diagnostics.unique_states = unique.size();
  return out;
}

/// Collapses a distribution to probabilities per distinct permutation.
inline std::map<Permutation, double> probability_table(const PermDistribution& dist) {
  std::map<Permutation, double> table;
  for (std::size_t k = 0; k < dist.size(); ++k) table[dist.support[k]] += dist.weight(k);
  return table;
}

/// Total-variation distance 0.5 * sum |p - q| between two distributions on S_N.
inline double total_variation(const PermDistribution& p, const PermDistribution& q) {
  auto tp = probability_table(p);
  const auto tq = probability_table(q);
  double s = 0.0;
  for (const auto& [perm, w] : tq) {
    auto it = tp.find(perm);
    s += std::abs(w - (it == tp.end() ? 0.0 : it->second));
    if (it != tp.end()) tp.erase(it);
  }
  for (const auto& [perm, w] : tp) s += w;
  return 0.5 * s;
}

/// M[i*N + j] = P(sigma(j) = i): probability that noised point j is matched to clean point i.
inline std::vector<double> assignment_marginals(const PermDistribution& dist) {
  if (dist.support.empty()) return {};
  const std::size_t n = dist.support.front().size();
  std::vector<double> m(n * n, 0.0);
  for (std::size_t k = 0; k < dist.size(); ++k) {
    const double w = dist.weight(k);
    for (std::size_t j = 0; j < n; ++j) m[dist.support[k](j) * n + j] += w;
  }
  return m;
}

}  // namespace qdiff
