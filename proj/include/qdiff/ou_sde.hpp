#pragma once

#include <cmath>
#include <cstddef>
#include <exception>
#include <functional>
#include <string>
#include <vector>

#include "qdiff/assignment.hpp"
#include "qdiff/errors.hpp"
#include "qdiff/heat_kernel.hpp"
#include "qdiff/perm_mcmc.hpp"
#include "qdiff/point_cloud.hpp"
#include "qdiff/quotient_score.hpp"
#include "qdiff/rng.hpp"
#include "qdiff/symmetric_group.hpp"

namespace qdiff {

/// Forward process dx = -x/2 dt + dw. Transition from s to t is
/// N(decay * x, variance * I).
struct OuTransition {
  double decay = 1.0;     ///< exp(-(t - s) / 2)
  double variance = 0.0;  ///< 1 - exp(-(t - s))
};

inline OuTransition ou_transition(double s, double t) {
  if (!(s >= 0.0) || !(t > s) || !std::isfinite(t))
    throw DomainError("ou_transition needs 0 <= s < t");
  const double dt = t - s;
  return {std::exp(-0.5 * dt), -std::expm1(-dt)};
}

/// Time grid 0 = t_0 < ... < t_steps = T with an optional per-interval rate
/// multiplier (all ones: the homogeneous OU process).
struct NoiseSchedule {
  double T = 5.0;
  std::vector<double> grid;
  std::vector<double> rate;

  static NoiseSchedule uniform(double horizon, std::size_t steps) {
    if (!(horizon > 0.0)) throw DomainError("schedule horizon T must be positive");
    if (steps == 0) throw DomainError("schedule needs at least one step");
    NoiseSchedule s;
    s.T = horizon;
    s.grid.resize(steps + 1);
    for (std::size_t k = 0; k <= steps; ++k)
      s.grid[k] = horizon * static_cast<double>(k) / static_cast<double>(steps);
    s.grid.back() = horizon;
    s.rate.assign(steps, 1.0);
    return s;
  }

  /// t_k = T (k / steps)^power; power > 1 refines the grid near t = 0.
  static NoiseSchedule power(double horizon, std::size_t steps, double power) {
    if (!(power >= 1.0)) throw DomainError("schedule power must be >= 1");
    NoiseSchedule s = uniform(horizon, steps);
    for (std::size_t k = 1; k < steps; ++k)
      s.grid[k] = horizon * std::pow(static_cast<double>(k) / static_cast<double>(steps), power);
    return s;
  }

  std::size_t steps() const noexcept { return grid.empty() ? 0 : grid.size() - 1; }

  void validate() const {
    if (grid.size() < 2) throw DomainError("schedule needs at least one step");
    if (grid.front() != 0.0) throw DomainError("schedule grid must start at 0");
    if (grid.back() != T) throw DomainError("schedule grid must end at T");
    for (std::size_t k = 1; k < grid.size(); ++k)
      if (!(grid[k] > grid[k - 1])) throw DomainError("schedule grid must be strictly increasing");
    if (rate.size() != steps()) throw DomainError("schedule rate must have one entry per step");
    for (double r : rate)
      if (!(r > 0.0)) throw DomainError("schedule rates must be positive");
  }
};

/// Sequence of states with the times they were recorded at.
struct Trajectory {
  std::vector<double> times;
  std::vector<PointCloud> states;
  std::vector<Permutation> assignment_log;
};

namespace detail {
inline void add_scaled_noise(PointCloud& y, double scale, Rng& rng) {
  for (auto& v : y.flat()) v += scale * rng.normal();
}
}  // namespace detail

/// decay(t) * x0 + sqrt(variance(t)) * xi for one fresh xi.
inline PointCloud forward_sample(const PointCloud& x0, double t, Rng& rng) {
  const OuTransition tr = ou_transition(0.0, t);
  PointCloud y = x0;
  for (auto& v : y.flat()) v *= tr.decay;
  detail::add_scaled_noise(y, std::sqrt(tr.variance), rng);
  return y;
}

inline PointCloud forward_sample(const PointCloud& x0, double t, RngSeed seed) {
  Rng rng(seed);
  return forward_sample(x0, t, rng);
}

/// Exact forward path on the schedule grid (one OU transition per interval).
inline Trajectory forward_trajectory(const PointCloud& x0, const NoiseSchedule& schedule, RngSeed seed) {
  schedule.validate();
  Rng rng(seed);
  Trajectory tr;
  tr.times.push_back(0.0);
  tr.states.push_back(x0);
  PointCloud y = x0;
  for (std::size_t k = 1; k < schedule.grid.size(); ++k) {
    const double dt = schedule.rate[k - 1] * (schedule.grid[k] - schedule.grid[k - 1]);
    const OuTransition step = ou_transition(0.0, dt);
    for (auto& v : y.flat()) v *= step.decay;
    detail::add_scaled_noise(y, std::sqrt(step.variance), rng);
    tr.times.push_back(schedule.grid[k]);
    tr.states.push_back(y);
  }
  return tr;
}

/// log sum_sigma N(sigma(y); decay * x, variance * I). A Gaussian with variance
/// v is the heat kernel at time v/2, so this is the quotient heat kernel
/// between decay * x and y.
inline double quotient_transition_log_density(const PointCloud& x, const PointCloud& y, double s, double t,
                                              std::size_t cap = kEnumerationCap) {
  const OuTransition tr = ou_transition(s, t);
  PointCloud mean = x;
  for (auto& v : mean.flat()) v *= tr.decay;
  return quotient_log_heat_kernel_exact(mean, y, 0.5 * tr.variance, cap).log_density;
}

/// Score of the quotient transition from time 0: grad_y log p~_{t|0}(y | x0).
/// This is the denoising score-matching target.
inline ScoreVector quotient_conditional_score(const PointCloud& x0, const PointCloud& y, double t,
                                              std::size_t cap = kEnumerationCap) {
  const OuTransition tr = ou_transition(0.0, t);
  PointCloud mean = x0;
  for (auto& v : mean.flat()) v *= tr.decay;
  return symmetrized_score_exact(mean, y, 0.5 * tr.variance, cap);
}

inline McmcScore quotient_conditional_score_mcmc(const PointCloud& x0, const PointCloud& y, double t,
                                                 const McmcConfig& cfg) {
  const OuTransition tr = ou_transition(0.0, t);
  PointCloud mean = x0;
  for (auto& v : mean.flat()) v *= tr.decay;
  return symmetrized_score_mcmc(mean, y, 0.5 * tr.variance, cfg);
}

/// Data-averaged quotient marginal: log (1/M) sum_m p~_{t|0}(y | x_m).
inline double quotient_marginal_log_density(const PointCloud& y, const std::vector<PointCloud>& data, double t) {
  if (data.empty()) throw DomainError("marginal needs a nonempty dataset");
  std::vector<double> terms;
  terms.reserve(data.size());
  for (const auto& x : data) terms.push_back(quotient_transition_log_density(x, y, 0.0, t));
  return log_sum_exp(terms) - std::log(static_cast<double>(data.size()));
}

/// grad_y of quotient_marginal_log_density: posterior-weighted conditional scores.
inline ScoreVector quotient_marginal_score(const PointCloud& y, const std::vector<PointCloud>& data, double t) {
  if (data.empty()) throw DomainError("marginal score needs a nonempty dataset");
  std::vector<double> log_w;
  log_w.reserve(data.size());
  for (const auto& x : data) log_w.push_back(quotient_transition_log_density(x, y, 0.0, t));
  const double z = log_sum_exp(log_w);
  ScoreVector out(y.n(), y.d());
  for (std::size_t m = 0; m < data.size(); ++m) {
    const double w = std::exp(log_w[m] - z);
    if (w == 0.0) continue;
    ScoreVector s = quotient_conditional_score(data[m], y, t);
    s *= w;
    out += s;
  }
  return out;
}

using ScoreFn = std::function<ScoreVector(const PointCloud&, double)>;

/// Smallest time at which a score callback is evaluated.
inline constexpr double kReverseTimeFloor = 1e-4;

/// Euler-Maruyama on dy = [-y/2 - s(y,t)] dt + dw, run backward from T to 0
/// over the schedule grid. States are recorded at every grid time (descending);
/// the final state is canonicalized.
inline Trajectory reverse_integrate(const PointCloud& yT, const NoiseSchedule& schedule, const ScoreFn& score_fn,
                                    RngSeed seed) {
  schedule.validate();
  Rng rng(seed);
  Trajectory tr;
  PointCloud y = yT;
  const std::size_t steps = schedule.steps();
  tr.times.push_back(schedule.grid[steps]);
  tr.states.push_back(y);
  for (std::size_t k = steps; k >= 1; --k) {
    const double t = schedule.grid[k];
    const double h = schedule.rate[k - 1] * (t - schedule.grid[k - 1]);
    ScoreVector s;
    try {
      s = score_fn(y, std::max(t, kReverseTimeFloor));
    } catch (const std::exception& e) {
      throw CallbackError(steps - k, e.what());
    }
    if (s.n() != y.n() || s.d() != y.d()) throw CallbackError(steps - k, "score has the wrong shape");
    const double noise = std::sqrt(h);
    auto yf = y.flat();
    auto sf = s.flat();
    for (std::size_t q = 0; q < yf.size(); ++q) yf[q] += h * (0.5 * yf[q] + sf[q]) + noise * rng.normal();
    tr.times.push_back(schedule.grid[k - 1]);
    tr.states.push_back(y);
  }
  tr.states.back() = canonical(tr.states.back());
  return tr;
}

/// Posterior-mode assignment of each recorded state to x0: exact argmax of
/// q(sigma | x0, state) for N within the enumeration cap, Hungarian matching
/// above it (the two coincide, since the mode of exp I(sigma) is the minimum
/// squared-distance assignment).
inline std::vector<Permutation> identity_exchange_trace(const Trajectory& trajectory, const PointCloud& x0) {
  std::vector<Permutation> out;
  out.reserve(trajectory.states.size());
  for (const auto& state : trajectory.states) {
    if (state.n() <= kEnumerationCap) {
      const PermDistribution q = posterior_exact(x0, state, 1.0);
      std::size_t best = 0;
      for (std::size_t k = 1; k < q.size(); ++k)
        if (q.log_weights[k] > q.log_weights[best]) best = k;
      out.push_back(q.support[best]);
    } else {
      out.push_back(best_alignment(x0, state));
    }
  }
  return out;
}

/// Number of consecutive entries in a trace that differ.
inline std::size_t count_identity_exchanges(const std::vector<Permutation>& trace) {
  std::size_t c = 0;
  for (std::size_t k = 1; k < trace.size(); ++k) c += trace[k] != trace[k - 1];
  return c;
}

}  // namespace qdiff
