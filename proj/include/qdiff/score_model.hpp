#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qdiff/errors.hpp"
#include "qdiff/ou_sde.hpp"
#include "qdiff/perm_mcmc.hpp"
#include "qdiff/point_cloud.hpp"
#include "qdiff/quotient_score.hpp"
#include "qdiff/rng.hpp"
#include "qdiff/symmetric_group.hpp"

namespace qdiff {

// ---------------------------------------------------------------------------
// Equivariant network
// ---------------------------------------------------------------------------

/// Scalar features of t appended to every point: log t, the OU noise scale
/// sqrt(1 - e^-t) and the decay e^{-t/2}.
inline constexpr std::size_t kTimeFeatures = 3;

inline std::array<double, kTimeFeatures> time_features(double t) {
  const OuTransition tr = ou_transition(0.0, t);
  return {std::log(t), std::sqrt(tr.variance), tr.decay};
}

struct NetConfig {
  std::size_t point_dim = 1;
  std::vector<std::size_t> hidden{64, 64, 64};
  bool zero_final = true;  ///< start with an all-zero output layer
};

/// DeepSets-style score network. Each layer maps point i as
///
///   h_i' = act(W h_i + V mean_k(h_k) + b)
///
/// with SiLU activations on hidden layers and a linear output layer whose
/// result is divided by the OU noise scale sqrt(1 - e^-t). The mean is summed
/// in sorted order per feature, so permuting the input permutes the output
/// bit-for-bit.
///
/// Parameter layout per layer (input width a, output width b): W (b x a,
/// row-major), then V (b x a), then bias (b).
class EquivariantNet {
 public:
  EquivariantNet() = default;

  EquivariantNet(NetConfig cfg, std::vector<double> params) : cfg_(std::move(cfg)), params_(std::move(params)) {
    build_layout();
    if (params_.size() != parameter_count())
      throw DimensionError("parameter vector has " + std::to_string(params_.size()) + " entries, expected " +
                           std::to_string(parameter_count()));
  }

  static EquivariantNet initialize(const NetConfig& cfg, RngSeed seed) {
    if (cfg.point_dim == 0) throw DimensionError("point dimension must be positive");
    EquivariantNet net;
    net.cfg_ = cfg;
    net.build_layout();
    net.params_.assign(net.parameter_count(), 0.0);
    Rng rng(seed);
    for (std::size_t l = 0; l < net.layers_.size(); ++l) {
      const auto& L = net.layers_[l];
      if (l + 1 == net.layers_.size() && cfg.zero_final) continue;
      const double scale = 1.0 / std::sqrt(static_cast<double>(2 * L.in));
      for (std::size_t q = 0; q < 2 * L.in * L.out; ++q) net.params_[L.offset + q] = scale * rng.normal();
    }
    return net;
  }

  const NetConfig& config() const noexcept { return cfg_; }
  std::span<const double> parameters() const noexcept { return params_; }
  std::span<double> parameters() noexcept { return params_; }
  std::size_t parameter_count() const noexcept {
    return layers_.empty() ? 0 : layers_.back().offset + layers_.back().size();
  }

  ScoreVector forward(const PointCloud& y, double t) const {
    Tape tape;
    return run(y, t, tape);
  }

  /// weight * ||net(y,t) - target||^2 and its parameter gradient, which is
  /// added into `grad`.
  double loss_and_gradient(const PointCloud& y, double t, const ScoreVector& target, double weight,
                           std::span<double> grad) const {
    if (grad.size() != params_.size()) throw DimensionError("gradient buffer has the wrong size");
    if (target.n() != y.n() || target.d() != y.d()) throw DimensionError("target shape does not match cloud");
    Tape tape;
    const ScoreVector out = run(y, t, tape);
    const std::size_t n = y.n(), d = y.d();
    double loss = 0.0;
    // dL/d(raw output) = 2 w (out - target) / noise_scale
    std::vector<double> g(n * d);
    for (std::size_t q = 0; q < n * d; ++q) {
      const double r = out.flat()[q] - target.flat()[q];
      loss += r * r;
      g[q] = 2.0 * weight * r / tape.noise_scale;
    }
    backward(tape, std::move(g), grad);
    return weight * loss;
  }

 private:
  struct Layer {
    std::size_t in = 0, out = 0, offset = 0;
    std::size_t size() const { return 2 * in * out + out; }
  };

  struct Tape {
    std::size_t n = 0;
    double noise_scale = 1.0;
    std::vector<std::vector<double>> inputs;  // per layer: n x in
    std::vector<std::vector<double>> means;   // per layer: in
    std::vector<std::vector<double>> pre;     // per hidden layer: n x out
  };

  void build_layout() {
    layers_.clear();
    std::size_t in = cfg_.point_dim + kTimeFeatures, offset = 0;
    for (std::size_t w : cfg_.hidden) {
      if (w == 0) throw DimensionError("hidden widths must be positive");
      layers_.push_back({in, w, offset});
      offset += layers_.back().size();
      in = w;
    }
    layers_.push_back({in, cfg_.point_dim, offset});
  }

  static double silu(double a) { return a / (1.0 + std::exp(-a)); }
  static double silu_grad(double a) {
    const double s = 1.0 / (1.0 + std::exp(-a));
    return s * (1.0 + a * (1.0 - s));
  }

  static std::vector<double> sorted_mean(const std::vector<double>& h, std::size_t n, std::size_t width) {
    std::vector<double> m(width), col(n);
    for (std::size_t c = 0; c < width; ++c) {
      for (std::size_t i = 0; i < n; ++i) col[i] = h[i * width + c];
      std::sort(col.begin(), col.end());
      double s = 0.0;
      for (double v : col) s += v;
      m[c] = s / static_cast<double>(n);
    }
    return m;
  }

  ScoreVector run(const PointCloud& y, double t, Tape& tape) const {
    require_positive_time(t);
    if (y.d() != cfg_.point_dim)
      throw DimensionError("network expects point dimension " + std::to_string(cfg_.point_dim) + ", got " +
                           std::to_string(y.d()));
    const std::size_t n = y.n(), d = y.d();
    const auto tf = time_features(t);
    tape.n = n;
    tape.noise_scale = tf[1];
    std::vector<double> h(n * layers_.front().in);
    for (std::size_t i = 0; i < n; ++i) {
      double* row = &h[i * layers_.front().in];
      for (std::size_t k = 0; k < d; ++k) row[k] = y(i, k);
      for (std::size_t k = 0; k < kTimeFeatures; ++k) row[d + k] = tf[k];
    }
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const Layer& L = layers_[l];
      const double* W = &params_[L.offset];
      const double* V = W + L.in * L.out;
      const double* b = V + L.in * L.out;
      auto m = sorted_mean(h, n, L.in);
      std::vector<double> ctx(L.out);
      for (std::size_t o = 0; o < L.out; ++o) {
        double s = b[o];
        for (std::size_t c = 0; c < L.in; ++c) s += V[o * L.in + c] * m[c];
        ctx[o] = s;
      }
      std::vector<double> a(n * L.out);
      for (std::size_t i = 0; i < n; ++i) {
        const double* hi = &h[i * L.in];
        for (std::size_t o = 0; o < L.out; ++o) {
          double s = ctx[o];
          const double* w = W + o * L.in;
          for (std::size_t c = 0; c < L.in; ++c) s += w[c] * hi[c];
          a[i * L.out + o] = s;
        }
      }
      tape.inputs.push_back(std::move(h));
      tape.means.push_back(std::move(m));
      if (l + 1 < layers_.size()) {
        h.resize(a.size());
        for (std::size_t q = 0; q < a.size(); ++q) h[q] = silu(a[q]);
        tape.pre.push_back(std::move(a));
      } else {
        h = std::move(a);
      }
    }
    ScoreVector out(n, d);
    for (std::size_t q = 0; q < n * d; ++q) out.flat()[q] = h[q] / tape.noise_scale;
    return out;
  }

  void backward(const Tape& tape, std::vector<double> g, std::span<double> grad) const {
    const std::size_t n = tape.n;
    for (std::size_t l = layers_.size(); l-- > 0;) {
      const Layer& L = layers_[l];
      const double* W = &params_[L.offset];
      const double* V = W + L.in * L.out;
      double* gW = &grad[L.offset];
      double* gV = gW + L.in * L.out;
      double* gb = gV + L.in * L.out;
      const auto& h = tape.inputs[l];
      const auto& m = tape.means[l];
      std::vector<double> gsum(L.out, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t o = 0; o < L.out; ++o) {
          const double go = g[i * L.out + o];
          gsum[o] += go;
          double* row = gW + o * L.in;
          const double* hi = &h[i * L.in];
          for (std::size_t c = 0; c < L.in; ++c) row[c] += go * hi[c];
        }
      for (std::size_t o = 0; o < L.out; ++o) {
        gb[o] += gsum[o];
        double* row = gV + o * L.in;
        for (std::size_t c = 0; c < L.in; ++c) row[c] += gsum[o] * m[c];
      }
      if (l == 0) break;
      // gradient w.r.t. this layer's input, then through the previous activation
      std::vector<double> ctx_grad(L.in, 0.0);
      for (std::size_t o = 0; o < L.out; ++o)
        for (std::size_t c = 0; c < L.in; ++c) ctx_grad[c] += V[o * L.in + c] * gsum[o];
      const auto& a_prev = tape.pre[l - 1];
      std::vector<double> gin(n * L.in);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < L.in; ++c) {
          double s = ctx_grad[c] / static_cast<double>(n);
          for (std::size_t o = 0; o < L.out; ++o) s += W[o * L.in + c] * g[i * L.out + o];
          gin[i * L.in + c] = s * silu_grad(a_prev[i * L.in + c]);
        }
      g = std::move(gin);
    }
  }

  NetConfig cfg_;
  std::vector<Layer> layers_;
  std::vector<double> params_;
};

inline ScoreVector net_forward(const EquivariantNet& net, const PointCloud& y, double t) { return net.forward(y, t); }

// ---------------------------------------------------------------------------
// Denoising score matching
// ---------------------------------------------------------------------------

struct TargetMode {
  enum class Kind { exact, mcmc };
  Kind kind = Kind::exact;
  /// Used for Kind::mcmc and as the fallback above the enumeration cap.
  McmcConfig mcmc{};

  static TargetMode exact() { return {}; }
  static TargetMode sampled(std::size_t k) {
    TargetMode m;
    m.kind = Kind::mcmc;
    m.mcmc.samples = k;
    return m;
  }
};

enum class LossWeighting { none, variance };

/// lambda(t): 1, or the OU transition variance 1 - e^-t.
inline double loss_weight(LossWeighting w, double t) {
  return w == LossWeighting::variance ? ou_transition(0.0, t).variance : 1.0;
}

/// Symmetrized score target for clean x0 and noised y at time t.
inline ScoreVector dsm_target(const PointCloud& x0, const PointCloud& y, double t, const TargetMode& mode,
                              RngSeed seed) {
  if (mode.kind == TargetMode::Kind::exact && x0.n() <= kEnumerationCap) return quotient_conditional_score(x0, y, t);
  McmcConfig cfg = mode.mcmc;
  cfg.seed = seed;
  return quotient_conditional_score_mcmc(x0, y, t, cfg).score;
}

struct DsmEvaluation {
  double loss = 0.0;
  std::vector<double> gradient;
  PointCloud noised;
  ScoreVector target;
};

/// Draws y ~ p_{t|0}(. | x0), forms the symmetrized target and returns
/// weight * ||net(y,t) - target||^2 with its parameter gradient.
inline DsmEvaluation dsm_loss(const EquivariantNet& net, const PointCloud& x0, double t, const TargetMode& mode,
                              RngSeed seed, LossWeighting weighting = LossWeighting::none) {
  Rng rng(seed);
  DsmEvaluation ev;
  ev.noised = forward_sample(x0, t, rng);
  ev.target = dsm_target(x0, ev.noised, t, mode, derive_seed(seed, 1));
  ev.gradient.assign(net.parameter_count(), 0.0);
  ev.loss = net.loss_and_gradient(ev.noised, t, ev.target, loss_weight(weighting, t), ev.gradient);
  return ev;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

enum class Optimizer { sgd, adam };

struct TrainConfig {
  NetConfig net{};
  Optimizer optimizer = Optimizer::sgd;  ///< sgd: heavy-ball momentum; adam: beta1 = momentum, beta2 = 0.999
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  double momentum = 0.9;
  std::size_t iterations = 2000;
  double t_min = 1e-2;
  double T = 5.0;
  TargetMode target{};
  LossWeighting weighting = LossWeighting::none;
  double holdout_fraction = 0.1;
  std::size_t holdout_draws = 64;  ///< fixed (item, t, noise) triples for held-out loss
  std::size_t eval_every = 100;
  /// Exponential moving average of the parameters (0 disables). When on, the
  /// held-out loss and the returned network use the averaged parameters.
  double ema_decay = 0.0;
  double divergence_threshold = 1e6;
  RngSeed seed{};
};

struct LossPoint {
  std::size_t iteration = 0;
  double holdout_loss = 0.0;
  double train_loss = 0.0;  ///< mean batch loss since the previous evaluation
};

struct Checkpoint {
  EquivariantNet net;
  TrainConfig config;
  std::size_t n_points = 0;  ///< N of the training clouds
  std::size_t iteration = 0;
  std::vector<LossPoint> curve;

  double initial_holdout_loss() const { return curve.empty() ? 0.0 : curve.front().holdout_loss; }
  double final_holdout_loss() const { return curve.empty() ? 0.0 : curve.back().holdout_loss; }
};

/// log-uniform draw on [t_min, T].
inline double sample_time(double t_min, double T, Rng& rng) {
  return std::exp(std::log(t_min) + rng.uniform() * (std::log(T) - std::log(t_min)));
}

namespace detail {

struct HoldoutSet {
  std::vector<PointCloud> noised;
  std::vector<ScoreVector> targets;
  std::vector<double> times;
  std::vector<double> weights;

  double loss(const EquivariantNet& net) const {
    double s = 0.0;
    for (std::size_t k = 0; k < noised.size(); ++k) {
      const ScoreVector out = net.forward(noised[k], times[k]);
      double r2 = 0.0;
      for (std::size_t q = 0; q < out.flat().size(); ++q) {
        const double r = out.flat()[q] - targets[k].flat()[q];
        r2 += r * r;
      }
      s += weights[k] * r2;
    }
    return s / static_cast<double>(noised.size());
  }
};

}  // namespace detail

/// Stochastic gradient descent with momentum on the DSM objective. Every
/// `eval_every` iterations the loss on a fixed held-out set is recorded.
inline Checkpoint train(const std::vector<PointCloud>& dataset, const TrainConfig& cfg) {
  if (dataset.empty()) throw DomainError("training needs a nonempty dataset");
  const std::size_t n = dataset.front().n(), d = dataset.front().d();
  for (const auto& x : dataset)
    if (x.n() != n || x.d() != d) throw DimensionError("all training clouds must share N and d");
  if (!(cfg.t_min > 0.0) || !(cfg.T > cfg.t_min)) throw DomainError("need 0 < t_min < T");
  if (cfg.batch_size == 0 || cfg.eval_every == 0 || cfg.holdout_draws == 0)
    throw DomainError("batch_size, eval_every and holdout_draws must be positive");
  if (!(cfg.ema_decay >= 0.0 && cfg.ema_decay < 1.0)) throw DomainError("ema_decay must lie in [0, 1)");

  Rng rng(cfg.seed);
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng.engine());
  std::vector<std::size_t> train_idx, holdout_idx;
  if (dataset.size() == 1) {
    train_idx = holdout_idx = {0};
  } else {
    const auto h = std::max<std::size_t>(
        1, static_cast<std::size_t>(cfg.holdout_fraction * static_cast<double>(dataset.size())));
    holdout_idx.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(std::min(h, dataset.size() - 1)));
    train_idx.assign(order.begin() + static_cast<std::ptrdiff_t>(holdout_idx.size()), order.end());
  }

  detail::HoldoutSet holdout;
  {
    Rng hr(derive_seed(cfg.seed, 0x401d));
    for (std::size_t k = 0; k < cfg.holdout_draws; ++k) {
      const auto& x0 = dataset[holdout_idx[k % holdout_idx.size()]];
      const double t = sample_time(cfg.t_min, cfg.T, hr);
      PointCloud y = forward_sample(x0, t, hr);
      holdout.targets.push_back(dsm_target(x0, y, t, cfg.target, derive_seed(cfg.seed, 0x5000 + k)));
      holdout.noised.push_back(std::move(y));
      holdout.times.push_back(t);
      holdout.weights.push_back(loss_weight(cfg.weighting, t));
    }
  }

  NetConfig net_cfg = cfg.net;
  net_cfg.point_dim = d;
  Checkpoint ck;
  ck.config = cfg;
  ck.config.net = net_cfg;
  ck.n_points = n;
  ck.net = EquivariantNet::initialize(net_cfg, derive_seed(cfg.seed, 0x1e7));
  ck.curve.push_back({0, holdout.loss(ck.net), 0.0});

  const std::size_t p = ck.net.parameter_count();
  std::vector<double> grad(p), velocity(p, 0.0), second(p, 0.0);
  double beta1_pow = 1.0, beta2_pow = 1.0;
  const bool use_ema = cfg.ema_decay > 0.0;
  EquivariantNet averaged = ck.net;
  auto reported = [&]() -> const EquivariantNet& { return use_ema ? averaged : ck.net; };
  double train_acc = 0.0;
  std::size_t train_count = 0;
  for (std::size_t it = 1; it <= cfg.iterations; ++it) {
    std::fill(grad.begin(), grad.end(), 0.0);
    double batch_loss = 0.0;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const auto& x0 = dataset[train_idx[rng.index(train_idx.size())]];
      const double t = sample_time(cfg.t_min, cfg.T, rng);
      const RngSeed draw{rng.engine()()};
      Rng dr(draw);
      const PointCloud y = forward_sample(x0, t, dr);
      const ScoreVector target = dsm_target(x0, y, t, cfg.target, derive_seed(draw, 1));
      batch_loss += ck.net.loss_and_gradient(y, t, target, loss_weight(cfg.weighting, t), grad);
    }
    const double inv_b = 1.0 / static_cast<double>(cfg.batch_size);
    batch_loss *= inv_b;
    if (!std::isfinite(batch_loss) || batch_loss > cfg.divergence_threshold)
      throw DivergenceError("training diverged at iteration " + std::to_string(it) +
                            ": batch loss = " + std::to_string(batch_loss));
    auto params = ck.net.parameters();
    if (cfg.optimizer == Optimizer::sgd) {
      for (std::size_t q = 0; q < p; ++q) {
        velocity[q] = cfg.momentum * velocity[q] + grad[q] * inv_b;
        params[q] -= cfg.learning_rate * velocity[q];
      }
    } else {
      constexpr double beta2 = 0.999, eps = 1e-8;
      beta1_pow *= cfg.momentum;
      beta2_pow *= beta2;
      for (std::size_t q = 0; q < p; ++q) {
        const double g = grad[q] * inv_b;
        velocity[q] = cfg.momentum * velocity[q] + (1.0 - cfg.momentum) * g;
        second[q] = beta2 * second[q] + (1.0 - beta2) * g * g;
        const double mhat = velocity[q] / (1.0 - beta1_pow), vhat = second[q] / (1.0 - beta2_pow);
        params[q] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + eps);
      }
    }
    if (use_ema) {
      auto avg = averaged.parameters();
      for (std::size_t q = 0; q < p; ++q) avg[q] = cfg.ema_decay * avg[q] + (1.0 - cfg.ema_decay) * params[q];
    }
    train_acc += batch_loss;
    ++train_count;
    ck.iteration = it;
    if (it % cfg.eval_every == 0 || it == cfg.iterations) {
      ck.curve.push_back({it, holdout.loss(reported()), train_acc / static_cast<double>(train_count)});
      train_acc = 0.0;
      train_count = 0;
    }
  }
  if (use_ema) ck.net = averaged;
  return ck;
}

/// Draws y_T from the stationary standard normal, integrates the reverse SDE
/// with the network as score, and returns canonicalized terminal states.
inline std::vector<QuotientPoint> sample_from_model(const Checkpoint& ck, std::size_t n_samples,
                                                    const NoiseSchedule& schedule, RngSeed seed) {
  const std::size_t d = ck.net.config().point_dim;
  const std::size_t n_points = ck.n_points;
  if (n_points == 0) throw DimensionError("checkpoint does not record the point count");
  ScoreFn score = [&](const PointCloud& y, double t) { return ck.net.forward(y, t); };
  std::vector<QuotientPoint> out;
  out.reserve(n_samples);
  for (std::size_t s = 0; s < n_samples; ++s) {
    Rng rng(derive_seed(seed, 2 * s));
    PointCloud yT(n_points, d);
    for (auto& v : yT.flat()) v = rng.normal();
    const Trajectory tr = reverse_integrate(yT, schedule, score, derive_seed(seed, 2 * s + 1));
    out.push_back(canonicalize(tr.states.back()));
  }
  return out;
}

}  // namespace qdiff
