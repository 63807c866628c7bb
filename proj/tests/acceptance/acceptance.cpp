// Acceptance suite: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria. Pass criterion numbers as arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "qdiff/bench.hpp"
#include "qdiff/heat_kernel.hpp"
#include "qdiff/ou_sde.hpp"
#include "qdiff/perm_mcmc.hpp"
#include "qdiff/quotient_score.hpp"
#include "qdiff/score_model.hpp"

using namespace qdiff;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

// 1. Quotient kernel: two-term N=2, d=1 closed form and exhaustive invariance for N <= 4.
Outcome kernel_correctness() {
  Rng rng({101});
  double worst_formula = 0.0;
  for (int rep = 0; rep < 200; ++rep) {
    const double x1 = 2 * rng.normal(), x2 = 2 * rng.normal(), y1 = 2 * rng.normal(), y2 = 2 * rng.normal();
    const double t = std::exp(std::log(1e-2) + rng.uniform() * std::log(500.0));
    const double a = -((x1 - y1) * (x1 - y1) + (x2 - y2) * (x2 - y2)) / (4 * t);
    const double b = -((x1 - y2) * (x1 - y2) + (x2 - y1) * (x2 - y1)) / (4 * t);
    const double m = std::max(a, b);
    const double expected = -std::log(4 * std::numbers::pi * t) + m + std::log(std::exp(a - m) + std::exp(b - m));
    const auto got = quotient_log_heat_kernel_exact(PointCloud::from_points({{x1}, {x2}}),
                                                    PointCloud::from_points({{y1}, {y2}}), t);
    worst_formula = std::max(worst_formula, rel_err(got.log_density, expected));
  }
  double worst_inv = 0.0;
  for (std::size_t n = 1; n <= 4; ++n) {
    const auto x = oracle::random_cloud(n, 2, rng), y = oracle::random_cloud(n, 2, rng);
    const double ref = quotient_log_heat_kernel_exact(x, y, 0.3).log_density;
    for (const auto& s : all_permutations(n))
      for (const auto& r : all_permutations(n))
        worst_inv = std::max(worst_inv, rel_err(quotient_log_heat_kernel_exact(apply(s, x), apply(r, y), 0.3).log_density, ref));
  }
  return {worst_formula < 1e-12 && worst_inv < 1e-12,
          "formula rel err " + fmt("%.2e", worst_formula) + ", invariance rel err " + fmt("%.2e", worst_inv)};
}

// 2. Exact symmetrized score equals the finite-difference gradient of the log kernel.
Outcome score_oracle() {
  Rng rng({102});
  double worst = 0.0;
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t n = 2 + rng.index(5);
    const std::size_t d = 1 + rng.index(3);
    const double t = std::exp(std::log(1e-2) + rng.uniform() * (std::log(5.0) - std::log(1e-2)));
    const auto x = oracle::random_cloud(n, d, rng);
    const auto y = oracle::heat_noised(x, t, rng);
    const auto s = symmetrized_score_exact(x, y, t);
    const auto fd = oracle::central_gradient(
        [&](const PointCloud& yy) { return quotient_log_heat_kernel_exact(x, yy, t).log_density; }, y,
        1e-3 * std::sqrt(t));
    for (std::size_t q = 0; q < fd.size(); ++q) worst = std::max(worst, std::abs(s.flat()[q] - fd[q]));
  }
  return {worst < 1e-5, "max abs deviation " + fmt("%.2e", worst) + " over 100 instances"};
}

// 3. MCMC posterior: TV to the exact posterior at K = 1e5, and exact detailed balance on N = 3.
Outcome mcmc_correctness() {
  Rng rng({103});
  const double times[] = {0.05, 0.5, 5.0};
  double worst_tv = 0.0;
  for (int rep = 0; rep < 10; ++rep) {
    const double t = times[rep % 3];
    const auto x = oracle::random_cloud(5, 2, rng);
    const auto y = oracle::heat_noised(x, t, rng);
    McmcConfig cfg;
    cfg.samples = 100000;
    cfg.seed = RngSeed{1000u + static_cast<std::uint64_t>(rep)};
    worst_tv = std::max(worst_tv, total_variation(mcmc_sample(x, y, t, cfg).distribution, posterior_exact(x, y, t)));
  }
  double worst_db = 0.0;
  for (double t : times) {
    const auto x = oracle::random_cloud(3, 2, rng), y = oracle::random_cloud(3, 2, rng);
    const SwapChain chain(CostMatrix(x, y, t), RngSeed{1});
    const auto perms = all_permutations(3);
    const auto q = posterior_exact(x, y, t);
    std::map<Permutation, double> pq;
    for (std::size_t k = 0; k < q.size(); ++k) pq[q.support[k]] = q.weight(k);
    std::map<std::pair<Permutation, Permutation>, double> kernel;
    for (const auto& from : perms)
      for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
          const std::size_t a = from.inverse()(i);
          const double alpha = a == j ? 1.0 : chain.acceptance_probability_swap(from, a, j);
          kernel[{from, SwapChain::propose(from, i, j)}] += chain.row_probability(i, j) / 3.0 * alpha;
        }
    for (const auto& u : perms)
      for (const auto& v : perms) {
        if (u == v) continue;
        const double fwd = kernel.count({u, v}) ? kernel.at({u, v}) : 0.0;
        const double rev = kernel.count({v, u}) ? kernel.at({v, u}) : 0.0;
        const double lhs = pq[u] * fwd, rhs = pq[v] * rev;
        if (lhs > 0 || rhs > 0) worst_db = std::max(worst_db, std::abs(lhs - rhs) / std::max(lhs, rhs));
      }
  }
  return {worst_tv < 0.05 && worst_db < 1e-12,
          "max TV " + fmt("%.4f", worst_tv) + ", detailed-balance rel err " + fmt("%.2e", worst_db)};
}

// 4. MCMC score error decays like a power of K with slope near -1/2.
Outcome estimator_convergence() {
  EstimatorSpec spec;
  spec.seed = RngSeed{104};
  spec.replicates = 100;
  const auto study = run_estimator_study(spec);
  std::string errs;
  for (std::size_t k = 0; k < spec.k_grid.size(); ++k)
    errs += (k ? ", " : "") + std::to_string(spec.k_grid[k]) + ":" + fmt("%.4f", study.mean_error[k]);
  return {study.slope >= -0.65 && study.slope <= -0.35,
          "slope " + fmt("%.3f", study.slope) + " (mean error " + errs + ")"};
}

// 5. log evidence = ELBO + KL, and KL vanishes exactly at r = q.
Outcome elbo_decomposition() {
  Rng rng({105});
  const auto x = oracle::random_cloud(4, 2, rng);
  const auto y = oracle::heat_noised(x, 0.4, rng);
  double worst = 0.0, min_kl = 1e300;
  for (int rep = 0; rep < 50; ++rep) {
    PermDistribution r;
    r.support = all_permutations(4);
    for (std::size_t k = 0; k < r.support.size(); ++k) r.log_weights.push_back(2.0 * rng.normal());
    const double z = log_sum_exp(r.log_weights);
    for (auto& v : r.log_weights) v -= z;
    worst = std::max(worst, elbo_decomposition_check(r, x, y, 0.4));
    min_kl = std::min(min_kl, elbo(r, x, y, 0.4).kl);
  }
  const auto q = posterior_exact(x, y, 0.4);
  const auto at_q = elbo(q, x, y, 0.4);
  const bool pass = worst < 1e-10 && std::abs(at_q.kl) < 1e-10 && min_kl > 1e-10 &&
                    std::abs(at_q.elbo - at_q.log_evidence) < 1e-10;
  return {pass, "max decomposition err " + fmt("%.2e", worst) + ", KL(q||q) " + fmt("%.2e", at_q.kl) +
                    ", min KL over random r " + fmt("%.3f", min_kl)};
}

// 6. Chapman-Kolmogorov identity and convergence to the initial condition.
Outcome semigroup() {
  Rng rng({106});
  bool pass = true;
  std::string detail;
  for (std::size_t n : {2u, 3u}) {
    const auto x = oracle::random_cloud(n, 2, rng);
    const auto y = oracle::heat_noised(x, 0.3, rng);
    const auto r = quotient_kernel_semigroup_residual(x, y, 0.2, 0.3, 100000, RngSeed{600u + n});
    pass = pass && r.residual <= 3.0 * r.std_error;
    detail += "N=" + std::to_string(n) + " residual " + fmt("%.4f", r.residual) + " (3 SE " +
              fmt("%.4f", 3.0 * r.std_error) + "); ";
  }
  const auto x = PointCloud::from_points({{0.5, 1}, {-0.7, 0}, {1.5, 2}});
  const std::vector<double> times{1.0, 0.1, 0.01, 0.001};
  auto fmin = [](const PointCloud& z) {
    double m = z(0, 0);
    for (std::size_t i = 1; i < z.n(); ++i) m = std::min(m, z(i, 0));
    return m;
  };
  auto energy = [](const PointCloud& z) {
    double s = 0.0;
    for (double v : z.flat()) s += v * v;
    return s;
  };
  const std::pair<const char*, CloudFunction> fns[] = {{"min", fmin}, {"sum of squares", energy}};
  for (const auto& [name, f] : fns) {
    const auto est = initial_condition_check(f, x, times, 20000, RngSeed{610});
    double prev = 1e300;
    bool monotone = true;
    for (const auto& e : est) {
      const double err = std::abs(e.mean - f(x));
      monotone = monotone && err <= prev + 3.0 * e.std_error;
      prev = err;
    }
    const double tol = 1e-2 * std::max(1.0, std::abs(f(x)));
    pass = pass && monotone && prev < tol;
    detail += std::string(name) + " err at t=1e-3 " + fmt("%.2e", prev) + "; ";
  }
  detail.resize(detail.size() - 2);
  return {pass, detail};
}

// 7. Trained toy model passes the energy test; the untrained control fails it.
Outcome toy_generation() {
  GenSpec g;
  g.data.kind = DatasetKind::jittered_template;
  g.data.n_items = 512;
  g.data.n_points = 3;
  g.data.dim = 2;
  g.data.jitter = 0.1;
  g.data.seed = RngSeed{7};
  g.train.net.hidden = {64, 64, 64};
  g.train.iterations = 20000;
  g.train.batch_size = 16;
  g.train.learning_rate = 3e-3;
  g.train.momentum = 0.9;
  g.train.t_min = 1e-3;
  g.train.T = 5.0;
  g.train.weighting = LossWeighting::variance;
  g.train.ema_decay = 0.999;
  g.train.eval_every = 1000;
  g.train.target = TargetMode::exact();
  g.train.seed = RngSeed{8};
  g.schedule = NoiseSchedule::power(5.0, 1000, 2.0);
  g.n_samples = 256;
  g.n_reference = 256;
  g.permutations = 1000;
  g.seed = RngSeed{9};
  const auto trained = run_toy_generation(g);
  const auto control =
      evaluate_generation(untrained_checkpoint(3, 2, g.train.net), reference_dataset(g), g);
  const bool loss_ok = trained.final_holdout_loss < 0.5 * trained.initial_holdout_loss;
  const bool pass = trained.energy.p_value >= 0.01 && control.energy.p_value < 0.01 && loss_ok;
  return {pass, "trained p " + fmt("%.3f", trained.energy.p_value) + ", control p " +
                    fmt("%.3f", control.energy.p_value) + ", held-out loss " +
                    fmt("%.3f", trained.initial_holdout_loss) + " -> " + fmt("%.3f", trained.final_holdout_loss)};
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t q = 0; q < a.size(); ++q) {
    ab += a[q] * b[q];
    aa += a[q] * a[q];
    bb += b[q] * b[q];
  }
  return ab / std::sqrt(aa * bb);
}

EquivariantNet small_net(std::size_t d, std::vector<std::size_t> hidden, std::uint64_t seed) {
  NetConfig cfg;
  cfg.point_dim = d;
  cfg.hidden = std::move(hidden);
  cfg.zero_final = false;
  return EquivariantNet::initialize(cfg, RngSeed{seed});
}

// 8. MCMC targets give aligned gradients and a loss offset equal to the target variance.
Outcome unbiased_gradient() {
  const auto net = small_net(2, {10, 10}, 9);
  Rng rng({108});
  const auto x0 = oracle::random_cloud(4, 2, rng);
  double cos_sum = 0.0;
  for (int k = 0; k < 100; ++k) {
    const double t = sample_time(1e-2, 5.0, rng);
    const RngSeed seed{rng.engine()()};
    const auto exact = dsm_loss(net, x0, t, TargetMode::exact(), seed);
    const auto mc = dsm_loss(net, x0, t, TargetMode::sampled(256), seed);
    cos_sum += cosine(exact.gradient, mc.gradient);
  }
  const double mean_cos = cos_sum / 100.0;

  const double t = 0.6;
  const auto exact = dsm_loss(net, x0, t, TargetMode::exact(), RngSeed{22});
  const auto out = net.forward(exact.noised, t);
  const std::size_t draws = 2000, nd = out.flat().size();
  std::vector<double> mean(nd, 0.0), sq(nd, 0.0);
  double loss_sum = 0.0, loss_sq = 0.0;
  for (std::size_t k = 0; k < draws; ++k) {
    const auto target = dsm_target(x0, exact.noised, t, TargetMode::sampled(8), RngSeed{5000 + k});
    double loss = 0.0;
    for (std::size_t q = 0; q < nd; ++q) {
      const double r = out.flat()[q] - target.flat()[q];
      loss += r * r;
      mean[q] += target.flat()[q];
      sq[q] += target.flat()[q] * target.flat()[q];
    }
    loss_sum += loss;
    loss_sq += loss * loss;
  }
  double var = 0.0;
  for (std::size_t q = 0; q < nd; ++q) {
    const double m = mean[q] / draws;
    var += (sq[q] / draws - m * m) * draws / (draws - 1.0);
  }
  const double mc_mean = loss_sum / draws;
  const double se = std::sqrt((loss_sq / draws - mc_mean * mc_mean) / (draws - 1.0));
  const double offset = mc_mean - exact.loss;
  const bool pass = net.parameter_count() <= 500 && mean_cos > 0.99 && std::abs(offset - var) <= 2.0 * se;
  return {pass, "mean cosine " + fmt("%.5f", mean_cos) + " (" + std::to_string(net.parameter_count()) +
                    " params), offset " + fmt("%.4f", offset) + " vs target variance " + fmt("%.4f", var) +
                    " (2 SE " + fmt("%.4f", 2.0 * se) + ")"};
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// 9. Every subcommand of the built CLI is bitwise reproducible for a fixed seed.
Outcome cli_determinism() {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "qdiff_acceptance";
  fs::create_directories(dir);
  const std::string cli = QDIFF_CLI_PATH;
  const std::string fx = std::string(QDIFF_FIXTURE_DIR) + "/";
  const std::string ck = (dir / "ck.json").string();
  const std::vector<std::pair<std::string, std::string>> cases{
      {"make-data", "make-data --kind ring --items 8 -N 4 -d 2 --seed 3"},
      {"kernel", "kernel --x " + fx + "pair_x.txt --y " + fx + "pair_y.txt --t 0.3"},
      {"posterior", "posterior --x " + fx + "three_1d.txt --y " + fx + "three_1d.txt --t 0.3 --mode mcmc --seed 3"},
      {"score", "score --x " + fx + "line10.txt --y " + fx + "line10.txt --t 0.3 --method mcmc --seed 3"},
      {"forward", "forward --x0 " + fx + "three_1d.txt --steps 20 --trace --seed 3"},
      {"reverse", "reverse --data " + fx + "tiny_dataset.txt --steps 20 --seed 3"},
      {"train", "train --data " + fx + "tiny_dataset.txt --checkpoint " + ck + " --iterations 40 --hidden 16,16 --seed 3"},
      {"sample", "sample --checkpoint " + ck + " -n 8 --steps 20 --seed 3"},
      {"bench-score", "bench-score -N 4 --k-grid 4,16 --replicates 8 --threads 2 --seed 3"},
      {"bench-gen",
       "bench-gen -N 2 -d 1 --items 64 --iterations 40 --hidden 16 --steps 20 --samples 32 --reference 32 "
       "--permutations 50 --seed 3"},
  };
  std::vector<std::string> failed;
  for (const auto& [name, args] : cases) {
    std::string outputs[2];
    bool ok = true;
    for (int run = 0; run < 2; ++run) {
      const auto out = dir / (name + "." + std::to_string(run) + ".out");
      const std::string cmd = "\"" + cli + "\" " + args + " --out \"" + out.string() + "\" 2>/dev/null";
      ok = ok && std::system(cmd.c_str()) == 0;
      outputs[run] = read_file(out);
      if (name == "train") outputs[run] += read_file(ck);
    }
    if (!ok || outputs[0].empty() || outputs[0] != outputs[1]) failed.push_back(name);
  }
  std::string detail = std::to_string(cases.size() - failed.size()) + "/" + std::to_string(cases.size()) +
                       " subcommands reproducible";
  for (const auto& f : failed) detail += (f == failed.front() ? "; differs: " : ", ") + f;
  return {failed.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"quotient kernel correctness", kernel_correctness},
      {"score oracle equality", score_oracle},
      {"posterior MCMC correctness", mcmc_correctness},
      {"estimator convergence", estimator_convergence},
      {"ELBO decomposition", elbo_decomposition},
      {"semigroup and initial condition", semigroup},
      {"end-to-end toy generation", toy_generation},
      {"unbiased gradient structure", unbiased_gradient},
      {"CLI determinism", cli_determinism},
  };
  std::set<int> only;
  for (int a = 1; a < argc; ++a) only.insert(std::atoi(argv[a]));

  int failures = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int id = static_cast<int>(k) + 1;
    if (!only.empty() && !only.count(id)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[k].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    failures += !o.pass;
    std::printf("%s %d %s: %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", id, criteria[k].first, o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  return failures;
}
