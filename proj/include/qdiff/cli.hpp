#pragma once

#include <cstdint>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "qdiff/bench.hpp"
#include "qdiff/checkpoint.hpp"
#include "qdiff/errors.hpp"
#include "qdiff/heat_kernel.hpp"
#include "qdiff/io.hpp"
#include "qdiff/ou_sde.hpp"
#include "qdiff/perm_mcmc.hpp"
#include "qdiff/quotient_score.hpp"
#include "qdiff/score_model.hpp"

namespace qdiff::cli {

// Exit codes (also listed in the README).
enum ExitCode : int {
  kOk = 0,
  kUsage = 1,
  kFile = 2,
  kParse = 3,
  kCapacity = 4,
  kDomain = 5,
  kDimension = 6,
  kDivergence = 7,
  kCallback = 8,
  kInternal = 9,
};

/// Input or output file could not be opened.
class FileError : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "file"; }
};

class UsageError : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "usage"; }
};

inline int exit_code_for(const Error& e) {
  const std::string c = e.category();
  if (c == "usage") return kUsage;
  if (c == "file") return kFile;
  if (c == "parse") return kParse;
  if (c == "capacity") return kCapacity;
  if (c == "domain") return kDomain;
  if (c == "dimension") return kDimension;
  if (c == "divergence") return kDivergence;
  if (c == "callback") return kCallback;
  return kInternal;
}

namespace detail {

inline nlohmann::json cloud_json(const PointCloud& x) {
  auto rows = nlohmann::json::array();
  for (std::size_t i = 0; i < x.n(); ++i) rows.push_back(std::vector<double>(x.point(i).begin(), x.point(i).end()));
  return rows;
}

inline nlohmann::json score_json(const ScoreVector& s) {
  auto rows = nlohmann::json::array();
  for (std::size_t i = 0; i < s.n(); ++i) {
    std::vector<double> r(s.d());
    for (std::size_t k = 0; k < s.d(); ++k) r[k] = s(i, k);
    rows.push_back(std::move(r));
  }
  return rows;
}

inline nlohmann::json diagnostics_json(const McmcDiagnostics& d) {
  return {{"acceptance_rate", d.acceptance_rate},
          {"proposal_count", d.proposal_count},
          {"unique_states", d.unique_states}};
}

inline std::ifstream open_input(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FileError("cannot open '" + path + "' for reading");
  return in;
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

inline std::vector<std::size_t> parse_sizes(const std::string& s, const char* what) {
  std::vector<std::size_t> out;
  for (const auto& tok : split_list(s)) {
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(tok, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != tok.size() || v == 0) throw UsageError(std::string(what) + " must be a comma-separated list of positive integers");
    out.push_back(static_cast<std::size_t>(v));
  }
  if (out.empty()) throw UsageError(std::string(what) + " is empty");
  return out;
}

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

/// Point-cloud text file, or an XYZ molecule when the path ends in .xyz.
inline PointCloud load_cloud(const std::string& path, const std::string& elements) {
  auto in = open_input(path);
  if (ends_with(path, ".xyz")) {
    if (elements.empty()) throw UsageError("reading an .xyz file needs --elements (e.g. H,C,N,O)");
    return io::read_xyz(in, io::ElementTable::parse(elements));
  }
  return io::read_point_cloud(in);
}

inline std::vector<PointCloud> load_dataset(const std::string& path) {
  auto in = open_input(path);
  auto data = io::read_dataset(in);
  if (data.empty()) throw ParseError("dataset file '" + path + "' contains no point clouds");
  return data;
}

/// Expands `key = value` lines of a config file into `--key value` flags for
/// keys that were not given explicitly. Unknown keys are parse errors.
inline std::vector<std::string> expand_config(const std::string& path, const CLI::App& sub,
                                              const std::vector<std::string>& explicit_args) {
  auto in = open_input(path);
  std::vector<std::string> extra;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ParseError(path + ":" + std::to_string(lineno) + ": expected 'key = value'");
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r\"");
      const auto b = s.find_last_not_of(" \t\r\"");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    for (auto& c : key)
      if (c == '_') c = '-';
    const std::string flag = "--" + key;
    if (key == "config" || sub.get_option_no_throw(flag) == nullptr)
      throw ParseError(path + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
    bool given = false;
    for (const auto& a : explicit_args) given = given || a == flag || a.rfind(flag + "=", 0) == 0;
    if (given) continue;
    const auto* opt = sub.get_option_no_throw(flag);
    extra.push_back(flag);
    if (opt->get_type_size() != 0) extra.push_back(value);
    else if (value != "true" && value != "1") extra.pop_back();
  }
  return extra;
}

class Logger {
 public:
  Logger(std::ostream& err, int level) : err_(err), level_(level) {}
  void info(const std::string& msg) const {
    if (level_ >= 1) err_ << "[info] " << msg << '\n';
  }
  void debug(const std::string& msg) const {
    if (level_ >= 2) err_ << "[debug] " << msg << '\n';
  }

 private:
  std::ostream& err_;
  int level_;
};

}  // namespace detail

/// Options shared by every subcommand.
struct CommonOptions {
  std::uint64_t seed = 0;
  std::string out;
  std::size_t threads = 0;
  int verbose = 0;
  bool quiet = false;
};

struct McmcOptions {
  std::size_t samples = 32;
  std::optional<std::size_t> burn_in;
  std::optional<std::size_t> thinning;
  bool always_accept = false;

  void add(CLI::App* app) {
    app->add_option("-K,--samples", samples, "retained MCMC states K")->check(CLI::PositiveNumber);
    app->add_option("--burn-in", burn_in, "burn-in steps (default 50 N)");
    app->add_option("--thinning", thinning, "steps between retained states (default N)")->check(CLI::PositiveNumber);
    app->add_flag("--always-accept", always_accept, "ablation: skip the Metropolis-Hastings correction");
  }
  McmcConfig config(std::uint64_t seed) const {
    McmcConfig c;
    c.samples = samples;
    c.burn_in = burn_in;
    c.thinning = thinning;
    c.always_accept = always_accept;
    c.seed = RngSeed{seed};
    return c;
  }
};

struct ScheduleOptions {
  double T = 5.0;
  std::size_t steps = 100;
  double power = 1.0;

  void add(CLI::App* app) {
    app->add_option("--T", T, "time horizon")->check(CLI::PositiveNumber);
    app->add_option("--steps", steps, "number of grid intervals")->check(CLI::PositiveNumber);
    app->add_option("--power", power, "grid t_k = T (k/steps)^power; >1 refines near 0")->check(CLI::Range(1.0, 10.0));
  }
  NoiseSchedule schedule() const { return NoiseSchedule::power(T, steps, power); }
};

struct TrainOptions {
  std::string hidden = "64,64,64";
  std::string target = "exact";
  std::string weighting = "none";
  std::string optimizer = "sgd";
  TrainConfig cfg;

  void add(CLI::App* app) {
    app->add_option("--hidden", hidden, "hidden widths, comma separated");
    app->add_option("--iterations", cfg.iterations, "optimizer steps")->check(CLI::PositiveNumber);
    app->add_option("--batch-size", cfg.batch_size)->check(CLI::PositiveNumber);
    app->add_option("--lr", cfg.learning_rate, "step size")->check(CLI::PositiveNumber);
    app->add_option("--momentum", cfg.momentum)->check(CLI::Range(0.0, 0.9999));
    app->add_option("--optimizer", optimizer)->check(CLI::IsMember({"sgd", "adam"}));
    app->add_option("--ema", cfg.ema_decay, "parameter EMA decay (0 = off)")->check(CLI::Range(0.0, 0.99999));
    app->add_option("--t-min", cfg.t_min)->check(CLI::PositiveNumber);
    app->add_option("--t-max", cfg.T)->check(CLI::PositiveNumber);
    app->add_option("--target", target, "exact | mcmc")->check(CLI::IsMember({"exact", "mcmc"}));
    app->add_option("--target-samples", cfg.target.mcmc.samples, "K for mcmc targets")->check(CLI::PositiveNumber);
    app->add_option("--weighting", weighting, "none | variance")->check(CLI::IsMember({"none", "variance"}));
    app->add_option("--holdout-fraction", cfg.holdout_fraction)->check(CLI::Range(0.0, 0.9));
    app->add_option("--holdout-draws", cfg.holdout_draws)->check(CLI::PositiveNumber);
    app->add_option("--eval-every", cfg.eval_every)->check(CLI::PositiveNumber);
  }
  TrainConfig config(std::uint64_t seed) const {
    TrainConfig c = cfg;
    c.net.hidden = detail::parse_sizes(hidden, "--hidden");
    c.target.kind = target == "mcmc" ? TargetMode::Kind::mcmc : TargetMode::Kind::exact;
    c.weighting = weighting == "variance" ? LossWeighting::variance : LossWeighting::none;
    c.optimizer = optimizer == "adam" ? Optimizer::adam : Optimizer::sgd;
    c.seed = RngSeed{seed};
    if (!(c.T > c.t_min)) throw UsageError("--t-max must exceed --t-min");
    return c;
  }
};

struct DataOptions {
  std::string kind = "jittered-template";
  DatasetSpec spec;

  void add(CLI::App* app) {
    app->add_option("--kind", kind, "gaussian-blobs | ring | jittered-template");
    app->add_option("--items", spec.n_items, "number of clouds")->check(CLI::PositiveNumber);
    app->add_option("-N,--points", spec.n_points, "points per cloud")->check(CLI::PositiveNumber);
    app->add_option("-d,--dim", spec.dim, "dimension per point")->check(CLI::PositiveNumber);
    app->add_option("--jitter", spec.jitter)->check(CLI::NonNegativeNumber);
    app->add_option("--radius", spec.radius)->check(CLI::PositiveNumber);
    app->add_option("--split", spec.split, "independent item stream over the same template");
  }
  DatasetSpec resolve(std::uint64_t seed) const {
    DatasetSpec s = spec;
    s.kind = parse_dataset_kind(kind);
    s.seed = RngSeed{seed};
    return s;
  }
};

namespace detail {

struct Context {
  std::ostream& out;
  std::ostream& err;
  Logger log;
};

inline void emit_json(std::ostream& out, const nlohmann::json& j) { out << j.dump() << '\n'; }

inline void write_trajectory(std::ostream& out, const Trajectory& tr, const std::vector<Permutation>* trace) {
  for (std::size_t k = 0; k < tr.states.size(); ++k) {
    nlohmann::json rec{{"t", tr.times[k]}, {"points", cloud_json(tr.states[k])}};
    if (trace) rec["assignment"] = (*trace)[k].mapping();
    emit_json(out, rec);
  }
}

}  // namespace detail

/// Runs one CLI invocation. `args` excludes the program name. Data goes to
/// `out` (or --out), logs and errors to `err`.
inline int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Score-based diffusion on permutation-quotient point clouds", "qdiff"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "show help for every subcommand");

  CommonOptions common;
  std::string config_path;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--seed", common.seed, "seed for every random draw");
    sub->add_option("-o,--out", common.out, "write data here instead of stdout");
    sub->add_flag("-v,--verbose", common.verbose, "log progress to stderr (repeat for more)");
    sub->add_flag("-q,--quiet", common.quiet, "suppress logs");
    sub->add_option("--config", config_path, "key = value file; explicit flags take precedence");
  };

  // kernel
  std::string x_path, y_path, elements, mode = "quotient-exact";
  double t = 0.0;
  auto* kernel = app.add_subcommand("kernel", "log heat kernel between two clouds");
  kernel->add_option("--x", x_path, "first cloud")->required();
  kernel->add_option("--y", y_path, "second cloud")->required();
  kernel->add_option("--t", t, "time")->required();
  kernel->add_option("--mode", mode, "euclid | quotient-exact")->check(CLI::IsMember({"euclid", "quotient-exact"}));
  kernel->add_option("--elements", elements, "element table for .xyz inputs, e.g. H,C,O");
  add_common(kernel);

  // posterior
  McmcOptions mcmc;
  std::string diagnostics_path;
  std::string post_mode = "exact";
  auto* posterior = app.add_subcommand("posterior", "distribution over permutations matching y to x");
  posterior->add_option("--x", x_path, "clean cloud")->required();
  posterior->add_option("--y", y_path, "noised cloud")->required();
  posterior->add_option("--t", t, "time")->required();
  posterior->add_option("--mode", post_mode, "exact | mcmc")->check(CLI::IsMember({"exact", "mcmc"}));
  posterior->add_option("--diagnostics", diagnostics_path, "sidecar JSON (default: <out>.diagnostics.json)");
  posterior->add_option("--elements", elements);
  mcmc.add(posterior);
  add_common(posterior);

  // score
  std::string method = "exact";
  auto* score = app.add_subcommand("score", "permutation-symmetrized score of y given x");
  score->add_option("--x", x_path, "clean cloud")->required();
  score->add_option("--y", y_path, "noised cloud")->required();
  score->add_option("--t", t, "time")->required();
  score->add_option("--method", method, "exact | mcmc")->check(CLI::IsMember({"exact", "mcmc"}));
  score->add_option("--elements", elements);
  mcmc.add(score);
  add_common(score);

  // forward
  ScheduleOptions sched;
  bool trace = false;
  auto* forward = app.add_subcommand("forward", "simulate the forward OU process");
  forward->add_option("--x0", x_path, "initial cloud")->required();
  forward->add_flag("--trace", trace, "add the posterior-mode assignment to x0 per record");
  forward->add_option("--elements", elements);
  sched.add(forward);
  add_common(forward);

  // reverse
  std::string score_source = "exact", data_path, checkpoint_path, reference_path;
  auto* reverse = app.add_subcommand("reverse", "integrate the reverse SDE from a cloud at time T");
  reverse->add_option("--y", y_path, "cloud at time T (default: standard normal draw, needs -N/-d)");
  std::size_t rev_n = 0, rev_d = 0;
  reverse->add_option("-N,--points", rev_n, "points when drawing y_T");
  reverse->add_option("-d,--dim", rev_d, "dimension when drawing y_T");
  reverse->add_option("--score", score_source, "exact | mcmc | model")->check(CLI::IsMember({"exact", "mcmc", "model"}));
  reverse->add_option("--data", data_path, "dataset for exact/mcmc scores");
  reverse->add_option("--checkpoint", checkpoint_path, "model checkpoint for --score model");
  reverse->add_option("--reference", reference_path, "cloud for --trace (default: the single data cloud)");
  reverse->add_flag("--trace", trace, "add the posterior-mode assignment to the reference per record");
  mcmc.add(reverse);
  sched.add(reverse);
  add_common(reverse);

  // train
  TrainOptions topt;
  auto* trainc = app.add_subcommand("train", "fit the equivariant score network");
  trainc->add_option("--data", data_path, "training dataset")->required();
  trainc->add_option("--checkpoint", checkpoint_path, "checkpoint file to write")->required();
  topt.add(trainc);
  add_common(trainc);

  // sample
  std::size_t n_samples = 16;
  auto* sample = app.add_subcommand("sample", "draw clouds from a trained checkpoint");
  sample->add_option("--checkpoint", checkpoint_path, "checkpoint to load")->required();
  sample->add_option("-n,--count", n_samples, "number of samples")->check(CLI::PositiveNumber);
  sched.add(sample);
  add_common(sample);

  // bench-score
  EstimatorSpec est;
  std::string k_grid = "8,32,128,512", csv_path;
  auto* bench_score = app.add_subcommand("bench-score", "MCMC score error against the exact score");
  bench_score->add_option("-N,--points", est.n_points)->check(CLI::PositiveNumber);
  bench_score->add_option("-d,--dim", est.dim)->check(CLI::PositiveNumber);
  bench_score->add_option("--t", est.t)->check(CLI::PositiveNumber);
  bench_score->add_option("--k-grid", k_grid, "comma-separated K values");
  bench_score->add_option("--replicates", est.replicates)->check(CLI::PositiveNumber);
  bench_score->add_option("--burn-in", est.mcmc.burn_in);
  bench_score->add_option("--thinning", est.mcmc.thinning)->check(CLI::PositiveNumber);
  bench_score->add_option("--threads", common.threads, "worker threads (default: QDIFF_THREADS or all cores)");
  bench_score->add_option("--csv", csv_path, "also write the per-K error table as CSV");
  add_common(bench_score);

  // bench-gen
  DataOptions dopt;
  GenSpec gen;
  bool control = false;
  auto* bench_gen = app.add_subcommand("bench-gen", "train, sample and score a toy generation task");
  dopt.add(bench_gen);
  topt.add(bench_gen);
  sched.add(bench_gen);
  bench_gen->add_option("--samples", gen.n_samples, "generated clouds")->check(CLI::PositiveNumber);
  bench_gen->add_option("--reference", gen.n_reference, "held-out reference clouds")->check(CLI::PositiveNumber);
  bench_gen->add_option("--permutations", gen.permutations, "energy-test shuffles")->check(CLI::PositiveNumber);
  bench_gen->add_flag("--control", control, "score the untrained (zero) network instead of training");
  add_common(bench_gen);

  // make-data
  auto* make_data = app.add_subcommand("make-data", "write a synthetic dataset in point-cloud text format");
  dopt.add(make_data);
  add_common(make_data);

  for (auto* sub : app.get_subcommands({})) sub->fallthrough(false);

  std::vector<std::string> argv = args;
  try {
    // config files are expanded into flags before parsing
    if (!argv.empty()) {
      for (std::size_t k = 1; k + 1 < argv.size(); ++k)
        if (argv[k] == "--config") {
          CLI::App* sub = app.get_subcommand_no_throw(argv[0]);
          if (sub == nullptr) break;
          const auto extra = detail::expand_config(argv[k + 1], *sub, argv);
          argv.insert(argv.begin() + 1, extra.begin(), extra.end());
          break;
        }
    }
    std::vector<std::string> reversed(argv.rbegin(), argv.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    if (args.empty()) {
      err << app.help();
    }
    err << "error: usage: " << e.what() << '\n';
    return kUsage;
  } catch (const Error& e) {
    err << "error: " << e.category() << ": " << e.what() << '\n';
    return exit_code_for(e);
  }

  detail::Logger log(err, common.quiet ? 0 : common.verbose);
  std::ostringstream buf;
  try {
    if (kernel->parsed()) {
      const auto x = detail::load_cloud(x_path, elements), y = detail::load_cloud(y_path, elements);
      require_same_shape(x, y);
      nlohmann::json j;
      if (mode == "euclid") {
        j["log_density"] = euclid_log_heat_kernel(x, y, t);
        j["terms"] = 1;
      } else {
        const auto k = quotient_log_heat_kernel_exact(x, y, t);
        j["log_density"] = k.log_density;
        j["terms"] = k.terms;
      }
      j["t"] = t;
      j["n"] = x.n();
      j["d"] = x.d();
      j["mode"] = mode;
      detail::emit_json(buf, j);
    } else if (posterior->parsed()) {
      const auto x = detail::load_cloud(x_path, elements), y = detail::load_cloud(y_path, elements);
      nlohmann::json diag;
      if (post_mode == "exact") {
        const auto q = posterior_exact(x, y, t);
        for (std::size_t k = 0; k < q.size(); ++k)
          detail::emit_json(buf, {{"perm", q.support[k].mapping()}, {"log_weight", q.log_weights[k]}});
        diag = {{"mode", "exact"}, {"support_size", q.size()}};
      } else {
        const auto cfg = mcmc.config(common.seed);
        const auto res = mcmc_sample(x, y, t, cfg);
        for (std::size_t k = 0; k < res.distribution.size(); ++k)
          detail::emit_json(buf, {{"perm", res.distribution.support[k].mapping()},
                                  {"log_weight", res.distribution.log_weights[k]},
                                  {"log_target", res.state_log_weights[k]}});
        diag = detail::diagnostics_json(res.diagnostics);
        diag["mode"] = "mcmc";
        diag["samples"] = cfg.samples;
        diag["burn_in"] = cfg.burn_in_for(x.n());
        diag["thinning"] = cfg.thinning_for(x.n());
        diag["seed"] = common.seed;
      }
      diag["schema_version"] = kReportSchemaVersion;
      std::string sidecar = diagnostics_path;
      if (sidecar.empty() && !common.out.empty()) sidecar = common.out + ".diagnostics.json";
      if (!sidecar.empty()) {
        std::ofstream f(sidecar);
        if (!f) throw FileError("cannot open '" + sidecar + "' for writing");
        detail::emit_json(f, diag);
      }
      log.info("posterior: " + diag.dump());
    } else if (score->parsed()) {
      const auto x = detail::load_cloud(x_path, elements), y = detail::load_cloud(y_path, elements);
      nlohmann::json j;
      if (method == "exact") {
        j["score"] = detail::score_json(symmetrized_score_exact(x, y, t));
        j["diagnostics"] = nullptr;
      } else {
        const auto r = symmetrized_score_mcmc(x, y, t, mcmc.config(common.seed));
        j["score"] = detail::score_json(r.score);
        j["diagnostics"] = detail::diagnostics_json(r.diagnostics);
      }
      j["method"] = method;
      j["t"] = t;
      detail::emit_json(buf, j);
    } else if (forward->parsed()) {
      const auto x0 = detail::load_cloud(x_path, elements);
      const auto tr = forward_trajectory(x0, sched.schedule(), RngSeed{common.seed});
      if (trace) {
        const auto tr_perm = identity_exchange_trace(tr, x0);
        detail::write_trajectory(buf, tr, &tr_perm);
        log.info("identity exchanges: " + std::to_string(count_identity_exchanges(tr_perm)));
      } else {
        detail::write_trajectory(buf, tr, nullptr);
      }
    } else if (reverse->parsed()) {
      std::vector<PointCloud> data;
      Checkpoint ck;
      if (score_source == "model") {
        if (checkpoint_path.empty()) throw UsageError("--score model needs --checkpoint");
        auto in = detail::open_input(checkpoint_path);
        ck = load_checkpoint(in);
      } else {
        if (data_path.empty()) throw UsageError("--score " + score_source + " needs --data");
        data = detail::load_dataset(data_path);
        if (score_source == "mcmc" && data.size() != 1)
          throw UsageError("--score mcmc uses the conditional score of a single cloud; --data must hold exactly one");
      }
      PointCloud yT;
      if (!y_path.empty()) {
        yT = detail::load_cloud(y_path, "");
      } else {
        const std::size_t n = rev_n ? rev_n : (data.empty() ? ck.n_points : data.front().n());
        const std::size_t d = rev_d ? rev_d : (data.empty() ? ck.net.config().point_dim : data.front().d());
        yT = PointCloud(n, d);
        Rng rng(derive_seed(RngSeed{common.seed}, 0));
        for (auto& v : yT.flat()) v = rng.normal();
      }
      std::size_t calls = 0;
      const McmcConfig mc = mcmc.config(common.seed);
      ScoreFn fn;
      if (score_source == "exact") {
        fn = [&](const PointCloud& y, double tt) { return quotient_marginal_score(y, data, tt); };
      } else if (score_source == "mcmc") {
        fn = [&](const PointCloud& y, double tt) {
          McmcConfig c = mc;
          c.seed = derive_seed(RngSeed{common.seed}, 1000 + calls++);
          return quotient_conditional_score_mcmc(data.front(), y, tt, c).score;
        };
      } else {
        fn = [&](const PointCloud& y, double tt) { return ck.net.forward(y, tt); };
      }
      const auto tr = reverse_integrate(yT, sched.schedule(), fn, derive_seed(RngSeed{common.seed}, 1));
      if (trace) {
        PointCloud ref;
        if (!reference_path.empty())
          ref = detail::load_cloud(reference_path, "");
        else if (data.size() == 1)
          ref = data.front();
        else
          throw UsageError("--trace needs --reference unless --data holds a single cloud");
        const auto tr_perm = identity_exchange_trace(tr, ref);
        detail::write_trajectory(buf, tr, &tr_perm);
      } else {
        detail::write_trajectory(buf, tr, nullptr);
      }
    } else if (trainc->parsed()) {
      const auto data = detail::load_dataset(data_path);
      const auto cfg = topt.config(common.seed);
      log.info("training on " + std::to_string(data.size()) + " clouds for " + std::to_string(cfg.iterations) +
               " iterations");
      const auto ck = train(data, cfg);
      {
        std::ofstream f(checkpoint_path);
        if (!f) throw FileError("cannot open '" + checkpoint_path + "' for writing");
        save_checkpoint(f, ck);
      }
      nlohmann::json j{{"schema_version", kReportSchemaVersion},
                       {"iterations", ck.iteration},
                       {"parameters", ck.net.parameter_count()},
                       {"initial_holdout_loss", ck.initial_holdout_loss()},
                       {"final_holdout_loss", ck.final_holdout_loss()}};
      auto curve = nlohmann::json::array();
      for (const auto& p : ck.curve)
        curve.push_back({{"iteration", p.iteration}, {"holdout_loss", p.holdout_loss}, {"train_loss", p.train_loss}});
      j["curve"] = std::move(curve);
      detail::emit_json(buf, j);
    } else if (sample->parsed()) {
      auto in = detail::open_input(checkpoint_path);
      const auto ck = load_checkpoint(in);
      const auto qs = sample_from_model(ck, n_samples, sched.schedule(), RngSeed{common.seed});
      for (std::size_t k = 0; k < qs.size(); ++k)
        detail::emit_json(buf, {{"index", k}, {"points", detail::cloud_json(qs[k].representative())}});
    } else if (bench_score->parsed()) {
      est.k_grid = detail::parse_sizes(k_grid, "--k-grid");
      est.seed = RngSeed{common.seed};
      est.threads = common.threads;
      const auto study = run_estimator_study(est);
      detail::emit_json(buf, to_json(study));
      if (!csv_path.empty()) {
        std::ofstream f(csv_path);
        if (!f) throw FileError("cannot open '" + csv_path + "' for writing");
        write_csv(f, study);
      }
    } else if (bench_gen->parsed()) {
      gen.data = dopt.resolve(derive_seed(RngSeed{common.seed}, 1).value);
      gen.train = topt.config(derive_seed(RngSeed{common.seed}, 2).value);
      gen.schedule = sched.schedule();
      gen.seed = derive_seed(RngSeed{common.seed}, 3);
      GenReport rep;
      if (control) {
        rep = evaluate_generation(untrained_checkpoint(gen.data.n_points, gen.data.dim, gen.train.net),
                                  reference_dataset(gen), gen);
      } else {
        rep = run_toy_generation(gen);
      }
      auto j = to_json(rep);
      j["control"] = control;
      detail::emit_json(buf, j);
    } else if (make_data->parsed()) {
      io::write_dataset(buf, make_synthetic_dataset(dopt.resolve(common.seed)));
    }
  } catch (const Error& e) {
    err << "error: " << e.category() << ": " << e.what() << '\n';
    return exit_code_for(e);
  } catch (const std::exception& e) {
    err << "error: internal: " << e.what() << '\n';
    return kInternal;
  }

  if (common.out.empty()) {
    out << buf.str();
  } else {
    std::ofstream f(common.out, std::ios::binary);
    if (!f) {
      err << "error: file: cannot open '" << common.out << "' for writing\n";
      return kFile;
    }
    f << buf.str();
  }
  return kOk;
}

inline int dispatch(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return dispatch(std::vector<std::string>(argv + 1, argv + argc), out, err);
}

}  // namespace qdiff::cli
