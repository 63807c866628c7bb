#pragma once

#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include <json.hpp>

#include "qdiff/errors.hpp"
#include "qdiff/score_model.hpp"

namespace qdiff {

// Checkpoint file: a single JSON object
//
//   {
//     "format": "qdiff-checkpoint", "version": 1,
//     "n_points": N, "point_dim": d, "hidden": [w1, w2, ...],
//     "iteration": k, "config": {...training settings...},
//     "curve": [{"iteration", "holdout_loss", "train_loss"}, ...],
//     "parameters": [flat parameter array, layout of EquivariantNet]
//   }
//
// Doubles are written in shortest round-trip form, so reloading reproduces
// the network outputs bit-for-bit.

inline constexpr int kCheckpointVersion = 1;

inline const char* to_string(LossWeighting w) { return w == LossWeighting::variance ? "variance" : "none"; }
inline const char* to_string(TargetMode::Kind k) { return k == TargetMode::Kind::mcmc ? "mcmc" : "exact"; }

inline nlohmann::json config_to_json(const TrainConfig& c) {
  nlohmann::json j;
  j["batch_size"] = c.batch_size;
  j["learning_rate"] = c.learning_rate;
  j["momentum"] = c.momentum;
  j["iterations"] = c.iterations;
  j["t_min"] = c.t_min;
  j["T"] = c.T;
  j["target"] = to_string(c.target.kind);
  j["target_samples"] = c.target.mcmc.samples;
  j["weighting"] = to_string(c.weighting);
  j["holdout_fraction"] = c.holdout_fraction;
  j["holdout_draws"] = c.holdout_draws;
  j["eval_every"] = c.eval_every;
  j["seed"] = c.seed.value;
  j["optimizer"] = c.optimizer == Optimizer::adam ? "adam" : "sgd";
  j["ema_decay"] = c.ema_decay;
  j["zero_final"] = c.net.zero_final;
  return j;
}

inline TrainConfig config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.momentum = j.at("momentum").get<double>();
  c.iterations = j.at("iterations").get<std::size_t>();
  c.t_min = j.at("t_min").get<double>();
  c.T = j.at("T").get<double>();
  c.target.kind = j.at("target").get<std::string>() == "mcmc" ? TargetMode::Kind::mcmc : TargetMode::Kind::exact;
  c.target.mcmc.samples = j.at("target_samples").get<std::size_t>();
  c.weighting = j.at("weighting").get<std::string>() == "variance" ? LossWeighting::variance : LossWeighting::none;
  c.holdout_fraction = j.at("holdout_fraction").get<double>();
  c.holdout_draws = j.at("holdout_draws").get<std::size_t>();
  c.eval_every = j.at("eval_every").get<std::size_t>();
  c.seed.value = j.at("seed").get<std::uint64_t>();
  c.optimizer = j.value("optimizer", std::string("sgd")) == "adam" ? Optimizer::adam : Optimizer::sgd;
  c.ema_decay = j.value("ema_decay", 0.0);
  c.net.zero_final = j.at("zero_final").get<bool>();
  return c;
}

inline nlohmann::json checkpoint_to_json(const Checkpoint& ck) {
  nlohmann::json j;
  j["format"] = "qdiff-checkpoint";
  j["version"] = kCheckpointVersion;
  j["n_points"] = ck.n_points;
  j["point_dim"] = ck.net.config().point_dim;
  j["hidden"] = ck.net.config().hidden;
  j["iteration"] = ck.iteration;
  j["config"] = config_to_json(ck.config);
  auto& curve = j["curve"] = nlohmann::json::array();
  for (const auto& p : ck.curve)
    curve.push_back({{"iteration", p.iteration}, {"holdout_loss", p.holdout_loss}, {"train_loss", p.train_loss}});
  j["parameters"] = std::vector<double>(ck.net.parameters().begin(), ck.net.parameters().end());
  return j;
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "qdiff-checkpoint") throw ParseError("not a qdiff checkpoint");
    if (j.at("version").get<int>() != kCheckpointVersion)
      throw ParseError("unsupported checkpoint version " + j.at("version").dump());
    Checkpoint ck;
    ck.config = config_from_json(j.at("config"));
    NetConfig net;
    net.point_dim = j.at("point_dim").get<std::size_t>();
    net.hidden = j.at("hidden").get<std::vector<std::size_t>>();
    net.zero_final = ck.config.net.zero_final;
    ck.config.net = net;
    ck.n_points = j.at("n_points").get<std::size_t>();
    ck.iteration = j.at("iteration").get<std::size_t>();
    for (const auto& p : j.at("curve"))
      ck.curve.push_back({p.at("iteration").get<std::size_t>(), p.at("holdout_loss").get<double>(),
                          p.at("train_loss").get<double>()});
    ck.net = EquivariantNet(net, j.at("parameters").get<std::vector<double>>());
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed checkpoint: ") + e.what());
  } catch (const DimensionError& e) {
    throw ParseError(std::string("malformed checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(std::ostream& out, const Checkpoint& ck) { out << checkpoint_to_json(ck).dump() << '\n'; }

inline Checkpoint load_checkpoint(std::istream& in) {
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint is not valid JSON: ") + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace qdiff
