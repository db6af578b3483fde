#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ascood/config.hpp"
#include "ascood/error.hpp"
#include "ascood/model.hpp"
#include "ascood/training.hpp"

namespace ascood {

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;
  bool operator==(const NamedTensor&) const = default;
};

/// Weights, optimiser momentum, run configuration and everything needed to resume.
struct Checkpoint {
  static constexpr int kFormatVersion = 1;

  RunConfig config;
  std::size_t epoch = 0;  ///< epochs completed
  std::size_t global_step = 0;
  std::vector<EpochStats> history;
  std::string data_rng;
  std::string synth_rng;
  std::vector<NamedTensor> weights;
  std::vector<NamedTensor> velocity;  ///< empty before the first optimiser step
};

namespace detail {

inline std::string rng_state(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline void set_rng_state(std::mt19937_64& rng, const std::string& state) {
  std::istringstream is(state);
  is >> rng;
  if (!is) throw FormatError("checkpoint: corrupt RNG state");
}

template <typename S>
NamedTensor named(const std::string& name, const Tensor<S>& t) {
  return {name, t.shape(), std::vector<double>(t.values().begin(), t.values().end())};
}

template <typename S>
void assign(Tensor<S>& dst, const NamedTensor& src, const std::string& expected_name) {
  if (src.name != expected_name) {
    throw FormatError("checkpoint: expected tensor '" + expected_name + "', found '" + src.name + "'");
  }
  if (src.shape != dst.shape() || src.values.size() != dst.size()) {
    throw FormatError("checkpoint: tensor '" + src.name + "' has shape " + shape_string(src.shape) +
                      ", model expects " + shape_string(dst.shape()));
  }
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<S>(src.values[i]);
}

inline nlohmann::ordered_json to_json(const NamedTensor& t) {
  return {{"name", t.name}, {"shape", t.shape}, {"values", t.values}};
}

inline NamedTensor named_tensor_from_json(const nlohmann::ordered_json& j) {
  try {
    NamedTensor t{j.at("name").get<std::string>(), j.at("shape").get<Shape>(), j.at("values").get<std::vector<double>>()};
    if (shape_size(t.shape) != t.values.size()) throw FormatError("checkpoint: tensor '" + t.name + "' size mismatch");
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed tensor: ") + e.what());
  }
}

inline nlohmann::ordered_json to_json(const EpochStats& s) {
  return {{"epoch", s.epoch}, {"ce", s.ce},   {"kl", s.kl},          {"total", s.total},
          {"accuracy", s.accuracy}, {"alpha", s.alpha}, {"lr", s.lr}, {"batches", s.batches}};
}

inline EpochStats epoch_stats_from_json(const nlohmann::ordered_json& j) {
  EpochStats s;
  s.epoch = j.at("epoch").get<std::size_t>();
  s.ce = j.at("ce").get<double>();
  s.kl = j.at("kl").get<double>();
  s.total = j.at("total").get<double>();
  s.accuracy = j.at("accuracy").get<double>();
  s.alpha = j.at("alpha").get<double>();
  s.lr = j.at("lr").get<double>();
  s.batches = j.at("batches").get<std::size_t>();
  return s;
}

}  // namespace detail

template <typename S>
Checkpoint capture_checkpoint(const RunConfig& config, Classifier<S>& model, const Sgd<S>& optimizer,
                              const TrainState& state, std::vector<EpochStats> history) {
  Checkpoint c;
  c.config = config;
  c.config.classifier = model.config();
  c.epoch = state.epoch;
  c.global_step = state.global_step;
  c.history = std::move(history);
  c.data_rng = detail::rng_state(state.data_rng);
  c.synth_rng = detail::rng_state(state.synth_rng);
  const auto params = model.parameters();
  for (const auto* p : params) c.weights.push_back(detail::named(p->name, p->value));
  const auto& vel = optimizer.velocity();
  for (std::size_t i = 0; i < vel.size(); ++i) c.velocity.push_back(detail::named(params.at(i)->name, vel[i]));
  return c;
}

/// Loads weights into `model` (which must match the checkpoint's classifier geometry).
template <typename S>
void restore_weights(const Checkpoint& c, Classifier<S>& model) {
  const auto params = model.parameters();
  if (params.size() != c.weights.size()) {
    throw FormatError("checkpoint: " + std::to_string(c.weights.size()) + " tensors, model has " +
                      std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) detail::assign(params[i]->value, c.weights[i], params[i]->name);
}

/// Restores weights, momentum buffers, counters and random streams.
template <typename S>
void restore_checkpoint(const Checkpoint& c, Classifier<S>& model, Sgd<S>& optimizer, TrainState& state) {
  restore_weights(c, model);
  const auto params = model.parameters();
  auto& vel = optimizer.velocity();
  vel.clear();
  if (!c.velocity.empty()) {
    if (c.velocity.size() != params.size()) throw FormatError("checkpoint: velocity count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
      vel.emplace_back(params[i]->value.shape());
      detail::assign(vel.back(), c.velocity[i], params[i]->name);
    }
  }
  state.epoch = c.epoch;
  state.global_step = c.global_step;
  detail::set_rng_state(state.data_rng, c.data_rng);
  detail::set_rng_state(state.synth_rng, c.synth_rng);
}

inline nlohmann::ordered_json to_json(const Checkpoint& c) {
  nlohmann::ordered_json j;
  j["format_version"] = Checkpoint::kFormatVersion;
  j["config"] = to_json(c.config);
  nlohmann::ordered_json hist = nlohmann::ordered_json::array();
  for (const auto& h : c.history) hist.push_back(detail::to_json(h));
  j["metadata"] = {{"epoch", c.epoch},
                   {"global_step", c.global_step},
                   {"history", hist},
                   {"data_rng", c.data_rng},
                   {"synth_rng", c.synth_rng}};
  nlohmann::ordered_json w = nlohmann::ordered_json::array(), v = nlohmann::ordered_json::array();
  for (const auto& t : c.weights) w.push_back(detail::to_json(t));
  for (const auto& t : c.velocity) v.push_back(detail::to_json(t));
  j["weights"] = w;
  j["velocity"] = v;
  return j;
}

inline Checkpoint checkpoint_from_json(const nlohmann::ordered_json& j) {
  Checkpoint c;
  try {
    const int version = j.at("format_version").get<int>();
    if (version != Checkpoint::kFormatVersion) {
      throw FormatError("checkpoint: unsupported format_version " + std::to_string(version));
    }
    c.config = run_config_from_json(j.at("config"));
    const auto& m = j.at("metadata");
    c.epoch = m.at("epoch").get<std::size_t>();
    c.global_step = m.at("global_step").get<std::size_t>();
    for (const auto& h : m.at("history")) c.history.push_back(detail::epoch_stats_from_json(h));
    c.data_rng = m.at("data_rng").get<std::string>();
    c.synth_rng = m.at("synth_rng").get<std::string>();
    for (const auto& t : j.at("weights")) c.weights.push_back(detail::named_tensor_from_json(t));
    for (const auto& t : j.at("velocity")) c.velocity.push_back(detail::named_tensor_from_json(t));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw DataError("cannot write " + tmp);
    out << to_json(c).dump() << '\n';
    if (!out) throw DataError("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  nlohmann::ordered_json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("checkpoint " + path.string() + ": " + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace ascood
