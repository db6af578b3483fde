#pragma once

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ascood/core.hpp"
#include "ascood/data.hpp"
#include "ascood/error.hpp"
#include "ascood/model.hpp"
#include "ascood/postprocess.hpp"
#include "ascood/synthesis.hpp"

namespace ascood {

struct OptimizerConfig {
  SgdConfig sgd;
  std::size_t epochs = 15;
  std::size_t batch_size = 32;
  bool cosine = true;
  bool operator==(const OptimizerConfig&) const = default;
};

/// Dataset references are either image folders or "<benchmark dir>#<split>".
struct DataConfig {
  std::string train;
  std::string val_id;
  std::string test_id;
  std::vector<std::pair<std::string, std::string>> ood;  ///< name -> reference, evaluation order
  std::string val_ood;                                   ///< used only for ODIN tuning
  TransformSpec transform;
  bool operator==(const DataConfig&) const = default;
};

struct EvalConfig {
  std::vector<std::string> postprocessors = {"msp", "tempscale", "energy", "odin", "iodin"};
  OdinConfig odin;
  /// Grid-search ODIN/i-ODIN (T, eps) on val_id vs val_ood before scoring.
  bool tune_odin = false;
  std::vector<double> odin_temperatures = OdinGrid{}.temperatures;
  std::vector<double> odin_epsilons = OdinGrid{}.epsilons;
  double energy_temperature = 1.0;
  /// Temperature for "tempscale"; 0 fits it by NLL on val_id.
  double tempscale_temperature = 0.0;
  bool operator==(const EvalConfig&) const = default;
};

/// One declarative run. alpha.total_steps == 0 means "span the whole run".
struct RunConfig {
  std::string name = "run";
  std::uint64_t seed = 0;
  double lambda = 1.0;
  ClassifierConfig classifier;
  SynthesisConfig synthesis;
  OptimizerConfig optimizer;
  DataConfig data;
  EvalConfig eval;
  /// Checkpoint whose backbone weights initialise the model (fine-tuning); empty = scratch.
  std::string init_from;
  std::string output_dir = "runs";
  bool operator==(const RunConfig&) const = default;
};

inline const std::vector<std::string>& known_postprocessors() {
  static const std::vector<std::string> names = {"msp", "tempscale", "energy", "odin", "iodin", "iodin_channel"};
  return names;
}

// ---- enum names -------------------------------------------------------------

namespace detail {

template <typename E, std::size_t N>
using EnumNames = std::array<std::pair<E, const char*>, N>;

inline constexpr EnumNames<SynthesisMethod, 6> kMethodNames{{{SynthesisMethod::grad_add, "grad_add"},
                                                             {SynthesisMethod::grad_sub, "grad_sub"},
                                                             {SynthesisMethod::invariant_shuffle, "invariant_shuffle"},
                                                             {SynthesisMethod::random_shuffle, "random_shuffle"},
                                                             {SynthesisMethod::gaussian_noise, "gaussian_noise"},
                                                             {SynthesisMethod::identity, "identity"}}};
inline constexpr EnumNames<MaskGranularity, 2> kGranularityNames{
    {{MaskGranularity::element, "element"}, {MaskGranularity::pixel, "pixel"}}};
inline constexpr EnumNames<SaliencySource, 2> kSaliencyNames{
    {{SaliencySource::logit, "logit"}, {SaliencySource::probability, "probability"}}};
inline constexpr EnumNames<ScheduleGranularity, 2> kScheduleGranularityNames{
    {{ScheduleGranularity::epoch, "epoch"}, {ScheduleGranularity::step, "step"}}};
inline constexpr EnumNames<ScheduleMode, 2> kScheduleModeNames{
    {{ScheduleMode::constant, "constant"}, {ScheduleMode::linear, "linear"}}};
inline constexpr EnumNames<FeatureMode, 3> kFeatureModeNames{{{FeatureMode::standardized, "standardized"},
                                                              {FeatureMode::raw, "raw"},
                                                              {FeatureMode::l2_normalized, "l2_normalized"}}};
inline constexpr EnumNames<OdinMask, 3> kOdinMaskNames{
    {{OdinMask::none, "none"}, {OdinMask::topk_percent, "topk_percent"}, {OdinMask::top_channel, "top_channel"}}};

template <typename E, std::size_t N>
const char* enum_name(const EnumNames<E, N>& names, E value) {
  for (const auto& [e, n] : names) {
    if (e == value) return n;
  }
  return "?";
}

template <typename E, std::size_t N>
std::optional<E> enum_value(const EnumNames<E, N>& names, const std::string& s) {
  for (const auto& [e, n] : names) {
    if (s == n) return e;
  }
  return std::nullopt;
}

/// Strict reader over one JSON object: every key must be consumed, types must match.
class ObjectReader {
 public:
  ObjectReader(const nlohmann::ordered_json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigParseError(where() + "expected an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  bool has(const std::string& key) const { return j_.contains(key); }

  const nlohmann::ordered_json& raw(const std::string& key) {
    seen_.push_back(key);
    return j_.at(key);
  }

  template <typename T>
  void read(const std::string& key, T& dst) {
    if (!j_.contains(key)) return;
    seen_.push_back(key);
    dst = convert<T>(j_.at(key), field(key));
  }

  template <typename E, std::size_t N>
  void read_enum(const std::string& key, E& dst, const EnumNames<E, N>& names) {
    if (!j_.contains(key)) return;
    seen_.push_back(key);
    const auto& v = j_.at(key);
    if (!v.is_string()) throw ConfigParseError(field(key) + ": expected a string");
    const auto e = enum_value(names, v.get<std::string>());
    if (!e) {
      std::string options;
      for (const auto& [_, n] : names) options += std::string(options.empty() ? "" : ", ") + n;
      throw ConfigParseError(field(key) + ": unknown value '" + v.get<std::string>() + "' (expected one of " +
                             options + ")");
    }
    dst = *e;
  }

  /// Nested object; `fn(ObjectReader&)` consumes its fields.
  template <typename Fn>
  void nested(const std::string& key, Fn&& fn) {
    if (!j_.contains(key)) return;
    seen_.push_back(key);
    ObjectReader sub(j_.at(key), field(key));
    fn(sub);
    sub.finish();
  }

  void finish() const {
    for (const auto& [key, _] : j_.items()) {
      if (std::find(seen_.begin(), seen_.end(), key) == seen_.end()) {
        throw ConfigParseError(field(key) + ": unknown field");
      }
    }
  }

  template <typename T>
  static T convert(const nlohmann::ordered_json& v, const std::string& where) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigParseError(where + ": expected a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigParseError(where + ": expected a string");
      return v.get<std::string>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigParseError(where + ": expected a number");
      return v.get<T>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer() || (std::is_unsigned_v<T> && !v.is_number_unsigned() && v.get<long long>() < 0)) {
        throw ConfigParseError(where + ": expected a non-negative integer");
      }
      return v.get<T>();
    } else if constexpr (std::is_same_v<T, std::optional<double>>) {
      if (v.is_null()) return std::nullopt;
      if (!v.is_number()) throw ConfigParseError(where + ": expected a number or null");
      return v.get<double>();
    } else {
      // std::vector<U> / std::array<U, N>
      if (!v.is_array()) throw ConfigParseError(where + ": expected an array");
      T out{};
      if constexpr (requires { out.push_back(typename T::value_type{}); }) {
        for (std::size_t i = 0; i < v.size(); ++i) {
          out.push_back(convert<typename T::value_type>(v[i], where + "[" + std::to_string(i) + "]"));
        }
      } else {
        if (v.size() != out.size()) {
          throw ConfigParseError(where + ": expected " + std::to_string(out.size()) + " entries");
        }
        for (std::size_t i = 0; i < out.size(); ++i) {
          out[i] = convert<typename T::value_type>(v[i], where + "[" + std::to_string(i) + "]");
        }
      }
      return out;
    }
  }

 private:
  std::string where() const { return path_.empty() ? "" : path_ + ": "; }

  const nlohmann::ordered_json& j_;
  std::string path_;
  std::vector<std::string> seen_;
};

}  // namespace detail

// ---- serialisation ----------------------------------------------------------

inline nlohmann::ordered_json to_json(const RunConfig& c) {
  using detail::enum_name;
  nlohmann::ordered_json j;
  j["name"] = c.name;
  j["seed"] = c.seed;
  j["lambda"] = c.lambda;
  j["classifier"] = {{"num_classes", c.classifier.num_classes},
                     {"feature_dim", c.classifier.feature_dim},
                     {"sigma", c.classifier.sigma},
                     {"backbone", c.classifier.backbone},
                     {"in_channels", c.classifier.in_channels},
                     {"widths", c.classifier.widths},
                     {"feature_mode", enum_name(detail::kFeatureModeNames, c.classifier.feature_mode)}};
  const auto& s = c.synthesis;
  j["synthesis"] = {{"method", enum_name(detail::kMethodNames, s.method)},
                    {"p_inv", s.p_inv},
                    {"alpha",
                     {{"start", s.alpha.start},
                      {"end", s.alpha.end},
                      {"total_steps", s.alpha.total_steps},
                      {"mode", enum_name(detail::kScheduleModeNames, s.alpha.mode)},
                      {"granularity", enum_name(detail::kScheduleGranularityNames, s.alpha_granularity)}}},
                    {"noise_scale", s.noise_scale},
                    {"mask_granularity", enum_name(detail::kGranularityNames, s.mask_granularity)},
                    {"saliency", enum_name(detail::kSaliencyNames, s.saliency)}};
  const auto& o = c.optimizer;
  j["optimizer"] = {{"lr", o.sgd.lr},
                    {"fc_lr", o.sgd.fc_lr ? nlohmann::ordered_json(*o.sgd.fc_lr) : nlohmann::ordered_json(nullptr)},
                    {"momentum", o.sgd.momentum},
                    {"weight_decay", o.sgd.weight_decay},
                    {"epochs", o.epochs},
                    {"batch_size", o.batch_size},
                    {"cosine", o.cosine}};
  nlohmann::ordered_json ood = nlohmann::ordered_json::object();
  for (const auto& [name, ref] : c.data.ood) ood[name] = ref;
  const auto& t = c.data.transform;
  j["data"] = {{"train", c.data.train},
               {"val_id", c.data.val_id},
               {"test_id", c.data.test_id},
               {"ood", ood},
               {"val_ood", c.data.val_ood},
               {"transform",
                {{"height", t.height},
                 {"width", t.width},
                 {"channels", t.channels},
                 {"mean", t.mean},
                 {"std", t.std},
                 {"hflip", t.hflip},
                 {"random_resized_crop", t.random_resized_crop},
                 {"crop_scale_min", t.crop_scale_min}}}};
  const auto& e = c.eval;
  j["eval"] = {{"postprocessors", e.postprocessors},
               {"odin",
                {{"temperature", e.odin.temperature},
                 {"epsilon", e.odin.epsilon},
                 {"mask_mode", enum_name(detail::kOdinMaskNames, e.odin.mask_mode)},
                 {"p_inv", e.odin.p_inv}}},
               {"tune_odin", e.tune_odin},
               {"odin_temperatures", e.odin_temperatures},
               {"odin_epsilons", e.odin_epsilons},
               {"energy_temperature", e.energy_temperature},
               {"tempscale_temperature", e.tempscale_temperature}};
  j["init_from"] = c.init_from;
  j["output_dir"] = c.output_dir;
  return j;
}

/// Checks cross-field constraints; throws ConfigParseError naming the field.
inline void validate(const RunConfig& c) {
  auto fail = [](const std::string& field, const std::string& msg) { throw ConfigParseError(field + ": " + msg); };
  if (c.lambda < 0.0) fail("lambda", "must be >= 0");
  if (c.classifier.num_classes < 2) fail("classifier.num_classes", "must be >= 2");
  if (c.classifier.feature_dim < 2) fail("classifier.feature_dim", "must be >= 2");
  if (!(c.classifier.sigma > 0.0)) fail("classifier.sigma", "must be > 0");
  if (c.classifier.backbone != "convnet" && c.classifier.backbone != "linear") {
    fail("classifier.backbone", "unknown value '" + c.classifier.backbone + "' (expected convnet or linear)");
  }
  if (c.classifier.backbone == "convnet" && c.classifier.widths.size() != 2) {
    fail("classifier.widths", "convnet needs exactly two widths");
  }
  const auto& s = c.synthesis;
  if (!(s.p_inv > 0.0 && s.p_inv <= 100.0)) fail("synthesis.p_inv", "must lie in (0, 100]");
  if (s.noise_scale < 0.0) fail("synthesis.noise_scale", "must be >= 0");
  if (s.alpha.start < 0.0) fail("synthesis.alpha.start", "must be >= 0");
  if (s.alpha.end < 0.0) fail("synthesis.alpha.end", "must be >= 0");
  if (c.optimizer.epochs == 0) fail("optimizer.epochs", "must be >= 1");
  if (c.optimizer.batch_size == 0) fail("optimizer.batch_size", "must be >= 1");
  if (!(c.optimizer.sgd.lr > 0.0)) fail("optimizer.lr", "must be > 0");
  if (c.optimizer.sgd.fc_lr && !(*c.optimizer.sgd.fc_lr > 0.0)) fail("optimizer.fc_lr", "must be > 0");
  for (std::size_t i = 0; i < c.eval.postprocessors.size(); ++i) {
    const auto& p = c.eval.postprocessors[i];
    const auto& known = known_postprocessors();
    if (std::find(known.begin(), known.end(), p) == known.end()) {
      fail("eval.postprocessors[" + std::to_string(i) + "]", "unknown value '" + p + "'");
    }
  }
  if (!(c.eval.odin.temperature > 0.0)) fail("eval.odin.temperature", "must be > 0");
  if (c.eval.odin.epsilon < 0.0) fail("eval.odin.epsilon", "must be >= 0");
  if (!(c.eval.odin.p_inv > 0.0 && c.eval.odin.p_inv <= 100.0)) fail("eval.odin.p_inv", "must lie in (0, 100]");
  if (!(c.eval.energy_temperature > 0.0)) fail("eval.energy_temperature", "must be > 0");
  if (c.eval.tempscale_temperature < 0.0) fail("eval.tempscale_temperature", "must be >= 0");
  if (c.data.transform.height == 0 || c.data.transform.width == 0) fail("data.transform", "size must be positive");
  if (c.data.transform.channels != c.classifier.in_channels) {
    fail("data.transform.channels", "must equal classifier.in_channels");
  }
}

/// Parses a full or partial config; absent fields keep the values in `base`.
inline RunConfig run_config_from_json(const nlohmann::ordered_json& j, RunConfig c = {}) {
  using detail::ObjectReader;
  ObjectReader r(j, "");
  r.read("name", c.name);
  r.read("seed", c.seed);
  r.read("lambda", c.lambda);
  r.nested("classifier", [&](ObjectReader& o) {
    o.read("num_classes", c.classifier.num_classes);
    o.read("feature_dim", c.classifier.feature_dim);
    o.read("sigma", c.classifier.sigma);
    o.read("backbone", c.classifier.backbone);
    o.read("in_channels", c.classifier.in_channels);
    o.read("widths", c.classifier.widths);
    o.read_enum("feature_mode", c.classifier.feature_mode, detail::kFeatureModeNames);
  });
  r.nested("synthesis", [&](ObjectReader& o) {
    auto& s = c.synthesis;
    o.read_enum("method", s.method, detail::kMethodNames);
    o.read("p_inv", s.p_inv);
    o.nested("alpha", [&](ObjectReader& a) {
      a.read("start", s.alpha.start);
      a.read("end", s.alpha.end);
      a.read("total_steps", s.alpha.total_steps);
      const auto prior = s.alpha.mode;
      a.read_enum("mode", s.alpha.mode, detail::kScheduleModeNames);
      // A constant schedule switched to linear without a length spans the run.
      if (prior == ScheduleMode::constant && s.alpha.mode == ScheduleMode::linear && !a.has("total_steps")) {
        s.alpha.total_steps = 0;
      }
      a.read_enum("granularity", s.alpha_granularity, detail::kScheduleGranularityNames);
    });
    o.read("noise_scale", s.noise_scale);
    o.read_enum("mask_granularity", s.mask_granularity, detail::kGranularityNames);
    o.read_enum("saliency", s.saliency, detail::kSaliencyNames);
  });
  r.nested("optimizer", [&](ObjectReader& o) {
    o.read("lr", c.optimizer.sgd.lr);
    o.read("fc_lr", c.optimizer.sgd.fc_lr);
    o.read("momentum", c.optimizer.sgd.momentum);
    o.read("weight_decay", c.optimizer.sgd.weight_decay);
    o.read("epochs", c.optimizer.epochs);
    o.read("batch_size", c.optimizer.batch_size);
    o.read("cosine", c.optimizer.cosine);
  });
  r.nested("data", [&](ObjectReader& o) {
    o.read("train", c.data.train);
    o.read("val_id", c.data.val_id);
    o.read("test_id", c.data.test_id);
    if (o.has("ood")) {
      const auto& ood = o.raw("ood");
      if (!ood.is_object()) throw ConfigParseError(o.field("ood") + ": expected an object of name -> reference");
      c.data.ood.clear();
      for (const auto& [name, ref] : ood.items()) {
        c.data.ood.emplace_back(name, ObjectReader::convert<std::string>(ref, o.field("ood") + "." + name));
      }
    }
    o.read("val_ood", c.data.val_ood);
    o.nested("transform", [&](ObjectReader& t) {
      auto& ts = c.data.transform;
      t.read("height", ts.height);
      t.read("width", ts.width);
      t.read("channels", ts.channels);
      t.read("mean", ts.mean);
      t.read("std", ts.std);
      t.read("hflip", ts.hflip);
      t.read("random_resized_crop", ts.random_resized_crop);
      t.read("crop_scale_min", ts.crop_scale_min);
    });
  });
  r.nested("eval", [&](ObjectReader& o) {
    auto& e = c.eval;
    o.read("postprocessors", e.postprocessors);
    o.nested("odin", [&](ObjectReader& d) {
      d.read("temperature", e.odin.temperature);
      d.read("epsilon", e.odin.epsilon);
      d.read_enum("mask_mode", e.odin.mask_mode, detail::kOdinMaskNames);
      d.read("p_inv", e.odin.p_inv);
    });
    o.read("tune_odin", e.tune_odin);
    o.read("odin_temperatures", e.odin_temperatures);
    o.read("odin_epsilons", e.odin_epsilons);
    o.read("energy_temperature", e.energy_temperature);
    o.read("tempscale_temperature", e.tempscale_temperature);
  });
  r.read("init_from", c.init_from);
  r.read("output_dir", c.output_dir);
  r.finish();
  validate(c);
  return c;
}

inline RunConfig parse_run_config(const std::string& text, RunConfig base = {}) {
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigParseError(std::string("malformed JSON: ") + e.what());
  }
  return run_config_from_json(j, std::move(base));
}

inline RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigParseError("cannot open config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str(), std::move(base));
}

inline void save_run_config(const RunConfig& c, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << to_json(c).dump(2) << '\n';
}

/// 64-bit FNV-1a of the canonical JSON, as 16 hex digits.
inline std::string config_digest(const RunConfig& c) {
  const std::string text = to_json(c).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

// ---- presets ----------------------------------------------------------------

/// Final hyperparameters per benchmark. Data references are left empty except for "desk".
inline RunConfig preset(const std::string& name) {
  RunConfig c;
  c.name = name;
  c.classifier.sigma = 0.5;
  c.lambda = 1.0;
  auto& s = c.synthesis;
  s.method = SynthesisMethod::grad_add;
  if (name == "waterbirds") {
    c.lambda = 0.1;
    s.p_inv = 10.0;
    s.alpha = {300.0, 30.0, 0, ScheduleMode::linear};
    s.noise_scale = 0.1;
  } else if (name == "celeba") {
    s.p_inv = 5.0;
    s.alpha = {50.0, 30.0, 0, ScheduleMode::linear};
    s.noise_scale = 0.1;
  } else if (name == "car" || name == "aircraft") {
    s.p_inv = 10.0;
    s.alpha = AlphaSchedule::constant(0.1);
  } else if (name == "cifar10") {
    s.method = SynthesisMethod::random_shuffle;
    s.p_inv = 20.0;
    s.alpha = AlphaSchedule::constant(10.0);
    s.noise_scale = 0.1;
    c.classifier.num_classes = 10;
  } else if (name == "cifar100") {
    c.lambda = 5.0;
    s.method = SynthesisMethod::invariant_shuffle;
    s.p_inv = 10.0;
    s.alpha = AlphaSchedule::constant(10.0);
    s.noise_scale = 0.01;
    c.optimizer.sgd.fc_lr = 0.005;
    c.classifier.num_classes = 100;
  } else if (name == "imagenet100") {
    s.p_inv = 10.0;
    s.alpha = AlphaSchedule::constant(10.0);
    c.classifier.num_classes = 100;
  } else if (name == "desk") {
    s.p_inv = 10.0;
    s.alpha = {10000.0, 3000.0, 0, ScheduleMode::linear};
    c.optimizer.epochs = 10;
    c.data.train = "bench#train";
    c.data.val_id = "bench#val_id";
    c.data.test_id = "bench#test_id";
    c.data.ood = {{"spurious", "bench#spurious_ood"}, {"conventional", "bench#conventional_ood"}};
    c.data.val_ood = "bench#val_ood";
  } else {
    throw ConfigParseError("preset: unknown value '" + name +
                           "' (expected waterbirds, celeba, car, aircraft, cifar10, cifar100, imagenet100, desk)");
  }
  return c;
}

}  // namespace ascood
