#pragma once

#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"
#include "sdream/adain_dream.hpp"
#include "sdream/error.hpp"
#include "sdream/eval_harness.hpp"
#include "sdream/model.hpp"
#include "sdream/synth_data.hpp"
#include "sdream/training.hpp"

namespace sdream {

/// Everything a command can be configured with. Every JSON field is optional;
/// missing fields keep the defaults below.
struct CliConfig {
  DatasetSpec dataset;
  Architecture model;
  TrainConfig train;
  /// Domain excluded from `train` (empty: train on every domain).
  std::string held_out;
  ExperimentSpec experiment;
  bool csv = false;
};

namespace detail {

using Json = nlohmann::json;

inline void reject_unknown(const Json& obj, const std::string& section,
                           std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ConfigError("config: section '" + section + "' must be an object");
  std::set<std::string> known(allowed.begin(), allowed.end());
  for (const auto& [key, value] : obj.items()) {
    if (!known.count(key)) throw ConfigError("config: unknown key '" + section + "." + key + "'");
  }
}

template <typename T>
struct is_vector : std::false_type {};
template <typename T>
struct is_vector<std::vector<T>> : std::true_type {};

// nlohmann converts between numeric kinds silently (-1 to a huge size_t,
// 2.5 to 2); config fields must match their kind exactly.
template <typename T>
bool kind_matches(const Json& v) {
  if constexpr (std::is_same_v<T, bool>) {
    return v.is_boolean();
  } else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) {
    return v.is_number_unsigned();
  } else if constexpr (std::is_integral_v<T>) {
    return v.is_number_integer();
  } else if constexpr (std::is_floating_point_v<T>) {
    return v.is_number();
  } else if constexpr (is_vector<T>::value) {
    if (!v.is_array()) return false;
    for (const auto& item : v) {
      if (!kind_matches<typename T::value_type>(item)) return false;
    }
    return true;
  } else {
    return true;
  }
}

template <typename T>
void read(const Json& obj, const std::string& section, const char* key, T& out) {
  if (!obj.contains(key)) return;
  try {
    if (!kind_matches<T>(obj.at(key))) throw ConfigError("");
    out = obj.at(key).get<T>();
  } catch (const std::exception&) {
    throw ConfigError("config: '" + section + "." + key + "' has the wrong type");
  }
}

/// Reads `key` into an enum through (name, value) pairs.
template <typename E>
void read_enum(const Json& obj, const std::string& section, const char* key, E& out,
               std::initializer_list<std::pair<const char*, E>> names) {
  if (!obj.contains(key)) return;
  std::string name;
  read(obj, section, key, name);
  for (const auto& [n, v] : names) {
    if (name == n) {
      out = v;
      return;
    }
  }
  throw ConfigError("config: '" + section + "." + key + "' has unknown value '" + name + "'");
}

template <typename E>
std::string enum_name(E value, std::initializer_list<std::pair<const char*, E>> names) {
  for (const auto& [n, v] : names) {
    if (v == value) return n;
  }
  return "?";
}

inline const std::initializer_list<std::pair<const char*, TrainMode>> kModes{
    {"erm", TrainMode::erm},
    {"sd_ce", TrainMode::sd_ce},
    {"deepdream_consistency", TrainMode::deepdream_consistency},
    {"sd_consistency", TrainMode::sd_consistency}};
inline const std::initializer_list<std::pair<const char*, Divergence>> kDivergences{
    {"kl", Divergence::kl}, {"js", Divergence::js}, {"mse", Divergence::mse}};
inline const std::initializer_list<std::pair<const char*, Protocol>> kProtocols{
    {"leave_one_out", Protocol::leave_one_out},
    {"single_source_matrix", Protocol::single_source_matrix},
    {"bias_probe", Protocol::bias_probe},
    {"ablation", Protocol::ablation},
    {"divergence_sweep", Protocol::divergence_sweep},
    {"alpha_sweep", Protocol::alpha_sweep},
    {"tau_sweep", Protocol::tau_sweep}};
inline const std::initializer_list<std::pair<const char*, DreamMode>> kDreamModes{
    {"stylized", DreamMode::stylized}, {"deepdream", DreamMode::deepdream}};
inline const std::initializer_list<std::pair<const char*, VarianceDivisor>> kDivisors{
    {"population", VarianceDivisor::population}, {"sample", VarianceDivisor::sample}};
inline const std::initializer_list<std::pair<const char*, KlDirection>> kKlDirections{
    {"clean_target", KlDirection::clean_target}, {"sd_target", KlDirection::sd_target}};
inline const std::initializer_list<std::pair<const char*, MseSpace>> kMseSpaces{
    {"probabilities", MseSpace::probabilities}, {"logits", MseSpace::logits}};
inline const std::initializer_list<std::pair<const char*, PoolKind>> kPools{
    {"avg", PoolKind::average}, {"max", PoolKind::max}};

template <typename E>
std::vector<E> read_enum_list(const Json& obj, const std::string& section, const char* key,
                              std::vector<E> current,
                              std::initializer_list<std::pair<const char*, E>> names) {
  if (!obj.contains(key)) return current;
  std::vector<std::string> items;
  read(obj, section, key, items);
  std::vector<E> out;
  for (const auto& item : items) {
    Json wrapper{{"v", item}};
    E value{};
    read_enum(wrapper, section + "." + key, "v", value, names);
    out.push_back(value);
  }
  return out;
}

template <typename E>
std::vector<std::string> enum_names(const std::vector<E>& values,
                                    std::initializer_list<std::pair<const char*, E>> names) {
  std::vector<std::string> out;
  for (E v : values) out.push_back(enum_name(v, names));
  return out;
}

}  // namespace detail

/// Strict parse: unknown keys and out-of-range values are ConfigErrors.
/// `base` supplies the defaults for absent fields.
inline CliConfig parse_config(const nlohmann::json& root, CliConfig base = {}) {
  using detail::read;
  using detail::read_enum;
  CliConfig cfg = std::move(base);
  if (root.is_null()) return cfg;
  detail::reject_unknown(root, "<root>", {"dataset", "model", "dream", "train", "experiment"});

  if (root.contains("dataset")) {
    const auto& s = root["dataset"];
    detail::reject_unknown(s, "dataset", {"seed", "per_cell", "size", "domains", "classes"});
    read(s, "dataset", "seed", cfg.dataset.seed);
    read(s, "dataset", "per_cell", cfg.dataset.per_cell);
    read(s, "dataset", "size", cfg.dataset.size);
    read(s, "dataset", "domains", cfg.dataset.domains);
    read(s, "dataset", "classes", cfg.dataset.classes);
  }
  if (root.contains("model")) {
    const auto& s = root["model"];
    detail::reject_unknown(s, "model", {"widths", "kernel", "pool"});
    read(s, "model", "widths", cfg.model.widths);
    read(s, "model", "kernel", cfg.model.kernel);
    read_enum(s, "model", "pool", cfg.model.pool, detail::kPools);
  }
  if (root.contains("dream")) {
    const auto& s = root["dream"];
    detail::reject_unknown(s, "dream", {"alpha", "iterations", "eps", "noise_bound",
                                        "standardize_grad", "mode", "variance"});
    auto& d = cfg.train.dream;
    read(s, "dream", "alpha", d.alpha);
    read(s, "dream", "iterations", d.iterations);
    read(s, "dream", "eps", d.eps);
    read(s, "dream", "noise_bound", d.noise_bound);
    read(s, "dream", "standardize_grad", d.standardize_grad);
    read_enum(s, "dream", "mode", d.mode, detail::kDreamModes);
    read_enum(s, "dream", "variance", d.divisor, detail::kDivisors);
  }
  if (root.contains("train")) {
    const auto& s = root["train"];
    detail::reject_unknown(s, "train", {"tau", "divergence", "kl_direction", "mse_space",
                                        "consistency_weight", "lr", "momentum", "weight_decay",
                                        "epochs", "batch_size", "seed", "mode", "held_out"});
    auto& t = cfg.train;
    read(s, "train", "tau", t.tau);
    read_enum(s, "train", "divergence", t.divergence, detail::kDivergences);
    read_enum(s, "train", "kl_direction", t.divergence_options.kl_direction, detail::kKlDirections);
    read_enum(s, "train", "mse_space", t.divergence_options.mse_space, detail::kMseSpaces);
    read(s, "train", "consistency_weight", t.consistency_weight);
    read(s, "train", "lr", t.sgd.lr);
    read(s, "train", "momentum", t.sgd.momentum);
    read(s, "train", "weight_decay", t.sgd.weight_decay);
    read(s, "train", "epochs", t.epochs);
    read(s, "train", "batch_size", t.batch_size);
    read(s, "train", "seed", t.seed);
    read_enum(s, "train", "mode", t.mode, detail::kModes);
    read(s, "train", "held_out", cfg.held_out);
  }
  if (root.contains("experiment")) {
    const auto& s = root["experiment"];
    detail::reject_unknown(s, "experiment", {"protocol", "seeds", "modes", "alphas", "taus",
                                             "divergences", "probe_count", "probe_seed", "csv"});
    auto& e = cfg.experiment;
    read_enum(s, "experiment", "protocol", e.protocol, detail::kProtocols);
    read(s, "experiment", "seeds", e.seeds);
    e.modes = detail::read_enum_list(s, "experiment", "modes", e.modes, detail::kModes);
    read(s, "experiment", "alphas", e.alphas);
    read(s, "experiment", "taus", e.taus);
    e.divergences = detail::read_enum_list(s, "experiment", "divergences", e.divergences,
                                           detail::kDivergences);
    read(s, "experiment", "probe_count", e.probe_count);
    read(s, "experiment", "probe_seed", e.probe_seed);
    read(s, "experiment", "csv", cfg.csv);
  }

  cfg.dataset.validate();
  cfg.model.input_size = cfg.dataset.size;
  cfg.model.classes = cfg.dataset.classes.size();
  cfg.model.validate();
  cfg.train.validate();
  if (!(cfg.train.dream.alpha > 0.0) && cfg.train.dream.iterations > 0) {
    throw ConfigError("config: dream.alpha must be > 0");
  }
  if (!(cfg.train.dream.noise_bound >= 0.0)) throw ConfigError("config: dream.noise_bound must be >= 0");
  if (!(cfg.train.dream.eps >= 0.0)) throw ConfigError("config: dream.eps must be >= 0");
  if (cfg.experiment.seeds.empty()) throw ConfigError("config: experiment.seeds must be non-empty");
  for (double a : cfg.experiment.alphas) {
    if (!(a > 0.0)) throw ConfigError("config: experiment.alphas must be > 0");
  }
  for (double t : cfg.experiment.taus) {
    if (!(t > 0.0)) throw ConfigError("config: experiment.taus must be > 0");
  }
  if (!cfg.held_out.empty() &&
      std::find(cfg.dataset.domains.begin(), cfg.dataset.domains.end(), cfg.held_out) ==
          cfg.dataset.domains.end()) {
    throw ConfigError("config: train.held_out '" + cfg.held_out + "' is not a dataset domain");
  }
  cfg.experiment.arch = cfg.model;
  cfg.experiment.train = cfg.train;
  return cfg;
}

inline CliConfig load_config(const std::string& path, CliConfig base = {}) {
  if (path.empty()) return parse_config(nlohmann::json(), std::move(base));
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  return parse_config(root, std::move(base));
}

/// Effective (defaults-merged) configuration; parse_config of this output
/// reproduces the same CliConfig.
inline nlohmann::ordered_json config_to_json(const CliConfig& cfg) {
  using detail::enum_name;
  const auto& d = cfg.train.dream;
  const auto& t = cfg.train;
  const auto& e = cfg.experiment;
  nlohmann::ordered_json out;
  out["dataset"] = {{"seed", cfg.dataset.seed},
                    {"per_cell", cfg.dataset.per_cell},
                    {"size", cfg.dataset.size},
                    {"domains", cfg.dataset.domains},
                    {"classes", cfg.dataset.classes}};
  out["model"] = {{"widths", cfg.model.widths},
                  {"kernel", cfg.model.kernel},
                  {"pool", enum_name(cfg.model.pool, detail::kPools)}};
  out["dream"] = {{"alpha", d.alpha},
                  {"iterations", d.iterations},
                  {"eps", d.eps},
                  {"noise_bound", d.noise_bound},
                  {"standardize_grad", d.standardize_grad},
                  {"mode", enum_name(d.mode, detail::kDreamModes)},
                  {"variance", enum_name(d.divisor, detail::kDivisors)}};
  out["train"] = {{"tau", t.tau},
                  {"divergence", enum_name(t.divergence, detail::kDivergences)},
                  {"kl_direction", enum_name(t.divergence_options.kl_direction, detail::kKlDirections)},
                  {"mse_space", enum_name(t.divergence_options.mse_space, detail::kMseSpaces)},
                  {"consistency_weight", t.consistency_weight},
                  {"lr", t.sgd.lr},
                  {"momentum", t.sgd.momentum},
                  {"weight_decay", t.sgd.weight_decay},
                  {"epochs", t.epochs},
                  {"batch_size", t.batch_size},
                  {"seed", t.seed},
                  {"mode", enum_name(t.mode, detail::kModes)},
                  {"held_out", cfg.held_out}};
  out["experiment"] = {{"protocol", enum_name(e.protocol, detail::kProtocols)},
                       {"seeds", e.seeds},
                       {"modes", detail::enum_names(e.modes, detail::kModes)},
                       {"alphas", e.alphas},
                       {"taus", e.taus},
                       {"divergences", detail::enum_names(e.divergences, detail::kDivergences)},
                       {"probe_count", e.probe_count},
                       {"probe_seed", e.probe_seed},
                       {"csv", cfg.csv}};
  return out;
}

inline nlohmann::ordered_json to_json(const TrainReport& report, const CliConfig& cfg) {
  nlohmann::ordered_json out;
  auto& epochs = out["epochs"] = nlohmann::ordered_json::array();
  for (const auto& e : report.epochs) epochs.push_back({{"ce", e.ce}, {"cons", e.cons}, {"acc", e.acc}});
  out["config"] = config_to_json(cfg);
  out["seed"] = cfg.train.seed;
  return out;
}

}  // namespace sdream
