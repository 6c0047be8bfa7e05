#pragma once

// Run configuration: model hyper-parameters, training schedule and data
// handling. Serialized as one nested JSON document; every key has a default
// and a one-line description (used by the CLI help).

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "dgcrn/dyngen.hpp"
#include "dgcrn/error.hpp"

namespace dgcrn {

struct ModelConfig {
  std::size_t hidden = 64;      // h
  std::size_t embed_dim = 40;   // D_e
  std::size_t hyper_dim = 16;   // D_h
  std::size_t hops = 2;         // K
  std::size_t hyper_hops = 2;   // K_h
  double alpha_sat = 3.0;
  double alpha_mix = 0.05;
  double beta_mix = 0.95;
  double gamma_mix = 0.95;
  double hyper_alpha_mix = 0.05;
  double hyper_gamma_mix = 0.95;
  std::size_t input_len = 12;   // P
  std::size_t output_len = 12;  // Q
  bool use_hypernet = true;
  bool fixed_filters = false;
  FilterMode filter_mode = FilterMode::hadamard;
  bool share_embeddings = false;
  std::size_t readout_layers = 1;

  bool uses_dynamic_graph() const { return beta_mix != 0.0; }
};

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 64;
  std::size_t step_size = 2500;  // curriculum s
  std::size_t ss_decay = 4000;   // scheduled-sampling tau
  std::size_t max_epochs = 100;
  std::size_t patience = 15;
  double grad_clip = 5.0;
  std::uint64_t seed = 1;
  bool curriculum = true;
  bool record_timing = true;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
};

struct DataConfig {
  double kappa = 0.1;
  bool zero_is_missing = true;
  std::string split = "ratio";  // "ratio" or "days"
  double train_ratio = 0.7;
  double val_ratio = 0.1;
  double test_ratio = 0.2;
  std::size_t train_days = 15;
  std::size_t val_days = 3;
  std::size_t test_days = 5;
};

struct Config {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
};

inline std::string filter_mode_name(FilterMode m) { return m == FilterMode::hadamard ? "hadamard" : "matmul"; }

inline FilterMode parse_filter_mode(const std::string& s) {
  if (s == "hadamard") return FilterMode::hadamard;
  if (s == "matmul") return FilterMode::matmul;
  throw ConfigError("model.filter_mode must be 'hadamard' or 'matmul', got '" + s + "'");
}

struct ConfigKey {
  std::string key;
  std::string help;
  std::function<nlohmann::json(const Config&)> get;
  std::function<void(Config&, const nlohmann::json&)> set;
};

namespace detail {

template <class Section, class V>
ConfigKey field(std::string key, std::string help, Section Config::*section, V Section::*member) {
  const std::string name = key;
  return ConfigKey{
      std::move(key), std::move(help),
      [section, member](const Config& c) { return nlohmann::json((c.*section).*member); },
      [section, member, name](Config& c, const nlohmann::json& j) {
        // nlohmann converts -2 or 2.5 to size_t silently.
        if constexpr (std::is_integral_v<V> && !std::is_same_v<V, bool>) {
          if (!j.is_number_integer() || (std::is_unsigned_v<V> && !j.is_number_unsigned())) {
            throw ConfigError("config key " + name + ": expected a non-negative integer, got " + j.dump());
          }
        }
        try {
          (c.*section).*member = j.get<V>();
        } catch (const nlohmann::json::exception& e) {
          throw ConfigError("config key " + name + ": " + e.what());
        }
      }};
}

}  // namespace detail

inline const std::vector<ConfigKey>& config_keys() {
  using detail::field;
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    const auto M = &Config::model;
    const auto Tr = &Config::train;
    const auto D = &Config::data;
    k.push_back(field("model.hidden", "hidden state size h", M, &ModelConfig::hidden));
    k.push_back(field("model.embed_dim", "node embedding size D_e", M, &ModelConfig::embed_dim));
    k.push_back(field("model.hyper_dim", "hyper-network GNN output size D_h", M, &ModelConfig::hyper_dim));
    k.push_back(field("model.hops", "propagation depth K of the gate convolutions", M, &ModelConfig::hops));
    k.push_back(field("model.hyper_hops", "propagation depth K_h of the hyper-network", M, &ModelConfig::hyper_hops));
    k.push_back(field("model.alpha_sat", "saturation rate of the graph generator", M, &ModelConfig::alpha_sat));
    k.push_back(field("model.alpha_mix", "weight of the input skip term", M, &ModelConfig::alpha_mix));
    k.push_back(field("model.beta_mix", "weight of the dynamic graph term (0 disables it)", M, &ModelConfig::beta_mix));
    k.push_back(field("model.gamma_mix", "weight of the static graph term", M, &ModelConfig::gamma_mix));
    k.push_back(field("model.hyper_alpha_mix", "skip weight inside the hyper-network", M, &ModelConfig::hyper_alpha_mix));
    k.push_back(field("model.hyper_gamma_mix", "static graph weight inside the hyper-network", M, &ModelConfig::hyper_gamma_mix));
    k.push_back(field("model.input_len", "input window P (steps)", M, &ModelConfig::input_len));
    k.push_back(field("model.output_len", "forecast horizon Q (steps)", M, &ModelConfig::output_len));
    k.push_back(field("model.use_hypernet", "graph-convolutional hyper-network (false: one affine map)", M, &ModelConfig::use_hypernet));
    k.push_back(field("model.fixed_filters", "pin dynamic filters to 1 (static adaptive graph)", M, &ModelConfig::fixed_filters));
    k.push_back(ConfigKey{"model.filter_mode", "how filters modulate embeddings: hadamard or matmul",
                          [](const Config& c) { return nlohmann::json(filter_mode_name(c.model.filter_mode)); },
                          [](Config& c, const nlohmann::json& j) {
                            if (!j.is_string()) throw ConfigError("config key model.filter_mode: expected a string");
                            c.model.filter_mode = parse_filter_mode(j.get<std::string>());
                          }});
    k.push_back(field("model.share_embeddings", "decoder generator reuses the encoder embeddings", M, &ModelConfig::share_embeddings));
    k.push_back(field("model.readout_layers", "readout depth (1 or 2)", M, &ModelConfig::readout_layers));
    k.push_back(field("train.learning_rate", "Adam learning rate", Tr, &TrainConfig::learning_rate));
    k.push_back(field("train.batch_size", "samples per batch", Tr, &TrainConfig::batch_size));
    k.push_back(field("train.step_size", "curriculum step size s (iterations per horizon increment)", Tr, &TrainConfig::step_size));
    k.push_back(field("train.ss_decay", "scheduled-sampling decay steps tau", Tr, &TrainConfig::ss_decay));
    k.push_back(field("train.max_epochs", "epoch limit", Tr, &TrainConfig::max_epochs));
    k.push_back(field("train.patience", "early-stopping patience in epochs", Tr, &TrainConfig::patience));
    k.push_back(ConfigKey{"train.grad_clip", "global gradient-norm clip (null or inf disables)",
                          [](const Config& c) {
                            return std::isfinite(c.train.grad_clip) ? nlohmann::json(c.train.grad_clip) : nlohmann::json(nullptr);
                          },
                          [](Config& c, const nlohmann::json& j) {
                            if (j.is_null()) {
                              c.train.grad_clip = std::numeric_limits<double>::infinity();
                            } else if (j.is_number()) {
                              c.train.grad_clip = j.get<double>();
                            } else {
                              throw ConfigError("config key train.grad_clip: expected a number or null");
                            }
                          }});
    k.push_back(field("train.seed", "seed for every random draw of the run", Tr, &TrainConfig::seed));
    k.push_back(field("train.curriculum", "grow the decoder horizon during training", Tr, &TrainConfig::curriculum));
    k.push_back(field("train.record_timing", "write wall-clock seconds into the training log", Tr, &TrainConfig::record_timing));
    k.push_back(field("train.adam_beta1", "Adam first-moment decay", Tr, &TrainConfig::adam_beta1));
    k.push_back(field("train.adam_beta2", "Adam second-moment decay", Tr, &TrainConfig::adam_beta2));
    k.push_back(field("train.adam_eps", "Adam epsilon", Tr, &TrainConfig::adam_eps));
    k.push_back(field("data.kappa", "adjacency sparsity threshold on kernel weights", D, &DataConfig::kappa));
    k.push_back(field("data.zero_is_missing", "treat speed 0.0 as a missing value", D, &DataConfig::zero_is_missing));
    k.push_back(field("data.split", "split policy: ratio or days", D, &DataConfig::split));
    k.push_back(field("data.train_ratio", "training share (ratio policy)", D, &DataConfig::train_ratio));
    k.push_back(field("data.val_ratio", "validation share (ratio policy)", D, &DataConfig::val_ratio));
    k.push_back(field("data.test_ratio", "test share (ratio policy)", D, &DataConfig::test_ratio));
    k.push_back(field("data.train_days", "training days (days policy)", D, &DataConfig::train_days));
    k.push_back(field("data.val_days", "validation days (days policy)", D, &DataConfig::val_days));
    k.push_back(field("data.test_days", "test days (days policy)", D, &DataConfig::test_days));
    return k;
  }();
  return keys;
}

inline void validate(const Config& c) {
  const auto& m = c.model;
  if (m.hidden == 0 || m.embed_dim == 0 || m.hyper_dim == 0) throw ConfigError("model dimensions must be positive");
  if (m.input_len == 0 || m.output_len == 0) throw ConfigError("model.input_len and model.output_len must be >= 1");
  if (!(m.alpha_sat > 0)) throw ConfigError("model.alpha_sat must be positive");
  for (double w : {m.alpha_mix, m.beta_mix, m.gamma_mix, m.hyper_alpha_mix, m.hyper_gamma_mix}) {
    if (!(w >= 0.0 && w <= 1.0)) throw ConfigError("mixing weights must lie in [0,1]");
  }
  if (m.readout_layers != 1 && m.readout_layers != 2) throw ConfigError("model.readout_layers must be 1 or 2");
  const auto& t = c.train;
  if (!(t.learning_rate >= 0)) throw ConfigError("train.learning_rate must be non-negative");
  if (t.batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
  if (t.step_size == 0) throw ConfigError("train.step_size must be >= 1");
  if (t.ss_decay == 0) throw ConfigError("train.ss_decay must be >= 1");
  if (!(t.grad_clip > 0)) throw ConfigError("train.grad_clip must be positive");
  const auto& d = c.data;
  if (!(d.kappa > 0 && d.kappa < 1)) throw ConfigError("data.kappa must lie in (0,1)");
  if (d.split != "ratio" && d.split != "days") throw ConfigError("data.split must be 'ratio' or 'days'");
}

inline nlohmann::json to_json(const Config& c) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& k : config_keys()) {
    const auto dot = k.key.find('.');
    j[k.key.substr(0, dot)][k.key.substr(dot + 1)] = k.get(c);
  }
  return j;
}

// Unknown keys are rejected so typos do not silently fall back to defaults.
inline Config config_from_json(const nlohmann::json& j, Config base = {}) {
  if (!j.is_object()) throw ConfigError("config document must be a JSON object");
  for (const auto& [section, body] : j.items()) {
    if (!body.is_object()) throw ConfigError("config section '" + section + "' must be an object");
    for (const auto& [name, value] : body.items()) {
      const std::string full = section + "." + name;
      bool found = false;
      for (const auto& k : config_keys()) {
        if (k.key == full) {
          k.set(base, value);
          found = true;
          break;
        }
      }
      if (!found) throw ConfigError("unknown config key: " + full);
    }
  }
  validate(base);
  return base;
}

inline Config load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("config file " + path + ": " + e.what());
  }
  return config_from_json(j);
}

// Applies `key=value` where value is parsed as JSON (bare words become
// strings).
inline void set_config_value(Config& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::exception&) {
    value = raw;
  }
  for (const auto& k : config_keys()) {
    if (k.key == key) {
      k.set(c, value);
      return;
    }
  }
  throw ConfigError("unknown config key: " + key);
}

inline std::string config_help() {
  std::ostringstream os;
  const Config defaults;
  os << "Config keys (JSON file sections model/train/data; defaults in brackets):\n";
  for (const auto& k : config_keys()) {
    os << "  " << k.key << " [" << k.get(defaults).dump() << "]  " << k.help << "\n";
  }
  return os.str();
}

// Ablation variant names accepted by --ablation.
inline const std::vector<std::string>& ablation_names() {
  static const std::vector<std::string> names{"none",  "w/o-dg", "w/o-preA", "w/o-hypernet",
                                              "dg2sg", "w/o-cl", "hypernet-mul2matmul"};
  return names;
}

inline void apply_ablation(Config& c, const std::string& name) {
  if (name.empty() || name == "none") return;
  if (name == "w/o-dg") {
    c.model.beta_mix = 0.0;
  } else if (name == "w/o-preA") {
    c.model.gamma_mix = 0.0;
  } else if (name == "w/o-hypernet") {
    c.model.use_hypernet = false;
  } else if (name == "dg2sg") {
    c.model.fixed_filters = true;
  } else if (name == "w/o-cl") {
    c.train.curriculum = false;
  } else if (name == "hypernet-mul2matmul") {
    c.model.filter_mode = FilterMode::matmul;
  } else {
    std::string known;
    for (const auto& n : ablation_names()) known += " " + n;
    throw ConfigError("unknown ablation '" + name + "'; expected one of:" + known);
  }
}

}  // namespace dgcrn
