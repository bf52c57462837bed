#pragma once

// Key-value experiment configuration:
//
//   # comment
//   name = italy_p50
//   preset = italy
//   dataset_path = ../data/italy_power_demand.csv
//   p = 0.5
//
// Relative dataset paths resolve against the config file's directory.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "auxdrop/errors.hpp"
#include "auxdrop/model.hpp"
#include "auxdrop/streams.hpp"

namespace auxdrop {

enum class DataFormat { Dense, Sparse };

enum class Metric { Errors, Loss };

struct Expectation {
  Metric metric = Metric::Errors;
  double mean = 0.0;
  double std = 0.0;
  double sigmas = 3.0;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::string preset;

  std::string dataset_path;
  DataFormat format = DataFormat::Dense;
  LabelPosition label_position = LabelPosition::Last;
  std::optional<std::string> positive_label;
  std::size_t sparse_dim = 0;
  std::size_t max_columns = 0;

  StreamSpec stream;  // stream.seed holds the base seed
  std::string schedule_preset;
  std::uint64_t schedule_unit = 0;
  std::optional<bool> declare_aux;  // default: true unless the stream is a schedule of sudden features

  ModelConfig model;

  std::size_t runs = 1;
  std::vector<std::uint64_t> seeds;
  std::string out;
  std::size_t window_size = 0;
  std::size_t log_every = 1;
  std::size_t jobs = 0;
  std::optional<Expectation> expect;

  [[nodiscard]] std::uint64_t seed_for_run(std::size_t i) const {
    return i < seeds.size() ? seeds[i] : stream.seed + i;
  }
  [[nodiscard]] std::size_t run_count() const { return seeds.empty() ? runs : seeds.size(); }
  [[nodiscard]] bool declares_aux() const {
    return declare_aux.value_or(stream.corruption != Corruption::Schedule);
  }
};

/// Model shapes and rates used by each experiment family.
inline ModelConfig model_preset(const std::string& name) {
  ModelConfig m;
  m.dropout = 0.3;
  m.discount = 0.99;
  m.smoothing = 0.2;
  m.width = 50;
  m.aux_position = 3;
  m.aux_nodes = 100;
  if (name == "italy") {
    m.depth = 11;
    m.learning_rate = 0.3;
  } else if (name == "higgs" || name == "susy") {
    m.depth = 11;
    m.learning_rate = 0.05;
  } else if (name == "german" || name == "svmguide3") {
    m.depth = 6;
    m.learning_rate = 0.1;
  } else if (name == "magic04") {
    m.depth = 6;
    m.learning_rate = 0.01;
  } else if (name == "a8a") {
    m.depth = 6;
    m.learning_rate = 0.01;
    m.aux_nodes = 400;
  } else if (name == "a8a_trapezoidal") {
    m.depth = 6;
    m.learning_rate = 0.01;
    m.aux_nodes = 600;
  } else {
    throw ConfigError("unknown preset '" + name + "'");
  }
  return m;
}

namespace detail {

inline std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

inline std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    auto t = trim(item);
    if (!t.empty()) out.emplace_back(t);
  }
  return out;
}

inline double to_double(const std::string& key, const std::string& v) {
  auto d = parse_double(v);
  if (!d) throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
  return *d;
}

inline std::uint64_t to_uint(const std::string& key, const std::string& v) {
  auto d = parse_double(v);
  if (!d || *d < 0 || std::floor(*d) != *d) throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + v + "'");
  return static_cast<std::uint64_t>(*d);
}

inline bool to_bool(const std::string& key, const std::string& v) {
  const auto l = lower(v);
  if (l == "true" || l == "1" || l == "yes" || l == "on") return true;
  if (l == "false" || l == "0" || l == "no" || l == "off") return false;
  throw ConfigError("key '" + key + "': expected a boolean, got '" + v + "'");
}

/// "1-12" or "1,2,5" (1-based, inclusive ranges) to 0-based indices.
inline std::vector<std::size_t> to_indices(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  for (const auto& part : split_list(v, ',')) {
    const auto dash = part.find('-');
    if (dash == std::string::npos) {
      const auto i = to_uint(key, part);
      if (i < 1) throw ConfigError("key '" + key + "': indices are 1-based");
      out.push_back(i - 1);
      continue;
    }
    const auto a = to_uint(key, part.substr(0, dash));
    const auto b = to_uint(key, part.substr(dash + 1));
    if (a < 1 || b < a) throw ConfigError("key '" + key + "': bad range '" + part + "'");
    for (auto i = a; i <= b; ++i) out.push_back(i - 1);
  }
  return out;
}

/// "feature:start:end;feature:start:end"
inline std::vector<ScheduleWindow> to_windows(const std::string& key, const std::string& v) {
  std::vector<ScheduleWindow> out;
  for (const auto& w : split_list(v, ';')) {
    auto parts = split_list(w, ':');
    if (parts.size() != 3) throw ConfigError("key '" + key + "': window '" + w + "' is not feature:start:end");
    out.push_back({to_uint(key, parts[0]), to_uint(key, parts[1]), to_uint(key, parts[2])});
  }
  return out;
}

inline Corruption to_corruption(const std::string& v) {
  const auto l = lower(v);
  if (l == "none") return Corruption::None;
  if (l == "bernoulli") return Corruption::Bernoulli;
  if (l == "trapezoidal") return Corruption::Trapezoidal;
  if (l == "schedule") return Corruption::Schedule;
  throw ConfigError("unknown corruption '" + v + "' (expected none, bernoulli, trapezoidal, schedule)");
}

}  // namespace detail

using KeyValues = std::vector<std::pair<std::string, std::string>>;

inline KeyValues parse_key_values(std::istream& in, const std::string& source) {
  KeyValues kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (detail::trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(source, lineno, "expected key = value");
    std::string key(detail::trim(std::string_view(line).substr(0, eq)));
    std::string value(detail::trim(std::string_view(line).substr(eq + 1)));
    if (key.empty()) throw ParseError(source, lineno, "empty key");
    kv.emplace_back(detail::lower(key), value);
  }
  return kv;
}

/// Applies one key to `cfg`. Throws ConfigError for unknown keys or bad values.
inline void apply_key(ExperimentConfig& cfg, const std::string& key, const std::string& v) {
  using namespace detail;
  ModelConfig& m = cfg.model;
  StreamSpec& s = cfg.stream;
  if (key == "name") cfg.name = v;
  else if (key == "preset") {
    m = model_preset(lower(v));
    cfg.preset = lower(v);
  }
  else if (key == "dataset_path") cfg.dataset_path = v;
  else if (key == "format") {
    const auto l = lower(v);
    if (l == "dense") cfg.format = DataFormat::Dense;
    else if (l == "sparse") cfg.format = DataFormat::Sparse;
    else throw ConfigError("format must be dense or sparse");
  }
  else if (key == "label_position") {
    const auto l = lower(v);
    if (l == "first") cfg.label_position = LabelPosition::First;
    else if (l == "last") cfg.label_position = LabelPosition::Last;
    else throw ConfigError("label_position must be first or last");
  }
  else if (key == "positive_label") cfg.positive_label = v;
  else if (key == "dim") cfg.sparse_dim = to_uint(key, v);
  else if (key == "max_columns") cfg.max_columns = to_uint(key, v);
  else if (key == "base_indices") s.base_indices = to_indices(key, v);
  else if (key == "corruption") s.corruption = to_corruption(v);
  else if (key == "p") s.p = to_double(key, v);
  else if (key == "chunks") s.chunks = to_uint(key, v);
  else if (key == "windows") s.windows = to_windows(key, v);
  else if (key == "schedule") cfg.schedule_preset = lower(v);
  else if (key == "schedule_unit") cfg.schedule_unit = to_uint(key, v);
  else if (key == "seed") s.seed = to_uint(key, v);
  else if (key == "shuffle") s.shuffle = to_bool(key, v);
  else if (key == "limit") s.limit = to_uint(key, v);
  else if (key == "standardize") s.standardize = to_bool(key, v);
  else if (key == "declare_aux") cfg.declare_aux = to_bool(key, v);
  else if (key == "backbone") m.backbone = parse_backbone(v);
  else if (key == "strategy") m.strategy = parse_strategy(v);
  else if (key == "base_only") m.base_only = to_bool(key, v);
  else if (key == "depth") m.depth = to_uint(key, v);
  else if (key == "nodes") m.width = to_uint(key, v);
  else if (key == "aux_nodes") m.aux_nodes = to_uint(key, v);
  else if (key == "aux_position") m.aux_position = to_uint(key, v);
  else if (key == "dropout") m.dropout = to_double(key, v);
  else if (key == "lr" || key == "learning_rate") m.learning_rate = to_double(key, v);
  else if (key == "beta" || key == "discount") m.discount = to_double(key, v);
  else if (key == "s" || key == "smoothing") m.smoothing = to_double(key, v);
  else if (key == "num_classes") m.num_classes = to_uint(key, v);
  else if (key == "inverted_dropout") m.inverted_dropout = to_bool(key, v);
  else if (key == "single_head") m.single_head = to_bool(key, v);
  else if (key == "dropout_mode") {
    const auto l = lower(v);
    if (l == "bernoulli") m.drop_mode = RandomDropMode::Bernoulli;
    else if (l == "exact_count") m.drop_mode = RandomDropMode::ExactCount;
    else throw ConfigError("dropout_mode must be bernoulli or exact_count");
  }
  else if (key == "activation") {
    const auto l = lower(v);
    if (l == "relu") m.hidden_activation = Activation::ReLU;
    else if (l == "identity") m.hidden_activation = Activation::Identity;
    else throw ConfigError("activation must be relu or identity");
  }
  else if (key == "loss_metric") {
    const auto l = lower(v);
    if (l == "cross_entropy") m.loss_metric = LossMetric::CrossEntropy;
    else if (l == "probability_logits") m.loss_metric = LossMetric::ProbabilityLogits;
    else throw ConfigError("loss_metric must be cross_entropy or probability_logits");
  }
  else if (key == "runs" || key == "n_runs") cfg.runs = to_uint(key, v);
  else if (key == "seeds") {
    cfg.seeds.clear();
    for (const auto& x : split_list(v, ',')) cfg.seeds.push_back(to_uint(key, x));
  }
  else if (key == "out" || key == "outputs") cfg.out = v;
  else if (key == "window_size") cfg.window_size = to_uint(key, v);
  else if (key == "log_every") cfg.log_every = to_uint(key, v);
  else if (key == "jobs") cfg.jobs = to_uint(key, v);
  else if (key == "expect_metric") {
    if (!cfg.expect) cfg.expect = Expectation{};
    const auto l = lower(v);
    if (l == "errors") cfg.expect->metric = Metric::Errors;
    else if (l == "loss") cfg.expect->metric = Metric::Loss;
    else throw ConfigError("expect_metric must be errors or loss");
  }
  else if (key == "expect_mean") {
    if (!cfg.expect) cfg.expect = Expectation{};
    cfg.expect->mean = to_double(key, v);
  }
  else if (key == "expect_std") {
    if (!cfg.expect) cfg.expect = Expectation{};
    cfg.expect->std = to_double(key, v);
  }
  else if (key == "expect_sigmas") {
    if (!cfg.expect) cfg.expect = Expectation{};
    cfg.expect->sigmas = to_double(key, v);
  }
  else throw ConfigError("unknown configuration key '" + key + "'");
}

/// Resolves derived fields (schedule presets) and checks cross-field constraints.
inline void finalize(ExperimentConfig& cfg) {
  if (cfg.runs < 1 && cfg.seeds.empty()) throw ConfigError("runs >= 1 violated");
  if (cfg.log_every < 1) throw ConfigError("log_every >= 1 violated");
  if (!cfg.schedule_preset.empty()) {
    if (cfg.schedule_preset == "susy") cfg.stream.windows = susy_schedule(cfg.schedule_unit ? cfg.schedule_unit : 100000);
    else if (cfg.schedule_preset == "higgs") cfg.stream.windows = higgs_schedule(cfg.schedule_unit ? cfg.schedule_unit : 50000);
    else throw ConfigError("unknown schedule preset '" + cfg.schedule_preset + "' (expected susy or higgs)");
  }
}

inline ExperimentConfig parse_config(std::istream& in, const std::string& source, const std::filesystem::path& base_dir = {}) {
  ExperimentConfig cfg;
  const KeyValues kv = parse_key_values(in, source);
  // The preset supplies model defaults; every other key overrides it wherever it appears.
  for (const auto& [k, v] : kv)
    if (k == "preset") apply_key(cfg, k, v);
  for (const auto& [k, v] : kv)
    if (k != "preset") apply_key(cfg, k, v);
  if (!cfg.dataset_path.empty() && !base_dir.empty() && std::filesystem::path(cfg.dataset_path).is_relative())
    cfg.dataset_path = (base_dir / cfg.dataset_path).lexically_normal().string();
  finalize(cfg);
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  return parse_config(in, path, std::filesystem::path(path).parent_path());
}

inline LabelledTable load_table(const ExperimentConfig& cfg) {
  if (cfg.dataset_path.empty()) throw ConfigError("dataset_path is not set");
  if (cfg.format == DataFormat::Sparse) return load_sparse(cfg.dataset_path, SparseFormat{cfg.sparse_dim});
  return load_dense(cfg.dataset_path, DenseFormat{cfg.label_position, cfg.positive_label, cfg.max_columns});
}

}  // namespace auxdrop
