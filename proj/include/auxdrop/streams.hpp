#pragma once

// Dataset ingestion and haphazard stream synthesis. Corruption only hides
// auxiliary values; whatever is delivered is exactly the source value.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "auxdrop/errors.hpp"
#include "auxdrop/instance.hpp"
#include "auxdrop/rng.hpp"

namespace auxdrop {

struct LabelledTable {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;  // row-major
  std::vector<std::size_t> labels;
  std::vector<std::string> class_names;  // class index -> source label

  [[nodiscard]] std::span<const double> row(std::size_t r) const { return {values.data() + r * cols, cols}; }
  [[nodiscard]] double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }

  friend bool operator==(const LabelledTable&, const LabelledTable&) = default;
};

enum class LabelPosition { First, Last };

struct DenseFormat {
  LabelPosition label_position = LabelPosition::Last;
  std::optional<std::string> positive_label;  // maps to class 1, everything else to 0
  std::size_t max_columns = 0;                 // keep only the first N feature columns; 0 keeps all
};

struct SparseFormat {
  std::size_t dim = 0;  // 0: max index observed
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::optional<double> parse_double(std::string_view s) {
  s = trim(s);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  if (s.empty()) return std::nullopt;
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  if (line.find(',') != std::string_view::npos) {
    std::size_t start = 0;
    while (true) {
      const auto pos = line.find(',', start);
      out.push_back(trim(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
      if (pos == std::string_view::npos) break;
      start = pos + 1;
    }
    return out;
  }
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    const std::size_t b = i;
    while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i > b) out.push_back(line.substr(b, i - b));
  }
  return out;
}

inline bool skip_line(std::string_view line) {
  line = trim(line);
  return line.empty() || line.front() == '#';
}

}  // namespace detail

/// Comma- or whitespace-delimited rows, one instance per line.
inline LabelledTable parse_dense(std::istream& in, const DenseFormat& fmt, const std::string& source = "<dense>") {
  LabelledTable t;
  std::vector<std::string> raw_labels;
  std::string line;
  std::size_t lineno = 0;
  std::size_t width = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::skip_line(line)) continue;
    auto fields = detail::split_fields(line);
    if (fields.size() < 2) throw ParseError(source, lineno, "expected a label and at least one feature");
    if (width == 0) width = fields.size();
    if (fields.size() != width)
      throw ParseError(source, lineno, "ragged row: " + std::to_string(fields.size()) + " fields, expected " + std::to_string(width));
    const std::size_t label_at = fmt.label_position == LabelPosition::First ? 0 : fields.size() - 1;
    raw_labels.emplace_back(fields[label_at]);
    std::size_t kept = 0;
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i == label_at) continue;
      if (fmt.max_columns != 0 && kept == fmt.max_columns) break;
      auto v = detail::parse_double(fields[i]);
      if (!v) throw ParseError(source, lineno, "non-numeric cell '" + std::string(fields[i]) + "'");
      t.values.push_back(*v);
      ++kept;
    }
    t.cols = kept;
    ++t.rows;
  }
  if (t.rows == 0) throw ParseError(source, lineno, "no instances");

  if (fmt.positive_label) {
    t.class_names = {"other", *fmt.positive_label};
    for (const auto& l : raw_labels) t.labels.push_back(l == *fmt.positive_label ? 1 : 0);
    return t;
  }
  const bool numeric = std::all_of(raw_labels.begin(), raw_labels.end(), [](const std::string& l) { return detail::parse_double(l).has_value(); });
  std::vector<std::string> uniq(raw_labels);
  std::sort(uniq.begin(), uniq.end(), [&](const std::string& a, const std::string& b) {
    return numeric ? *detail::parse_double(a) < *detail::parse_double(b) : a < b;
  });
  uniq.erase(std::unique(uniq.begin(), uniq.end(), [&](const std::string& a, const std::string& b) {
               return numeric ? *detail::parse_double(a) == *detail::parse_double(b) : a == b;
             }),
             uniq.end());
  t.class_names = uniq;
  for (const auto& l : raw_labels) {
    auto it = std::find_if(uniq.begin(), uniq.end(), [&](const std::string& u) {
      return numeric ? *detail::parse_double(u) == *detail::parse_double(l) : u == l;
    });
    t.labels.push_back(static_cast<std::size_t>(it - uniq.begin()));
  }
  return t;
}

/// `label idx:val idx:val ...` with 1-based strictly ascending indices.
/// Positive labels map to class 1, the rest to class 0.
inline LabelledTable parse_sparse(std::istream& in, const SparseFormat& fmt, const std::string& source = "<sparse>") {
  struct Row {
    std::vector<std::pair<std::size_t, double>> entries;
  };
  std::vector<Row> rows;
  LabelledTable t;
  std::string line;
  std::size_t lineno = 0;
  std::size_t max_index = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::skip_line(line)) continue;
    auto fields = detail::split_fields(line);
    auto label = detail::parse_double(fields.front());
    if (!label) throw ParseError(source, lineno, "non-numeric label '" + std::string(fields.front()) + "'");
    t.labels.push_back(*label > 0.0 ? 1 : 0);
    Row row;
    std::size_t prev = 0;
    for (std::size_t i = 1; i < fields.size(); ++i) {
      const auto colon = fields[i].find(':');
      if (colon == std::string_view::npos) throw ParseError(source, lineno, "expected idx:val, got '" + std::string(fields[i]) + "'");
      auto idx = detail::parse_double(fields[i].substr(0, colon));
      auto val = detail::parse_double(fields[i].substr(colon + 1));
      if (!idx || !val || *idx < 1 || std::floor(*idx) != *idx)
        throw ParseError(source, lineno, "malformed entry '" + std::string(fields[i]) + "'");
      const auto index = static_cast<std::size_t>(*idx);
      if (index <= prev) throw ParseError(source, lineno, "indices must be strictly ascending (" + std::to_string(index) + " after " + std::to_string(prev) + ")");
      if (fmt.dim != 0 && index > fmt.dim) throw ParseError(source, lineno, "index " + std::to_string(index) + " exceeds dim " + std::to_string(fmt.dim));
      prev = index;
      max_index = std::max(max_index, index);
      row.entries.emplace_back(index, *val);
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ParseError(source, lineno, "no instances");
  t.rows = rows.size();
  t.cols = fmt.dim != 0 ? fmt.dim : max_index;
  t.values.assign(t.rows * t.cols, 0.0);
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (auto [idx, val] : rows[r].entries) t.values[r * t.cols + idx - 1] = val;
  t.class_names = {"-1", "+1"};
  return t;
}

inline std::ifstream open_input(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path, 0, "cannot open file");
  return in;
}

inline LabelledTable load_dense(const std::string& path, const DenseFormat& fmt = {}) {
  auto in = open_input(path);
  return parse_dense(in, fmt, path);
}

inline LabelledTable load_sparse(const std::string& path, const SparseFormat& fmt = {}) {
  auto in = open_input(path);
  return parse_sparse(in, fmt, path);
}

enum class Corruption { None, Bernoulli, Trapezoidal, Schedule };

inline std::string to_string(Corruption c) {
  switch (c) {
    case Corruption::None: return "none";
    case Corruption::Bernoulli: return "bernoulli";
    case Corruption::Trapezoidal: return "trapezoidal";
    case Corruption::Schedule: return "schedule";
  }
  return "?";
}

/// Feature `feature` is available for steps start <= t < end.
struct ScheduleWindow {
  FeatureId feature = 0;
  std::uint64_t start = 0;
  std::uint64_t end = 0;

  friend bool operator==(const ScheduleWindow&, const ScheduleWindow&) = default;
};

/// Feature k (1-based) available on [unit * k, unit * k + span * unit).
inline std::vector<ScheduleWindow> staggered_schedule(std::size_t n_features, std::uint64_t unit, std::uint64_t span = 4) {
  std::vector<ScheduleWindow> w;
  for (std::size_t k = 1; k <= n_features; ++k) w.push_back({k, unit * k, unit * k + span * unit});
  return w;
}

/// 6 auxiliary features, a new one every 100k steps, each lasting 400k.
inline std::vector<ScheduleWindow> susy_schedule(std::uint64_t unit = 100000) { return staggered_schedule(6, unit); }
/// 16 auxiliary features, a new one every 50k steps, each lasting 200k.
inline std::vector<ScheduleWindow> higgs_schedule(std::uint64_t unit = 50000) { return staggered_schedule(16, unit); }

struct StreamSpec {
  std::vector<std::size_t> base_indices;  // 0-based table columns
  Corruption corruption = Corruption::None;
  double p = 1.0;
  std::size_t chunks = 10;
  std::vector<ScheduleWindow> windows;
  std::uint64_t seed = 0;
  bool shuffle = false;
  std::size_t limit = 0;  // 0: whole table
  bool standardize = false;

  friend bool operator==(const StreamSpec&, const StreamSpec&) = default;
};

struct BaseAuxSplit {
  std::vector<std::size_t> base_columns;
  std::vector<std::size_t> aux_columns;  // aux feature id k (1-based) is aux_columns[k - 1]
};

inline std::vector<std::size_t> first_columns(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

inline BaseAuxSplit split_base_aux(const LabelledTable& table, const StreamSpec& spec) {
  if (spec.base_indices.empty())
    throw ConfigError("base_indices is empty: at least one always-available base feature is required");
  std::set<std::size_t> base(spec.base_indices.begin(), spec.base_indices.end());
  if (base.size() != spec.base_indices.size()) throw ConfigError("base_indices contains duplicates");
  if (*base.rbegin() >= table.cols)
    throw ConfigError("base index " + std::to_string(*base.rbegin() + 1) + " exceeds " + std::to_string(table.cols) + " columns");
  BaseAuxSplit s;
  s.base_columns.assign(base.begin(), base.end());
  for (std::size_t c = 0; c < table.cols; ++c)
    if (!base.contains(c)) s.aux_columns.push_back(c);
  return s;
}

/// Validates `spec` against a table and the resulting stream length.
inline void validate_stream(const StreamSpec& spec, std::size_t stream_length, std::size_t aux_count) {
  if (!(spec.p >= 0.0 && spec.p <= 1.0)) throw ConfigError("p must lie in [0, 1] (p=" + std::to_string(spec.p) + ")");
  if (spec.corruption == Corruption::Trapezoidal && spec.chunks < 1) throw ConfigError("chunks >= 1 violated");
  if (spec.corruption == Corruption::Schedule) {
    if (spec.windows.empty()) throw ConfigError("schedule corruption needs at least one window");
    for (const auto& w : spec.windows) {
      if (!(w.start < w.end)) throw ConfigError("schedule window start < end violated for feature " + std::to_string(w.feature));
      if (w.end > stream_length)
        throw ConfigError("schedule window for feature " + std::to_string(w.feature) + " ends at " + std::to_string(w.end) +
                          " beyond stream length " + std::to_string(stream_length));
      if (w.feature < 1 || w.feature > aux_count)
        throw ConfigError("schedule window names feature " + std::to_string(w.feature) + " but there are " +
                          std::to_string(aux_count) + " auxiliary features");
    }
  }
}

/// Single-consumer iterator over haphazard instances.
class HaphazardStream {
 public:
  HaphazardStream(std::shared_ptr<const LabelledTable> table, StreamSpec spec)
      : table_(std::move(table)), spec_(std::move(spec)), split_(split_base_aux(*table_, spec_)) {
    order_.resize(table_->rows);
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    if (spec_.shuffle) {
      SequenceRng rng(spec_.seed, RngTag::Shuffle);
      for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng.below(i)]);
    }
    if (spec_.limit != 0 && spec_.limit < order_.size()) order_.resize(spec_.limit);
    validate_stream(spec_, order_.size(), split_.aux_columns.size());
    reset();
  }

  [[nodiscard]] std::size_t size() const noexcept { return order_.size(); }
  [[nodiscard]] std::size_t base_count() const noexcept { return split_.base_columns.size(); }
  [[nodiscard]] std::size_t aux_universe() const noexcept { return split_.aux_columns.size(); }
  [[nodiscard]] const BaseAuxSplit& split() const noexcept { return split_; }
  [[nodiscard]] const StreamSpec& spec() const noexcept { return spec_; }
  [[nodiscard]] std::uint64_t position() const noexcept { return next_; }

  void reset() {
    next_ = 0;
    stats_.assign(table_->cols, {});
  }

  /// Is auxiliary feature `id` (1-based) delivered at step `t` (1-based)?
  [[nodiscard]] bool available(FeatureId id, std::uint64_t t) const {
    switch (spec_.corruption) {
      case Corruption::None: return true;
      case Corruption::Bernoulli: return KeyedRng(spec_.seed).uniform(RngTag::Availability, {id, t}) < spec_.p;
      case Corruption::Trapezoidal: return split_.aux_columns[id - 1] < visible_columns(t);
      case Corruption::Schedule:
        return std::any_of(spec_.windows.begin(), spec_.windows.end(),
                           [&](const ScheduleWindow& w) { return w.feature == id && w.start <= t && t < w.end; });
    }
    return false;
  }

  /// Trapezoidal chunk (1-based) of step t; the last chunk takes the remainder.
  [[nodiscard]] std::size_t chunk_of(std::uint64_t t) const {
    const std::size_t chunk_size = std::max<std::size_t>(1, size() / spec_.chunks);
    return std::min<std::size_t>(spec_.chunks, static_cast<std::size_t>((t - 1) / chunk_size) + 1);
  }

  /// First floor(i * n / chunks) columns are exposed in chunk i.
  [[nodiscard]] std::size_t visible_columns(std::uint64_t t) const {
    return chunk_of(t) * table_->cols / spec_.chunks;
  }

  std::optional<HaphazardInstance> next() {
    if (next_ >= order_.size()) return std::nullopt;
    const std::size_t r = order_[next_++];
    HaphazardInstance inst;
    inst.t = next_;
    inst.label = table_->labels[r];
    inst.base.reserve(split_.base_columns.size());
    for (std::size_t c : split_.base_columns) inst.base.push_back(deliver(c, table_->at(r, c)));
    for (std::size_t k = 0; k < split_.aux_columns.size(); ++k) {
      const FeatureId id = k + 1;
      if (!available(id, inst.t)) continue;
      const std::size_t c = split_.aux_columns[k];
      inst.aux.emplace_back(id, deliver(c, table_->at(r, c)));
    }
    return inst;
  }

 private:
  struct RunningStats {
    std::uint64_t n = 0;
    double mean = 0.0;
    double m2 = 0.0;
  };

  // Standardizes with statistics of past deliveries only, then folds x in.
  double deliver(std::size_t col, double x) {
    if (!spec_.standardize) return x;
    RunningStats& s = stats_[col];
    double out = x;
    if (s.n >= 1) out = x - s.mean;
    if (s.n >= 2) {
      const double sd = std::sqrt(s.m2 / static_cast<double>(s.n - 1));
      if (sd > 0.0) out /= sd;
    }
    ++s.n;
    const double delta = x - s.mean;
    s.mean += delta / static_cast<double>(s.n);
    s.m2 += delta * (x - s.mean);
    return out;
  }

  std::shared_ptr<const LabelledTable> table_;
  StreamSpec spec_;
  BaseAuxSplit split_;
  std::vector<std::size_t> order_;
  std::vector<RunningStats> stats_;
  std::uint64_t next_ = 0;
};

}  // namespace auxdrop
