#pragma once

// Experiment runner: one fresh model and stream per seed, a single
// predict-then-train pass, then a reduction over runs.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "auxdrop/config.hpp"
#include "auxdrop/errors.hpp"
#include "auxdrop/model.hpp"
#include "auxdrop/rng.hpp"
#include "auxdrop/streams.hpp"

namespace auxdrop {

using Json = nlohmann::ordered_json;

struct StepLog {
  std::uint64_t step = 0;
  double loss = 0.0;
  std::size_t predicted = 0;
  std::size_t label = 0;
  bool error = false;
};

struct RunRecord {
  std::size_t run = 0;
  std::uint64_t seed = 0;
  std::uint64_t stream_seed = 0;
  std::uint64_t model_seed = 0;
  std::vector<StepLog> log;             // every log_every-th step
  std::vector<std::uint8_t> error_flags;
  std::vector<double> losses;
  std::uint64_t cumulative_errors = 0;
  double average_loss = 0.0;
  std::vector<std::uint64_t> window_errors;
  std::uint64_t clamp_events = 0;
  double wall_seconds = 0.0;
  bool failed = false;
  std::string failure;

  [[nodiscard]] std::size_t steps() const noexcept { return error_flags.size(); }
};

struct Spread {
  std::size_t n = 0;
  double mean = 0.0;
  double std = 0.0;  // n - 1 denominator
  double ci_low = 0.0;
  double ci_high = 0.0;
};

inline Spread spread(std::span<const double> xs) {
  Spread s;
  s.n = xs.size();
  if (xs.empty()) return s;
  double sum = 0.0;
  for (double x : xs) sum += x;
  s.mean = sum / static_cast<double>(s.n);
  if (s.n > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(s.n - 1));
  }
  const double half = 1.96 * s.std / std::sqrt(static_cast<double>(s.n));
  s.ci_low = s.mean - half;
  s.ci_high = s.mean + half;
  return s;
}

struct WindowReport {
  std::size_t window_size = 0;
  std::vector<Spread> windows;  // error counts per window across runs
  double mean_ci_low = 0.0;     // averages of the per-window bounds
  double mean_ci_high = 0.0;
  double mean_errors = 0.0;
};

/// Error counts of consecutive windows; the last window may be shorter.
inline std::vector<std::uint64_t> window_counts(std::span<const std::uint8_t> flags, std::size_t window_size) {
  if (window_size < 1) throw ConfigError("window_size >= 1 violated");
  std::vector<std::uint64_t> out((flags.size() + window_size - 1) / window_size, 0);
  for (std::size_t i = 0; i < flags.size(); ++i) out[i / window_size] += flags[i];
  return out;
}

inline WindowReport windowed_errors(std::span<const RunRecord> records, std::size_t window_size) {
  if (window_size < 1) throw ConfigError("window_size >= 1 violated");
  WindowReport rep;
  rep.window_size = window_size;
  std::vector<std::vector<std::uint64_t>> counts;
  std::size_t n_windows = 0;
  for (const auto& r : records) {
    if (r.failed) continue;
    counts.push_back(window_counts(r.error_flags, window_size));
    n_windows = std::max(n_windows, counts.back().size());
  }
  if (counts.empty()) return rep;
  for (std::size_t w = 0; w < n_windows; ++w) {
    std::vector<double> xs;
    for (const auto& c : counts) xs.push_back(w < c.size() ? static_cast<double>(c[w]) : 0.0);
    rep.windows.push_back(spread(xs));
  }
  for (const auto& s : rep.windows) {
    rep.mean_ci_low += s.ci_low;
    rep.mean_ci_high += s.ci_high;
    rep.mean_errors += s.mean;
  }
  const auto n = static_cast<double>(rep.windows.size());
  rep.mean_ci_low /= n;
  rep.mean_ci_high /= n;
  rep.mean_errors /= n;
  return rep;
}

struct AggregateReport {
  std::string name;
  std::size_t n_runs = 0;
  Spread errors;
  Spread loss;
  WindowReport windows;
  std::uint64_t clamp_events = 0;
  std::size_t steps = 0;
  std::vector<std::string> warnings;
  bool failed = false;
  std::size_t failed_runs = 0;
  std::optional<std::uint64_t> failed_seed;
  std::string failure;
  std::optional<Expectation> expect;

  [[nodiscard]] double metric_mean(Metric m) const { return m == Metric::Errors ? errors.mean : loss.mean; }
  [[nodiscard]] bool expectation_met() const {
    if (!expect) return true;
    return !failed && std::abs(metric_mean(expect->metric) - expect->mean) <= expect->sigmas * expect->std;
  }
};

struct ExperimentResult {
  ExperimentConfig config;
  std::vector<RunRecord> runs;
  AggregateReport report;
};

struct RunOptions {
  std::size_t jobs = 0;  // 0: hardware concurrency
  bool keep_series = true;
};

inline std::uint64_t stream_seed_for(std::uint64_t run_seed) { return KeyedRng(run_seed).derive(RngTag::StreamSeed); }
inline std::uint64_t model_seed_for(std::uint64_t run_seed) { return KeyedRng(run_seed).derive(RngTag::ModelSeed); }

/// Model configuration for a stream: base width and declared features filled in.
inline ModelConfig model_config_for(const ExperimentConfig& cfg, const HaphazardStream& stream) {
  ModelConfig m = cfg.model;
  m.n_base = stream.base_count();
  m.declared_aux.clear();
  if (cfg.declares_aux() && !m.base_only)
    for (std::size_t k = 1; k <= stream.aux_universe(); ++k) m.declared_aux.push_back(k);
  return m;
}

inline std::shared_ptr<const LabelledTable> shared_table(const ExperimentConfig& cfg) {
  return std::make_shared<const LabelledTable>(load_table(cfg));
}

/// Checks everything a run needs before any run starts.
inline std::vector<std::string> validate_experiment(const ExperimentConfig& cfg, const std::shared_ptr<const LabelledTable>& table) {
  if (cfg.run_count() < 1) throw ConfigError("n_runs >= 1 violated");
  StreamSpec spec = cfg.stream;
  spec.seed = stream_seed_for(cfg.seed_for_run(0));
  HaphazardStream stream(table, spec);
  const ModelConfig m = model_config_for(cfg, stream);
  if (m.num_classes < table->class_names.size())
    throw ConfigError("dataset has " + std::to_string(table->class_names.size()) + " classes but num_classes=" +
                      std::to_string(m.num_classes));
  return validate(m).warnings;
}

inline RunRecord run_single(const ExperimentConfig& cfg, const std::shared_ptr<const LabelledTable>& table, std::size_t run,
                            bool keep_series = true) {
  const auto started = std::chrono::steady_clock::now();
  RunRecord rec;
  rec.run = run;
  rec.seed = cfg.seed_for_run(run);
  rec.stream_seed = stream_seed_for(rec.seed);
  rec.model_seed = model_seed_for(rec.seed);
  StreamSpec spec = cfg.stream;
  spec.seed = rec.stream_seed;
  HaphazardStream stream(table, spec);
  AuxDropModel model(model_config_for(cfg, stream), rec.model_seed);
  const std::size_t window = cfg.window_size ? cfg.window_size : std::max<std::size_t>(1, stream.size());
  rec.error_flags.reserve(stream.size());
  if (keep_series) rec.losses.reserve(stream.size());
  double loss_sum = 0.0;
  try {
    while (auto inst = stream.next()) {
      const StepResult r = model.train_step(*inst);
      rec.error_flags.push_back(r.error);
      if (keep_series) rec.losses.push_back(r.loss);
      loss_sum += r.loss;
      rec.cumulative_errors += r.error;
      if (r.step % cfg.log_every == 0) rec.log.push_back({r.step, r.loss, r.predicted, r.label, r.error});
    }
  } catch (const NonFiniteError& e) {
    rec.failed = true;
    rec.failure = e.what();
  }
  rec.clamp_events = model.clamp_events();
  if (!rec.error_flags.empty()) rec.average_loss = loss_sum / static_cast<double>(rec.error_flags.size());
  rec.window_errors = window_counts(rec.error_flags, window);
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return rec;
}

inline AggregateReport aggregate(const ExperimentConfig& cfg, std::span<const RunRecord> runs) {
  AggregateReport rep;
  rep.name = cfg.name;
  rep.n_runs = runs.size();
  rep.expect = cfg.expect;
  std::vector<double> errs;
  std::vector<double> losses;
  for (const auto& r : runs) {
    rep.clamp_events += r.clamp_events;
    rep.steps = std::max(rep.steps, r.steps());
    if (r.failed) {
      ++rep.failed_runs;
      if (!rep.failed) {
        rep.failed = true;
        rep.failed_seed = r.seed;
        rep.failure = r.failure;
      }
      continue;
    }
    errs.push_back(static_cast<double>(r.cumulative_errors));
    losses.push_back(r.average_loss);
  }
  rep.errors = spread(errs);
  rep.loss = spread(losses);
  rep.windows = windowed_errors(runs, cfg.window_size ? cfg.window_size : std::max<std::size_t>(1, rep.steps));
  return rep;
}

/// Applies `fn(i)` for i in [0, n) over `jobs` workers.
inline void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  if (jobs == 0) jobs = std::max(1u, std::thread::hardware_concurrency());
  jobs = std::min(jobs, n);
  if (jobs <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> workers;
  for (std::size_t w = 0; w < jobs; ++w) {
    workers.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : workers) t.join();
  if (error) std::rethrow_exception(error);
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg, std::shared_ptr<const LabelledTable> table,
                                       const RunOptions& opt = {}) {
  ExperimentResult res;
  res.config = cfg;
  const auto warnings = validate_experiment(cfg, table);
  res.runs.resize(cfg.run_count());
  parallel_for(res.runs.size(), opt.jobs ? opt.jobs : cfg.jobs,
               [&](std::size_t i) { res.runs[i] = run_single(cfg, table, i, opt.keep_series); });
  res.report = aggregate(cfg, res.runs);
  res.report.warnings = warnings;
  return res;
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opt = {}) {
  return run_experiment(cfg, shared_table(cfg), opt);
}

struct SweepRow {
  double p = 0.0;
  AggregateReport report;
  double delta_avg = 0.0;            // baseline errors - model errors
  std::optional<double> fraction;    // delta_avg / delta_ai
};

struct SweepReport {
  AggregateReport baseline;                // base features only
  std::optional<AggregateReport> full;     // all features always present, plain input layer
  std::optional<double> delta_ai;          // baseline errors - full errors
  std::vector<SweepRow> rows;
};

inline ExperimentConfig baseline_config(ExperimentConfig cfg) {
  cfg.name += "_base";
  cfg.model.base_only = true;
  cfg.expect.reset();
  return cfg;
}

inline ExperimentConfig full_feature_config(ExperimentConfig cfg) {
  cfg.name += "_full";
  cfg.model.base_only = false;
  cfg.model.strategy = DropoutStrategy::Rdifl;
  cfg.model.dropout = 0.0;
  cfg.stream.corruption = Corruption::None;
  cfg.expect.reset();
  return cfg;
}

inline SweepReport sweep_probability(const ExperimentConfig& cfg, std::span<const double> p_list, bool with_full = true,
                                     const RunOptions& opt = {}, std::vector<ExperimentResult>* keep = nullptr) {
  if (cfg.stream.corruption != Corruption::Bernoulli) throw ConfigError("sweep requires corruption = bernoulli");
  auto table = shared_table(cfg);
  SweepReport rep;
  auto run = [&](const ExperimentConfig& c) {
    ExperimentResult r = run_experiment(c, table, opt);
    AggregateReport a = r.report;
    if (keep) keep->push_back(std::move(r));
    return a;
  };
  rep.baseline = run(baseline_config(cfg));
  if (with_full) {
    rep.full = run(full_feature_config(cfg));
    rep.delta_ai = rep.baseline.errors.mean - rep.full->errors.mean;
  }
  for (double p : p_list) {
    ExperimentConfig c = cfg;
    c.stream.p = p;
    std::ostringstream name;
    name << cfg.name << "_p" << p;
    c.name = name.str();
    c.expect.reset();
    SweepRow row;
    row.p = p;
    row.report = run(c);
    row.delta_avg = rep.baseline.errors.mean - row.report.errors.mean;
    if (rep.delta_ai && *rep.delta_ai != 0.0) row.fraction = row.delta_avg / *rep.delta_ai;
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

struct WindowDelta {
  std::size_t window = 0;  // 0-based
  double a_mean = 0.0;
  double b_mean = 0.0;
  double delta = 0.0;      // b - a
  double pooled_se = 0.0;
  bool aux_free = false;   // no auxiliary feature scheduled in this window
  bool indistinguishable = false;  // |delta| <= 1.96 * pooled_se
};

struct CompareReport {
  AggregateReport a;
  AggregateReport b;
  double delta_avg = 0.0;  // errors(b) - errors(a)
  double delta_loss = 0.0;
  std::vector<WindowDelta> windows;
  bool aux_free_converged = true;  // every aux-free window indistinguishable
};

inline bool same_stream(const ExperimentConfig& a, const ExperimentConfig& b) {
  if (a.dataset_path != b.dataset_path || a.format != b.format || !(a.stream == b.stream)) return false;
  if (a.run_count() != b.run_count()) return false;
  for (std::size_t i = 0; i < a.run_count(); ++i)
    if (a.seed_for_run(i) != b.seed_for_run(i)) return false;
  return true;
}

inline bool window_has_aux(const StreamSpec& spec, std::uint64_t first, std::uint64_t last) {
  if (spec.corruption != Corruption::Schedule) return spec.corruption != Corruption::Bernoulli || spec.p > 0.0;
  return std::any_of(spec.windows.begin(), spec.windows.end(),
                     [&](const ScheduleWindow& w) { return w.start <= last && first < w.end; });
}

inline CompareReport compare_results(const ExperimentResult& ra, const ExperimentResult& rb) {
  if (!same_stream(ra.config, rb.config))
    throw ConfigError("compare: configs '" + ra.config.name + "' and '" + rb.config.name + "' do not describe the same stream");
  CompareReport rep;
  rep.a = ra.report;
  rep.b = rb.report;
  rep.delta_avg = rep.b.errors.mean - rep.a.errors.mean;
  rep.delta_loss = rep.b.loss.mean - rep.a.loss.mean;
  const std::size_t ws = rep.a.windows.window_size;
  const std::size_t n = std::min(rep.a.windows.windows.size(), rep.b.windows.windows.size());
  for (std::size_t w = 0; w < n; ++w) {
    const Spread& sa = rep.a.windows.windows[w];
    const Spread& sb = rep.b.windows.windows[w];
    WindowDelta d;
    d.window = w;
    d.a_mean = sa.mean;
    d.b_mean = sb.mean;
    d.delta = sb.mean - sa.mean;
    const double va = sa.n ? sa.std * sa.std / static_cast<double>(sa.n) : 0.0;
    const double vb = sb.n ? sb.std * sb.std / static_cast<double>(sb.n) : 0.0;
    d.pooled_se = std::sqrt(va + vb);
    d.indistinguishable = std::abs(d.delta) <= 1.96 * d.pooled_se;
    d.aux_free = !window_has_aux(ra.config.stream, w * ws + 1, (w + 1) * ws);
    if (d.aux_free && !d.indistinguishable) rep.aux_free_converged = false;
    rep.windows.push_back(d);
  }
  return rep;
}

inline CompareReport compare_baseline(const ExperimentConfig& a, const ExperimentConfig& b, const RunOptions& opt = {}) {
  if (!same_stream(a, b))
    throw ConfigError("compare: configs '" + a.name + "' and '" + b.name + "' do not describe the same stream");
  auto ta = shared_table(a);
  ExperimentConfig bb = b;
  if (bb.window_size == 0) bb.window_size = a.window_size;
  ExperimentConfig aa = a;
  if (aa.window_size == 0) aa.window_size = bb.window_size;
  return compare_results(run_experiment(aa, ta, opt), run_experiment(bb, ta, opt));
}

enum class AblationDimension { Strategy, AuxPosition };

inline AblationDimension parse_dimension(const std::string& s) {
  if (s == "strategy") return AblationDimension::Strategy;
  if (s == "aux_position") return AblationDimension::AuxPosition;
  throw ConfigError("dimension must be strategy or aux_position, got '" + s + "'");
}

struct AblationRow {
  std::string label;
  AggregateReport report;
};

struct AblationReport {
  AblationDimension dimension = AblationDimension::Strategy;
  std::vector<AblationRow> rows;
};

inline AblationReport ablate(const ExperimentConfig& cfg, AblationDimension dim, const RunOptions& opt = {}) {
  auto table = shared_table(cfg);
  AblationReport rep;
  rep.dimension = dim;
  auto add = [&](ExperimentConfig c, const std::string& label) {
    c.name = cfg.name + "_" + label;
    c.expect.reset();
    rep.rows.push_back({label, run_experiment(c, table, opt).report});
  };
  if (dim == AblationDimension::Strategy) {
    for (auto s : {DropoutStrategy::Rdando, DropoutStrategy::Rdal, DropoutStrategy::Adardo, DropoutStrategy::AuxDrop,
                   DropoutStrategy::Rdifl}) {
      ExperimentConfig c = cfg;
      c.model.strategy = s;
      add(c, to_string(s));
    }
  } else {
    for (std::size_t z = 1; z < cfg.model.depth; ++z) {
      ExperimentConfig c = cfg;
      c.model.aux_position = z;
      add(c, "z" + std::to_string(z));
    }
  }
  return rep;
}

// ---- serialization ----

inline std::string table_cell(const Spread& s, int decimals) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(decimals) << s.mean << "±" << s.std;
  return os.str();
}

inline Json to_json(const Spread& s) {
  return Json{{"n", s.n}, {"mean", s.mean}, {"std", s.std}, {"ci_low", s.ci_low}, {"ci_high", s.ci_high}};
}

inline Json to_json(const WindowReport& w) {
  Json windows = Json::array();
  for (const auto& s : w.windows) windows.push_back(to_json(s));
  return Json{{"window_size", w.window_size},
              {"mean_errors", w.mean_errors},
              {"mean_ci_low", w.mean_ci_low},
              {"mean_ci_high", w.mean_ci_high},
              {"windows", windows}};
}

inline Json to_json(const AggregateReport& r) {
  Json j{{"name", r.name},
         {"n_runs", r.n_runs},
         {"steps", r.steps},
         {"failed", r.failed},
         {"errors", to_json(r.errors)},
         {"average_loss", to_json(r.loss)},
         {"clamp_events", r.clamp_events},
         {"table", {{"errors", table_cell(r.errors, 1)}, {"average_loss", table_cell(r.loss, 4)}}},
         {"windowed_errors", to_json(r.windows)},
         {"warnings", r.warnings},
         {"ci_method", "mean +/- 1.96 * std / sqrt(n), std with n-1 denominator"}};
  if (r.failed) {
    j["failed_runs"] = r.failed_runs;
    j["failed_seed"] = r.failed_seed.value_or(0);
    j["failure"] = r.failure;
  }
  if (r.expect) {
    j["expectation"] = {{"metric", r.expect->metric == Metric::Errors ? "errors" : "average_loss"},
                        {"mean", r.expect->mean},
                        {"std", r.expect->std},
                        {"sigmas", r.expect->sigmas},
                        {"met", r.expectation_met()}};
  }
  return j;
}

inline Json to_json(const SweepReport& s) {
  Json rows = Json::array();
  for (const auto& r : s.rows) {
    Json row{{"p", r.p}, {"delta_avg", r.delta_avg}, {"report", to_json(r.report)}};
    row["fraction_improvement"] = r.fraction ? Json(*r.fraction) : Json(nullptr);
    rows.push_back(row);
  }
  Json j{{"baseline", to_json(s.baseline)}};
  j["full"] = s.full ? to_json(*s.full) : Json(nullptr);
  j["delta_ai"] = s.delta_ai ? Json(*s.delta_ai) : Json(nullptr);
  j["rows"] = rows;
  return j;
}

inline Json to_json(const CompareReport& c) {
  Json windows = Json::array();
  for (const auto& w : c.windows)
    windows.push_back({{"window", w.window},
                       {"a_mean", w.a_mean},
                       {"b_mean", w.b_mean},
                       {"delta", w.delta},
                       {"pooled_se", w.pooled_se},
                       {"aux_free", w.aux_free},
                       {"indistinguishable", w.indistinguishable}});
  return Json{{"a", to_json(c.a)},
              {"b", to_json(c.b)},
              {"delta_avg", c.delta_avg},
              {"delta_loss", c.delta_loss},
              {"aux_free_converged", c.aux_free_converged},
              {"windows", windows}};
}

inline Json to_json(const AblationReport& a) {
  Json rows = Json::array();
  for (const auto& r : a.rows) rows.push_back({{"label", r.label}, {"report", to_json(r.report)}});
  return Json{{"dimension", a.dimension == AblationDimension::Strategy ? "strategy" : "aux_position"}, {"rows", rows}};
}

inline Json step_json(const StepLog& s) {
  return Json{{"step", s.step}, {"loss", s.loss}, {"predicted", s.predicted}, {"label", s.label}, {"error", s.error}};
}

inline Json run_summary_json(const RunRecord& r) {
  Json j{{"type", "run"},
         {"run", r.run},
         {"seed", r.seed},
         {"stream_seed", r.stream_seed},
         {"model_seed", r.model_seed},
         {"steps", r.steps()},
         {"cumulative_errors", r.cumulative_errors},
         {"average_loss", r.average_loss},
         {"window_errors", r.window_errors},
         {"clamp_events", r.clamp_events},
         {"failed", r.failed},
         {"wall_seconds", r.wall_seconds}};
  if (r.failed) j["failure"] = r.failure;
  return j;
}

/// One JSON object per logged step, then a closing run summary line.
inline void write_run_jsonl(const RunRecord& r, std::ostream& os) {
  for (const auto& s : r.log) os << step_json(s).dump() << '\n';
  os << run_summary_json(r).dump() << '\n';
}

inline void write_json_file(const std::filesystem::path& path, const Json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write '" + path.string() + "'");
  os << j.dump(2) << '\n';
}

/// Writes <dir>/run_<i>.jsonl for every run and <dir>/summary.json.
inline void write_experiment(const ExperimentResult& res, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& r : res.runs) {
    std::ofstream os(dir / ("run_" + std::to_string(r.run) + ".jsonl"));
    if (!os) throw std::runtime_error("cannot write run log in '" + dir.string() + "'");
    write_run_jsonl(r, os);
  }
  write_json_file(dir / "summary.json", to_json(res.report));
}

}  // namespace auxdrop
