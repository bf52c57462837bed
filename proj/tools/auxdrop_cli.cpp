// auxdrop: run, sweep, ablate and compare online experiments from config files.
//
// Exit codes: 0 success, 1 configuration error, 2 runtime failure,
// 3 acceptance threshold missed (with --assert).

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "auxdrop/auxdrop.hpp"

namespace {

using namespace auxdrop;

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kRuntimeError = 2;
constexpr int kAssertFailed = 3;

struct GlobalFlags {
  std::string seeds;
  std::size_t runs = 0;
  std::string out;
  std::size_t limit = 0;
  std::size_t jobs = 0;
  bool quiet = false;
  bool assert_thresholds = false;
};

ExperimentConfig load_with_overrides(const std::string& path, const GlobalFlags& g) {
  ExperimentConfig cfg = load_config(path);
  if (!g.seeds.empty()) apply_key(cfg, "seeds", g.seeds);
  if (g.runs) {
    cfg.runs = g.runs;
    if (g.seeds.empty()) cfg.seeds.clear();
  }
  if (g.limit) cfg.stream.limit = g.limit;
  if (!g.out.empty()) cfg.out = g.out;
  if (g.jobs) cfg.jobs = g.jobs;
  return cfg;
}

void print_report(const AggregateReport& r, bool quiet) {
  if (quiet) return;
  std::cout << r.name << ": runs=" << r.n_runs << " steps=" << r.steps << " errors=" << table_cell(r.errors, 1)
            << " avg_loss=" << table_cell(r.loss, 4);
  if (r.clamp_events) std::cout << " clamp_events=" << r.clamp_events;
  if (r.failed) std::cout << " FAILED(" << r.failed_runs << " of " << r.n_runs << " runs; seed " << r.failed_seed.value_or(0) << ": "
                           << r.failure << ")";
  if (r.expect) std::cout << (r.expectation_met() ? " [expectation met]" : " [expectation MISSED]");
  std::cout << '\n';
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << '\n';
}

std::filesystem::path out_dir(const ExperimentConfig& cfg) { return std::filesystem::path(cfg.out) / cfg.name; }

int finish(const std::vector<const AggregateReport*>& reports, const GlobalFlags& g) {
  for (const auto* r : reports)
    if (r->failed) return kRuntimeError;
  if (g.assert_thresholds)
    for (const auto* r : reports)
      if (!r->expectation_met()) return kAssertFailed;
  return kOk;
}

int cmd_run(const std::string& config, const GlobalFlags& g) {
  const ExperimentConfig cfg = load_with_overrides(config, g);
  const ExperimentResult res = run_experiment(cfg);
  print_report(res.report, g.quiet);
  if (!cfg.out.empty()) write_experiment(res, out_dir(cfg));
  return finish({&res.report}, g);
}

int cmd_sweep(const std::string& config, const std::vector<double>& ps, bool no_full, const GlobalFlags& g) {
  const ExperimentConfig cfg = load_with_overrides(config, g);
  std::vector<ExperimentResult> results;
  const SweepReport rep = sweep_probability(cfg, ps, !no_full, {}, &results);
  print_report(rep.baseline, g.quiet);
  if (rep.full) print_report(*rep.full, g.quiet);
  for (const auto& row : rep.rows) {
    print_report(row.report, g.quiet);
    if (!g.quiet) {
      std::cout << "  p=" << row.p << " delta_avg=" << row.delta_avg;
      if (row.fraction) std::cout << " fraction_improvement=" << *row.fraction;
      std::cout << '\n';
    }
  }
  if (!cfg.out.empty()) {
    for (const auto& r : results) write_experiment(r, out_dir(r.config));
    write_json_file(out_dir(cfg) / "sweep.json", to_json(rep));
  }
  std::vector<const AggregateReport*> all{&rep.baseline};
  if (rep.full) all.push_back(&*rep.full);
  for (const auto& row : rep.rows) all.push_back(&row.report);
  return finish(all, g);
}

int cmd_ablate(const std::string& config, const std::string& dimension, const GlobalFlags& g) {
  const ExperimentConfig cfg = load_with_overrides(config, g);
  const AblationReport rep = ablate(cfg, parse_dimension(dimension));
  std::vector<const AggregateReport*> all;
  for (const auto& row : rep.rows) {
    print_report(row.report, g.quiet);
    all.push_back(&row.report);
  }
  if (!cfg.out.empty()) write_json_file(out_dir(cfg) / ("ablate_" + dimension + ".json"), to_json(rep));
  return finish(all, g);
}

int cmd_compare(const std::string& a, const std::string& b, const GlobalFlags& g) {
  ExperimentConfig ca = load_with_overrides(a, g);
  ExperimentConfig cb = load_with_overrides(b, g);
  const CompareReport rep = compare_baseline(ca, cb);
  print_report(rep.a, g.quiet);
  print_report(rep.b, g.quiet);
  if (!g.quiet)
    std::cout << "delta_avg (b - a) = " << rep.delta_avg << ", aux-free windows converged: " << std::boolalpha
              << rep.aux_free_converged << '\n';
  if (!ca.out.empty()) write_json_file(std::filesystem::path(ca.out) / (ca.name + "_vs_" + cb.name + ".json"), to_json(rep));
  const int code = finish({&rep.a, &rep.b}, g);
  if (code == kOk && g.assert_thresholds && !rep.aux_free_converged) return kAssertFailed;
  return code;
}

int cmd_check_grad(const std::string& config, std::size_t cases, double tolerance, const GlobalFlags& g) {
  const ExperimentConfig cfg = load_with_overrides(config, g);
  auto table = shared_table(cfg);
  StreamSpec spec = cfg.stream;
  spec.seed = stream_seed_for(cfg.seed_for_run(0));
  HaphazardStream stream(table, spec);
  AuxDropModel model(model_config_for(cfg, stream), model_seed_for(cfg.seed_for_run(0)));
  GradCheckOptions opt;
  opt.tolerance = tolerance;
  double worst = 0.0;
  bool passed = true;
  for (std::size_t c = 0; c < cases; ++c) {
    auto inst = stream.next();
    if (!inst) break;
    model.register_features(inst->aux);
    const FeatureValues aux = cfg.model.base_only ? FeatureValues{} : inst->aux;
    const NetworkMask mask = model.make_masks(aux, model.steps() + 1);
    const GradCheckReport rep = finite_diff_check(model, *inst, mask, opt);
    worst = std::max(worst, rep.max_relative_error);
    passed = passed && rep.passed;
    if (!g.quiet)
      std::cout << "step " << inst->t << ": checked=" << rep.checked << " frozen=" << rep.skipped_frozen
                << " max_rel_err=" << rep.max_relative_error << (rep.passed ? "" : " (" + rep.worst_block + ")") << '\n';
    model.train_step(*inst);
  }
  if (!g.quiet) std::cout << "max relative error " << worst << (passed ? " <= " : " > ") << tolerance << '\n';
  if (!passed) return g.assert_thresholds ? kAssertFailed : kRuntimeError;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Online deep learning on haphazard streams with auxiliary dropout"};
  app.require_subcommand(1);
  GlobalFlags g;
  app.add_option("--seeds", g.seeds, "Comma-separated run seeds");
  app.add_option("--runs", g.runs, "Number of runs (seeds base_seed + i)");
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--limit", g.limit, "Truncate streams to this many instances");
  app.add_option("--jobs", g.jobs, "Parallel runs (0: all cores)");
  app.add_flag("--quiet", g.quiet, "Suppress progress output");
  app.add_flag("--assert", g.assert_thresholds, "Exit 3 when a configured expectation is missed");

  std::string config;
  auto* run = app.add_subcommand("run", "Run one experiment");
  run->add_option("--config", config, "Config file")->required();

  std::vector<double> ps;
  bool no_full = false;
  auto* sweep = app.add_subcommand("sweep", "Sweep the availability probability p");
  sweep->add_option("--config", config, "Config file")->required();
  sweep->add_option("--p", ps, "Probabilities")->delimiter(',')->required();
  sweep->add_flag("--no-full", no_full, "Skip the all-features reference run");

  std::string dimension;
  auto* abl = app.add_subcommand("ablate", "Ablate dropout strategy or auxiliary layer position");
  abl->add_option("--config", config, "Config file")->required();
  abl->add_option("--dimension", dimension, "strategy or aux_position")->required()->check(CLI::IsMember({"strategy", "aux_position"}));

  std::string a;
  std::string b;
  auto* cmp = app.add_subcommand("compare", "Compare two configs on the same stream");
  cmp->add_option("--a", a, "First config")->required();
  cmp->add_option("--b", b, "Second config")->required();

  std::size_t cases = 3;
  double tolerance = 1e-4;
  auto* grad = app.add_subcommand("check-grad", "Finite-difference gradient check on the first stream steps");
  grad->add_option("--config", config, "Config file")->required();
  grad->add_option("--cases", cases, "Instances to check");
  grad->add_option("--tolerance", tolerance, "Maximum relative error");

  for (auto* sub : {run, sweep, abl, cmp, grad}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*run) return cmd_run(config, g);
    if (*sweep) return cmd_sweep(config, ps, no_full, g);
    if (*abl) return cmd_ablate(config, dimension, g);
    if (*cmp) return cmd_compare(a, b, g);
    if (*grad) return cmd_check_grad(config, cases, tolerance, g);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kConfigError;
  } catch (const ParseError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kConfigError;
  } catch (const NonFiniteError& e) {
    std::cerr << "runtime failure: " << e.what() << '\n';
    return kRuntimeError;
  } catch (const std::exception& e) {
    std::cerr << "runtime failure: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kOk;
}
