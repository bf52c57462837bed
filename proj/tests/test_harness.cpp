#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "auxdrop/config.hpp"
#include "auxdrop/harness.hpp"
#include "test_support.hpp"

using namespace auxdrop;

namespace {

ExperimentConfig small_experiment(const std::string& extra = "") {
  std::istringstream in("name = toy\n"
                        "backbone = odl\n"
                        "depth = 4\n"
                        "nodes = 6\n"
                        "aux_nodes = 12\n"
                        "aux_position = 2\n"
                        "lr = 0.05\n"
                        "base_indices = 1-2\n"
                        "corruption = bernoulli\n"
                        "p = 0.6\n"
                        "runs = 3\n"
                        "seed = 40\n" +
                        extra);
  return parse_config(in, "<test>");
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("auxdrop_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST(Spread, SampleStdAndInterval) {
  const std::vector<double> xs{1, 2, 3, 4};
  const Spread s = spread(xs);
  EXPECT_EQ(s.n, 4u);
  EXPECT_DOUBLE_EQ(s.mean, 2.5);
  EXPECT_NEAR(s.std, std::sqrt(5.0 / 3.0), 1e-15);
  EXPECT_NEAR(s.ci_low, 2.5 - 1.96 * std::sqrt(5.0 / 3.0) / 2.0, 1e-12);
  EXPECT_NEAR(s.ci_high, 2.5 + 1.96 * std::sqrt(5.0 / 3.0) / 2.0, 1e-12);
}

TEST(Spread, SingleValueHasZeroStd) {
  const std::vector<double> xs{7};
  const Spread s = spread(xs);
  EXPECT_EQ(s.mean, 7.0);
  EXPECT_EQ(s.std, 0.0);
  EXPECT_EQ(s.ci_low, 7.0);
}

TEST(WindowCounts, SumsToTotalErrors) {
  SequenceRng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::uint8_t> flags(1 + rng.below(500));
    std::uint64_t total = 0;
    for (auto& f : flags) {
      f = rng.uniform() < 0.3;
      total += f;
    }
    const std::size_t ws = 1 + rng.below(60);
    const auto counts = window_counts(flags, ws);
    EXPECT_EQ(counts.size(), (flags.size() + ws - 1) / ws);
    std::uint64_t sum = 0;
    for (auto c : counts) sum += c;
    EXPECT_EQ(sum, total);
  }
}

TEST(WindowedErrors, MeanIntervalAveragesPerWindowBounds) {
  RunRecord a, b;
  a.error_flags = {1, 0, 1, 1};
  b.error_flags = {0, 0, 1, 0};
  const std::vector<RunRecord> runs{a, b};
  const WindowReport w = windowed_errors(runs, 2);
  ASSERT_EQ(w.windows.size(), 2u);
  EXPECT_DOUBLE_EQ(w.windows[0].mean, 0.5);
  EXPECT_DOUBLE_EQ(w.windows[1].mean, 1.5);
  EXPECT_DOUBLE_EQ(w.mean_ci_low, (w.windows[0].ci_low + w.windows[1].ci_low) / 2);
  EXPECT_DOUBLE_EQ(w.mean_ci_high, (w.windows[0].ci_high + w.windows[1].ci_high) / 2);
}

TEST(Config, ParsesKeysAndDefaults) {
  const ExperimentConfig c = small_experiment();
  EXPECT_EQ(c.name, "toy");
  EXPECT_EQ(c.model.backbone, Backbone::Odl);
  EXPECT_EQ(c.model.depth, 4u);
  EXPECT_EQ(c.stream.base_indices, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(c.stream.corruption, Corruption::Bernoulli);
  EXPECT_EQ(c.seed_for_run(2), 42u);
  EXPECT_TRUE(c.declares_aux());
}

TEST(Config, PresetAppliesBeforeOtherKeysRegardlessOfOrder) {
  std::istringstream in("lr = 0.7\npreset = italy\n");
  const ExperimentConfig c = parse_config(in, "<test>");
  EXPECT_EQ(c.model.depth, 11u);
  EXPECT_EQ(c.model.learning_rate, 0.7);
}

TEST(Config, UnknownKeyIsConfigError) {
  std::istringstream in("learning_rat = 0.1\n");
  try {
    parse_config(in, "<test>");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("learning_rat"), std::string::npos);
  }
}

TEST(Config, MissingEqualsReportsLine) {
  std::istringstream in("# comment\nname = x\nbroken line\n");
  try {
    parse_config(in, "<test>");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
}

TEST(Config, WindowsAndSchedulePresets) {
  std::istringstream in("corruption = schedule\nschedule = susy\nschedule_unit = 10\n");
  const ExperimentConfig c = parse_config(in, "<test>");
  ASSERT_EQ(c.stream.windows.size(), 6u);
  EXPECT_EQ(c.stream.windows[0], (ScheduleWindow{1, 10, 50}));
  EXPECT_FALSE(c.declares_aux());
  std::istringstream w("corruption = schedule\nwindows = 1:5:9;3:0:4\n");
  const ExperimentConfig d = parse_config(w, "<test>");
  EXPECT_EQ(d.stream.windows, (std::vector<ScheduleWindow>{{1, 5, 9}, {3, 0, 4}}));
}

TEST(Config, ExplicitSeedListOverridesBase) {
  const ExperimentConfig c = small_experiment("seeds = 7,9\n");
  EXPECT_EQ(c.run_count(), 2u);
  EXPECT_EQ(c.seed_for_run(1), 9u);
}

TEST(Config, ShippedPresetsParse) {
  const std::filesystem::path dir = std::filesystem::path(AUXDROP_SOURCE_DIR) / "configs";
  std::size_t n = 0;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.path().extension() != ".cfg") continue;
    EXPECT_NO_THROW(load_config(entry.path().string())) << entry.path();
    ++n;
  }
  EXPECT_GT(n, 20u);
}

TEST(Experiment, RunSummaryIsByteDeterministic) {
  const auto table = testing_support::synthetic_table(300, 6, 1);
  const ExperimentConfig c = small_experiment();
  const auto d1 = temp_dir("det1");
  const auto d2 = temp_dir("det2");
  RunOptions serial;
  serial.jobs = 1;
  write_experiment(run_experiment(c, table, serial), d1);
  write_experiment(run_experiment(c, table), d2);
  EXPECT_EQ(slurp(d1 / "summary.json"), slurp(d2 / "summary.json"));
  const std::string log = slurp(d1 / "run_0.jsonl");
  std::istringstream lines(log);
  std::string line;
  std::size_t count = 0;
  while (std::getline(lines, line)) {
    EXPECT_NO_THROW((void)Json::parse(line));
    ++count;
  }
  EXPECT_EQ(count, 301u);
}

TEST(Experiment, SeedsChangeResults) {
  const auto table = testing_support::synthetic_table(300, 6, 1);
  const ExperimentResult a = run_experiment(small_experiment(), table);
  const ExperimentResult b = run_experiment(small_experiment("seed = 41\n"), table);
  EXPECT_NE(a.runs[0].error_flags, b.runs[0].error_flags);
  EXPECT_EQ(a.runs[1].error_flags, b.runs[0].error_flags);
}

TEST(Experiment, AggregateMatchesRunRecords) {
  const auto table = testing_support::synthetic_table(200, 6, 2);
  const ExperimentResult r = run_experiment(small_experiment(), table);
  ASSERT_EQ(r.runs.size(), 3u);
  std::vector<double> errs;
  for (const auto& run : r.runs) {
    std::uint64_t e = 0;
    for (auto f : run.error_flags) e += f;
    EXPECT_EQ(e, run.cumulative_errors);
    errs.push_back(static_cast<double>(e));
  }
  const Spread s = spread(errs);
  EXPECT_EQ(r.report.errors.mean, s.mean);
  EXPECT_EQ(r.report.steps, 200u);
  EXPECT_FALSE(r.report.failed);
}

TEST(Experiment, DivergingRunMarksAggregateFailed) {
  const auto table = testing_support::synthetic_table(200, 6, 2);
  ExperimentConfig c = small_experiment("lr = 1e200\n");
  const ExperimentResult r = run_experiment(c, table);
  EXPECT_TRUE(r.report.failed);
  EXPECT_EQ(r.report.failed_runs, 3u);
  EXPECT_EQ(r.report.failed_seed, std::optional<std::uint64_t>(40));
  EXPECT_FALSE(r.report.failure.empty());
}

TEST(Experiment, ExpectationWithinSigmas) {
  AggregateReport r;
  r.errors.mean = 105;
  r.expect = Expectation{Metric::Errors, 100, 2, 3};
  EXPECT_TRUE(r.expectation_met());
  r.errors.mean = 107;
  EXPECT_FALSE(r.expectation_met());
}

TEST(Sweep, IdenticalModelAndBaselineGiveZeroDelta) {
  const auto d = temp_dir("sweep");
  std::ofstream(d / "toy.csv") << testing_support::synthetic_csv(200, 6, 4);
  ExperimentConfig c = small_experiment("dataset_path = " + (d / "toy.csv").string() + "\nlabel_position = first\nbase_only = true\n");
  const std::vector<double> ps{0.5};
  const SweepReport rep = sweep_probability(c, ps, false);
  ASSERT_EQ(rep.rows.size(), 1u);
  EXPECT_EQ(rep.rows[0].delta_avg, 0.0);
  EXPECT_FALSE(rep.rows[0].fraction.has_value());
}

TEST(Sweep, FractionIsRatioOfDeltas) {
  const auto d = temp_dir("sweep2");
  std::ofstream(d / "toy.csv") << testing_support::synthetic_csv(200, 6, 4);
  ExperimentConfig c = small_experiment("dataset_path = " + (d / "toy.csv").string() + "\nlabel_position = first\n");
  const std::vector<double> ps{0.3, 0.9};
  const SweepReport rep = sweep_probability(c, ps, true);
  ASSERT_TRUE(rep.delta_ai.has_value());
  EXPECT_EQ(*rep.delta_ai, rep.baseline.errors.mean - rep.full->errors.mean);
  for (const auto& row : rep.rows) {
    EXPECT_EQ(row.delta_avg, rep.baseline.errors.mean - row.report.errors.mean);
    if (row.fraction) EXPECT_DOUBLE_EQ(*row.fraction, row.delta_avg / *rep.delta_ai);
  }
}

TEST(Sweep, RequiresBernoulliCorruption) {
  ExperimentConfig c = small_experiment("corruption = none\n");
  const std::vector<double> ps{0.5};
  EXPECT_THROW(sweep_probability(c, ps), ConfigError);
}

TEST(Compare, SelfComparisonHasZeroDelta) {
  const auto table = testing_support::synthetic_table(300, 6, 5);
  ExperimentConfig c = small_experiment("window_size = 50\n");
  const ExperimentResult a = run_experiment(c, table);
  const ExperimentResult b = run_experiment(c, table);
  const CompareReport rep = compare_results(a, b);
  EXPECT_EQ(rep.delta_avg, 0.0);
  EXPECT_EQ(rep.windows.size(), 6u);
  for (const auto& w : rep.windows) {
    EXPECT_EQ(w.delta, 0.0);
    EXPECT_TRUE(w.indistinguishable);
  }
}

TEST(Compare, DifferentStreamsRejected) {
  const ExperimentConfig a = small_experiment();
  const ExperimentConfig b = small_experiment("p = 0.2\n");
  EXPECT_FALSE(same_stream(a, b));
  EXPECT_THROW(compare_baseline(a, b), ConfigError);
  EXPECT_TRUE(same_stream(a, small_experiment("lr = 0.2\n")));
}

TEST(Compare, AuxFreeWindowsFollowSchedule) {
  StreamSpec s;
  s.corruption = Corruption::Schedule;
  s.windows = {{1, 100, 200}};
  EXPECT_FALSE(window_has_aux(s, 1, 99));
  EXPECT_TRUE(window_has_aux(s, 150, 160));
  EXPECT_FALSE(window_has_aux(s, 200, 300));
}

TEST(Ablate, StrategyRowsInFixedOrder) {
  const auto d = temp_dir("ablate");
  std::ofstream(d / "toy.csv") << testing_support::synthetic_csv(120, 6, 4);
  ExperimentConfig c = small_experiment("dataset_path = " + (d / "toy.csv").string() + "\nlabel_position = first\nruns = 1\n");
  const AblationReport rep = ablate(c, AblationDimension::Strategy);
  ASSERT_EQ(rep.rows.size(), 5u);
  const char* labels[] = {"rdando", "rdal", "adardo", "auxdrop", "rdifl"};
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(rep.rows[i].label, labels[i]);
    EXPECT_EQ(rep.rows[i].report.steps, 120u);
  }
  const AblationReport pos = ablate(c, AblationDimension::AuxPosition);
  ASSERT_EQ(pos.rows.size(), 3u);
  EXPECT_EQ(pos.rows[2].label, "z3");
  EXPECT_THROW(parse_dimension("depth"), ConfigError);
}

TEST(Json, TableCellFormat) {
  Spread s;
  s.mean = 300.44;
  s.std = 4.36;
  EXPECT_EQ(table_cell(s, 1), "300.4±4.4");
}
