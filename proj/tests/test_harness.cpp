// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied.  See the License for the specific language governing
// permissions and limitations under the License.

#include <gtest/gtest.h>

#include <boost/math/distributions/students_t.hpp>

#include "tirnu/experiment.hpp"

using namespace tirnu;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("tirnu_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

double boost_sf(double t, double df) {
  return boost::math::cdf(boost::math::complement(boost::math::students_t(df), t));
}

ExperimentConfig tiny_experiment() {
  ExperimentConfig c;
  c.benchmark.n_train = 400;
  c.benchmark.n_test = 40;
  c.benchmark.n_shifted = 160;
  c.pretrain.epochs = 8;
  c.adapt.epochs = 1;
  c.adapt.m = 2;
  c.presets = {"lp", "algomix"};
  c.ablations = {Ablation::full, Ablation::label_only};
  return c;
}

}  // namespace

TEST(TensorContainer, RoundTripIsBitwise) {
  Tensor t(Shape{2, 3, 2});
  const double specials[] = {0.0, -0.0, 1e-310, -1.5, std::numeric_limits<double>::max(),
                             std::numeric_limits<double>::infinity(), std::nan(""), 3.25,
                             std::numeric_limits<double>::denorm_min(), 1.0 / 3.0, -7e300, 42.0};
  std::copy(std::begin(specials), std::end(specials), t.data().begin());
  const std::string bytes = tensor_to_bytes(t);
  EXPECT_EQ(bytes.size(), 4 + 3 + 3 * 8 + 12 * 8u);
  const Tensor back = tensor_from_bytes(bytes);
  EXPECT_TRUE(bitwise_equal(t, back));
  EXPECT_EQ(tensor_to_bytes(back), bytes);
}

TEST(TensorContainer, HeaderLayout) {
  const std::string b = tensor_to_bytes(Tensor::vector({1.0}));
  EXPECT_EQ(b.substr(0, 4), "TNSR");
  EXPECT_EQ(b[4], 1);
  EXPECT_EQ(b[5], 2);
  EXPECT_EQ(b[6], 1);
  EXPECT_EQ(b.substr(7, 8), std::string("\x01\0\0\0\0\0\0\0", 8));
  EXPECT_EQ(b.substr(15), std::string("\0\0\0\0\0\0\xf0\x3f", 8));  // 1.0 little-endian
}

TEST(TensorContainer, RejectsMalformed) {
  const std::string good = tensor_to_bytes(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  EXPECT_THROW(tensor_from_bytes("NOPE" + good.substr(4)), IoError);
  EXPECT_THROW(tensor_from_bytes(good.substr(0, good.size() - 1)), IoError);
  EXPECT_THROW(tensor_from_bytes(good + "x"), IoError);
  std::string bad_version = good;
  bad_version[4] = 2;
  EXPECT_THROW(tensor_from_bytes(bad_version), IoError);
  std::string bad_dtype = good;
  bad_dtype[5] = 1;
  EXPECT_THROW(tensor_from_bytes(bad_dtype), IoError);
  std::string huge = good;
  for (int i = 7; i < 15; ++i) huge[i] = '\xff';
  EXPECT_THROW(tensor_from_bytes(huge), IoError);
}

TEST(TensorContainer, FileRoundTrip) {
  const fs::path dir = scratch_dir("tensor");
  Rng rng(1);
  const Tensor t = rng.normal_tensor(Shape{7, 5});
  save_tensor(dir / "t.tnsr", t);
  EXPECT_TRUE(bitwise_equal(load_tensor(dir / "t.tnsr"), t));
  EXPECT_THROW(load_tensor(dir / "missing.tnsr"), IoError);
  fs::remove_all(dir);
}

TEST(DatasetFiles, RoundTrip) {
  const fs::path dir = scratch_dir("dataset");
  SyntheticBenchmark spec;
  spec.n_train = 40;
  spec.n_test = spec.n_shifted = 8;
  const SyntheticData d = generate(spec);
  save_dataset(dir, "train", d.train);
  const Dataset back = load_dataset(dir, "train");
  EXPECT_TRUE(bitwise_equal(back.x, d.train.x));
  EXPECT_EQ(back.labels, d.train.labels);
  EXPECT_EQ(back.shape, d.train.shape);
  EXPECT_EQ(back.num_classes, 4);
  fs::remove_all(dir);
}

TEST(MetricsCsv, FixedHeaderAndRoundTrip) {
  const std::vector<MetricsRecord> rows = {{"offline/tirnu/full/lp/s0", "tirnu", 3, 2.125, 0.5, 0.7125, 19.7, 0.0},
                                           {"a,\"b\"", "source", 0, 0.0, 0.0, 0.0, 29.2, 12.5}};
  const std::string csv = metrics_csv(rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "run,method,step,l_nu,l_label,total,error_pct,ms");
  const auto back = parse_metrics_csv(csv);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].run, "a,\"b\"");
  EXPECT_EQ(back[0].step, 3u);
  EXPECT_DOUBLE_EQ(back[0].l_nu, 2.125);
  EXPECT_DOUBLE_EQ(back[0].error_pct, 19.7);
  EXPECT_DOUBLE_EQ(back[1].ms, 12.5);
  EXPECT_EQ(metrics_csv(back), csv);
  EXPECT_THROW(parse_metrics_csv("run,method\n"), IoError);
  EXPECT_THROW(parse_metrics_csv(""), IoError);
}

TEST(MetricsCsv, WriterAppendsAndChecksHeader) {
  const fs::path dir = scratch_dir("csv");
  {
    MetricsWriter w(dir / "m.csv");
    w.append({"r", "tent", 1, 0, 0, 0.5, 10, 0});
  }
  {
    MetricsWriter w(dir / "m.csv");
    w.append({"r", "tent", 2, 0, 0, 0.4, 9, 0});
  }
  const auto rows = parse_metrics_csv(read_file(dir / "m.csv"));
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[1].step, 2u);
  write_file(dir / "other.csv", "a,b,c\n");
  EXPECT_THROW(MetricsWriter(dir / "other.csv"), IoError);
  fs::remove_all(dir);
}

TEST(Welch, IdenticalSamples) {
  const std::vector<double> a = {1.0, 2.0, 3.0, 4.5};
  const auto r = welch_t_test(a, a);
  EXPECT_EQ(r.t, 0.0);
  EXPECT_DOUBLE_EQ(r.p, 0.5);
}

TEST(Welch, PublishedComparison) {
  const auto r = welch_t_test(SampleSummary{15.21, 0.02, 5}, SampleSummary{13.13, 0.32, 5}, Alternative::greater);
  EXPECT_GE(r.p, 6.3e-5 / 2.0);
  EXPECT_LE(r.p, 6.3e-5 * 2.0);
  EXPECT_NEAR(r.p, boost_sf(r.t, r.df), 1e-9 * r.p);
  const auto flipped = welch_t_test(SampleSummary{15.21, 0.02, 5}, SampleSummary{13.13, 0.32, 5}, Alternative::less);
  EXPECT_NEAR(flipped.p, 1.0 - r.p, 1e-12);
}

TEST(Welch, EqualSizesAndSpreadGiveClassicDf) {
  for (std::size_t n : {2u, 5u, 17u}) {
    const auto r = welch_t_test(SampleSummary{3.0, 0.7, n}, SampleSummary{2.0, 0.7, n});
    EXPECT_EQ(r.df, 2.0 * static_cast<double>(n) - 2.0);
  }
}

TEST(Welch, HandComputedStatistic) {
  const std::vector<double> a = {10, 12, 11, 13}, b = {8, 9, 10};
  // means 11.5 and 9; variances 5/3 and 1.
  const double va = (5.0 / 3.0) / 4.0, vb = 1.0 / 3.0;
  const auto r = welch_t_test(a, b);
  EXPECT_NEAR(r.t, 2.5 / std::sqrt(va + vb), 1e-12);
  EXPECT_NEAR(r.df, (va + vb) * (va + vb) / (va * va / 3.0 + vb * vb / 2.0), 1e-12);
  EXPECT_NEAR(r.p, boost_sf(r.t, r.df), 1e-12);
}

TEST(Welch, DegenerateAndInvalidInput) {
  const auto same = welch_t_test(SampleSummary{1.0, 0.0, 3}, SampleSummary{1.0, 0.0, 3});
  EXPECT_EQ(same.p, 0.5);
  const auto apart = welch_t_test(SampleSummary{2.0, 0.0, 3}, SampleSummary{1.0, 0.0, 3});
  EXPECT_EQ(apart.p, 0.0);
  EXPECT_TRUE(std::isinf(apart.t));
  EXPECT_EQ(welch_t_test(SampleSummary{1.0, 0.0, 3}, SampleSummary{2.0, 0.0, 3}).p, 1.0);
  EXPECT_THROW(welch_t_test(SampleSummary{1.0, 0.1, 1}, SampleSummary{1.0, 0.1, 3}), Error);
  EXPECT_THROW(welch_t_test(std::vector<double>{1.0}, std::vector<double>{1.0, 2.0}), Error);
}

TEST(StudentT, MatchesHighPrecisionOracleOnGrid) {
  double worst = 0.0;
  for (double df = 1.0; df <= 50.0; df += 0.5)
    for (double t = -20.0; t <= 20.0; t += 0.125) {
      const double o = boost_sf(t, df);
      worst = std::max(worst, std::abs(student_t_sf(t, df) - o) / o);
    }
  EXPECT_LT(worst, 1e-9);
}

TEST(IncompleteBeta, ClosedForms) {
  for (double x : {0.0, 0.1, 0.5, 0.93, 1.0}) {
    EXPECT_NEAR(incomplete_beta(1.0, 1.0, x), x, 1e-14);
    EXPECT_NEAR(incomplete_beta(3.0, 1.0, x), x * x * x, 1e-14);
    EXPECT_NEAR(incomplete_beta(1.0, 2.0, x), 1.0 - (1.0 - x) * (1.0 - x), 1e-14);
  }
  EXPECT_NEAR(incomplete_beta(2.5, 4.0, 0.3) + incomplete_beta(4.0, 2.5, 0.7), 1.0, 1e-14);
  EXPECT_THROW(incomplete_beta(0.0, 1.0, 0.5), Error);
  EXPECT_THROW(incomplete_beta(1.0, 1.0, 1.5), Error);
}

TEST(Synthetic, DeterministicAndBalanced) {
  SyntheticBenchmark spec;
  spec.n_train = 400;
  spec.n_test = 100;
  spec.n_shifted = 100;
  const SyntheticData a = generate(spec), b = generate(spec);
  EXPECT_EQ(tensor_to_bytes(a.train.x), tensor_to_bytes(b.train.x));
  EXPECT_EQ(tensor_to_bytes(a.shifted.x), tensor_to_bytes(b.shifted.x));
  EXPECT_EQ(a.train.labels, b.train.labels);
  spec.seed = 1;
  EXPECT_NE(tensor_to_bytes(generate(spec).train.x), tensor_to_bytes(a.train.x));
  for (const Dataset* ds : {&a.train, &a.test, &a.shifted}) {
    std::vector<int> counts(4, 0);
    for (int y : ds->labels) ++counts[static_cast<std::size_t>(y)];
    for (int c : counts) EXPECT_EQ(c, static_cast<int>(ds->size() / 4));
    EXPECT_NO_THROW(ds->validate());
  }
}

TEST(Synthetic, FileOutputIsReproducible) {
  SyntheticBenchmark spec;
  spec.n_train = 80;
  spec.n_test = spec.n_shifted = 20;
  const fs::path d1 = scratch_dir("gen1"), d2 = scratch_dir("gen2");
  for (const auto& dir : {d1, d2}) {
    const SyntheticData d = generate(spec);
    save_dataset(dir, "train", d.train);
    save_dataset(dir, "shifted", d.shifted);
  }
  for (const char* f : {"train_x.tnsr", "train_y.tnsr", "shifted_x.tnsr", "shifted.json"})
    EXPECT_EQ(read_file(d1 / f), read_file(d2 / f)) << f;
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST(Synthetic, ShiftDeviationGrowsWithSeverity) {
  SyntheticBenchmark spec;
  spec.n_train = 4;
  spec.n_test = 400;
  spec.n_shifted = 4;
  const Dataset clean = generate(spec).test;
  double prev = 0.0;
  for (int sev = 1; sev <= 5; ++sev) {
    const std::vector<CorruptionSpec> chain = {{CorruptionKind::rotation_shift, sev},
                                               {CorruptionKind::additive_gaussian, sev}};
    Rng rng(3);
    const Dataset shifted = shift_dataset(clean, chain, rng);
    EXPECT_EQ(shifted.labels, clean.labels);
    double msd = 0.0;
    for (std::size_t i = 0; i < clean.x.size(); ++i) msd += std::pow(shifted.x[i] - clean.x[i], 2);
    msd /= static_cast<double>(clean.x.size());
    EXPECT_GT(msd, prev) << "severity " << sev;
    prev = msd;
  }
}

TEST(Experiment, ConfigParsing) {
  const auto c = experiment_config_from_json(nlohmann::json::parse(R"({
    "seeds": [1, 2], "modes": ["online"], "methods": ["tent", "tirnu"],
    "ablations": ["nu-plus-H"], "presets": ["lp"],
    "adapt": {"m": 3, "w_nu": 0.5, "epochs": 2},
    "benchmark": {"n_train": 80, "shift": [{"kind": "contrast", "severity": 4}]}
  })"));
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{1, 2}));
  EXPECT_EQ(c.modes, std::vector<AdaptMode>{AdaptMode::online});
  EXPECT_EQ(c.adapt.m, 3);
  EXPECT_EQ(c.w_nu.value(), 0.5);
  EXPECT_EQ(c.benchmark.shift.size(), 1u);
  EXPECT_EQ(experiment_runs(c).size(), 4u);
  EXPECT_THROW(experiment_config_from_json(nlohmann::json::parse(R"({"sedes": [1]})")), Error);
  EXPECT_THROW(experiment_config_from_json(nlohmann::json::parse(R"({"methods": ["shot"]})")), Error);
  EXPECT_THROW(experiment_config_from_json(nlohmann::json::parse(R"({"presets": ["fancy"]})")), Error);
}

TEST(Experiment, ThreadCapFromEnvironment) {
  ::setenv("NU_THREADS", "3", 1);
  EXPECT_EQ(worker_count(10), 3u);
  EXPECT_EQ(worker_count(2), 2u);
  ::setenv("NU_THREADS", "zero", 1);
  EXPECT_GE(worker_count(10), 1u);
  ::unsetenv("NU_THREADS");
}

TEST(Experiment, ReportHasOneRowPerGroupAndRerunIsIdentical) {
  const ExperimentConfig c = tiny_experiment();
  const ExperimentResult a = run_experiment(c, 1);
  const ExperimentResult b = run_experiment(c, 2);
  EXPECT_EQ(a.csv, b.csv);
  EXPECT_EQ(a.report, b.report);
  // 2 modes x (3 baselines + 2 presets x 2 ablations)
  EXPECT_EQ(a.runs.size(), 14u);
  std::size_t table_rows = 0;
  for (const auto& r : a.runs) {
    EXPECT_NE(a.report.find("| " + r.spec.group() + " |"), std::string::npos) << r.spec.group();
    ++table_rows;
  }
  EXPECT_EQ(table_rows, 14u);
  const auto rows = parse_metrics_csv(a.csv);
  for (const auto& r : a.runs) {
    auto last = std::find_if(rows.rbegin(), rows.rend(), [&](const MetricsRecord& m) { return m.run == r.spec.id(); });
    ASSERT_NE(last, rows.rend());
    EXPECT_DOUBLE_EQ(last->error_pct, r.error_pct);
    EXPECT_EQ(last->ms, 0.0);
  }
}

TEST(Experiment, MultiSeedReportRunsWelch) {
  ExperimentConfig c = tiny_experiment();
  c.seeds = {0, 1};
  c.modes = {AdaptMode::offline};
  c.methods = {Method::source, Method::tirnu};
  c.presets = {"lp"};
  c.ablations = {Ablation::full};
  const ExperimentResult r = run_experiment(c);
  EXPECT_NE(r.report.find("offline/source > offline/tirnu/full/lp"), std::string::npos) << r.report;
  EXPECT_NE(r.report.find("Seeds: 0, 1"), std::string::npos);
}
