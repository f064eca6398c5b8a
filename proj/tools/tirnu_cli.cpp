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

// Command-line front end: data generation, pretraining, adaptation,
// evaluation, reporting and the acceptance self-test.

#include <CLI11.hpp>
#include <iostream>

#include "acceptance.hpp"

using namespace tirnu;
namespace fs = std::filesystem;

namespace {

inline constexpr const char* kSplits[] = {"train", "test", "shifted"};

struct AdaptFlags {
  std::string method = "tirnu";
  std::string mode = "offline";
  std::string ablation = "full";
  std::string aug = "all";
  std::optional<double> alpha, w_nu, w_label, lr;
  std::optional<int> k, m, epochs;
  std::optional<std::size_t> batch;
  std::uint64_t seed = 0;
};

void add_adapt_flags(CLI::App& app, AdaptFlags& f) {
  app.add_option("--method", f.method, "source|testbn|tent|tirnu")->capture_default_str();
  app.add_option("--mode", f.mode, "offline|online")->capture_default_str();
  app.add_option("--ablation", f.ablation, "full|label-only|nu-only|nu-plus-H")->capture_default_str();
  app.add_option("--aug", f.aug, "augmentation preset")->capture_default_str();
  app.add_option("--alpha", f.alpha, "Renyi order");
  app.add_option("--k", f.k, "k-NN neighbour for kernel widths");
  app.add_option("--m", f.m, "augmented copies per sample");
  app.add_option("--w-nu", f.w_nu, "weight of the nuisance term");
  app.add_option("--w-label", f.w_label, "weight of the label term");
  app.add_option("--lr", f.lr, "learning rate");
  app.add_option("--batch", f.batch, "batch size");
  app.add_option("--epochs", f.epochs, "offline epochs");
  app.add_option("--seed", f.seed, "adaptation seed")->capture_default_str();
}

AdaptConfig to_config(const AdaptFlags& f) {
  AdaptConfig c = AdaptConfig::defaults(parse_enum(kModeNames, f.mode, "mode"));
  c.ablation = parse_enum(kAblationNames, f.ablation, "ablation");
  if (f.alpha) c.alpha = *f.alpha;
  if (f.k) c.k = *f.k;
  if (f.m) c.m = *f.m;
  if (f.w_nu) c.w_nu = *f.w_nu;
  if (f.w_label) c.w_label = *f.w_label;
  if (f.lr) c.lr = *f.lr;
  if (f.batch) c.batch_size = *f.batch;
  if (f.epochs) c.epochs = *f.epochs;
  c.seed = f.seed;
  c.validate();
  return c;
}

std::string run_id(const AdaptFlags& f, Method method) {
  RunSpec r{parse_enum(kModeNames, f.mode, "mode"), method, parse_enum(kAblationNames, f.ablation, "ablation"),
            method == Method::tirnu ? f.aug : "", f.seed};
  return r.id();
}

int run_selftest() {
  const auto results = acceptance::run_all(std::cout);
  const bool ok = acceptance::all_passed(results);
  std::cout << (ok ? "selftest: all criteria passed\n" : "selftest: FAILED\n");
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Test-time adaptation by nuisance unlearning, desk-scale harness"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "write the seeded synthetic benchmark");
  SyntheticBenchmark bench;
  std::string gen_out = "data";
  gen->add_option("--out", gen_out, "output directory")->capture_default_str();
  gen->add_option("--seed", bench.seed, "benchmark seed")->capture_default_str();
  gen->add_option("--n-train", bench.n_train)->capture_default_str();
  gen->add_option("--n-test", bench.n_test)->capture_default_str();
  gen->add_option("--n-shifted", bench.n_shifted)->capture_default_str();

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "train the source model on the clean training split");
  PretrainConfig pcfg;
  std::string pre_data = "data", pre_out = "model";
  pre->add_option("--data", pre_data, "dataset directory")->capture_default_str();
  pre->add_option("--out", pre_out, "output directory for source.ckpt")->capture_default_str();
  pre->add_option("--epochs", pcfg.epochs)->capture_default_str();
  pre->add_option("--lr", pcfg.lr)->capture_default_str();
  pre->add_option("--batch", pcfg.batch_size)->capture_default_str();
  pre->add_option("--seed", pcfg.seed)->capture_default_str();

  // adapt
  auto* ad = app.add_subcommand("adapt", "adapt a source model on a test split");
  AdaptFlags af;
  std::string ad_data = "data", ad_model = "model/source.ckpt", ad_out = "out", ad_split = "shifted";
  ad->add_option("--data", ad_data, "dataset directory")->capture_default_str();
  ad->add_option("--model", ad_model, "source checkpoint")->capture_default_str();
  ad->add_option("--split", ad_split, "test split")->capture_default_str();
  ad->add_option("--out", ad_out, "output directory (metrics.csv, adapted.ckpt)")->capture_default_str();
  add_adapt_flags(*ad, af);

  // eval
  auto* ev = app.add_subcommand("eval", "error rate of a checkpoint on a split");
  std::string ev_data = "data", ev_model = "model/source.ckpt", ev_split = "shifted";
  bool ev_batch_stats = false;
  std::size_t ev_batch = 64;
  ev->add_option("--data", ev_data)->capture_default_str();
  ev->add_option("--model", ev_model)->capture_default_str();
  ev->add_option("--split", ev_split)->capture_default_str();
  ev->add_option("--batch", ev_batch)->capture_default_str();
  ev->add_flag("--batch-stats", ev_batch_stats, "normalize with test-batch statistics");

  // report
  auto* rep = app.add_subcommand("report", "summarize a metrics CSV as markdown");
  std::string rep_in = "out/metrics.csv", rep_out;
  rep->add_option("--metrics", rep_in)->capture_default_str();
  rep->add_option("--out", rep_out, "write the report here instead of stdout");

  // run
  auto* run = app.add_subcommand("run", "run the full experiment matrix from a JSON config");
  std::string run_cfg, run_out = "out";
  bool run_self = false;
  run->add_option("--config", run_cfg, "experiment config (JSON)")->required();
  run->add_option("--out", run_out, "output directory")->capture_default_str();
  run->add_flag("--selftest", run_self, "also run the acceptance suite; nonzero exit on failure");

  auto* self = app.add_subcommand("selftest", "run the acceptance suite");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const SyntheticData d = generate(bench);
      save_dataset(gen_out, "train", d.train);
      save_dataset(gen_out, "test", d.test);
      save_dataset(gen_out, "shifted", d.shifted);
      std::cout << "wrote " << d.train.size() << "/" << d.test.size() << "/" << d.shifted.size()
                << " samples to " << gen_out << "\n";
    } else if (*pre) {
      const Model m = pretrain_source(load_dataset(pre_data, "train"), pcfg);
      const fs::path path = fs::path(pre_out) / "source.ckpt";
      m.save(path);
      std::cout << "clean train error " << evaluate(m, load_dataset(pre_data, "train"), false, pcfg.batch_size)
                << "%, saved " << path.string() << "\n";
    } else if (*ad) {
      if (std::find(std::begin(kSplits), std::end(kSplits), ad_split) == std::end(kSplits))
        throw Error("unknown split '" + ad_split + "'");
      const Method method = parse_enum(kMethodNames, af.method, "method");
      const AdaptConfig cfg = to_config(af);
      const Dataset test = load_dataset(ad_data, ad_split);
      const Catalog catalog = augmentation_preset(af.aug, test.shape);
      Model model = Model::load(ad_model);
      const AdaptResult r = run_method_in_place(method, model, test, catalog, cfg);
      MetricsWriter writer(fs::path(ad_out) / "metrics.csv");
      const std::string id = run_id(af, method);
      for (const auto& rec : r.records)
        writer.append({id, std::string(to_string(method)), rec.step, rec.metrics.l_nu, rec.metrics.l_label,
                       rec.metrics.total, rec.error_pct, 0.0});
      model.save(fs::path(ad_out) / "adapted.ckpt");
      std::cout << id << ": error " << r.error_pct << "%\n";
    } else if (*ev) {
      const Dataset ds = load_dataset(ev_data, ev_split);
      std::cout << evaluate(Model::load(ev_model), ds, ev_batch_stats, ev_batch) << "\n";
    } else if (*rep) {
      const std::string report = summarize_metrics(parse_metrics_csv(read_file(rep_in)));
      if (rep_out.empty())
        std::cout << report;
      else
        write_file(rep_out, report);
    } else if (*run) {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(read_file(run_cfg), nullptr, true, /*ignore_comments=*/true);
      } catch (const nlohmann::json::exception& e) {
        throw Error("config " + run_cfg + ": " + e.what());
      }
      const ExperimentResult r = run_experiment(experiment_config_from_json(j));
      write_experiment(r, run_out);
      std::cout << r.report;
      if (run_self) return run_selftest();
    } else if (*self) {
      return run_selftest();
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
