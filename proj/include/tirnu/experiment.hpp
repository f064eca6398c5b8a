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

// Experiment matrix: generate -> pretrain -> every (mode, method, ablation,
// preset, seed) run -> metrics CSV and a summary report.

#pragma once

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <exception>
#include <set>
#include <thread>

#include "tirnu/adapt.hpp"
#include "tirnu/serialize.hpp"
#include "tirnu/stats.hpp"
#include "tirnu/synthetic.hpp"

namespace tirnu {

struct ExperimentConfig {
  std::vector<std::uint64_t> seeds = {0};
  SyntheticBenchmark benchmark;
  PretrainConfig pretrain;
  AdaptConfig adapt;                  // mode and w_nu are set per run
  std::optional<double> w_nu;         // unset: 0.1 offline, 1.0 online
  std::vector<AdaptMode> modes = {AdaptMode::offline, AdaptMode::online};
  std::vector<Method> methods = {Method::source, Method::test_bn, Method::tent, Method::tirnu};
  std::vector<Ablation> ablations = {Ablation::full, Ablation::label_only, Ablation::nu_only,
                                     Ablation::nu_plus_h};
  std::vector<std::string> presets = {kAugmentationPresets.begin(), kAugmentationPresets.end()};
  bool record_ms = false;  // wall-clock column; off keeps reruns byte-identical
};

namespace detail {

template <class T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

template <class E, std::size_t N>
std::vector<E> read_enum_list(const nlohmann::json& j, const char* key,
                              const std::array<std::pair<E, std::string_view>, N>& table,
                              std::vector<E> fallback) {
  if (!j.contains(key)) return fallback;
  std::vector<E> out;
  for (const auto& s : j.at(key)) out.push_back(parse_enum(table, s.get<std::string>(), key));
  return out;
}

inline const std::set<std::string>& known_config_keys() {
  static const std::set<std::string> keys = {"seeds", "benchmark", "pretrain", "adapt", "modes",
                                             "methods", "ablations", "presets", "record_ms"};
  return keys;
}

}  // namespace detail

/// Parses a JSON experiment config. Unknown keys are rejected so typos do
/// not silently fall back to defaults.
inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  using detail::read_opt;
  ExperimentConfig c;
  try {
    for (const auto& [key, _] : j.items())
      if (!detail::known_config_keys().contains(key)) throw Error("experiment config: unknown key '" + key + "'");
    read_opt(j, "seeds", c.seeds);
    read_opt(j, "record_ms", c.record_ms);
    if (j.contains("benchmark")) {
      const auto& b = j.at("benchmark");
      read_opt(b, "n_train", c.benchmark.n_train);
      read_opt(b, "n_test", c.benchmark.n_test);
      read_opt(b, "n_shifted", c.benchmark.n_shifted);
      read_opt(b, "class_spread", c.benchmark.class_spread);
      read_opt(b, "noise", c.benchmark.noise);
      if (b.contains("shift")) {
        c.benchmark.shift.clear();
        for (const auto& s : b.at("shift"))
          c.benchmark.shift.push_back({parse_corruption(s.at("kind").get<std::string>()), s.at("severity").get<int>()});
      }
    }
    if (j.contains("pretrain")) {
      const auto& p = j.at("pretrain");
      read_opt(p, "epochs", c.pretrain.epochs);
      read_opt(p, "lr", c.pretrain.lr);
      read_opt(p, "momentum", c.pretrain.momentum);
      read_opt(p, "batch", c.pretrain.batch_size);
    }
    if (j.contains("adapt")) {
      const auto& a = j.at("adapt");
      read_opt(a, "alpha", c.adapt.alpha);
      read_opt(a, "k", c.adapt.k);
      read_opt(a, "m", c.adapt.m);
      read_opt(a, "w_label", c.adapt.w_label);
      read_opt(a, "include_reverse_ce", c.adapt.include_reverse_ce);
      read_opt(a, "lr", c.adapt.lr);
      read_opt(a, "momentum", c.adapt.momentum);
      read_opt(a, "batch", c.adapt.batch_size);
      read_opt(a, "epochs", c.adapt.epochs);
      if (a.contains("w_nu")) c.w_nu = a.at("w_nu").get<double>();
    }
    c.modes = detail::read_enum_list(j, "modes", kModeNames, c.modes);
    c.methods = detail::read_enum_list(j, "methods", kMethodNames, c.methods);
    c.ablations = detail::read_enum_list(j, "ablations", kAblationNames, c.ablations);
    read_opt(j, "presets", c.presets);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("experiment config: ") + e.what());
  }
  if (c.seeds.empty()) throw Error("experiment config: no seeds");
  for (const auto& p : c.presets) augmentation_preset(p, InputShape::vector(c.benchmark.dim));
  return c;
}

struct RunSpec {
  AdaptMode mode = AdaptMode::offline;
  Method method = Method::source;
  Ablation ablation = Ablation::full;
  std::string preset;  // empty for methods that use no augmentation
  std::uint64_t seed = 0;

  /// Run group without the seed, e.g. "offline/tirnu/full/lp".
  std::string group() const {
    std::string g = std::string(to_string(mode)) + "/" + std::string(to_string(method));
    if (method == Method::tirnu) g += "/" + std::string(to_string(ablation)) + "/" + preset;
    return g;
  }
  std::string id() const { return group() + "/s" + std::to_string(seed); }
};

struct RunOutcome {
  RunSpec spec;
  double error_pct = 0.0;
  std::vector<MetricsRecord> records;
};

struct ExperimentResult {
  std::vector<RunOutcome> runs;
  std::string csv;
  std::string report;
};

/// Enumerates the matrix in a fixed order.
inline std::vector<RunSpec> experiment_runs(const ExperimentConfig& c) {
  std::vector<RunSpec> out;
  for (std::uint64_t seed : c.seeds)
    for (AdaptMode mode : c.modes)
      for (Method method : c.methods) {
        if (method != Method::tirnu) {
          out.push_back({mode, method, Ablation::full, "", seed});
          continue;
        }
        for (const auto& preset : c.presets)
          for (Ablation ab : c.ablations) out.push_back({mode, method, ab, preset, seed});
      }
  return out;
}

/// NU_THREADS caps run parallelism; unset or invalid means hardware threads.
inline std::size_t worker_count(std::size_t jobs) {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("NU_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1) n = static_cast<std::size_t>(v);
  }
  return std::max<std::size_t>(1, std::min(n, jobs));
}

/// Runs `jobs` indexed tasks on up to `threads` workers; the first exception
/// is rethrown after all workers stop.
template <class Fn>
void parallel_for(std::size_t jobs, std::size_t threads, Fn fn) {
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < jobs;) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mu);
        if (!error) error = std::current_exception();
        next = jobs;
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

inline AdaptConfig run_config(const ExperimentConfig& c, const RunSpec& r) {
  AdaptConfig cfg = c.adapt;
  cfg.mode = r.mode;
  cfg.w_nu = c.w_nu.value_or(AdaptConfig::defaults(r.mode).w_nu);
  cfg.ablation = r.ablation;
  cfg.seed = r.seed;
  return cfg;
}

namespace detail {

struct GroupStats {
  std::string group;
  std::vector<double> errors;
};

inline std::vector<GroupStats> group_final_errors(std::span<const MetricsRecord> rows) {
  // Last row of each run carries its final error; groups keep first-seen order.
  std::vector<std::string> run_order;
  std::map<std::string, double> final_error;
  for (const auto& r : rows) {
    if (!final_error.contains(r.run)) run_order.push_back(r.run);
    final_error[r.run] = r.error_pct;
  }
  std::vector<GroupStats> groups;
  for (const auto& run : run_order) {
    const auto cut = run.rfind("/s");
    const std::string g = cut == std::string::npos ? run : run.substr(0, cut);
    auto it = std::find_if(groups.begin(), groups.end(), [&](const GroupStats& s) { return s.group == g; });
    if (it == groups.end()) {
      groups.push_back({g, {}});
      it = groups.end() - 1;
    }
    it->errors.push_back(final_error[run]);
  }
  return groups;
}

}  // namespace detail

/// Markdown summary of a metrics CSV: one row per run group with the mean
/// and sample standard deviation of final error over seeds. With two or more
/// seeds, each tirnu group is compared with each baseline of the same mode
/// by a one-sided Welch test (baseline error greater than tirnu error).
inline std::string summarize_metrics(std::span<const MetricsRecord> rows, const std::string& preamble = "") {
  using detail::fixed;
  const auto groups = detail::group_final_errors(rows);
  std::string out = "# Experiment report\n\n" + preamble;
  out += "| run group | seeds | error % (mean) | std |\n|---|---|---|---|\n";
  for (const auto& g : groups) {
    const SampleSummary s = summarize(g.errors);
    out += "| " + g.group + " | " + std::to_string(s.n) + " | " + fixed(s.mean, 2) + " | " + fixed(s.sd, 2) + " |\n";
  }
  bool header = false;
  for (const auto& t : groups) {
    if (t.group.find("/tirnu/") == std::string::npos || t.errors.size() < 2) continue;
    const std::string mode = t.group.substr(0, t.group.find('/'));
    for (const auto& b : groups) {
      if (b.group.find("/tirnu/") != std::string::npos || b.group.substr(0, b.group.find('/')) != mode ||
          b.errors.size() < 2)
        continue;
      if (!header) {
        out += "\n| baseline > tirnu | t | df | one-sided p |\n|---|---|---|---|\n";
        header = true;
      }
      const WelchResult w = welch_t_test(b.errors, t.errors, Alternative::greater);
      char line[256];
      std::snprintf(line, sizeof line, "| %s > %s | %.4g | %.4g | %.3g |\n", b.group.c_str(), t.group.c_str(),
                    w.t, w.df, w.p);
      out += line;
    }
  }
  return out;
}

/// Runs the whole matrix. Each seed gets its own benchmark draw and source
/// model; every run under that seed adapts a private copy with adaptation
/// seed equal to the same value.
inline ExperimentResult run_experiment(const ExperimentConfig& c,
                                       std::optional<std::size_t> threads = std::nullopt) {
  struct SeedArtifacts {
    SyntheticData data;
    Model source;
  };
  std::vector<SeedArtifacts> per_seed(c.seeds.size());
  parallel_for(c.seeds.size(), threads.value_or(worker_count(c.seeds.size())), [&](std::size_t i) {
    SyntheticBenchmark b = c.benchmark;
    b.seed = c.seeds[i];
    PretrainConfig p = c.pretrain;
    p.seed = c.seeds[i];
    per_seed[i].data = generate(b);
    per_seed[i].source = pretrain_source(per_seed[i].data.train, p);
  });

  const std::vector<RunSpec> specs = experiment_runs(c);
  ExperimentResult result;
  result.runs.resize(specs.size());
  parallel_for(specs.size(), threads.value_or(worker_count(specs.size())), [&](std::size_t i) {
    const RunSpec& spec = specs[i];
    const std::size_t s = static_cast<std::size_t>(
        std::find(c.seeds.begin(), c.seeds.end(), spec.seed) - c.seeds.begin());
    const SeedArtifacts& art = per_seed[s];
    const Catalog catalog = spec.preset.empty() ? Catalog{AugmentationSpec::identity()}
                                                : augmentation_preset(spec.preset, art.data.shifted.shape);
    const auto t0 = std::chrono::steady_clock::now();
    const AdaptResult r = run_method(spec.method, art.source, art.data.shifted, catalog, run_config(c, spec));
    const double ms =
        c.record_ms ? std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count() : 0.0;
    RunOutcome& out = result.runs[i];
    out.spec = spec;
    out.error_pct = r.error_pct;
    for (const auto& rec : r.records)
      out.records.push_back({spec.id(), std::string(to_string(spec.method)), rec.step, rec.metrics.l_nu,
                             rec.metrics.l_label, rec.metrics.total, rec.error_pct, 0.0});
    // The final row always carries the run's reported error.
    if (out.records.empty() || out.records.back().error_pct != r.error_pct)
      out.records.push_back({spec.id(), std::string(to_string(spec.method)),
                             out.records.empty() ? 0 : out.records.back().step + 1, 0.0, 0.0, 0.0, r.error_pct, 0.0});
    out.records.back().ms = ms;
  });

  std::vector<MetricsRecord> rows;
  for (const auto& run : result.runs) rows.insert(rows.end(), run.records.begin(), run.records.end());
  result.csv = metrics_csv(rows);

  std::string seeds;
  for (std::size_t i = 0; i < c.seeds.size(); ++i) seeds += (i ? ", " : "") + std::to_string(c.seeds[i]);
  std::string preamble = "Seeds: " + seeds +
                         ". For seed s the benchmark draw, source pretraining and every method's "
                         "adaptation stream (transform draws, shuffling) all use seed s; Source and "
                         "Test-BN draw no randomness after pretraining.\n\n";
  result.report = summarize_metrics(rows, preamble);
  return result;
}

inline void write_experiment(const ExperimentResult& r, const std::filesystem::path& dir) {
  write_file(dir / "metrics.csv", r.csv);
  write_file(dir / "report.md", r.report);
}

}  // namespace tirnu
