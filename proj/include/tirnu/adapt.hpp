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

// Test-time adaptation: the nuisance-unlearning objective, its SGD step,
// offline and online loops, source pretraining, and the Source / Test-BN /
// Tent baselines.

#pragma once

#include "tirnu/augment.hpp"
#include "tirnu/info_metrics.hpp"
#include "tirnu/model.hpp"

namespace tirnu {

enum class AdaptMode { offline, online };
enum class Ablation { full, label_only, nu_only, nu_plus_h };
enum class Method { source, test_bn, tent, tirnu };

inline constexpr std::array<std::pair<Ablation, std::string_view>, 4> kAblationNames = {{
    {Ablation::full, "full"},
    {Ablation::label_only, "label-only"},
    {Ablation::nu_only, "nu-only"},
    {Ablation::nu_plus_h, "nu-plus-H"},
}};

inline constexpr std::array<std::pair<Method, std::string_view>, 4> kMethodNames = {{
    {Method::source, "source"},
    {Method::test_bn, "testbn"},
    {Method::tent, "tent"},
    {Method::tirnu, "tirnu"},
}};

inline constexpr std::array<std::pair<AdaptMode, std::string_view>, 2> kModeNames = {{
    {AdaptMode::offline, "offline"},
    {AdaptMode::online, "online"},
}};

template <class E, std::size_t N>
std::string_view enum_name(const std::array<std::pair<E, std::string_view>, N>& table, E v) {
  for (const auto& [e, n] : table)
    if (e == v) return n;
  throw Error("unnamed enum value");
}

template <class E, std::size_t N>
E parse_enum(const std::array<std::pair<E, std::string_view>, N>& table, std::string_view s,
             const char* what) {
  for (const auto& [e, n] : table)
    if (n == s) return e;
  throw Error(std::string("unknown ") + what + " '" + std::string(s) + "'");
}

inline std::string_view to_string(Ablation a) { return enum_name(kAblationNames, a); }
inline std::string_view to_string(Method m) { return enum_name(kMethodNames, m); }
inline std::string_view to_string(AdaptMode m) { return enum_name(kModeNames, m); }

struct AdaptConfig {
  double alpha = 1.01;
  int k = 10;
  int m = 4;
  double w_nu = 0.1;
  double w_label = 1.0;
  bool include_reverse_ce = true;
  double lr = 1e-3;
  double momentum = 0.9;
  std::size_t batch_size = 64;
  int epochs = 10;
  AdaptMode mode = AdaptMode::offline;
  Ablation ablation = Ablation::full;
  std::uint64_t seed = 0;

  /// Defaults for a mode; the nuisance weight is 0.1 offline and 1.0 online.
  static AdaptConfig defaults(AdaptMode mode) {
    AdaptConfig c;
    c.mode = mode;
    c.w_nu = mode == AdaptMode::online ? 1.0 : 0.1;
    return c;
  }

  EntropyConfig entropy() const { return {alpha, k, 1e-8}; }

  /// Smallest batch the Gram matrices and the width heuristic can use.
  std::size_t min_batch() const { return std::max<std::size_t>(2, static_cast<std::size_t>(k) + 1); }

  void validate() const {
    entropy().validate();
    if (m < 1) throw Error("adapt: M must be >= 1");
    if (!(w_nu >= 0.0) || !(w_label >= 0.0)) throw Error("adapt: loss weights must be >= 0");
    if (!(lr >= 0.0)) throw Error("adapt: lr must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw Error("adapt: momentum must be in [0, 1)");
    if (batch_size < min_batch())
      throw Error("adapt: batch size must be >= max(2, k + 1) = " + std::to_string(min_batch()));
    if (epochs < 0) throw Error("adapt: epochs must be >= 0");
  }
};

/// Per-step losses. L_NU in bits, label terms in nats.
struct StepMetrics {
  double l_nu = 0.0;
  double l_label = 0.0;
  double h_pred = 0.0;
  double total = 0.0;
};

struct StepResult {
  StepMetrics metrics;
  Tensor probs;  // predictions of the forward pass that produced the update
};

namespace detail {

inline void require_probability_rows(const Tensor& p, const char* what) {
  for (std::size_t i = 0; i < p.rows(); ++i) {
    double s = 0.0;
    for (double v : p.row(i)) {
      if (!(v >= 0.0)) throw Error(std::string(what) + ": negative or NaN probability");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-6) throw Error(std::string(what) + ": row does not sum to 1");
  }
}

}  // namespace detail

/// Confidence plus consistency over (original, augmented) prediction pairs:
/// mean_j [H(y) + H(y'_j) + CE(y, y'_j) (+ CE(y'_j, y))], each averaged over
/// the batch, in nats.
inline Var label_loss(Var y_hat, std::span<const Var> y_aug, bool include_reverse_ce) {
  if (y_aug.empty()) throw Error("label_loss: no augmented predictions");
  detail::require_probability_rows(y_hat.value(), "label_loss");
  Var h_y = mean_entropy(y_hat);
  Var acc;
  for (const Var& ya : y_aug) {
    detail::require_same_shape(y_hat, ya, "label_loss");
    detail::require_probability_rows(ya.value(), "label_loss");
    Var term = add(add(h_y, mean_entropy(ya)), mean_cross_entropy(y_hat, ya));
    if (include_reverse_ce) term = add(term, mean_cross_entropy(ya, y_hat));
    acc = acc.valid() ? add(acc, term) : term;
  }
  return scale(acc, 1.0 / static_cast<double>(y_aug.size()));
}

/// Plain version; `y_aug` is M x B x K.
inline double label_loss(const Tensor& y_hat, const Tensor& y_aug, bool include_reverse_ce) {
  y_hat.require_rank(2);
  y_aug.require_rank(3);
  const std::size_t m = y_aug.dim(0), b = y_aug.dim(1), k = y_aug.dim(2);
  if (b != y_hat.rows() || k != y_hat.cols()) throw ShapeError("label_loss: shape mismatch");
  Tape tape;
  std::vector<Var> aug;
  for (std::size_t j = 0; j < m; ++j)
    aug.push_back(tape.constant(Tensor(Shape{b, k}, std::vector<double>(
        y_aug.data().begin() + static_cast<std::ptrdiff_t>(j * b * k),
        y_aug.data().begin() + static_cast<std::ptrdiff_t>((j + 1) * b * k)))));
  return label_loss(tape.constant(y_hat), aug, include_reverse_ce).value().item();
}

/// M augmented copies of a batch; every sample draws its own M transforms.
inline std::vector<Tensor> augment_batch(const Tensor& x, const InputShape& shape,
                                         const Catalog& catalog, int m, Rng& rng) {
  std::vector<Tensor> out(static_cast<std::size_t>(m), Tensor(x.shape()));
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto specs = sample_transforms(catalog, m, rng);
    for (std::size_t j = 0; j < specs.size(); ++j) {
      const auto row = apply(specs[j], x.row(i), shape);
      std::copy(row.begin(), row.end(), out[j].row(i).begin());
    }
  }
  return out;
}

struct Objective {
  Var total;
  StepMetrics metrics;
  KernelWidths widths;
  Var probs;
};

/// Builds the adaptation objective on `tape` from a batch and its augmented
/// copies. Each replica gets its own forward pass, so every batch-norm call
/// sees B rows. Passing `widths` holds the kernel widths fixed.
inline Objective tirnu_objective(Model& model, Tape& tape, const Tensor& x,
                                 std::span<const Tensor> x_aug, const AdaptConfig& cfg,
                                 std::optional<KernelWidths> widths = std::nullopt) {
  if (x_aug.empty()) throw Error("tirnu_objective: no augmented copies");
  const Model::Output out = model.forward(tape, x, BnMode::batch);
  std::vector<Var> z_aug, p_aug;
  for (const Tensor& xa : x_aug) {
    const Model::Output o = model.forward(tape, xa, BnMode::batch);
    z_aug.push_back(o.z);
    p_aug.push_back(o.probs);
  }
  Var n = nuisance_vectors(out.z, z_aug);
  MutualInformation mi = mutual_information(out.z, n, cfg.entropy(), widths);
  Var l_label = label_loss(out.probs, p_aug, cfg.include_reverse_ce);
  Var h_pred = mean_entropy(out.probs);

  Objective obj;
  obj.widths = {mi.sigma2_z, mi.sigma2_n};
  obj.probs = out.probs;
  switch (cfg.ablation) {
    case Ablation::full:
      obj.total = weighted_sum({{cfg.w_nu, mi.value}, {cfg.w_label, l_label}});
      break;
    case Ablation::label_only:
      obj.total = scale(l_label, cfg.w_label);
      break;
    case Ablation::nu_only:
      obj.total = scale(mi.value, cfg.w_nu);
      break;
    case Ablation::nu_plus_h:
      obj.total = weighted_sum({{cfg.w_nu, mi.value}, {cfg.w_label, h_pred}});
      break;
  }
  obj.metrics = {mi.value.value().item(), l_label.value().item(), h_pred.value().item(),
                 obj.total.value().item()};
  return obj;
}

namespace detail {

inline NumericError at_batch(const NumericError& e, std::size_t batch_index) {
  return NumericError(std::string(e.what()) + " (batch " + std::to_string(batch_index) + ")");
}

}  // namespace detail

/// One adaptation step: draw M transforms per sample, forward originals and
/// copies, and take an SGD step on g only. The classifier is never touched.
inline StepResult tirnu_step(Model& model, const Tensor& x, const InputShape& shape,
                             const Catalog& catalog, const AdaptConfig& cfg, Sgd& opt, Rng& rng,
                             std::size_t batch_index = 0) {
  if (x.rows() < cfg.min_batch())
    throw ShapeError("tirnu_step: batch of " + std::to_string(x.rows()) + " rows is below " +
                     std::to_string(cfg.min_batch()));
  const std::vector<Tensor> x_aug = augment_batch(x, shape, catalog, cfg.m, rng);
  model.set_trainable(Model::in_feature_extractor);
  Tape tape;
  StepResult result;
  try {
    Objective obj = tirnu_objective(model, tape, x, x_aug, cfg);
    result.metrics = obj.metrics;
    result.probs = obj.probs.value();
    backward_and_step(model, tape, obj.total, opt);
  } catch (const NumericError& e) {
    model.freeze();
    throw detail::at_batch(e, batch_index);
  }
  model.freeze();
  return result;
}

/// Tent: minimize mean prediction entropy through the batch-norm affine
/// parameters only.
inline StepResult tent_step(Model& model, const Tensor& x, Sgd& opt, std::size_t batch_index = 0) {
  model.set_trainable([](ParamGroup g) { return g == ParamGroup::bn_affine; });
  Tape tape;
  StepResult result;
  try {
    const Model::Output out = model.forward(tape, x, BnMode::batch);
    Var h = mean_entropy(out.probs);
    result.metrics.h_pred = result.metrics.total = h.value().item();
    result.probs = out.probs.value();
    backward_and_step(model, tape, h, opt);
  } catch (const NumericError& e) {
    model.freeze();
    throw detail::at_batch(e, batch_index);
  }
  model.freeze();
  return result;
}

/// Test-BN: forward with the batch's own statistics; no update.
inline Tensor test_bn(const Model& model, const Tensor& batch) {
  return model.predict_proba(batch, BnMode::batch);
}

inline std::vector<int> argmax_rows(const Tensor& p) {
  std::vector<int> out(p.rows());
  for (std::size_t i = 0; i < p.rows(); ++i) {
    const auto r = p.row(i);
    out[i] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return out;
}

/// Percentage of mismatches, rounded to two decimals.
inline double error_percent(std::span<const int> predicted, std::span<const int> labels) {
  if (predicted.size() != labels.size()) throw ShapeError("error_percent: length mismatch");
  if (labels.empty()) throw Error("error_percent: empty set");
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) wrong += predicted[i] != labels[i];
  return std::round(1e4 * static_cast<double>(wrong) / static_cast<double>(labels.size())) / 100.0;
}

/// Argmax predictions in dataset order. With batch statistics the set is cut
/// into consecutive batches (a short tail is merged into the last one).
inline std::vector<int> predict(const Model& model, const Dataset& data, bool use_batch_stats,
                                std::size_t batch_size = 64) {
  if (data.size() == 0) throw Error("predict: empty dataset");
  if (!use_batch_stats) return argmax_rows(model.predict_proba(data.x, BnMode::running));
  std::vector<int> out;
  out.reserve(data.size());
  const auto order = iota_indices(data.size());
  for (const auto& b : make_batches(order, batch_size, 2)) {
    const auto pred = argmax_rows(test_bn(model, data.rows(b)));
    out.insert(out.end(), pred.begin(), pred.end());
  }
  return out;
}

inline double evaluate(const Model& model, const Dataset& data, bool use_batch_stats,
                       std::size_t batch_size = 64) {
  const auto pred = predict(model, data, use_batch_stats, batch_size);
  return error_percent(pred, data.labels);
}

/// One row of adaptation progress: an epoch (offline) or a batch (online).
struct StepRecord {
  std::size_t step = 0;
  StepMetrics metrics;
  double error_pct = 0.0;
};

struct AdaptResult {
  std::vector<StepRecord> records;
  std::vector<int> predictions;  // online only: predictions at batch arrival
  double error_pct = 0.0;        // final (offline) or cumulative (online) error
};

namespace detail {

template <class Step>
AdaptResult run_offline(Model& model, const Dataset& test, const AdaptConfig& cfg, Step step) {
  if (test.size() == 0) throw Error("adapt: empty test set");
  Rng rng(cfg.seed);
  Sgd opt(cfg.lr, cfg.momentum);
  AdaptResult result;
  std::size_t batch_index = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto order = iota_indices(test.size());
    rng.shuffle(order);
    StepMetrics sum;
    const auto batches = make_batches(order, cfg.batch_size, cfg.min_batch());
    for (const auto& b : batches) {
      const StepMetrics m = step(test.rows(b), opt, rng, batch_index++).metrics;
      sum.l_nu += m.l_nu;
      sum.l_label += m.l_label;
      sum.h_pred += m.h_pred;
      sum.total += m.total;
    }
    const double n = static_cast<double>(batches.size());
    StepRecord rec{static_cast<std::size_t>(epoch + 1),
                   {sum.l_nu / n, sum.l_label / n, sum.h_pred / n, sum.total / n},
                   evaluate(model, test, true, cfg.batch_size)};
    result.records.push_back(rec);
  }
  result.error_pct = evaluate(model, test, true, cfg.batch_size);
  return result;
}

template <class Step>
AdaptResult run_online(const Dataset& stream, const AdaptConfig& cfg, Step step) {
  if (stream.size() == 0) throw Error("adapt: empty test stream");
  Rng rng(cfg.seed);
  Sgd opt(cfg.lr, cfg.momentum);
  AdaptResult result;
  const auto order = iota_indices(stream.size());
  std::size_t wrong = 0, seen = 0, batch_index = 0;
  for (const auto& b : make_batches(order, cfg.batch_size, cfg.min_batch())) {
    const StepResult r = step(stream.rows(b), opt, rng, batch_index);
    const auto pred = argmax_rows(r.probs);
    for (std::size_t i = 0; i < b.size(); ++i) wrong += pred[i] != stream.labels[b[i]];
    seen += b.size();
    result.predictions.insert(result.predictions.end(), pred.begin(), pred.end());
    result.records.push_back(
        {++batch_index, r.metrics,
         std::round(1e4 * static_cast<double>(wrong) / static_cast<double>(seen)) / 100.0});
  }
  result.error_pct = error_percent(result.predictions, stream.labels);
  return result;
}

}  // namespace detail

/// Offline: `epochs` passes over the shuffled test set. Returns per-epoch
/// records; the model is adapted in place.
inline AdaptResult adapt_offline(Model& model, const Dataset& test, const Catalog& catalog,
                                 const AdaptConfig& cfg) {
  cfg.validate();
  return detail::run_offline(model, test, cfg, [&](const Tensor& x, Sgd& opt, Rng& rng, std::size_t i) {
    return tirnu_step(model, x, test.shape, catalog, cfg, opt, rng, i);
  });
}

/// Online: one pass in stream order. The prediction for each batch comes from
/// the forward pass made on arrival, before that batch's update.
inline AdaptResult adapt_online(Model& model, const Dataset& stream, const Catalog& catalog,
                                const AdaptConfig& cfg) {
  cfg.validate();
  return detail::run_online(stream, cfg, [&](const Tensor& x, Sgd& opt, Rng& rng, std::size_t i) {
    return tirnu_step(model, x, stream.shape, catalog, cfg, opt, rng, i);
  });
}

inline AdaptResult tent_offline(Model& model, const Dataset& test, const AdaptConfig& cfg) {
  cfg.validate();
  return detail::run_offline(model, test, cfg, [&](const Tensor& x, Sgd& opt, Rng&, std::size_t i) {
    return tent_step(model, x, opt, i);
  });
}

inline AdaptResult tent_online(Model& model, const Dataset& stream, const AdaptConfig& cfg) {
  cfg.validate();
  return detail::run_online(stream, cfg, [&](const Tensor& x, Sgd& opt, Rng&, std::size_t i) {
    return tent_step(model, x, opt, i);
  });
}

/// Runs one method on a copy of `source` and reports its error on `test`.
/// Source uses the stored statistics; every other method uses batch
/// statistics.
/// Runs `method` on `model` in place; Source and Test-BN leave it untouched.
inline AdaptResult run_method_in_place(Method method, Model& model, const Dataset& test,
                                       const Catalog& catalog, const AdaptConfig& cfg) {
  switch (method) {
    case Method::source:
    case Method::test_bn: {
      AdaptResult r;
      const bool batch = method == Method::test_bn;
      if (cfg.mode == AdaptMode::online) {
        // No updates, so predictions at arrival are the final predictions.
        const auto order = iota_indices(test.size());
        std::size_t wrong = 0, seen = 0, step = 0;
        for (const auto& b : make_batches(order, cfg.batch_size, cfg.min_batch())) {
          const Tensor x = test.rows(b);
          const auto pred = argmax_rows(model.predict_proba(x, batch ? BnMode::batch : BnMode::running));
          for (std::size_t i = 0; i < b.size(); ++i) wrong += pred[i] != test.labels[b[i]];
          seen += b.size();
          r.predictions.insert(r.predictions.end(), pred.begin(), pred.end());
          r.records.push_back({++step, {},
                               std::round(1e4 * static_cast<double>(wrong) / static_cast<double>(seen)) / 100.0});
        }
        r.error_pct = error_percent(r.predictions, test.labels);
      } else {
        r.error_pct = evaluate(model, test, batch, cfg.batch_size);
        r.records.push_back({0, {}, r.error_pct});
      }
      return r;
    }
    case Method::tent:
      return cfg.mode == AdaptMode::online ? tent_online(model, test, cfg) : tent_offline(model, test, cfg);
    case Method::tirnu:
      return cfg.mode == AdaptMode::online ? adapt_online(model, test, catalog, cfg)
                                           : adapt_offline(model, test, catalog, cfg);
  }
  throw Error("run_method: unknown method");
}

inline AdaptResult run_method(Method method, const Model& source, const Dataset& test,
                              const Catalog& catalog, const AdaptConfig& cfg) {
  Model model = source;
  return run_method_in_place(method, model, test, catalog, cfg);
}

struct PretrainConfig {
  ModelConfig model;  // input_dim and num_classes are taken from the data
  int epochs = 20;
  double lr = 0.05;
  double momentum = 0.9;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  double max_error_pct = 20.0;
};

/// Cross-entropy SGD on labeled source data, then population batch-norm
/// statistics. Throws if training error stays above `max_error_pct`.
inline Model pretrain_source(const Dataset& train, const PretrainConfig& cfg) {
  train.validate();
  if (train.size() < 2) throw Error("pretrain: need at least 2 samples");
  if (cfg.epochs < 0) throw Error("pretrain: epochs must be >= 0");
  ModelConfig mc = cfg.model;
  mc.input_dim = train.shape.size();
  mc.num_classes = static_cast<std::size_t>(train.num_classes);
  Rng rng(cfg.seed);
  Model model(mc, rng);
  Sgd opt(cfg.lr, cfg.momentum);
  std::size_t batch_index = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto order = iota_indices(train.size());
    rng.shuffle(order);
    for (const auto& b : make_batches(order, cfg.batch_size, 2)) {
      model.set_trainable([](ParamGroup) { return true; });
      Tape tape;
      try {
        const auto labels = train.labels_of(b);
        Var loss = softmax_cross_entropy(model.forward(tape, train.rows(b), BnMode::batch).logits, labels);
        backward_and_step(model, tape, loss, opt);
      } catch (const NumericError& e) {
        throw detail::at_batch(e, batch_index);
      }
      ++batch_index;
    }
  }
  model.freeze();
  model.record_running_stats(train.x);
  if (cfg.epochs > 0) {
    const double err = evaluate(model, train, false);
    if (err > cfg.max_error_pct)
      throw Error("pretrain: training error " + std::to_string(err) + "% exceeds " +
                  std::to_string(cfg.max_error_pct) + "%");
  }
  return model;
}

}  // namespace tirnu
