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

// The classifier f = h(g(x)): an MLP feature extractor g with two batch-norm
// layers and a linear head h, plus checkpoint serialization and SGD.

#pragma once

#include <map>

#include <nlohmann/json.hpp>

#include "tirnu/binary.hpp"
#include "tirnu/ops.hpp"
#include "tirnu/random.hpp"

namespace tirnu {

struct ModelConfig {
  std::size_t input_dim = 16;
  std::size_t hidden = 64;
  std::size_t feature_dim = 32;
  std::size_t num_classes = 4;

  bool operator==(const ModelConfig&) const = default;
};

/// Which statistics the batch-norm layers normalize with.
enum class BnMode { batch, running };

enum class ParamGroup { feature_extractor, bn_affine, classifier };

struct Linear {
  Tensor weight;  // in x out
  Tensor bias;    // out
};

struct BatchNormLayer {
  Tensor gamma;
  Tensor beta;
  std::vector<double> running_mean;
  std::vector<double> running_var;
};

struct NamedParam {
  std::string name;
  Tensor* tensor;
  ParamGroup group;
};

class Model {
 public:
  /// Forward results on a tape: features z, logits and probabilities.
  struct Output {
    Var z;
    Var logits;
    Var probs;
  };

  Model() = default;

  Model(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.input_dim == 0 || cfg.hidden == 0 || cfg.feature_dim == 0 || cfg.num_classes < 2)
      throw Error("model: invalid layer sizes");
    fc1_ = init_linear(cfg.input_dim, cfg.hidden, 2.0, rng);
    bn1_ = init_bn(cfg.hidden);
    fc2_ = init_linear(cfg.hidden, cfg.hidden, 2.0, rng);
    bn2_ = init_bn(cfg.hidden);
    fc3_ = init_linear(cfg.hidden, cfg.feature_dim, 1.0, rng);
    head_ = init_linear(cfg.feature_dim, cfg.num_classes, 1.0, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  bool has_running_stats() const { return has_running_stats_; }

  std::vector<NamedParam> parameters() {
    using G = ParamGroup;
    return {{"g.fc1.weight", &fc1_.weight, G::feature_extractor},
            {"g.fc1.bias", &fc1_.bias, G::feature_extractor},
            {"g.bn1.gamma", &bn1_.gamma, G::bn_affine},
            {"g.bn1.beta", &bn1_.beta, G::bn_affine},
            {"g.fc2.weight", &fc2_.weight, G::feature_extractor},
            {"g.fc2.bias", &fc2_.bias, G::feature_extractor},
            {"g.bn2.gamma", &bn2_.gamma, G::bn_affine},
            {"g.bn2.beta", &bn2_.beta, G::bn_affine},
            {"g.fc3.weight", &fc3_.weight, G::feature_extractor},
            {"g.fc3.bias", &fc3_.bias, G::feature_extractor},
            {"h.fc.weight", &head_.weight, G::classifier},
            {"h.fc.bias", &head_.bias, G::classifier}};
  }

  std::vector<std::pair<std::string, const Tensor*>> parameters() const {
    std::vector<std::pair<std::string, const Tensor*>> out;
    for (const auto& p : const_cast<Model*>(this)->parameters()) out.emplace_back(p.name, p.tensor);
    return out;
  }

  /// g's parameters include its batch-norm affine parameters.
  static bool in_feature_extractor(ParamGroup g) { return g != ParamGroup::classifier; }

  /// Marks exactly the parameters accepted by `pred` as trainable.
  template <class Pred>
  void set_trainable(Pred pred) {
    for (auto& p : parameters()) p.tensor->set_requires_grad(pred(p.group));
  }

  void freeze() {
    set_trainable([](ParamGroup) { return false; });
  }

  Output forward(Tape& tape, const Tensor& x, BnMode mode) {
    if (x.rank() != 2 || x.cols() != cfg_.input_dim)
      throw ShapeError("model: expected B x " + std::to_string(cfg_.input_dim) + " input, got " +
                       to_string(x.shape()));
    if (mode == BnMode::running && !has_running_stats_)
      throw Error("model has no running batch-norm statistics");
    Var h = tape.constant(x);
    h = relu(norm(tape, bn1_, dense(tape, fc1_, h), mode));
    h = relu(norm(tape, bn2_, dense(tape, fc2_, h), mode));
    Var z = dense(tape, fc3_, h);
    Var logits = dense(tape, head_, z);
    return {z, logits, softmax(logits)};
  }

  Tensor predict_proba(const Tensor& x, BnMode mode) const {
    Model copy = *this;
    copy.freeze();
    Tape tape;
    return copy.forward(tape, x, mode).probs.value();
  }

  Tensor features(const Tensor& x, BnMode mode) const {
    Model copy = *this;
    copy.freeze();
    Tape tape;
    return copy.forward(tape, x, mode).z.value();
  }

  /// Stores exact population statistics of `x` at each batch-norm layer,
  /// propagating the data layer by layer with the stored statistics.
  void record_running_stats(const Tensor& x) {
    Model copy = *this;
    copy.freeze();
    Tape tape;
    Var h = tape.constant(x);
    Var a1 = copy.dense(tape, copy.fc1_, h);
    ColumnMoments m1 = column_moments(a1.value());
    bn1_.running_mean = m1.mean;
    bn1_.running_var = m1.var;
    copy.bn1_.running_mean = m1.mean;
    copy.bn1_.running_var = m1.var;
    h = relu(batch_norm_fixed(a1, tape.leaf(copy.bn1_.gamma), tape.leaf(copy.bn1_.beta), m1.mean, m1.var));
    Var a2 = copy.dense(tape, copy.fc2_, h);
    ColumnMoments m2 = column_moments(a2.value());
    bn2_.running_mean = m2.mean;
    bn2_.running_var = m2.var;
    has_running_stats_ = true;
  }

  // Checkpoint: u64 LE header length, JSON header mapping each tensor name to
  // {dtype, shape, data_offsets}, then the raw LE f64 payload.
  std::string to_bytes() const {
    nlohmann::ordered_json header;
    std::string payload;
    auto add = [&](const std::string& name, const Shape& shape, std::span<const double> data) {
      const std::uint64_t begin = payload.size();
      for (double v : data) put_f64(payload, v);
      header[name] = {{"dtype", "F64"}, {"shape", shape}, {"data_offsets", {begin, payload.size()}}};
    };
    for (const auto& [name, t] : parameters()) add(name, t->shape(), t->data());
    if (has_running_stats_) {
      for (const auto& [name, bn] : {std::pair{"g.bn1", &bn1_}, std::pair{"g.bn2", &bn2_}}) {
        add(std::string(name) + ".running_mean", Shape{bn->running_mean.size()}, bn->running_mean);
        add(std::string(name) + ".running_var", Shape{bn->running_var.size()}, bn->running_var);
      }
    }
    header["__metadata__"] = {{"format", "tirnu-checkpoint"},
                              {"input_dim", std::to_string(cfg_.input_dim)},
                              {"hidden", std::to_string(cfg_.hidden)},
                              {"feature_dim", std::to_string(cfg_.feature_dim)},
                              {"num_classes", std::to_string(cfg_.num_classes)}};
    const std::string json = header.dump();
    std::string out;
    put_u64(out, json.size());
    out += json;
    out += payload;
    return out;
  }

  static Model from_bytes(std::string_view bytes) {
    ByteReader reader(bytes);
    const std::uint64_t len = reader.u64();
    if (len > reader.remaining()) throw IoError("checkpoint: header length exceeds file size");
    nlohmann::json header;
    try {
      header = nlohmann::json::parse(reader.take(len));
    } catch (const nlohmann::json::exception& e) {
      throw IoError(std::string("checkpoint: bad header: ") + e.what());
    }
    const std::string_view payload = bytes.substr(reader.position());
    auto meta_size = [&](const char* key) -> std::size_t {
      try {
        return std::stoul(header.at("__metadata__").at(key).get<std::string>());
      } catch (const std::exception&) {
        throw IoError(std::string("checkpoint: missing metadata ") + key);
      }
    };
    ModelConfig cfg{meta_size("input_dim"), meta_size("hidden"), meta_size("feature_dim"),
                    meta_size("num_classes")};
    Rng unused(0);
    Model m(cfg, unused);
    auto load = [&](const std::string& name, const Shape& expect) {
      if (!header.contains(name)) throw IoError("checkpoint: missing tensor " + name);
      const auto& e = header[name];
      if (e.value("dtype", "") != "F64") throw IoError("checkpoint: " + name + " is not F64");
      if (e.at("shape").get<Shape>() != expect) throw IoError("checkpoint: shape mismatch for " + name);
      const auto off = e.at("data_offsets").get<std::vector<std::uint64_t>>();
      if (off.size() != 2 || off[0] > off[1] || off[1] > payload.size() ||
          off[1] - off[0] != 8 * element_count(expect))
        throw IoError("checkpoint: bad offsets for " + name);
      ByteReader r(payload.substr(off[0], off[1] - off[0]));
      std::vector<double> v(element_count(expect));
      for (double& x : v) x = r.f64();
      return v;
    };
    for (auto& p : m.parameters()) {
      auto v = load(p.name, p.tensor->shape());
      std::copy(v.begin(), v.end(), p.tensor->data().begin());
      require_finite(*p.tensor, "checkpoint tensor " + p.name);
    }
    if (header.contains("g.bn1.running_mean")) {
      const Shape s{cfg.hidden};
      m.bn1_.running_mean = load("g.bn1.running_mean", s);
      m.bn1_.running_var = load("g.bn1.running_var", s);
      m.bn2_.running_mean = load("g.bn2.running_mean", s);
      m.bn2_.running_var = load("g.bn2.running_var", s);
      m.has_running_stats_ = true;
    }
    return m;
  }

  void save(const std::filesystem::path& path) const { write_file(path, to_bytes()); }
  static Model load(const std::filesystem::path& path) { return from_bytes(read_file(path)); }

 private:
  static Linear init_linear(std::size_t in, std::size_t out, double gain, Rng& rng) {
    return {rng.normal_tensor(Shape{in, out}, std::sqrt(gain / static_cast<double>(in))),
            Tensor(Shape{out}, 0.0)};
  }

  static BatchNormLayer init_bn(std::size_t d) {
    return {Tensor(Shape{d}, 1.0), Tensor(Shape{d}, 0.0), {}, {}};
  }

  static Var dense(Tape& tape, Linear& l, Var x) {
    return add_bias(matmul(x, tape.leaf(l.weight)), tape.leaf(l.bias));
  }

  static Var norm(Tape& tape, BatchNormLayer& bn, Var x, BnMode mode) {
    Var g = tape.leaf(bn.gamma), b = tape.leaf(bn.beta);
    if (mode == BnMode::batch) return batch_norm(x, g, b);
    return batch_norm_fixed(x, g, b, bn.running_mean, bn.running_var);
  }

  ModelConfig cfg_;
  Linear fc1_, fc2_, fc3_, head_;
  BatchNormLayer bn1_, bn2_;
  bool has_running_stats_ = false;
};

/// Bitwise equality of every parameter; with `group` set, only that group.
inline bool same_parameters(const Model& a, const Model& b,
                            std::optional<ParamGroup> group = std::nullopt) {
  auto pa = const_cast<Model&>(a).parameters();
  auto pb = const_cast<Model&>(b).parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (group && pa[i].group != *group) continue;
    if (!bitwise_equal(*pa[i].tensor, *pb[i].tensor)) return false;
  }
  return true;
}

/// SGD with momentum: v = mu v + g; p -= lr v. Velocity persists by name.
class Sgd {
 public:
  Sgd(double lr, double momentum) : lr_(lr), momentum_(momentum) {
    if (!(lr >= 0.0) || !(momentum >= 0.0) || momentum >= 1.0)
      throw Error("sgd: need lr >= 0 and 0 <= momentum < 1");
  }

  double lr() const { return lr_; }

  /// Applies the given gradients to the named parameters.
  void step(std::span<const NamedParam> params, std::span<const Tensor> grads) {
    if (params.size() != grads.size()) throw Error("sgd: gradient count mismatch");
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor& p = *params[k].tensor;
      const Tensor& g = grads[k];
      auto& v = velocity_[params[k].name];
      if (v.empty()) v.assign(p.size(), 0.0);
      for (std::size_t i = 0; i < p.size(); ++i) {
        v[i] = momentum_ * v[i] + g[i];
        p[i] -= lr_ * v[i];
      }
    }
  }

 private:
  double lr_;
  double momentum_;
  std::map<std::string, std::vector<double>> velocity_;
};

/// Runs backward from `loss` and takes one SGD step on the trainable
/// parameters of `model`. Does nothing when no parameter is trainable.
inline void backward_and_step(Model& model, Tape& tape, Var loss, Sgd& opt) {
  std::vector<NamedParam> params;
  std::vector<Tensor*> ptrs;
  for (auto& p : model.parameters())
    if (p.tensor->requires_grad()) {
      params.push_back(p);
      ptrs.push_back(p.tensor);
    }
  if (params.empty()) {
    tape.clear();
    return;
  }
  std::vector<Tensor> grads = tape.grad(loss, ptrs);
  for (Tensor* p : ptrs) p->zero_grad();
  opt.step(params, grads);
}

}  // namespace tirnu
