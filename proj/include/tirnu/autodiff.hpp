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

#pragma once

#include <unordered_map>

#include "tirnu/tensor.hpp"

namespace tirnu {

class Tape;

/// Handle to a node recorded on a Tape. Valid until the tape is cleared.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode gradient tape. Nodes are appended in evaluation order, so
/// the node list is always topologically sorted; the reverse sweep visits
/// each node once and adds into the adjoints of its inputs.
class Tape {
 public:
  /// Called during the reverse sweep with the id of the node being
  /// processed. Implementations read adjoint(self) and add into
  /// accumulator(input) for each input that needs_grad().
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) {
    require_finite(value, "constant");
    nodes_.push_back(Node{std::move(value), {}, {}, nullptr, nullptr, false});
    return Var(this, nodes_.size() - 1);
  }

  /// Registers a trainable parameter. The same parameter always maps to the
  /// same node, so several forward passes share one gradient accumulator.
  /// Parameters without requires_grad become constants.
  Var leaf(Tensor& param) {
    if (!param.requires_grad()) return constant(Tensor(param.shape(), param.values()));
    if (auto it = leaves_.find(&param); it != leaves_.end()) return Var(this, it->second);
    require_finite(param, "parameter");
    nodes_.push_back(Node{Tensor(param.shape(), param.values()), {}, {}, nullptr, &param, true});
    leaves_.emplace(&param, nodes_.size() - 1);
    return Var(this, nodes_.size() - 1);
  }

  /// Appends an operation result. The backward rule is dropped when no
  /// input carries gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward,
             const char* op = "operation") {
    if (!all_finite(value.data())) throw NumericError(std::string("non-finite result of ") + op);
    bool needs = false;
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    for (const Var& in : inputs) {
      if (in.tape_ != this) throw Error(std::string(op) + ": input belongs to another tape");
      ids.push_back(in.id_);
      needs = needs || nodes_[in.id_].needs_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, std::move(ids),
                          needs ? std::move(backward) : Backward{}, nullptr, needs});
    return Var(this, nodes_.size() - 1);
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  std::span<const double> adjoint(std::size_t id) const { return nodes_.at(id).adjoint; }

  std::span<double> accumulator(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.adjoint.empty()) n.adjoint.assign(n.value.size(), 0.0);
    return n.adjoint;
  }

  void clear() {
    nodes_.clear();
    leaves_.clear();
  }

  /// Runs the reverse sweep from a scalar loss and returns d loss / d p for
  /// each requested parameter. Gradients are also added into each
  /// parameter's own accumulator. The tape is cleared afterwards.
  std::vector<Tensor> grad(Var loss, std::span<Tensor* const> params) {
    if (loss.tape_ != this) throw Error("loss belongs to another tape");
    if (!value(loss.id_).is_scalar())
      throw ShapeError("grad requires a scalar loss, got shape " +
                       to_string(value(loss.id_).shape()));
    std::vector<std::size_t> param_ids;
    param_ids.reserve(params.size());
    for (Tensor* p : params) {
      auto it = leaves_.find(p);
      if (it == leaves_.end()) throw Error("parameter is not on the tape");
      param_ids.push_back(it->second);
    }

    for (auto& n : nodes_) n.adjoint.clear();
    if (nodes_[loss.id_].needs_grad) {
      accumulator(loss.id_)[0] = 1.0;
      for (std::size_t i = loss.id_ + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (n.adjoint.empty() || !n.backward) continue;
        n.backward(*this, i);
      }
    }

    std::vector<Tensor> grads;
    grads.reserve(params.size());
    for (std::size_t k = 0; k < params.size(); ++k) {
      const Node& n = nodes_[param_ids[k]];
      Tensor g(n.value.shape(), 0.0);
      if (!n.adjoint.empty()) std::copy(n.adjoint.begin(), n.adjoint.end(), g.data().begin());
      if (!all_finite(g.data())) {
        clear();
        throw NumericError("non-finite gradient");
      }
      auto acc = params[k]->grad();
      for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += g[j];
      grads.push_back(std::move(g));
    }
    clear();
    return grads;
  }

  std::vector<Tensor> grad(Var loss, std::initializer_list<Tensor*> params) {
    return grad(loss, std::span<Tensor* const>(params.begin(), params.size()));
  }

 private:
  friend class Var;

  struct Node {
    Tensor value;
    std::vector<double> adjoint;
    std::vector<std::size_t> inputs;
    Backward backward;
    Tensor* param;
    bool needs_grad;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor*, std::size_t> leaves_;
};

inline const Tensor& Var::value() const {
  if (!tape_) throw Error("use of an unbound Var");
  return tape_->value(id_);
}

inline bool Var::requires_grad() const { return tape_ && tape_->needs_grad(id_); }

inline std::vector<Tensor> grad(Var loss, std::span<Tensor* const> params) {
  if (!loss.tape()) throw Error("grad of an unbound Var");
  return loss.tape()->grad(loss, params);
}

inline std::vector<Tensor> grad(Var loss, std::initializer_list<Tensor*> params) {
  return grad(loss, std::span<Tensor* const>(params.begin(), params.size()));
}

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b) {
  if (!a.tape() || a.tape() != b.tape()) throw Error("operands live on different tapes");
  return *a.tape();
}

inline void add_into(Tape& tape, std::size_t id, std::span<const double> g) {
  if (!tape.needs_grad(id)) return;
  auto acc = tape.accumulator(id);
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
}

}  // namespace detail

}  // namespace tirnu
