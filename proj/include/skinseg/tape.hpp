// Copyright (c) 2026 The SkinSeg Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <deque>
#include <memory>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "skinseg/tensor.hpp"

namespace skinseg {

/// A differentiable operation. Implementations may keep intermediates from
/// the most recent forward() for use in backward().
class Op {
 public:
  virtual ~Op() = default;
  virtual std::string_view name() const = 0;
  virtual bool differentiable() const { return true; }
  virtual Tensor forward(std::span<const Tensor* const> inputs) = 0;
  /// Accumulates (+=) input gradients. Entries of `input_grads` are null for
  /// inputs that do not need a gradient.
  virtual void backward(std::span<const Tensor* const> inputs, const Tensor& output,
                        std::span<const Real> output_grad,
                        std::span<Buffer* const> input_grads) = 0;
};

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
};

/// The computation record: leaves plus an append-only list of applied
/// operations in topological order.
class Tape {
 public:
  struct Entry {
    std::unique_ptr<Op> op;
    std::vector<std::size_t> inputs;
    std::size_t output;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) { return add_node(std::move(value), false, nullptr); }

  Var leaf(Tensor value, bool requires_grad = true) {
    return add_node(std::move(value), requires_grad, nullptr);
  }

  // Records a model parameter. Its value is copied; backward() accumulates
  // into `p.mutable_grad()` when `p.requires_grad()` is set. Recording the
  // same tensor twice returns the same node.
  Var param(Tensor& p) {
    if (auto it = bound_.find(&p); it != bound_.end()) return Var{this, it->second};
    Var v = add_node(p, p.requires_grad(), p.requires_grad() ? &p : nullptr);
    bound_.emplace(&p, v.id);
    return v;
  }

  // Gradient-free copy of a recorded value.
  Var detach(Var v) { return constant(value(v)); }

  Var apply(std::unique_ptr<Op> op, std::vector<Var> inputs) {
    std::vector<const Tensor*> in;
    std::vector<std::size_t> ids;
    in.reserve(inputs.size());
    bool needs_grad = false;
    for (const Var& v : inputs) {
      if (v.tape != this) throw std::logic_error("variable belongs to a different tape");
      in.push_back(&nodes_[v.id].value);
      ids.push_back(v.id);
      needs_grad = needs_grad || nodes_[v.id].requires_grad;
    }
    Tensor out = op->forward(in);
    Var result = add_node(std::move(out), needs_grad, nullptr);
    nodes_[result.id].producer = static_cast<long>(entries_.size());
    entries_.push_back(Entry{std::move(op), std::move(ids), result.id});
    return result;
  }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  // Gradient of the last backward() target with respect to `v`; zeros when
  // `v` was not on a path to it.
  Buffer grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.empty()) return Buffer(n.value.size(), Real(0));
    return n.grad;
  }

  void backward(Var loss) {
    if (loss.tape != this) throw std::logic_error("loss belongs to a different tape");
    if (value(loss).size() != 1) {
      throw ArgumentError("backward() needs a scalar loss, got shape " +
                          shape_str(value(loss).shape()));
    }
    for (Node& n : nodes_) n.grad.clear();
    Node& root = nodes_[loss.id];
    if (root.requires_grad) root.grad.assign(1, Real(1));

    std::vector<const Tensor*> in;
    std::vector<Buffer*> gin;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      Node& out = nodes_[it->output];
      if (!out.requires_grad || out.grad.empty()) continue;
      if (!it->op->differentiable()) {
        throw UnsupportedError(std::string("no derivative registered for op '") +
                               std::string(it->op->name()) + "'");
      }
      in.clear();
      gin.clear();
      for (std::size_t id : it->inputs) {
        Node& src = nodes_[id];
        in.push_back(&src.value);
        if (src.requires_grad) {
          if (src.grad.empty()) src.grad.assign(src.value.size(), Real(0));
          gin.push_back(&src.grad);
        } else {
          gin.push_back(nullptr);
        }
      }
      it->op->backward(in, out.value, out.grad, gin);
    }

    for (Node& n : nodes_) {
      if (n.bound == nullptr) continue;
      Buffer& dst = n.bound->mutable_grad();
      if (n.grad.empty()) continue;
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.grad[i];
    }
  }

  // Re-executes every entry from the current leaf values, overwriting the
  // recorded outputs.
  void replay() {
    std::vector<const Tensor*> in;
    for (Entry& e : entries_) {
      in.clear();
      for (std::size_t id : e.inputs) in.push_back(&nodes_[id].value);
      nodes_[e.output].value = e.op->forward(in);
    }
  }

  std::size_t node_count() const { return nodes_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  bool is_leaf(Var v) const { return nodes_.at(v.id).producer < 0; }

 private:
  struct Node {
    Tensor value;
    Buffer grad;
    bool requires_grad = false;
    Tensor* bound = nullptr;
    long producer = -1;
  };

  Var add_node(Tensor value, bool requires_grad, Tensor* bound) {
    Node n;
    n.value = std::move(value);
    n.value.clear_grad();
    n.requires_grad = requires_grad;
    n.bound = bound;
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  std::deque<Node> nodes_;
  std::vector<Entry> entries_;
  std::unordered_map<const Tensor*, std::size_t> bound_;
};

inline const Tensor& Var::value() const { return tape->value(*this); }
inline bool Var::requires_grad() const { return tape->requires_grad(*this); }

}  // namespace skinseg
