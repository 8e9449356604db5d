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

#include <map>
#include <random>
#include <string>

#include "skinseg/tensor.hpp"

namespace skinseg {

/// Named model parameters with stable addresses, iterated in name order.
class ParameterStore {
 public:
  Tensor& add(const std::string& name, Tensor value) {
    auto [it, inserted] = tensors_.emplace(name, std::move(value));
    if (!inserted) throw ArgumentError("duplicate parameter '" + name + "'");
    it->second.set_requires_grad(true);
    return it->second;
  }

  Tensor& get(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ArgumentError("unknown parameter '" + name + "'");
    return it->second;
  }
  const Tensor& get(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ArgumentError("unknown parameter '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  std::vector<Tensor*> with_prefix(const std::string& prefix) {
    std::vector<Tensor*> out;
    for (auto& [name, t] : tensors_) {
      if (name.starts_with(prefix)) out.push_back(&t);
    }
    return out;
  }

  std::vector<std::string> names(const std::string& prefix = "") const {
    std::vector<std::string> out;
    for (const auto& [name, t] : tensors_) {
      if (name.starts_with(prefix)) out.push_back(name);
    }
    return out;
  }

  // Only parameters with requires_grad receive gradients on a tape.
  void set_trainable(const std::string& prefix, bool on) {
    for (auto& [name, t] : tensors_) {
      if (name.starts_with(prefix)) t.set_requires_grad(on);
    }
  }

  void clear_grads() {
    for (auto& [name, t] : tensors_) t.clear_grad();
  }

  std::size_t count() const { return tensors_.size(); }
  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& [name, t] : tensors_) n += t.size();
    return n;
  }

  std::map<std::string, Tensor>& all() { return tensors_; }
  const std::map<std::string, Tensor>& all() const { return tensors_; }

  // Value equality over names, shapes and bits.
  friend bool operator==(const ParameterStore& a, const ParameterStore& b) {
    if (a.tensors_.size() != b.tensors_.size()) return false;
    for (auto ia = a.tensors_.begin(), ib = b.tensors_.begin(); ia != a.tensors_.end(); ++ia, ++ib) {
      if (ia->first != ib->first || !(ia->second == ib->second)) return false;
    }
    return true;
  }

 private:
  std::map<std::string, Tensor> tensors_;
};

/// Uniform in [-a, a], a = sqrt(6 / (fan_in + fan_out)).
inline Tensor glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const Real a = std::sqrt(Real(6) / Real(fan_in + fan_out));
  std::uniform_real_distribution<Real> dist(-a, a);
  Tensor t(std::move(shape));
  for (Real& v : t.values()) v = dist(rng);
  return t;
}

inline Tensor conv_kernel_init(std::size_t kh, std::size_t kw, std::size_t cin, std::size_t cout,
                               std::mt19937_64& rng) {
  return glorot_uniform({kh, kw, cin, cout}, kh * kw * cin, kh * kw * cout, rng);
}

}  // namespace skinseg
