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

#include <cstdint>

#include "skinseg/tensor.hpp"

namespace skinseg {

inline constexpr Real kDefaultLearningRate = Real(0.001);

struct AdamState {
  std::vector<Buffer> first_moment;
  std::vector<Buffer> second_moment;
  std::uint64_t step = 0;
  Real beta1 = Real(0.9);
  Real beta2 = Real(0.999);
  Real epsilon = Real(1e-8);

  AdamState() = default;

  explicit AdamState(std::span<Tensor* const> params) {
    for (const Tensor* p : params) {
      first_moment.emplace_back(p->size(), Real(0));
      second_moment.emplace_back(p->size(), Real(0));
    }
  }
};

/// One bias-corrected Adam update. Gradients are read from each parameter's
/// grad slot; a parameter without one (not reached by the loss) is left
/// untouched, moments included.
inline void adam_step(std::span<Tensor* const> params, AdamState& state, Real lr = kDefaultLearningRate) {
  if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size()) {
    throw ShapeError("adam_step: state tracks " + std::to_string(state.first_moment.size()) +
                     " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.first_moment[i].size() != params[i]->size() ||
        state.second_moment[i].size() != params[i]->size() ||
        (params[i]->has_grad() && params[i]->grad().size() != params[i]->size())) {
      throw ShapeError("adam_step: parameter " + std::to_string(i) + " shape disagrees with state");
    }
  }
  state.step += 1;
  const Real t = Real(state.step);
  const Real bc1 = Real(1) - std::pow(state.beta1, t);
  const Real bc2 = Real(1) - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    if (!p.has_grad()) continue;
    std::span<const Real> g = p.grad();
    Buffer& m = state.first_moment[i];
    Buffer& v = state.second_moment[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = state.beta1 * m[j] + (1 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1 - state.beta2) * g[j] * g[j];
      const Real mhat = m[j] / bc1;
      const Real vhat = v[j] / bc2;
      p[j] -= lr * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
}

}  // namespace skinseg
