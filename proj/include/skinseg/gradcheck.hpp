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

#include <functional>
#include <random>

#include "skinseg/ops.hpp"

namespace skinseg {

struct GradCheckOptions {
  // Initial finite-difference step; refined by up to `refinements` factors
  // of 10 until two successive estimates agree.
  Real step = Real(1e-5);
  std::size_t refinements = 3;
  // Components checked per tensor; 0 checks all of them.
  std::size_t max_components = 0;
  // Drives both the projection of non-scalar outputs and component sampling.
  std::uint64_t seed = 0;
};

namespace detail {

// Projects a non-scalar output onto fixed pseudo-random weights so any op can
// be checked through a scalar.
class Projection {
 public:
  explicit Projection(std::uint64_t seed) : seed_(seed) {}

  Var apply(Var out) {
    if (out.value().size() == 1) return out;
    if (weights_.shape() != out.shape()) {
      std::mt19937_64 rng(seed_ ^ 0x9E3779B97F4A7C15ULL);
      std::uniform_real_distribution<Real> dist(Real(-1), Real(1));
      weights_ = Tensor(out.shape());
      for (Real& w : weights_.values()) w = dist(rng);
    }
    return ops::sum(ops::mul(out, out.tape->constant(weights_)));
  }

 private:
  std::uint64_t seed_;
  Tensor weights_;
};

inline std::vector<std::size_t> pick_components(std::size_t n, std::size_t max, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (max == 0 || max >= n) return idx;
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(max);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Central difference of `eval` at `x` (the value is set through `set`).
/// A step that straddles a relu or max kink gives an estimate that moves when
/// the step shrinks, so the step is cut by 10 until two successive estimates
/// agree; a smooth function settles at the first comparison.
template <typename Set, typename Eval>
Real numeric_derivative(Real x, Set&& set, Eval&& eval, const GradCheckOptions& opt) {
  auto central = [&](Real h) {
    set(x + h);
    const Real up = eval();
    set(x - h);
    const Real down = eval();
    set(x);
    return (up - down) / (2 * h);
  };
  Real h = opt.step;
  Real prev = central(h);
  for (std::size_t r = 0; r < opt.refinements; ++r) {
    h /= 10;
    const Real next = central(h);
    const bool settled = std::abs(next - prev) <= Real(1e-6) * std::max(Real(1), std::abs(next));
    prev = next;
    if (settled) break;
  }
  return prev;
}

inline Real relative_error(Real analytic, Real numeric) {
  return std::abs(analytic - numeric) / std::max(Real(1), std::abs(analytic));
}

}  // namespace detail

using TapeFunction = std::function<Var(Tape&, std::span<const Var>)>;

/// Max over checked components of |analytic - central difference| /
/// max(1, |analytic|), differentiating `fn` with respect to every input.
inline Real grad_check(const TapeFunction& fn, std::vector<Tensor> inputs, const GradCheckOptions& opt = {}) {
  detail::Projection project(opt.seed);
  std::vector<Buffer> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t, true));
    Var loss = project.apply(fn(tape, leaves));
    tape.backward(loss);
    for (const Var& v : leaves) analytic.push_back(tape.grad(v));
  }
  auto evaluate = [&]() {
    Tape tape;
    std::vector<Var> leaves;
    for (const Tensor& t : inputs) leaves.push_back(tape.constant(t));
    return project.apply(fn(tape, leaves)).value().item();
  };
  std::mt19937_64 rng(opt.seed);
  Real worst = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t j : detail::pick_components(inputs[i].size(), opt.max_components, rng)) {
      const Real numeric = detail::numeric_derivative(
          inputs[i][j], [&](Real v) { inputs[i][j] = v; }, evaluate, opt);
      worst = std::max(worst, detail::relative_error(analytic[i][j], numeric));
    }
  }
  return worst;
}

/// Same measure, differentiating with respect to model parameters that `fn`
/// records through Tape::param(). Parameters are restored afterwards.
inline Real grad_check_params(const std::function<Var(Tape&)>& fn, std::span<Tensor* const> params,
                              const GradCheckOptions& opt = {}) {
  detail::Projection project(opt.seed);
  std::vector<bool> was_trainable;
  for (Tensor* p : params) {
    was_trainable.push_back(p->requires_grad());
    p->set_requires_grad(true);
    p->clear_grad();
  }
  {
    Tape tape;
    tape.backward(project.apply(fn(tape)));
  }
  std::vector<Buffer> analytic;
  for (Tensor* p : params) {
    analytic.push_back(p->has_grad() ? Buffer(p->grad().begin(), p->grad().end()) : Buffer(p->size(), 0));
    p->clear_grad();
  }
  auto evaluate = [&]() {
    Tape tape;
    return project.apply(fn(tape)).value().item();
  };
  std::mt19937_64 rng(opt.seed);
  Real worst = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    for (std::size_t j : detail::pick_components(p.size(), opt.max_components, rng)) {
      const Real numeric = detail::numeric_derivative(p[j], [&](Real v) { p[j] = v; }, evaluate, opt);
      worst = std::max(worst, detail::relative_error(analytic[i][j], numeric));
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->set_requires_grad(was_trainable[i]);
  return worst;
}

}  // namespace skinseg
