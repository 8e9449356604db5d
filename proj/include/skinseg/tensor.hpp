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

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace skinseg {

#ifdef SKINSEG_USE_FLOAT32
using Real = float;
#else
using Real = double;
#endif

using Shape = std::vector<std::size_t>;
using Buffer = std::vector<Real>;

/// Raised when tensor extents do not agree with what an operation needs.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for out-of-range scalar arguments (strides, thresholds, ...).
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when differentiating through an operation with no derivative.
class UnsupportedError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline void check_shape(const Shape& shape) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
}

// Dense row-major tensor. Spatial data uses height x width x channel layout.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, Real fill = Real(0)) : shape_(std::move(shape)) {
    check_shape(shape_);
    values_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, Buffer values) : shape_(std::move(shape)), values_(std::move(values)) {
    check_shape(shape_);
    if (values_.size() != shape_numel(shape_)) {
      throw ShapeError("value count " + std::to_string(values_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor scalar(Real v) { return Tensor(Shape{1}, Buffer{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  std::span<Real> values() { return values_; }
  std::span<const Real> values() const { return values_; }
  Real* data() { return values_.data(); }
  const Real* data() const { return values_.data(); }
  Buffer& buffer() { return values_; }
  const Buffer& buffer() const { return values_; }

  Real& operator[](std::size_t i) { return values_[i]; }
  Real operator[](std::size_t i) const { return values_[i]; }

  Real& at(std::size_t i, std::size_t j) { return values_[i * shape_[1] + j]; }
  Real at(std::size_t i, std::size_t j) const { return values_[i * shape_[1] + j]; }
  Real& at(std::size_t y, std::size_t x, std::size_t c) {
    return values_[(y * shape_[1] + x) * shape_[2] + c];
  }
  Real at(std::size_t y, std::size_t x, std::size_t c) const {
    return values_[(y * shape_[1] + x) * shape_[2] + c];
  }

  Real item() const {
    if (values_.size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape_));
    return values_[0];
  }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on) { requires_grad_ = on; }

  bool has_grad() const { return grad_.has_value(); }
  std::span<const Real> grad() const {
    if (!grad_) throw std::logic_error("tensor has no gradient");
    return *grad_;
  }
  // Creates a zero-filled gradient buffer on first access.
  Buffer& mutable_grad() {
    if (!grad_) grad_.emplace(values_.size(), Real(0));
    return *grad_;
  }
  void zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), Real(0));
  }
  void clear_grad() { grad_.reset(); }

  Tensor reshaped(Shape shape) const {
    Tensor out(std::move(shape), values_);
    return out;
  }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](Real v) { return std::isfinite(v); });
  }

  // Bitwise value equality (shapes and buffers).
  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.values_ == b.values_;
  }

 private:
  Shape shape_;
  Buffer values_;
  bool requires_grad_ = false;
  std::optional<Buffer> grad_;
};

inline void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) +
                     ", got " + shape_str(t.shape()));
  }
}

}  // namespace skinseg
