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

#include <limits>
#include <memory>

#include "skinseg/tape.hpp"

// Differentiable kernels. Spatial tensors are [H, W, C] row-major; convolution
// kernels are [kh, kw, Cin, Cout]. Convolution is cross-correlation.
namespace skinseg::ops {

namespace detail {

inline void add_into(Buffer* dst, std::span<const Real> src) {
  if (dst == nullptr) return;
  for (std::size_t i = 0; i < src.size(); ++i) (*dst)[i] += src[i];
}

// Per-axis linear interpolation taps for align-corners sampling of the
// continuous range [start, end] (in source index units) with `count` samples.
struct AxisTaps {
  std::vector<std::size_t> lo, hi;
  std::vector<Real> frac;

  AxisTaps(std::size_t extent, Real start, Real end, std::size_t count) {
    lo.resize(count);
    hi.resize(count);
    frac.resize(count);
    const Real step = count > 1 ? (end - start) / Real(count - 1) : Real(0);
    const Real last = Real(extent - 1);
    for (std::size_t i = 0; i < count; ++i) {
      Real pos = start + step * Real(i);
      pos = std::clamp(pos, Real(0), last);
      auto i0 = static_cast<std::size_t>(std::floor(pos));
      if (i0 > extent - 1) i0 = extent - 1;
      lo[i] = i0;
      hi[i] = std::min(i0 + 1, extent - 1);
      frac[i] = pos - Real(i0);
    }
  }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t dilation = 1;
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, const Conv2dOptions& o) {
  const long span = static_cast<long>(o.dilation * (k - 1) + 1);
  const long avail = static_cast<long>(in + 2 * o.padding);
  if (avail < span) {
    throw ShapeError("conv2d: padded extent " + std::to_string(avail) +
                     " admits no kernel placement of span " + std::to_string(span));
  }
  return static_cast<std::size_t>((avail - span) / static_cast<long>(o.stride)) + 1;
}

class Conv2dOp final : public Op {
 public:
  explicit Conv2dOp(Conv2dOptions o) : o_(o) {
    if (o_.stride == 0) throw ArgumentError("conv2d: stride must be positive");
    if (o_.dilation == 0) throw ArgumentError("conv2d: dilation must be positive");
  }
  std::string_view name() const override { return "conv2d"; }

  static void check(const Tensor& x, const Tensor& k, const Tensor& b) {
    require_rank(x, 3, "conv2d input");
    require_rank(k, 4, "conv2d kernel");
    if (k.dim(2) != x.dim(2)) {
      throw ShapeError("conv2d: input has " + std::to_string(x.dim(2)) +
                       " channels but kernel expects " + std::to_string(k.dim(2)));
    }
    if (b.size() != k.dim(3)) throw ShapeError("conv2d: bias length must equal Cout");
  }

  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& x = *in[0];
    const Tensor& k = *in[1];
    const Tensor& b = *in[2];
    check(x, k, b);
    const std::size_t H = x.dim(0), W = x.dim(1), C = x.dim(2);
    const std::size_t KH = k.dim(0), KW = k.dim(1), CO = k.dim(3);
    const std::size_t OH = conv_out_extent(H, KH, o_), OW = conv_out_extent(W, KW, o_);
    Tensor out({OH, OW, CO});
    const Real* xd = x.data();
    const Real* kd = k.data();
    Real* od = out.data();
    for (std::size_t oy = 0; oy < OH; ++oy) {
      for (std::size_t ox = 0; ox < OW; ++ox) {
        Real* op = od + (oy * OW + ox) * CO;
        std::copy(b.data(), b.data() + CO, op);
        for (std::size_t ky = 0; ky < KH; ++ky) {
          const long iy = long(oy * o_.stride + ky * o_.dilation) - long(o_.padding);
          if (iy < 0 || iy >= long(H)) continue;
          for (std::size_t kx = 0; kx < KW; ++kx) {
            const long ix = long(ox * o_.stride + kx * o_.dilation) - long(o_.padding);
            if (ix < 0 || ix >= long(W)) continue;
            const Real* ip = xd + (std::size_t(iy) * W + std::size_t(ix)) * C;
            const Real* kb = kd + (ky * KW + kx) * C * CO;
            for (std::size_t ci = 0; ci < C; ++ci) {
              const Real v = ip[ci];
              if (v == Real(0)) continue;
              const Real* kr = kb + ci * CO;
              for (std::size_t co = 0; co < CO; ++co) op[co] += v * kr[co];
            }
          }
        }
      }
    }
    return out;
  }

  void backward(std::span<const Tensor* const> in, const Tensor& out, std::span<const Real> g,
                std::span<Buffer* const> gin) override {
    const Tensor& x = *in[0];
    const Tensor& k = *in[1];
    const std::size_t H = x.dim(0), W = x.dim(1), C = x.dim(2);
    const std::size_t KH = k.dim(0), KW = k.dim(1), CO = k.dim(3);
    const std::size_t OH = out.dim(0), OW = out.dim(1);
    Real* gx = gin[0] ? gin[0]->data() : nullptr;
    Real* gk = gin[1] ? gin[1]->data() : nullptr;
    Real* gb = gin[2] ? gin[2]->data() : nullptr;
    const Real* xd = x.data();
    const Real* kd = k.data();
    for (std::size_t oy = 0; oy < OH; ++oy) {
      for (std::size_t ox = 0; ox < OW; ++ox) {
        const Real* gp = g.data() + (oy * OW + ox) * CO;
        if (gb) {
          for (std::size_t co = 0; co < CO; ++co) gb[co] += gp[co];
        }
        for (std::size_t ky = 0; ky < KH; ++ky) {
          const long iy = long(oy * o_.stride + ky * o_.dilation) - long(o_.padding);
          if (iy < 0 || iy >= long(H)) continue;
          for (std::size_t kx = 0; kx < KW; ++kx) {
            const long ix = long(ox * o_.stride + kx * o_.dilation) - long(o_.padding);
            if (ix < 0 || ix >= long(W)) continue;
            const std::size_t pix = (std::size_t(iy) * W + std::size_t(ix)) * C;
            const std::size_t kofs = (ky * KW + kx) * C * CO;
            for (std::size_t ci = 0; ci < C; ++ci) {
              const Real* kr = kd + kofs + ci * CO;
              if (gx) {
                Real acc = 0;
                for (std::size_t co = 0; co < CO; ++co) acc += kr[co] * gp[co];
                gx[pix + ci] += acc;
              }
              if (gk) {
                const Real v = xd[pix + ci];
                if (v == Real(0)) continue;
                Real* gkr = gk + kofs + ci * CO;
                for (std::size_t co = 0; co < CO; ++co) gkr[co] += v * gp[co];
              }
            }
          }
        }
      }
    }
  }

 private:
  Conv2dOptions o_;
};

inline Var conv2d(Var x, Var kernel, Var bias, Conv2dOptions o = {}) {
  return x.tape->apply(std::make_unique<Conv2dOp>(o), {x, kernel, bias});
}

// ---------------------------------------------------------------------------
// Pooling and resampling

class MaxPool2dOp final : public Op {
 public:
  MaxPool2dOp(std::size_t window, std::size_t stride) : window_(window), stride_(stride) {
    if (window_ == 0 || stride_ == 0) throw ArgumentError("maxpool2d: window and stride must be positive");
  }
  std::string_view name() const override { return "maxpool2d"; }

  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& x = *in[0];
    require_rank(x, 3, "maxpool2d input");
    const std::size_t H = x.dim(0), W = x.dim(1), C = x.dim(2);
    if (H < window_ || W < window_) {
      throw ArgumentError("maxpool2d: window " + std::to_string(window_) +
                          " larger than input " + shape_str(x.shape()));
    }
    const std::size_t OH = (H - window_) / stride_ + 1, OW = (W - window_) / stride_ + 1;
    Tensor out({OH, OW, C});
    argmax_.assign(out.size(), 0);
    for (std::size_t oy = 0; oy < OH; ++oy) {
      for (std::size_t ox = 0; ox < OW; ++ox) {
        for (std::size_t c = 0; c < C; ++c) {
          std::size_t best = ((oy * stride_) * W + ox * stride_) * C + c;
          for (std::size_t wy = 0; wy < window_; ++wy) {
            for (std::size_t wx = 0; wx < window_; ++wx) {
              const std::size_t idx = ((oy * stride_ + wy) * W + ox * stride_ + wx) * C + c;
              if (x[idx] > x[best]) best = idx;
            }
          }
          const std::size_t o = (oy * OW + ox) * C + c;
          out[o] = x[best];
          argmax_[o] = best;
        }
      }
    }
    return out;
  }

  void backward(std::span<const Tensor* const>, const Tensor&, std::span<const Real> g,
                std::span<Buffer* const> gin) override {
    if (!gin[0]) return;
    for (std::size_t o = 0; o < g.size(); ++o) (*gin[0])[argmax_[o]] += g[o];
  }

 private:
  std::size_t window_, stride_;
  std::vector<std::size_t> argmax_;
};

inline Var maxpool2d(Var x, std::size_t window, std::size_t stride) {
  return x.tape->apply(std::make_unique<MaxPool2dOp>(window, stride), {x});
}

/// Region of a feature map to resample, in continuous cell-index
/// coordinates. Samples are spread align-corners style over [y0,y1]x[x0,x1].
struct SampleWindow {
  Real y0, x0, y1, x1;
};

class CropResizeOp final : public Op {
 public:
  // An unset window means the whole input.
  CropResizeOp(std::optional<SampleWindow> window, std::size_t out_h, std::size_t out_w)
      : window_(window), out_h_(out_h), out_w_(out_w) {
    if (out_h_ == 0 || out_w_ == 0) throw ArgumentError("resize: output extents must be positive");
  }
  std::string_view name() const override { return window_ ? "crop_resize" : "bilinear_resize"; }

  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& x = *in[0];
    require_rank(x, 3, "resize input");
    const std::size_t H = x.dim(0), W = x.dim(1), C = x.dim(2);
    const SampleWindow w = window_.value_or(SampleWindow{0, 0, Real(H - 1), Real(W - 1)});
    detail::AxisTaps ty(H, w.y0, w.y1, out_h_), tx(W, w.x0, w.x1, out_w_);
    Tensor out({out_h_, out_w_, C});
    for (std::size_t i = 0; i < out_h_; ++i) {
      const Real fy = ty.frac[i];
      for (std::size_t j = 0; j < out_w_; ++j) {
        const Real fx = tx.frac[j];
        const Real* p00 = x.data() + (ty.lo[i] * W + tx.lo[j]) * C;
        const Real* p01 = x.data() + (ty.lo[i] * W + tx.hi[j]) * C;
        const Real* p10 = x.data() + (ty.hi[i] * W + tx.lo[j]) * C;
        const Real* p11 = x.data() + (ty.hi[i] * W + tx.hi[j]) * C;
        Real* o = out.data() + (i * out_w_ + j) * C;
        for (std::size_t c = 0; c < C; ++c) {
          const Real top = p00[c] + (p01[c] - p00[c]) * fx;
          const Real bot = p10[c] + (p11[c] - p10[c]) * fx;
          o[c] = top + (bot - top) * fy;
        }
      }
    }
    return out;
  }

  void backward(std::span<const Tensor* const> in, const Tensor&, std::span<const Real> g,
                std::span<Buffer* const> gin) override {
    if (!gin[0]) return;
    const Tensor& x = *in[0];
    const std::size_t H = x.dim(0), W = x.dim(1), C = x.dim(2);
    const SampleWindow w = window_.value_or(SampleWindow{0, 0, Real(H - 1), Real(W - 1)});
    detail::AxisTaps ty(H, w.y0, w.y1, out_h_), tx(W, w.x0, w.x1, out_w_);
    Real* gx = gin[0]->data();
    for (std::size_t i = 0; i < out_h_; ++i) {
      const Real fy = ty.frac[i];
      for (std::size_t j = 0; j < out_w_; ++j) {
        const Real fx = tx.frac[j];
        const Real w00 = (1 - fy) * (1 - fx), w01 = (1 - fy) * fx;
        const Real w10 = fy * (1 - fx), w11 = fy * fx;
        Real* g00 = gx + (ty.lo[i] * W + tx.lo[j]) * C;
        Real* g01 = gx + (ty.lo[i] * W + tx.hi[j]) * C;
        Real* g10 = gx + (ty.hi[i] * W + tx.lo[j]) * C;
        Real* g11 = gx + (ty.hi[i] * W + tx.hi[j]) * C;
        const Real* gp = g.data() + (i * out_w_ + j) * C;
        for (std::size_t c = 0; c < C; ++c) {
          g00[c] += w00 * gp[c];
          g01[c] += w01 * gp[c];
          g10[c] += w10 * gp[c];
          g11[c] += w11 * gp[c];
        }
      }
    }
  }

 private:
  std::optional<SampleWindow> window_;
  std::size_t out_h_, out_w_;
};

/// Align-corners bilinear resize: output corners coincide with input corners.
inline Var bilinear_resize(Var x, std::size_t out_h, std::size_t out_w) {
  return x.tape->apply(std::make_unique<CropResizeOp>(std::nullopt, out_h, out_w), {x});
}

inline Var crop_resize(Var x, SampleWindow window, std::size_t out_h, std::size_t out_w) {
  return x.tape->apply(std::make_unique<CropResizeOp>(window, out_h, out_w), {x});
}

// ---------------------------------------------------------------------------
// Activations

enum class Activation { kRelu, kSigmoid, kSoftmax };

inline Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::kRelu;
  if (name == "sigmoid") return Activation::kSigmoid;
  if (name == "softmax") return Activation::kSoftmax;
  throw ArgumentError("unknown activation '" + std::string(name) + "'");
}

inline Real stable_sigmoid(Real z) {
  if (z >= 0) return Real(1) / (Real(1) + std::exp(-z));
  const Real e = std::exp(z);
  return e / (Real(1) + e);
}

class ActivationOp final : public Op {
 public:
  explicit ActivationOp(Activation kind) : kind_(kind) {}
  std::string_view name() const override {
    switch (kind_) {
      case Activation::kRelu: return "relu";
      case Activation::kSigmoid: return "sigmoid";
      case Activation::kSoftmax: return "softmax";
    }
    return "activation";
  }

  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& x = *in[0];
    Tensor out(x.shape());
    switch (kind_) {
      case Activation::kRelu:
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0 ? x[i] : Real(0);
        break;
      case Activation::kSigmoid:
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = stable_sigmoid(x[i]);
        break;
      case Activation::kSoftmax: {
        const std::size_t k = x.shape().back();
        for (std::size_t r = 0; r < x.size() / k; ++r) {
          const Real* xp = x.data() + r * k;
          Real* op = out.data() + r * k;
          const Real mx = *std::max_element(xp, xp + k);
          Real sum = 0;
          for (std::size_t j = 0; j < k; ++j) sum += (op[j] = std::exp(xp[j] - mx));
          for (std::size_t j = 0; j < k; ++j) op[j] /= sum;
        }
        break;
      }
    }
    return out;
  }

  void backward(std::span<const Tensor* const> in, const Tensor& out, std::span<const Real> g,
                std::span<Buffer* const> gin) override {
    if (!gin[0]) return;
    Buffer& gx = *gin[0];
    const Tensor& x = *in[0];
    switch (kind_) {
      case Activation::kRelu:
        for (std::size_t i = 0; i < x.size(); ++i) {
          if (x[i] > 0) gx[i] += g[i];
        }
        break;
      case Activation::kSigmoid:
        for (std::size_t i = 0; i < x.size(); ++i) gx[i] += g[i] * out[i] * (1 - out[i]);
        break;
      case Activation::kSoftmax: {
        const std::size_t k = x.shape().back();
        for (std::size_t r = 0; r < x.size() / k; ++r) {
          const Real* y = out.data() + r * k;
          const Real* gp = g.data() + r * k;
          Real dot = 0;
          for (std::size_t j = 0; j < k; ++j) dot += gp[j] * y[j];
          for (std::size_t j = 0; j < k; ++j) gx[r * k + j] += y[j] * (gp[j] - dot);
        }
        break;
      }
    }
  }

 private:
  Activation kind_;
};

inline Var activation(Var x, Activation kind) {
  return x.tape->apply(std::make_unique<ActivationOp>(kind), {x});
}
inline Var activation(Var x, std::string_view kind) { return activation(x, parse_activation(kind)); }
inline Var relu(Var x) { return activation(x, Activation::kRelu); }
inline Var sigmoid(Var x) { return activation(x, Activation::kSigmoid); }
inline Var softmax(Var x) { return activation(x, Activation::kSoftmax); }

// Sigmoid on channels c with c % period == offset; identity elsewhere.
class ChannelSigmoidOp final : public Op {
 public:
  ChannelSigmoidOp(std::size_t period, std::size_t offset) : period_(period), offset_(offset) {
    if (period_ == 0 || offset_ >= period_) throw ArgumentError("channel_sigmoid: bad period/offset");
  }
  std::string_view name() const override { return "channel_sigmoid"; }
  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& x = *in[0];
    const std::size_t C = x.shape().back();
    Tensor out = x;
    out.clear_grad();
    for (std::size_t i = 0; i < x.size(); ++i) {
      if ((i % C) % period_ == offset_) out[i] = stable_sigmoid(x[i]);
    }
    return out;
  }
  void backward(std::span<const Tensor* const> in, const Tensor& out, std::span<const Real> g,
                std::span<Buffer* const> gin) override {
    if (!gin[0]) return;
    const std::size_t C = in[0]->shape().back();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if ((i % C) % period_ == offset_) {
        (*gin[0])[i] += g[i] * out[i] * (1 - out[i]);
      } else {
        (*gin[0])[i] += g[i];
      }
    }
  }

 private:
  std::size_t period_, offset_;
};

inline Var channel_sigmoid(Var x, std::size_t period, std::size_t offset) {
  return x.tape->apply(std::make_unique<ChannelSigmoidOp>(period, offset), {x});
}

// ---------------------------------------------------------------------------
// Structural ops

class ConcatOp final : public Op {
 public:
  std::string_view name() const override { return "concat"; }
  Tensor forward(std::span<const Tensor* const> in) override {
    if (in.empty()) throw ArgumentError("concat: no inputs");
    Shape lead(in[0]->shape().begin(), in[0]->shape().end() - 1);
    std::size_t total = 0;
    for (const Tensor* t : in) {
      Shape l(t->shape().begin(), t->shape().end() - 1);
      if (l != lead) {
        throw ShapeError("concat: leading extents differ: " + shape_str(in[0]->shape()) +
                         " vs " + shape_str(t->shape()));
      }
      total += t->shape().back();
    }
    Shape shape = lead;
    shape.push_back(total);
    Tensor out(shape);
    const std::size_t rows = shape_numel(lead);
    std::size_t ofs = 0;
    for (const Tensor* t : in) {
      const std::size_t c = t->shape().back();
      for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(t->data() + r * c, c, out.data() + r * total + ofs);
      }
      ofs += c;
    }
    return out;
  }
  void backward(std::span<const Tensor* const> in, const Tensor& out, std::span<const Real> g,
                std::span<Buffer* const> gin) override {
    const std::size_t total = out.shape().back();
    const std::size_t rows = out.size() / total;
    std::size_t ofs = 0;
    for (std::size_t k = 0; k < in.size(); ++k) {
      const std::size_t c = in[k]->shape().back();
      if (gin[k]) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < c; ++j) (*gin[k])[r * c + j] += g[r * total + ofs + j];
        }
      }
      ofs += c;
    }
  }
};

/// Concatenation along the last axis.
inline Var concat(const std::vector<Var>& xs) {
  if (xs.empty()) throw ArgumentError("concat: no inputs");
  return xs.front().tape->apply(std::make_unique<ConcatOp>(), xs);
}

class GatherOp final : public Op {
 public:
  GatherOp(std::vector<std::size_t> idx, Shape shape) : idx_(std::move(idx)), shape_(std::move(shape)) {}
  std::string_view name() const override { return "gather"; }
  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& x = *in[0];
    Tensor out(shape_);
    for (std::size_t i = 0; i < idx_.size(); ++i) {
      if (idx_[i] >= x.size()) throw ShapeError("gather: index out of range");
      out[i] = x[idx_[i]];
    }
    return out;
  }
  void backward(std::span<const Tensor* const>, const Tensor&, std::span<const Real> g,
                std::span<Buffer* const> gin) override {
    if (!gin[0]) return;
    for (std::size_t i = 0; i < idx_.size(); ++i) (*gin[0])[idx_[i]] += g[i];
  }

 private:
  std::vector<std::size_t> idx_;
  Shape shape_;
};

/// Picks flat element indices; result has shape `shape` (defaults to [n]).
inline Var gather(Var x, std::vector<std::size_t> flat_indices, Shape shape = {}) {
  if (flat_indices.empty()) throw ArgumentError("gather: no indices");
  if (shape.empty()) shape = {flat_indices.size()};
  if (shape_numel(shape) != flat_indices.size()) throw ShapeError("gather: shape/index count mismatch");
  return x.tape->apply(std::make_unique<GatherOp>(std::move(flat_indices), std::move(shape)), {x});
}

class ReshapeOp final : public Op {
 public:
  explicit ReshapeOp(Shape shape) : shape_(std::move(shape)) {}
  std::string_view name() const override { return "reshape"; }
  Tensor forward(std::span<const Tensor* const> in) override { return Tensor(shape_, in[0]->buffer()); }
  void backward(std::span<const Tensor* const>, const Tensor&, std::span<const Real> g,
                std::span<Buffer* const> gin) override {
    detail::add_into(gin[0], g);
  }

 private:
  Shape shape_;
};

inline Var reshape(Var x, Shape shape) {
  if (shape_numel(shape) != x.value().size()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  return x.tape->apply(std::make_unique<ReshapeOp>(std::move(shape)), {x});
}

// ---------------------------------------------------------------------------
// Arithmetic

class AddOp final : public Op {
 public:
  std::string_view name() const override { return "add"; }
  Tensor forward(std::span<const Tensor* const> in) override {
    for (const Tensor* t : in) {
      if (t->shape() != in[0]->shape()) throw ShapeError("add: shape mismatch");
    }
    Tensor out = *in[0];
    out.clear_grad();
    for (std::size_t k = 1; k < in.size(); ++k) {
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += (*in[k])[i];
    }
    return out;
  }
  void backward(std::span<const Tensor* const>, const Tensor&, std::span<const Real> g,
                std::span<Buffer* const> gin) override {
    for (Buffer* b : gin) detail::add_into(b, g);
  }
};

inline Var add(const std::vector<Var>& xs) {
  if (xs.empty()) throw ArgumentError("add: no inputs");
  return xs.front().tape->apply(std::make_unique<AddOp>(), xs);
}
inline Var add(Var a, Var b) { return add(std::vector<Var>{a, b}); }

class MulOp final : public Op {
 public:
  std::string_view name() const override { return "mul"; }
  Tensor forward(std::span<const Tensor* const> in) override {
    if (in[0]->shape() != in[1]->shape()) throw ShapeError("mul: shape mismatch");
    Tensor out(in[0]->shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*in[0])[i] * (*in[1])[i];
    return out;
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, std::span<const Real> g,
                std::span<Buffer* const> gin) override {
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (gin[0]) (*gin[0])[i] += g[i] * (*in[1])[i];
      if (gin[1]) (*gin[1])[i] += g[i] * (*in[0])[i];
    }
  }
};

/// Elementwise product.
inline Var mul(Var a, Var b) { return a.tape->apply(std::make_unique<MulOp>(), {a, b}); }

class ScaleOp final : public Op {
 public:
  explicit ScaleOp(Real s) : s_(s) {}
  std::string_view name() const override { return "scale"; }
  Tensor forward(std::span<const Tensor* const> in) override {
    Tensor out(in[0]->shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = s_ * (*in[0])[i];
    return out;
  }
  void backward(std::span<const Tensor* const>, const Tensor&, std::span<const Real> g,
                std::span<Buffer* const> gin) override {
    if (!gin[0]) return;
    for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += s_ * g[i];
  }

 private:
  Real s_;
};

inline Var scale(Var x, Real s) { return x.tape->apply(std::make_unique<ScaleOp>(s), {x}); }

class SumOp final : public Op {
 public:
  std::string_view name() const override { return "sum"; }
  Tensor forward(std::span<const Tensor* const> in) override {
    Real s = 0;
    for (Real v : in[0]->values()) s += v;
    return Tensor::scalar(s);
  }
  void backward(std::span<const Tensor* const>, const Tensor&, std::span<const Real> g,
                std::span<Buffer* const> gin) override {
    if (!gin[0]) return;
    for (Real& v : *gin[0]) v += g[0];
  }
};

inline Var sum(Var x) { return x.tape->apply(std::make_unique<SumOp>(), {x}); }
inline Var mean(Var x) { return scale(sum(x), Real(1) / Real(x.value().size())); }

/// Dense layer on the flattened input: x[N] . W[N,M] + b[M] -> [M].
class LinearOp final : public Op {
 public:
  std::string_view name() const override { return "linear"; }
  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& x = *in[0];
    const Tensor& w = *in[1];
    const Tensor& b = *in[2];
    require_rank(w, 2, "linear weight");
    if (w.dim(0) != x.size()) {
      throw ShapeError("linear: input has " + std::to_string(x.size()) +
                       " elements, weight expects " + std::to_string(w.dim(0)));
    }
    const std::size_t N = w.dim(0), M = w.dim(1);
    if (b.size() != M) throw ShapeError("linear: bias length mismatch");
    Tensor out({M});
    std::copy(b.data(), b.data() + M, out.data());
    for (std::size_t n = 0; n < N; ++n) {
      const Real v = x[n];
      if (v == Real(0)) continue;
      const Real* wr = w.data() + n * M;
      for (std::size_t m = 0; m < M; ++m) out[m] += v * wr[m];
    }
    return out;
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, std::span<const Real> g,
                std::span<Buffer* const> gin) override {
    const Tensor& x = *in[0];
    const Tensor& w = *in[1];
    const std::size_t N = w.dim(0), M = w.dim(1);
    for (std::size_t n = 0; n < N; ++n) {
      const Real* wr = w.data() + n * M;
      if (gin[0]) {
        Real acc = 0;
        for (std::size_t m = 0; m < M; ++m) acc += wr[m] * g[m];
        (*gin[0])[n] += acc;
      }
      if (gin[1]) {
        Real* gw = gin[1]->data() + n * M;
        for (std::size_t m = 0; m < M; ++m) gw[m] += x[n] * g[m];
      }
    }
    detail::add_into(gin[2], g);
  }
};

inline Var linear(Var x, Var weight, Var bias) {
  return x.tape->apply(std::make_unique<LinearOp>(), {x, weight, bias});
}

/// Hard threshold (value > t -> 1 else 0). Has no derivative.
class StepOp final : public Op {
 public:
  explicit StepOp(Real t) : t_(t) {}
  std::string_view name() const override { return "step"; }
  bool differentiable() const override { return false; }
  Tensor forward(std::span<const Tensor* const> in) override {
    Tensor out(in[0]->shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*in[0])[i] > t_ ? Real(1) : Real(0);
    return out;
  }
  void backward(std::span<const Tensor* const>, const Tensor&, std::span<const Real>,
                std::span<Buffer* const>) override {
    throw UnsupportedError("step has no derivative");
  }

 private:
  Real t_;
};

inline Var step(Var x, Real threshold) { return x.tape->apply(std::make_unique<StepOp>(threshold), {x}); }

// ---------------------------------------------------------------------------
// Losses

enum class LossKind { kBinaryCrossEntropy, kCategoricalCrossEntropy, kMse };

inline constexpr Real kProbClamp = Real(1e-12);

class LossOp final : public Op {
 public:
  explicit LossOp(LossKind kind) : kind_(kind) {}
  std::string_view name() const override {
    switch (kind_) {
      case LossKind::kBinaryCrossEntropy: return "bce";
      case LossKind::kCategoricalCrossEntropy: return "cce";
      case LossKind::kMse: return "mse";
    }
    return "loss";
  }

  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& p = *in[0];
    const Tensor& t = *in[1];
    if (p.shape() != t.shape()) {
      throw ShapeError("loss: prediction " + shape_str(p.shape()) + " vs target " + shape_str(t.shape()));
    }
    Real acc = 0;
    switch (kind_) {
      case LossKind::kBinaryCrossEntropy:
        for (std::size_t i = 0; i < p.size(); ++i) {
          const Real q = clamp_prob(p[i]);
          acc -= t[i] * std::log(q) + (1 - t[i]) * std::log(1 - q);
        }
        return Tensor::scalar(acc / Real(p.size()));
      case LossKind::kCategoricalCrossEntropy: {
        for (std::size_t i = 0; i < p.size(); ++i) {
          if (t[i] != Real(0)) acc -= t[i] * std::log(clamp_prob(p[i]));
        }
        return Tensor::scalar(acc / Real(rows(p)));
      }
      case LossKind::kMse:
        for (std::size_t i = 0; i < p.size(); ++i) {
          const Real d = p[i] - t[i];
          acc += d * d;
        }
        return Tensor::scalar(acc / Real(p.size()));
    }
    return Tensor::scalar(0);
  }

  void backward(std::span<const Tensor* const> in, const Tensor&, std::span<const Real> g,
                std::span<Buffer* const> gin) override {
    const Tensor& p = *in[0];
    const Tensor& t = *in[1];
    const Real g0 = g[0];
    switch (kind_) {
      case LossKind::kBinaryCrossEntropy: {
        if (!gin[0]) return;
        const Real n = Real(p.size());
        for (std::size_t i = 0; i < p.size(); ++i) {
          if (!inside_clamp(p[i])) continue;
          (*gin[0])[i] += g0 * (-t[i] / p[i] + (1 - t[i]) / (1 - p[i])) / n;
        }
        break;
      }
      case LossKind::kCategoricalCrossEntropy: {
        if (!gin[0]) return;
        const Real n = Real(rows(p));
        for (std::size_t i = 0; i < p.size(); ++i) {
          if (t[i] == Real(0) || !inside_clamp(p[i])) continue;
          (*gin[0])[i] -= g0 * t[i] / p[i] / n;
        }
        break;
      }
      case LossKind::kMse: {
        const Real n = Real(p.size());
        for (std::size_t i = 0; i < p.size(); ++i) {
          const Real d = Real(2) * (p[i] - t[i]) / n * g0;
          if (gin[0]) (*gin[0])[i] += d;
          if (gin[1]) (*gin[1])[i] -= d;
        }
        break;
      }
    }
  }

 private:
  static Real clamp_prob(Real q) { return std::clamp(q, kProbClamp, Real(1) - kProbClamp); }
  static bool inside_clamp(Real q) { return q >= kProbClamp && q <= Real(1) - kProbClamp; }
  static std::size_t rows(const Tensor& p) { return p.size() / p.shape().back(); }

  LossKind kind_;
};

/// Mean-reduced loss. Cross-entropy variants take probabilities; the
/// categorical form averages over rows (all axes but the last).
inline Var loss(Var pred, Var target, LossKind kind) {
  return pred.tape->apply(std::make_unique<LossOp>(kind), {pred, target});
}

inline constexpr Real kDiceEpsilon = Real(1e-7);

/// 1 - sum_k (sum_n y_nk p_nk) / (sum_n y_nk + sum_n p_nk + eps), classes on
/// the last axis.
class DiceLossOp final : public Op {
 public:
  std::string_view name() const override { return "dice_loss"; }
  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& p = *in[0];
    const Tensor& y = *in[1];
    if (p.shape() != y.shape()) throw ShapeError("dice_loss: probability/target shape mismatch");
    stats(p, y);
    Real s = 0;
    for (std::size_t k = 0; k < inter_.size(); ++k) s += inter_[k] / denom_[k];
    return Tensor::scalar(Real(1) - s);
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, std::span<const Real> g,
                std::span<Buffer* const> gin) override {
    if (!gin[0]) return;
    const Tensor& p = *in[0];
    const Tensor& y = *in[1];
    stats(p, y);
    const std::size_t K = p.shape().back();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const std::size_t k = i % K;
      const Real d = denom_[k];
      (*gin[0])[i] -= g[0] * (y[i] / d - inter_[k] / (d * d));
    }
  }

 private:
  void stats(const Tensor& p, const Tensor& y) {
    const std::size_t K = p.shape().back();
    inter_.assign(K, 0);
    denom_.assign(K, kDiceEpsilon);
    Buffer ys(K, 0), ps(K, 0);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const std::size_t k = i % K;
      inter_[k] += y[i] * p[i];
      ys[k] += y[i];
      ps[k] += p[i];
    }
    for (std::size_t k = 0; k < K; ++k) denom_[k] = ys[k] + ps[k] + kDiceEpsilon;
  }

  Buffer inter_, denom_;
};

inline Var dice(Var probs, Var onehot) {
  return probs.tape->apply(std::make_unique<DiceLossOp>(), {probs, onehot});
}

}  // namespace skinseg::ops
