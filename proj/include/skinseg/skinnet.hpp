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

// Dense-block encoder/decoder with a dilated bottleneck, and its dice loss.

#include <random>

#include "skinseg/geometry.hpp"
#include "skinseg/ops.hpp"
#include "skinseg/params.hpp"

namespace skinseg::skinnet {

inline constexpr std::size_t kLevels = 3;
inline constexpr std::size_t kBackgroundChannel = 0;
inline constexpr std::size_t kLesionChannel = 1;

struct SkinNetConfig {
  std::size_t input_size = 128;
  std::size_t in_channels = 3;
  std::size_t layers_per_block = 3;
  std::size_t growth = 8;
  std::vector<std::size_t> dilation_rates{1, 2, 4, 8};
  // Width of the dilated convolutions; the tail restores the input width.
  std::size_t bottleneck_channels = 32;

  void validate() const {
    if (input_size == 0 || input_size % (std::size_t{1} << kLevels) != 0) {
      throw ArgumentError("skinnet: input size must be a positive multiple of 8");
    }
    if ((input_size >> kLevels) < 3) throw ArgumentError("skinnet: input size must be at least 24");
    if (layers_per_block == 0 || growth == 0 || in_channels == 0 || bottleneck_channels == 0) {
      throw ArgumentError("skinnet: layer count, growth and widths must be positive");
    }
    if (dilation_rates.empty()) throw ArgumentError("skinnet: need at least one dilation rate");
    for (std::size_t i = 0; i < dilation_rates.size(); ++i) {
      if (dilation_rates[i] == 0 || (i > 0 && dilation_rates[i] <= dilation_rates[i - 1])) {
        throw ArgumentError("skinnet: dilation rates must be positive and strictly increasing");
      }
    }
  }

  std::size_t block_output(std::size_t in) const { return in + layers_per_block * growth; }
};

/// Receptive field (in cells) of stacked 3x3 convolutions with these rates.
inline std::size_t receptive_field(std::span<const std::size_t> rates) {
  std::size_t rf = 1;
  for (std::size_t r : rates) rf += 2 * r;
  return rf;
}

// ---------------------------------------------------------------------------
// Parameters

inline void add_dense_block_params(ParameterStore& store, const std::string& prefix, std::size_t in_channels,
                                   std::size_t layers, std::size_t growth, std::mt19937_64& rng) {
  for (std::size_t i = 0; i < layers; ++i) {
    const std::size_t cin = in_channels + i * growth;
    store.add(prefix + ".layer" + std::to_string(i) + ".kernel", conv_kernel_init(3, 3, cin, growth, rng));
    store.add(prefix + ".layer" + std::to_string(i) + ".bias", Tensor({growth}));
  }
}

inline void add_bottleneck_params(ParameterStore& store, const std::string& prefix, std::size_t channels,
                                  std::size_t width, std::size_t n_rates, std::mt19937_64& rng) {
  std::size_t cin = channels;
  for (std::size_t j = 0; j < n_rates; ++j) {
    store.add(prefix + ".conv" + std::to_string(j) + ".kernel", conv_kernel_init(3, 3, cin, width, rng));
    store.add(prefix + ".conv" + std::to_string(j) + ".bias", Tensor({width}));
    cin = width;
  }
  store.add(prefix + ".tail.kernel", conv_kernel_init(1, 1, width, channels, rng));
  store.add(prefix + ".tail.bias", Tensor({channels}));
}

inline void init_skinnet_params(ParameterStore& store, const SkinNetConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  std::vector<std::size_t> skip(kLevels);
  std::size_t c = cfg.in_channels;
  for (std::size_t l = 0; l < kLevels; ++l) {
    add_dense_block_params(store, "skinnet.enc" + std::to_string(l), c, cfg.layers_per_block, cfg.growth, rng);
    c = skip[l] = cfg.block_output(c);
  }
  add_bottleneck_params(store, "skinnet.bottleneck", c, cfg.bottleneck_channels, cfg.dilation_rates.size(), rng);
  for (std::size_t k = 0; k < kLevels; ++k) {
    const std::size_t l = kLevels - 1 - k;
    add_dense_block_params(store, "skinnet.dec" + std::to_string(l), c + skip[l], cfg.layers_per_block, cfg.growth, rng);
    c = cfg.block_output(c + skip[l]);
  }
  store.add("skinnet.out.kernel", conv_kernel_init(1, 1, c, 2, rng));
  store.add("skinnet.out.bias", Tensor({2}));
}

// ---------------------------------------------------------------------------
// Blocks

/// Layer i sees the block input concatenated with the outputs of layers
/// 0..i-1 and emits `growth` channels (3x3 conv + relu). The block returns
/// its input concatenated with every layer output.
inline Var dense_block(Var x, std::size_t layers, std::size_t growth, ParameterStore& params, const std::string& prefix) {
  Tape& tape = *x.tape;
  std::vector<Var> features{x};
  for (std::size_t i = 0; i < layers; ++i) {
    Var in = features.size() == 1 ? x : ops::concat(features);
    const std::string base = prefix + ".layer" + std::to_string(i);
    const Tensor& k = params.get(base + ".kernel");
    if (k.rank() != 4 || k.dim(3) != growth) throw ShapeError("dense_block: " + base + " kernel does not emit growth channels");
    features.push_back(
        ops::relu(ops::conv2d(in, tape.param(params.get(base + ".kernel")), tape.param(params.get(base + ".bias")), {1, 1, 1})));
  }
  return ops::concat(features);
}

/// Sequential same-padded 3x3 convolutions at each dilation rate (relu after
/// each), then a 1x1 convolution back to the input width.
inline Var dilated_bottleneck(Var x, std::span<const std::size_t> rates, ParameterStore& params, const std::string& prefix) {
  Tape& tape = *x.tape;
  const Shape& s = x.shape();
  if (s.size() != 3) throw ShapeError("dilated_bottleneck: input must be [h,w,c]");
  if (s[0] < 3 || s[1] < 3) throw ArgumentError("dilated_bottleneck: input smaller than 3x3");
  Var y = x;
  for (std::size_t j = 0; j < rates.size(); ++j) {
    const std::string base = prefix + ".conv" + std::to_string(j);
    y = ops::relu(ops::conv2d(y, tape.param(params.get(base + ".kernel")), tape.param(params.get(base + ".bias")),
                              {1, rates[j], rates[j]}));
  }
  return ops::conv2d(y, tape.param(params.get(prefix + ".tail.kernel")), tape.param(params.get(prefix + ".tail.bias")));
}

struct ForwardTrace {
  std::vector<Shape> skips;       // encoder outputs, level 0 first
  Shape bottleneck;
  std::vector<Shape> upsampled;   // decoder inputs before concatenation, deepest first
};

/// Per-pixel {background, lesion} probabilities for an S x S crop.
inline Var skinnet_forward(Var crop, ParameterStore& params, const SkinNetConfig& cfg, ForwardTrace* trace = nullptr) {
  Tape& tape = *crop.tape;
  const Shape& s = crop.shape();
  if (s.size() != 3 || s[0] != cfg.input_size || s[1] != cfg.input_size || s[2] != cfg.in_channels) {
    throw ShapeError("skinnet_forward: expected [" + std::to_string(cfg.input_size) + "," +
                     std::to_string(cfg.input_size) + "," + std::to_string(cfg.in_channels) + "], got " + shape_str(s));
  }
  std::vector<Var> skips;
  Var x = crop;
  for (std::size_t l = 0; l < kLevels; ++l) {
    Var block = dense_block(x, cfg.layers_per_block, cfg.growth, params, "skinnet.enc" + std::to_string(l));
    skips.push_back(block);
    if (trace) trace->skips.push_back(block.shape());
    x = ops::maxpool2d(block, 2, 2);
  }
  x = dilated_bottleneck(x, cfg.dilation_rates, params, "skinnet.bottleneck");
  if (trace) trace->bottleneck = x.shape();
  for (std::size_t k = 0; k < kLevels; ++k) {
    const std::size_t l = kLevels - 1 - k;
    const Shape& target = skips[l].shape();
    Var up = ops::bilinear_resize(x, target[0], target[1]);
    if (trace) trace->upsampled.push_back(up.shape());
    x = dense_block(ops::concat({up, skips[l]}), cfg.layers_per_block, cfg.growth, params, "skinnet.dec" + std::to_string(l));
  }
  Var logits = ops::conv2d(x, tape.param(params.get("skinnet.out.kernel")), tape.param(params.get("skinnet.out.bias")));
  return ops::softmax(logits);
}

inline Tensor predict(const Tensor& crop, ParameterStore& params, const SkinNetConfig& cfg) {
  Tape tape;
  return skinnet_forward(tape.constant(crop), params, cfg).value();
}

// ---------------------------------------------------------------------------
// Dice loss

inline void require_one_hot(const Tensor& onehot) {
  if (onehot.rank() < 1) throw ArgumentError("dice_loss: ground truth must have a class axis");
  const std::size_t K = onehot.shape().back();
  for (std::size_t r = 0; r < onehot.size() / K; ++r) {
    Real s = 0;
    for (std::size_t k = 0; k < K; ++k) {
      const Real v = onehot[r * K + k];
      if (v != Real(0) && v != Real(1)) throw ArgumentError("dice_loss: ground truth is not one-hot");
      s += v;
    }
    if (s != Real(1)) throw ArgumentError("dice_loss: ground truth is not one-hot");
  }
}

/// 1 - sum_k (sum_n y_nk p_nk) / (sum_n y_nk + sum_n p_nk + 1e-7).
inline Var dice_loss(Var probs, const Tensor& onehot) {
  require_one_hot(onehot);
  return ops::dice(probs, probs.tape->constant(onehot));
}

/// [H, W, 2] indicator channels {background, lesion}.
inline Tensor one_hot(const geometry::Mask& mask) {
  Tensor t({mask.height(), mask.width(), 2});
  for (std::size_t r = 0; r < mask.height(); ++r) {
    for (std::size_t c = 0; c < mask.width(); ++c) t.at(r, c, mask.at(r, c) ? kLesionChannel : kBackgroundChannel) = 1;
  }
  return t;
}

/// Lesion iff its probability exceeds `threshold`.
inline geometry::Mask binarize(const Tensor& probs, Real threshold = Real(0.5)) {
  require_rank(probs, 3, "binarize");
  geometry::Mask m(probs.dim(0), probs.dim(1));
  for (std::size_t r = 0; r < probs.dim(0); ++r) {
    for (std::size_t c = 0; c < probs.dim(1); ++c) m.set(r, c, probs.at(r, c, kLesionChannel) > threshold);
  }
  return m;
}

}  // namespace skinseg::skinnet
