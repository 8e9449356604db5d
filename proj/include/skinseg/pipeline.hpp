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

// Detect, crop, segment, paste back.

#include <optional>

#include "skinseg/data.hpp"
#include "skinseg/model.hpp"

namespace skinseg::pipeline {

using geometry::Box;
using geometry::Mask;

inline constexpr Real kCropMargin = Real(0.1);

/// Grows each side by `margin` times the box extent, clipped to the image.
inline Box expand_box(const Box& b, Real margin, Real image_h, Real image_w) {
  const Real dx = margin * b.width(), dy = margin * b.height();
  return geometry::clip_box(Box{b.x1 - dx, b.y1 - dy, b.x2 + dx, b.y2 + dy}, image_h, image_w);
}

/// Half-open pixel rectangle [row0,row1) x [col0,col1).
struct PixelRect {
  std::size_t row0 = 0, col0 = 0, row1 = 0, col1 = 0;
  std::size_t height() const { return row1 - row0; }
  std::size_t width() const { return col1 - col0; }
};

/// Pixels whose centres lie inside `b`. A box too thin to hold a centre
/// falls back to the single pixel under its centre along that axis.
inline PixelRect pixel_rect(const Box& b, std::size_t image_h, std::size_t image_w) {
  auto axis = [](Real lo, Real hi, std::size_t extent) {
    const Real e = Real(extent);
    long a = long(std::ceil(std::clamp(lo, Real(0), e) - Real(0.5)));
    long z = long(std::floor(std::clamp(hi, Real(0), e) - Real(0.5))) + 1;
    a = std::clamp(a, 0L, long(extent) - 1);
    z = std::clamp(z, 0L, long(extent));
    if (z <= a) {
      a = std::clamp(long(std::floor((lo + hi) / 2)), 0L, long(extent) - 1);
      z = a + 1;
    }
    return std::pair<std::size_t, std::size_t>(std::size_t(a), std::size_t(z));
  };
  const auto [r0, r1] = axis(b.y1, b.y2, image_h);
  const auto [c0, c1] = axis(b.x1, b.x2, image_w);
  return PixelRect{r0, c0, r1, c1};
}

inline Tensor crop_image(const Tensor& image, const PixelRect& r) {
  require_rank(image, 3, "crop_image");
  const std::size_t C = image.dim(2);
  Tensor out({r.height(), r.width(), C});
  for (std::size_t y = 0; y < r.height(); ++y) {
    for (std::size_t x = 0; x < r.width(); ++x) {
      for (std::size_t c = 0; c < C; ++c) out.at(y, x, c) = image.at(r.row0 + y, r.col0 + x, c);
    }
  }
  return out;
}

inline Mask crop_mask(const Mask& mask, const PixelRect& r) {
  Mask out(r.height(), r.width());
  for (std::size_t y = 0; y < r.height(); ++y) {
    for (std::size_t x = 0; x < r.width(); ++x) out.set(y, x, mask.at(r.row0 + y, r.col0 + x));
  }
  return out;
}

/// Crop of `image` resized to the segmenter input, and the matching mask
/// when one is given. Used for ground-truth crops during training.
struct SegmenterInput {
  PixelRect rect;
  Tensor crop;  // [S,S,C]
  Mask mask;    // [S,S], empty when no mask was supplied
};

inline SegmenterInput prepare_crop(const Tensor& image, const Box& box, std::size_t size, const Mask* mask = nullptr,
                                   Real margin = kCropMargin) {
  const Real H = Real(image.dim(0)), W = Real(image.dim(1));
  SegmenterInput in;
  in.rect = pixel_rect(expand_box(box, margin, H, W), image.dim(0), image.dim(1));
  in.crop = data::resize_image(crop_image(image, in.rect), size, size);
  if (mask) in.mask = data::resize_mask(crop_mask(*mask, in.rect), size, size);
  return in;
}

/// Binary lesion mask at crop resolution.
inline Mask segment_crop(const Tensor& crop, ParameterStore& params, const skinnet::SkinNetConfig& cfg) {
  const std::size_t S = cfg.input_size;
  const Tensor probs = skinnet::predict(data::resize_image(crop, S, S), params, cfg);
  return data::resize_mask(skinnet::binarize(probs), crop.dim(0), crop.dim(1));
}

struct SegmentationResult {
  Mask mask;                                   // full image size
  std::optional<detection::Detection> detection;  // top-1, absent when nothing was detected
  Box crop_box;                                // margin-expanded detection box
  PixelRect crop_rect;

  bool detected() const { return detection.has_value(); }
};

inline Mask paste(const Mask& part, const PixelRect& r, std::size_t image_h, std::size_t image_w) {
  Mask full(image_h, image_w);
  for (std::size_t y = 0; y < r.height(); ++y) {
    for (std::size_t x = 0; x < r.width(); ++x) full.set(r.row0 + y, r.col0 + x, part.at(y, x));
  }
  return full;
}

inline SegmentationResult segment_with_box(const Tensor& image, const detection::Detection& det, Model& model,
                                           Real margin = kCropMargin) {
  const std::size_t H = image.dim(0), W = image.dim(1);
  SegmentationResult res;
  res.detection = det;
  res.crop_box = expand_box(det.box, margin, Real(H), Real(W));
  res.crop_rect = pixel_rect(res.crop_box, H, W);
  res.mask = paste(segment_crop(crop_image(image, res.crop_rect), model.params, model.skinnet), res.crop_rect, H, W);
  return res;
}

/// Segments the region of the top-scoring detection; an empty mask when the
/// detector finds nothing.
inline SegmentationResult segment_full(const Tensor& image, Model& model, Real margin = kCropMargin) {
  require_rank(image, 3, "segment_full");
  const auto detections = detection::detect(image, model.params, model.detector);
  if (detections.empty()) {
    SegmentationResult res;
    res.mask = Mask(image.dim(0), image.dim(1));
    return res;
  }
  return segment_with_box(image, detections.front(), model, margin);
}

}  // namespace skinseg::pipeline
