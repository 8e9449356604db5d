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
#include <numeric>
#include <span>

#include "skinseg/tensor.hpp"

namespace skinseg::geometry {

/// Half-open axis-aligned rectangle [x1, x2) x [y1, y2) in image pixels.
struct Box {
  Real x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  Real width() const { return x2 - x1; }
  Real height() const { return y2 - y1; }
  Real area() const { return width() * height(); }
  Real cx() const { return Real(0.5) * (x1 + x2); }
  Real cy() const { return Real(0.5) * (y1 + y2); }
  bool valid() const {
    return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2) && x1 < x2 &&
           y1 < y2;
  }

  friend bool operator==(const Box&, const Box&) = default;
};

inline void require_valid(const Box& b, const char* what) {
  if (!b.valid()) {
    std::ostringstream os;
    os << what << ": degenerate box (" << b.x1 << ',' << b.y1 << ',' << b.x2 << ',' << b.y2 << ')';
    throw ArgumentError(os.str());
  }
}

inline Real iou(const Box& a, const Box& b) {
  require_valid(a, "iou");
  require_valid(b, "iou");
  const Real iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const Real ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return Real(0);
  const Real inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

inline Box clip_box(const Box& b, Real image_h, Real image_w) {
  return Box{std::clamp(b.x1, Real(0), image_w), std::clamp(b.y1, Real(0), image_h),
             std::clamp(b.x2, Real(0), image_w), std::clamp(b.y2, Real(0), image_h)};
}

// ---------------------------------------------------------------------------
// Masks

/// Binary H x W mask, row-major, values 0 or 1.
class Mask {
 public:
  Mask() = default;
  Mask(std::size_t height, std::size_t width) : h_(height), w_(width), data_(height * width, 0) {}
  Mask(std::size_t height, std::size_t width, std::vector<std::uint8_t> data)
      : h_(height), w_(width), data_(std::move(data)) {
    if (data_.size() != h_ * w_) throw ShapeError("mask data size does not match extents");
    for (auto& v : data_) v = v ? 1 : 0;
  }

  std::size_t height() const { return h_; }
  std::size_t width() const { return w_; }
  std::size_t size() const { return data_.size(); }
  std::uint8_t at(std::size_t r, std::size_t c) const { return data_[r * w_ + c]; }
  void set(std::size_t r, std::size_t c, bool on) { data_[r * w_ + c] = on ? 1 : 0; }
  std::span<const std::uint8_t> data() const { return data_; }
  std::size_t count() const { return std::accumulate(data_.begin(), data_.end(), std::size_t{0}); }

  friend bool operator==(const Mask&, const Mask&) = default;

 private:
  std::size_t h_ = 0, w_ = 0;
  std::vector<std::uint8_t> data_;
};

class EmptyMaskError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tight half-open box around the foreground pixels.
inline Box mask_to_bbox(const Mask& mask) {
  std::size_t rmin = mask.height(), rmax = 0, cmin = mask.width(), cmax = 0;
  bool any = false;
  for (std::size_t r = 0; r < mask.height(); ++r) {
    for (std::size_t c = 0; c < mask.width(); ++c) {
      if (!mask.at(r, c)) continue;
      any = true;
      rmin = std::min(rmin, r);
      rmax = std::max(rmax, r);
      cmin = std::min(cmin, c);
      cmax = std::max(cmax, c);
    }
  }
  if (!any) throw EmptyMaskError("mask has no foreground pixels");
  return Box{Real(cmin), Real(rmin), Real(cmax + 1), Real(rmax + 1)};
}

// ---------------------------------------------------------------------------
// Anchors

/// Width:height aspect ratio.
struct AspectRatio {
  Real w = 1, h = 1;
  friend bool operator==(const AspectRatio&, const AspectRatio&) = default;
};

struct Anchor {
  Box box;
  std::size_t scale_index = 0;
  std::size_t ratio_index = 0;
  std::size_t grid_row = 0;
  std::size_t grid_col = 0;
};

// Anchors sit on non-overlapping square patches of this many feature cells.
inline constexpr std::size_t kAnchorPatch = 3;

inline std::size_t anchor_grid_extent(std::size_t feature_extent) { return feature_extent / kAnchorPatch; }

/// Feature cell at the middle of anchor patch `g`.
inline std::size_t anchor_patch_center_cell(std::size_t g) { return g * kAnchorPatch + kAnchorPatch / 2; }

/// Anchors ordered by grid row, grid column, scale, ratio. Each one has area
/// scale^2 and is centred at (g * 3 + 1.5) * backbone_stride.
inline std::vector<Anchor> generate_anchors(std::size_t fm_h, std::size_t fm_w, Real backbone_stride,
                                            std::span<const Real> scales, std::span<const AspectRatio> ratios) {
  if (fm_h < kAnchorPatch || fm_w < kAnchorPatch) {
    throw ArgumentError("generate_anchors: feature map " + std::to_string(fm_h) + "x" + std::to_string(fm_w) +
                        " smaller than one 3x3 patch");
  }
  if (scales.empty() || ratios.empty()) throw ArgumentError("generate_anchors: need scales and ratios");
  if (!(backbone_stride > 0)) throw ArgumentError("generate_anchors: stride must be positive");
  for (Real s : scales) {
    if (!(s > 0)) throw ArgumentError("generate_anchors: scales must be positive");
  }
  for (const AspectRatio& r : ratios) {
    if (!(r.w > 0 && r.h > 0)) throw ArgumentError("generate_anchors: ratios must be positive");
  }
  const std::size_t gh = anchor_grid_extent(fm_h), gw = anchor_grid_extent(fm_w);
  std::vector<Anchor> anchors;
  anchors.reserve(gh * gw * scales.size() * ratios.size());
  for (std::size_t gy = 0; gy < gh; ++gy) {
    for (std::size_t gx = 0; gx < gw; ++gx) {
      const Real cy = (Real(gy * kAnchorPatch) + Real(1.5)) * backbone_stride;
      const Real cx = (Real(gx * kAnchorPatch) + Real(1.5)) * backbone_stride;
      for (std::size_t si = 0; si < scales.size(); ++si) {
        for (std::size_t ri = 0; ri < ratios.size(); ++ri) {
          const Real w = scales[si] * std::sqrt(ratios[ri].w / ratios[ri].h);
          const Real h = scales[si] * std::sqrt(ratios[ri].h / ratios[ri].w);
          anchors.push_back(Anchor{Box{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2}, si, ri, gy, gx});
        }
      }
    }
  }
  return anchors;
}

// ---------------------------------------------------------------------------
// Box regression

struct RegressionTarget {
  Real tx = 0, ty = 0, tw = 0, th = 0;
  friend bool operator==(const RegressionTarget&, const RegressionTarget&) = default;
};

// Bound on log-size offsets before exponentiation.
inline constexpr Real kMaxLogScale = Real(10);

inline RegressionTarget encode_box(const Box& anchor, const Box& gt) {
  if (!(anchor.width() > 0 && anchor.height() > 0)) throw ArgumentError("encode_box: anchor has non-positive size");
  if (!(gt.width() > 0 && gt.height() > 0)) throw ArgumentError("encode_box: target has non-positive size");
  return RegressionTarget{(gt.cx() - anchor.cx()) / anchor.width(), (gt.cy() - anchor.cy()) / anchor.height(),
                          std::log(gt.width() / anchor.width()), std::log(gt.height() / anchor.height())};
}

/// Inverse of encode_box, clipped to [0, image_w] x [0, image_h]. The result
/// may be degenerate after clipping; callers check valid().
inline Box decode_box(const Box& anchor, const RegressionTarget& t, Real image_h, Real image_w) {
  if (!(anchor.width() > 0 && anchor.height() > 0)) throw ArgumentError("decode_box: anchor has non-positive size");
  const Real cx = anchor.cx() + t.tx * anchor.width();
  const Real cy = anchor.cy() + t.ty * anchor.height();
  const Real w = anchor.width() * std::exp(std::clamp(t.tw, -kMaxLogScale, kMaxLogScale));
  const Real h = anchor.height() * std::exp(std::clamp(t.th, -kMaxLogScale, kMaxLogScale));
  return clip_box(Box{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2}, image_h, image_w);
}

/// How regression outputs relate to boxes: normalized log-space offsets
/// relative to the reference box, or absolute corner coordinates normalized
/// by the image extents (x1/W, y1/H, x2/W, y2/H).
enum class RegressionMode { kOffsets, kRawCoordinates };

struct BoxCoder {
  RegressionMode mode = RegressionMode::kOffsets;

  RegressionTarget encode(const Box& reference, const Box& gt, Real image_h, Real image_w) const {
    if (mode == RegressionMode::kOffsets) return encode_box(reference, gt);
    return RegressionTarget{gt.x1 / image_w, gt.y1 / image_h, gt.x2 / image_w, gt.y2 / image_h};
  }

  Box decode(const Box& reference, const RegressionTarget& t, Real image_h, Real image_w) const {
    if (mode == RegressionMode::kOffsets) return decode_box(reference, t, image_h, image_w);
    return clip_box(Box{t.tx * image_w, t.ty * image_h, t.tw * image_w, t.th * image_h}, image_h, image_w);
  }
};

// ---------------------------------------------------------------------------
// Non-maximum suppression

/// Greedy NMS: repeatedly keeps the best remaining box (ties -> lower index)
/// and drops every remaining box with IoU > threshold against it. Returns
/// kept indices in selection order.
inline std::vector<std::size_t> nms(std::span<const Box> boxes, std::span<const Real> scores, Real threshold) {
  if (boxes.size() != scores.size()) throw ArgumentError("nms: boxes and scores differ in length");
  if (!(threshold >= 0 && threshold <= 1)) throw ArgumentError("nms: threshold must lie in [0,1]");
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<std::size_t> kept;
  std::vector<bool> dropped(boxes.size(), false);
  for (std::size_t i = 0; i < order.size(); ++i) {
    const std::size_t cur = order[i];
    if (dropped[cur]) continue;
    kept.push_back(cur);
    for (std::size_t j = i + 1; j < order.size(); ++j) {
      const std::size_t other = order[j];
      if (!dropped[other] && iou(boxes[cur], boxes[other]) > threshold) dropped[other] = true;
    }
  }
  return kept;
}

}  // namespace skinseg::geometry
