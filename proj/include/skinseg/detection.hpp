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

// Two-stage lesion detector: convolutional backbone, region proposal network
// over a sparse anchor grid, ROI pooling and a shared classification /
// box-refinement head applied to every proposal.

#include <array>
#include <bit>
#include <random>

#include "skinseg/geometry.hpp"
#include "skinseg/ops.hpp"
#include "skinseg/params.hpp"

namespace skinseg::detection {

using geometry::Anchor;
using geometry::AspectRatio;
using geometry::Box;
using geometry::RegressionTarget;

struct BackboneConfig {
  std::size_t in_channels = 3;
  // One 3x3 conv + relu per block. The first log2(stride) blocks use stride 2.
  std::vector<std::size_t> channels{8, 16, 32, 32};
  std::size_t stride = 8;

  std::size_t out_channels() const { return channels.back(); }
  std::size_t downsampling_blocks() const { return static_cast<std::size_t>(std::countr_zero(stride)); }

  void validate() const {
    if (channels.empty()) throw ArgumentError("backbone: needs at least one block");
    for (auto c : channels) {
      if (c == 0) throw ArgumentError("backbone: channel counts must be positive");
    }
    if (stride == 0 || !std::has_single_bit(stride)) throw ArgumentError("backbone: stride must be a power of two");
    if (downsampling_blocks() > channels.size()) throw ArgumentError("backbone: too few blocks for the stride");
  }
};

// Image size the reference anchor scales refer to.
inline constexpr Real kReferenceInputSize = 512;

struct DetectorConfig {
  BackboneConfig backbone;
  std::vector<Real> anchor_scales{128, 256, 512};
  std::vector<AspectRatio> anchor_ratios{{1, 1}, {1, 2}, {2, 1}};
  Real positive_iou = Real(0.7);
  Real negative_iou = Real(0.4);
  std::size_t rpn_channels = 32;
  std::size_t rpn_sample_cap = 128;
  std::size_t proposal_top_k = 64;
  std::size_t roi_resample_size = 14;
  std::size_t roi_pooled_size = 7;
  std::size_t head_channels = 16;
  std::size_t head_hidden = 64;
  // RCNN training label: lesion iff IoU with a ground-truth box >= this.
  Real lesion_iou = Real(0.5);
  std::size_t rois_per_image = 16;
  Real lesion_roi_fraction = Real(0.5);
  // Extra jittered copies of each ground-truth box offered to the RCNN head.
  std::size_t jittered_gt_rois = 2;
  Real score_threshold = Real(0.5);
  Real nms_threshold = Real(0.5);
  geometry::RegressionMode regression = geometry::RegressionMode::kOffsets;

  std::size_t anchor_types() const { return anchor_scales.size() * anchor_ratios.size(); }
  geometry::BoxCoder coder() const { return geometry::BoxCoder{regression}; }

  /// Anchor scales rescaled from the 512-pixel reference to `input_size`.
  DetectorConfig& scale_anchors_to(std::size_t input_size) {
    for (Real& s : anchor_scales) s *= Real(input_size) / kReferenceInputSize;
    return *this;
  }

  void validate() const {
    backbone.validate();
    auto in_unit = [](Real v) { return v >= 0 && v <= 1; };
    if (!in_unit(positive_iou) || !in_unit(negative_iou) || !in_unit(lesion_iou) || !in_unit(score_threshold) ||
        !in_unit(nms_threshold) || !in_unit(lesion_roi_fraction)) {
      throw ArgumentError("detector: thresholds must lie in [0,1]");
    }
    if (negative_iou > positive_iou) throw ArgumentError("detector: negative IoU threshold above positive");
    if (anchor_scales.empty() || anchor_ratios.empty()) throw ArgumentError("detector: anchors need scales and ratios");
    if (roi_resample_size != 2 * roi_pooled_size) throw ArgumentError("detector: ROI resample must be 2x pooled size");
    if (proposal_top_k == 0 || rois_per_image == 0) throw ArgumentError("detector: proposal counts must be positive");
  }
};

inline constexpr std::size_t kRpnValuesPerAnchor = 5;  // tx, ty, tw, th, objectness
inline constexpr std::size_t kLesionClass = 0;
inline constexpr std::size_t kBackgroundClass = 1;

// ---------------------------------------------------------------------------
// Parameters

inline void init_detector_params(ParameterStore& store, const DetectorConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  std::size_t cin = cfg.backbone.in_channels;
  for (std::size_t i = 0; i < cfg.backbone.channels.size(); ++i) {
    const std::size_t cout = cfg.backbone.channels[i];
    const std::string base = "backbone.block" + std::to_string(i);
    store.add(base + ".kernel", conv_kernel_init(3, 3, cin, cout, rng));
    store.add(base + ".bias", Tensor({cout}));
    cin = cout;
  }
  const std::size_t c = cfg.backbone.out_channels();
  store.add("rpn.trunk.kernel", conv_kernel_init(3, 3, c, cfg.rpn_channels, rng));
  store.add("rpn.trunk.bias", Tensor({cfg.rpn_channels}));
  const std::size_t maps = cfg.anchor_types() * kRpnValuesPerAnchor;
  store.add("rpn.head.kernel", conv_kernel_init(1, 1, cfg.rpn_channels, maps, rng));
  store.add("rpn.head.bias", Tensor({maps}));

  store.add("rcnn.conv.kernel", conv_kernel_init(3, 3, c, cfg.head_channels, rng));
  store.add("rcnn.conv.bias", Tensor({cfg.head_channels}));
  const std::size_t flat = cfg.roi_pooled_size * cfg.roi_pooled_size * cfg.head_channels;
  store.add("rcnn.fc.weight", glorot_uniform({flat, cfg.head_hidden}, flat, cfg.head_hidden, rng));
  store.add("rcnn.fc.bias", Tensor({cfg.head_hidden}));
  store.add("rcnn.cls.weight", glorot_uniform({cfg.head_hidden, 2}, cfg.head_hidden, 2, rng));
  store.add("rcnn.cls.bias", Tensor({2}));
  store.add("rcnn.reg.weight", glorot_uniform({cfg.head_hidden, 4}, cfg.head_hidden, 4, rng));
  store.add("rcnn.reg.bias", Tensor({4}));
}

// ---------------------------------------------------------------------------
// Backbone

inline Var backbone_forward(Tape& tape, Var image, ParameterStore& params, const BackboneConfig& cfg) {
  const Shape& s = image.shape();
  if (s.size() != 3) throw ShapeError("backbone: image must be [H,W,C], got " + shape_str(s));
  if (s[0] % cfg.stride != 0 || s[1] % cfg.stride != 0) {
    throw ShapeError("backbone: image extents " + shape_str(s) + " not divisible by stride " +
                     std::to_string(cfg.stride));
  }
  Var x = image;
  const std::size_t down = cfg.downsampling_blocks();
  for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
    const std::string base = "backbone.block" + std::to_string(i);
    ops::Conv2dOptions o{i < down ? std::size_t{2} : std::size_t{1}, 1, 1};
    x = ops::relu(ops::conv2d(x, tape.param(params.get(base + ".kernel")), tape.param(params.get(base + ".bias")), o));
  }
  return x;
}

inline std::vector<Anchor> anchors_for(const DetectorConfig& cfg, std::size_t fm_h, std::size_t fm_w) {
  return geometry::generate_anchors(fm_h, fm_w, Real(cfg.backbone.stride), cfg.anchor_scales, cfg.anchor_ratios);
}

// ---------------------------------------------------------------------------
// Region proposal network

struct RpnOutput {
  // [h, w, anchor_types * 5]; per anchor type t, channels 5t..5t+3 are box
  // offsets and channel 5t+4 is the objectness probability.
  Var maps;
  // Values at the anchor-grid cells, in generate_anchors order.
  Var offsets;     // [A, 4]
  Var objectness;  // [A]
};

inline RpnOutput rpn_forward(Tape& tape, Var feature, ParameterStore& params, const DetectorConfig& cfg) {
  Var trunk = ops::relu(ops::conv2d(feature, tape.param(params.get("rpn.trunk.kernel")),
                                    tape.param(params.get("rpn.trunk.bias")), {1, 1, 1}));
  Var raw = ops::conv2d(trunk, tape.param(params.get("rpn.head.kernel")), tape.param(params.get("rpn.head.bias")));
  Var maps = ops::channel_sigmoid(raw, kRpnValuesPerAnchor, kRpnValuesPerAnchor - 1);

  const std::size_t fh = feature.shape()[0], fw = feature.shape()[1];
  const std::size_t gh = geometry::anchor_grid_extent(fh), gw = geometry::anchor_grid_extent(fw);
  if (gh == 0 || gw == 0) throw ShapeError("rpn: feature map smaller than one anchor patch");
  const std::size_t types = cfg.anchor_types();
  const std::size_t channels = types * kRpnValuesPerAnchor;
  std::vector<std::size_t> off_idx, obj_idx;
  for (std::size_t gy = 0; gy < gh; ++gy) {
    for (std::size_t gx = 0; gx < gw; ++gx) {
      const std::size_t cell = geometry::anchor_patch_center_cell(gy) * fw + geometry::anchor_patch_center_cell(gx);
      for (std::size_t t = 0; t < types; ++t) {
        const std::size_t base = cell * channels + t * kRpnValuesPerAnchor;
        for (std::size_t j = 0; j < 4; ++j) off_idx.push_back(base + j);
        obj_idx.push_back(base + 4);
      }
    }
  }
  const std::size_t n = obj_idx.size();
  return RpnOutput{maps, ops::gather(maps, std::move(off_idx), {n, 4}), ops::gather(maps, std::move(obj_idx))};
}

enum class AnchorLabel : std::uint8_t { kNegative, kNeutral, kPositive };

struct AnchorAssignment {
  std::vector<AnchorLabel> labels;
  std::vector<long> matched_gt;                // -1 unless positive
  std::vector<RegressionTarget> targets;       // meaningful for positives only
  std::vector<bool> promoted;                  // positive only through the best-IoU rule

  std::size_t count(AnchorLabel l) const { return std::size_t(std::count(labels.begin(), labels.end(), l)); }
};

/// IoU >= pos_thr -> positive; max IoU < neg_thr -> negative; otherwise
/// neutral. A ground-truth box left without a positive gets its best-IoU
/// remaining anchor promoted (ties -> lower anchor index).
inline AnchorAssignment assign_anchor_labels(std::span<const Anchor> anchors, std::span<const Box> gt_boxes,
                                             Real image_h, Real image_w, Real pos_thr = Real(0.7),
                                             Real neg_thr = Real(0.4), geometry::BoxCoder coder = {}) {
  if (gt_boxes.empty()) throw ArgumentError("assign_anchor_labels: no ground-truth boxes");
  if (anchors.empty()) throw ArgumentError("assign_anchor_labels: no anchors");
  const std::size_t A = anchors.size(), G = gt_boxes.size();
  AnchorAssignment out;
  out.labels.assign(A, AnchorLabel::kNeutral);
  out.matched_gt.assign(A, -1);
  out.targets.assign(A, RegressionTarget{});
  out.promoted.assign(A, false);
  std::vector<Real> table(A * G);
  for (std::size_t a = 0; a < A; ++a) {
    std::size_t best_g = 0;
    for (std::size_t g = 0; g < G; ++g) {
      table[a * G + g] = geometry::iou(anchors[a].box, gt_boxes[g]);
      if (table[a * G + g] > table[a * G + best_g]) best_g = g;
    }
    const Real best = table[a * G + best_g];
    if (best >= pos_thr) {
      out.labels[a] = AnchorLabel::kPositive;
      out.matched_gt[a] = long(best_g);
    } else if (best < neg_thr) {
      out.labels[a] = AnchorLabel::kNegative;
    }
  }
  for (std::size_t g = 0; g < G; ++g) {
    bool covered = false;
    for (std::size_t a = 0; a < A && !covered; ++a) covered = out.matched_gt[a] == long(g);
    if (covered) continue;
    long pick = -1;
    for (std::size_t a = 0; a < A; ++a) {
      if (out.labels[a] == AnchorLabel::kPositive) continue;
      if (pick < 0 || table[a * G + g] > table[std::size_t(pick) * G + g]) pick = long(a);
    }
    if (pick < 0) continue;  // every anchor already positive for another box
    out.labels[std::size_t(pick)] = AnchorLabel::kPositive;
    out.matched_gt[std::size_t(pick)] = long(g);
    out.promoted[std::size_t(pick)] = true;
  }
  for (std::size_t a = 0; a < A; ++a) {
    if (out.labels[a] == AnchorLabel::kPositive) {
      out.targets[a] = coder.encode(anchors[a].box, gt_boxes[std::size_t(out.matched_gt[a])], image_h, image_w);
    }
  }
  return out;
}

struct LossTerms {
  Var total;
  Real classification = 0;
  Real regression = 0;
};

inline std::vector<std::size_t> sample_indices(std::vector<std::size_t> idx, std::size_t cap, std::mt19937_64* rng) {
  if (idx.size() <= cap) return idx;
  if (rng) {
    std::shuffle(idx.begin(), idx.end(), *rng);
    idx.resize(cap);
    std::sort(idx.begin(), idx.end());
  } else {
    idx.resize(cap);
  }
  return idx;
}

/// Binary cross-entropy over up to `sample_cap` positive and `sample_cap`
/// negative anchors plus MSE of positive-anchor offsets; neutrals ignored.
/// Without an rng, the first anchors of each label are kept.
inline LossTerms rpn_loss(const RpnOutput& out, const AnchorAssignment& assignment, std::size_t sample_cap = 128,
                          std::mt19937_64* rng = nullptr) {
  Tape& tape = *out.objectness.tape;
  const std::size_t A = out.objectness.value().size();
  if (assignment.labels.size() != A) {
    throw ShapeError("rpn_loss: assignment covers " + std::to_string(assignment.labels.size()) +
                     " anchors, RPN produced " + std::to_string(A));
  }
  std::vector<std::size_t> pos, neg;
  for (std::size_t a = 0; a < A; ++a) {
    if (assignment.labels[a] == AnchorLabel::kPositive) pos.push_back(a);
    if (assignment.labels[a] == AnchorLabel::kNegative) neg.push_back(a);
  }
  if (pos.empty() && neg.empty()) throw ArgumentError("rpn_loss: no positive or negative anchors");
  pos = sample_indices(std::move(pos), sample_cap, rng);
  neg = sample_indices(std::move(neg), sample_cap, rng);

  std::vector<std::size_t> cls_idx = pos;
  cls_idx.insert(cls_idx.end(), neg.begin(), neg.end());
  Tensor labels({cls_idx.size()});
  for (std::size_t i = 0; i < pos.size(); ++i) labels[i] = 1;
  Var cls = ops::loss(ops::gather(out.objectness, cls_idx), tape.constant(labels), ops::LossKind::kBinaryCrossEntropy);
  LossTerms terms{cls, cls.value().item(), 0};
  if (!pos.empty()) {
    std::vector<std::size_t> reg_idx;
    Tensor targets({pos.size() * 4});
    for (std::size_t i = 0; i < pos.size(); ++i) {
      const RegressionTarget& t = assignment.targets[pos[i]];
      const std::array<Real, 4> v{t.tx, t.ty, t.tw, t.th};
      for (std::size_t j = 0; j < 4; ++j) {
        reg_idx.push_back(pos[i] * 4 + j);
        targets[i * 4 + j] = v[j];
      }
    }
    Var reg = ops::loss(ops::gather(out.offsets, reg_idx), tape.constant(targets), ops::LossKind::kMse);
    terms.regression = reg.value().item();
    terms.total = ops::add(cls, reg);
  }
  return terms;
}

struct Proposal {
  Box box;
  Real objectness = 0;
  std::size_t anchor_index = 0;
};

/// Decodes every anchor, clips to the image, drops degenerate boxes and keeps
/// the `top_k` highest objectness scores (ties -> lower anchor index).
inline std::vector<Proposal> generate_proposals(const Tensor& offsets, const Tensor& objectness,
                                                std::span<const Anchor> anchors, Real image_h, Real image_w,
                                                std::size_t top_k = 64, geometry::BoxCoder coder = {}) {
  if (objectness.size() != anchors.size() || offsets.size() != 4 * anchors.size()) {
    throw ShapeError("generate_proposals: RPN outputs do not match anchor count");
  }
  std::vector<Proposal> all;
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    RegressionTarget t{offsets[4 * a], offsets[4 * a + 1], offsets[4 * a + 2], offsets[4 * a + 3]};
    Box b = coder.decode(anchors[a].box, t, image_h, image_w);
    if (!b.valid()) continue;
    all.push_back(Proposal{b, objectness[a], a});
  }
  std::stable_sort(all.begin(), all.end(), [](const Proposal& x, const Proposal& y) { return x.objectness > y.objectness; });
  if (all.size() > top_k) all.resize(top_k);
  return all;
}

// ---------------------------------------------------------------------------
// ROI pooling and the RCNN head

/// Feature-map sampling window for an image-space box: samples run from the
/// box's first to its last covered cell, collapsing to the box centre when
/// the box is narrower than one cell.
inline ops::SampleWindow roi_window(const Box& box, std::size_t fm_h, std::size_t fm_w, Real stride) {
  geometry::require_valid(box, "roi_pool");
  const Real tol = Real(1e-9);
  const Real fx1 = box.x1 / stride, fx2 = box.x2 / stride, fy1 = box.y1 / stride, fy2 = box.y2 / stride;
  if (fx1 < -tol || fy1 < -tol || fx2 > Real(fm_w) + tol || fy2 > Real(fm_h) + tol) {
    throw ArgumentError("roi_pool: box lies outside the feature map");
  }
  auto axis = [](Real a, Real b) {
    Real lo = a, hi = b - 1;
    if (hi < lo) lo = hi = Real(0.5) * (lo + hi);
    return std::pair{lo, hi};
  };
  auto [x0, x1] = axis(fx1, fx2);
  auto [y0, y1] = axis(fy1, fy2);
  return ops::SampleWindow{y0, x0, y1, x1};
}

/// Bilinear crop of `box` to 14x14xC, then 2x2/2 max pooling to 7x7xC.
inline Var roi_pool(Var feature, const Box& box, Real backbone_stride, std::size_t resample = 14) {
  const Shape& s = feature.shape();
  if (s.size() != 3) throw ShapeError("roi_pool: feature map must be [h,w,C]");
  const ops::SampleWindow w = roi_window(box, s[0], s[1], backbone_stride);
  return ops::maxpool2d(ops::crop_resize(feature, w, resample, resample), 2, 2);
}

struct RcnnOutput {
  Var probs;    // [2]: lesion, background
  Var offsets;  // [4] refinement relative to the proposal box
};

inline RcnnOutput rcnn_forward(Var pooled, ParameterStore& params, const DetectorConfig& cfg) {
  Tape& tape = *pooled.tape;
  const Shape& s = pooled.shape();
  if (s.size() != 3 || s[0] != cfg.roi_pooled_size || s[1] != cfg.roi_pooled_size ||
      s[2] != cfg.backbone.out_channels()) {
    throw ShapeError("rcnn_forward: pooled features have shape " + shape_str(s));
  }
  Var h = ops::relu(ops::conv2d(pooled, tape.param(params.get("rcnn.conv.kernel")),
                                tape.param(params.get("rcnn.conv.bias")), {1, 1, 1}));
  Var hidden = ops::relu(
      ops::linear(h, tape.param(params.get("rcnn.fc.weight")), tape.param(params.get("rcnn.fc.bias"))));
  Var probs = ops::softmax(
      ops::linear(hidden, tape.param(params.get("rcnn.cls.weight")), tape.param(params.get("rcnn.cls.bias"))));
  Var offsets = ops::linear(hidden, tape.param(params.get("rcnn.reg.weight")), tape.param(params.get("rcnn.reg.bias")));
  return RcnnOutput{probs, offsets};
}

struct RoiLabel {
  bool lesion = false;
  RegressionTarget target;  // used when lesion
};

/// Categorical cross-entropy over all proposals plus MSE of the refinement
/// offsets of lesion-labelled proposals.
inline LossTerms rcnn_loss(std::span<const RcnnOutput> outputs, std::span<const RoiLabel> labels) {
  if (outputs.empty()) throw ArgumentError("rcnn_loss: no proposals");
  if (outputs.size() != labels.size()) throw ShapeError("rcnn_loss: outputs and labels differ in length");
  Tape& tape = *outputs.front().probs.tape;
  std::vector<Var> probs, offsets;
  Tensor onehot({outputs.size(), 2});
  std::vector<Real> targets;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    probs.push_back(outputs[i].probs);
    onehot.at(i, labels[i].lesion ? kLesionClass : kBackgroundClass) = 1;
    if (labels[i].lesion) {
      offsets.push_back(outputs[i].offsets);
      const RegressionTarget& t = labels[i].target;
      targets.insert(targets.end(), {t.tx, t.ty, t.tw, t.th});
    }
  }
  Var stacked = ops::reshape(ops::concat(probs), {outputs.size(), 2});
  Var cls = ops::loss(stacked, tape.constant(onehot), ops::LossKind::kCategoricalCrossEntropy);
  LossTerms terms{cls, cls.value().item(), 0};
  if (!offsets.empty()) {
    Var reg = ops::loss(ops::concat(offsets), tape.constant(Tensor({targets.size()}, targets)), ops::LossKind::kMse);
    terms.regression = reg.value().item();
    terms.total = ops::add(cls, reg);
  }
  return terms;
}

// ---------------------------------------------------------------------------
// Inference

struct Detection {
  Box box;
  std::array<Real, 2> probs{0, 1};  // lesion, background
  Real lesion_probability() const { return probs[kLesionClass]; }
};

struct RpnPrediction {
  std::vector<Anchor> anchors;
  Tensor offsets;
  Tensor objectness;
};

inline RpnPrediction predict_rpn(const Tensor& feature, ParameterStore& params, const DetectorConfig& cfg) {
  Tape tape;
  RpnOutput out = rpn_forward(tape, tape.constant(feature), params, cfg);
  return RpnPrediction{anchors_for(cfg, feature.dim(0), feature.dim(1)), out.offsets.value(), out.objectness.value()};
}

inline std::vector<Proposal> propose(const Tensor& feature, Real image_h, Real image_w, ParameterStore& params,
                                     const DetectorConfig& cfg) {
  RpnPrediction p = predict_rpn(feature, params, cfg);
  return generate_proposals(p.offsets, p.objectness, p.anchors, image_h, image_w, cfg.proposal_top_k, cfg.coder());
}

/// Full detector pass: proposals are classified and refined by the head,
/// filtered by lesion probability and reduced with NMS. Sorted by lesion
/// probability, highest first.
inline std::vector<Detection> detect(const Tensor& image, ParameterStore& params, const DetectorConfig& cfg) {
  Tape tape;
  Var feature = backbone_forward(tape, tape.constant(image), params, cfg.backbone);
  const Real H = Real(image.dim(0)), W = Real(image.dim(1));
  const auto proposals = propose(feature.value(), H, W, params, cfg);
  const auto coder = cfg.coder();
  std::vector<Detection> candidates;
  for (const Proposal& p : proposals) {
    RcnnOutput o = rcnn_forward(roi_pool(feature, p.box, Real(cfg.backbone.stride), cfg.roi_resample_size), params, cfg);
    const Tensor& pr = o.probs.value();
    if (!(pr[kLesionClass] > cfg.score_threshold)) continue;
    const Tensor& t = o.offsets.value();
    Box refined = coder.decode(p.box, RegressionTarget{t[0], t[1], t[2], t[3]}, H, W);
    if (!refined.valid()) continue;
    candidates.push_back(Detection{refined, {pr[0], pr[1]}});
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const Detection& a, const Detection& b) { return a.lesion_probability() > b.lesion_probability(); });
  std::vector<Box> boxes;
  std::vector<Real> scores;
  for (const Detection& d : candidates) {
    boxes.push_back(d.box);
    scores.push_back(d.lesion_probability());
  }
  std::vector<Detection> kept;
  for (std::size_t i : geometry::nms(boxes, scores, cfg.nms_threshold)) kept.push_back(candidates[i]);
  return kept;
}

// ---------------------------------------------------------------------------
// Training losses for one image

/// RPN loss of one image: anchors labelled against `gt_boxes`.
inline LossTerms rpn_training_loss(Tape& tape, const Tensor& image, std::span<const Box> gt_boxes,
                                   ParameterStore& params, const DetectorConfig& cfg, std::mt19937_64& rng) {
  Var feature = backbone_forward(tape, tape.constant(image), params, cfg.backbone);
  RpnOutput out = rpn_forward(tape, feature, params, cfg);
  const auto anchors = anchors_for(cfg, feature.shape()[0], feature.shape()[1]);
  const auto assignment = assign_anchor_labels(anchors, gt_boxes, Real(image.dim(0)), Real(image.dim(1)),
                                               cfg.positive_iou, cfg.negative_iou, cfg.coder());
  return rpn_loss(out, assignment, cfg.rpn_sample_cap, &rng);
}

struct TrainingRoi {
  Box box;
  RoiLabel label;
};

inline Box jitter_box(const Box& b, Real amount, Real image_h, Real image_w, std::mt19937_64& rng) {
  std::uniform_real_distribution<Real> u(-amount, amount);
  const Real w = b.width(), h = b.height();
  const Real cx = b.cx() + u(rng) * w, cy = b.cy() + u(rng) * h;
  const Real nw = w * std::exp(u(rng)), nh = h * std::exp(u(rng));
  return geometry::clip_box(Box{cx - nw / 2, cy - nh / 2, cx + nw / 2, cy + nh / 2}, image_h, image_w);
}

/// Candidate boxes for the RCNN head (RPN proposals, the ground-truth boxes
/// and jittered copies of them), labelled by IoU and subsampled to at most
/// `rois_per_image` with at most `lesion_roi_fraction` lesions.
inline std::vector<TrainingRoi> sample_training_rois(std::span<const Proposal> proposals, std::span<const Box> gt_boxes,
                                                     Real image_h, Real image_w, const DetectorConfig& cfg,
                                                     std::mt19937_64& rng) {
  std::vector<Box> candidates;
  for (const Proposal& p : proposals) candidates.push_back(p.box);
  for (const Box& g : gt_boxes) {
    candidates.push_back(g);
    for (std::size_t j = 0; j < cfg.jittered_gt_rois; ++j) {
      Box b = jitter_box(g, Real(0.15), image_h, image_w, rng);
      if (b.valid()) candidates.push_back(b);
    }
  }
  const auto coder = cfg.coder();
  std::vector<TrainingRoi> lesion, background;
  for (const Box& c : candidates) {
    std::size_t best = 0;
    Real best_iou = -1;
    for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
      const Real v = geometry::iou(c, gt_boxes[g]);
      if (v > best_iou) best_iou = v, best = g;
    }
    if (best_iou >= cfg.lesion_iou) {
      lesion.push_back({c, {true, coder.encode(c, gt_boxes[best], image_h, image_w)}});
    } else {
      background.push_back({c, {false, {}}});
    }
  }
  std::shuffle(lesion.begin(), lesion.end(), rng);
  std::shuffle(background.begin(), background.end(), rng);
  const auto max_lesion = std::max<std::size_t>(1, std::size_t(std::lround(cfg.lesion_roi_fraction * Real(cfg.rois_per_image))));
  const std::size_t n_lesion = std::min(lesion.size(), max_lesion);
  const std::size_t n_background = std::min(background.size(), cfg.rois_per_image - n_lesion);
  std::vector<TrainingRoi> out(lesion.begin(), lesion.begin() + long(n_lesion));
  out.insert(out.end(), background.begin(), background.begin() + long(n_background));
  return out;
}

/// RCNN loss of one image. Proposals come from the current RPN on a detached
/// copy of the features; gradients reach the backbone through ROI pooling.
inline LossTerms rcnn_training_loss(Tape& tape, const Tensor& image, std::span<const Box> gt_boxes,
                                    ParameterStore& params, const DetectorConfig& cfg, std::mt19937_64& rng) {
  Var feature = backbone_forward(tape, tape.constant(image), params, cfg.backbone);
  const Real H = Real(image.dim(0)), W = Real(image.dim(1));
  const auto proposals = propose(feature.value(), H, W, params, cfg);
  const auto rois = sample_training_rois(proposals, gt_boxes, H, W, cfg, rng);
  std::vector<RcnnOutput> outputs;
  std::vector<RoiLabel> labels;
  for (const TrainingRoi& r : rois) {
    outputs.push_back(rcnn_forward(roi_pool(feature, r.box, Real(cfg.backbone.stride), cfg.roi_resample_size), params, cfg));
    labels.push_back(r.label);
  }
  return rcnn_loss(outputs, labels);
}

}  // namespace skinseg::detection
