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

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "skinseg/detection.hpp"

namespace {

using namespace skinseg;
using namespace skinseg::detection;

DetectorConfig desk_detector() {
  DetectorConfig cfg;
  cfg.backbone.stride = 4;
  cfg.scale_anchors_to(64);
  return cfg;
}

struct Fixture {
  DetectorConfig cfg = desk_detector();
  ParameterStore params;
  std::mt19937_64 rng{3};
  Fixture() { init_detector_params(params, cfg, rng); }
};

TEST(Backbone, OutputShapeFollowsStride) {
  Fixture f;
  Tape tape;
  const Tensor image = oracle::random_tensor({64, 48, 3}, f.rng, 0, 1);
  Var feat = backbone_forward(tape, tape.constant(image), f.params, f.cfg.backbone);
  EXPECT_EQ(feat.shape(), (Shape{16, 12, 32}));
  EXPECT_THROW(backbone_forward(tape, tape.constant(Tensor({30, 32, 3})), f.params, f.cfg.backbone), ShapeError);
}

TEST(Rpn, MapsHaveNineTimesFiveChannels) {
  Fixture f;
  Tape tape;
  const Tensor feature = oracle::random_tensor({16, 16, 32}, f.rng, 0, 1);
  RpnOutput out = rpn_forward(tape, tape.constant(feature), f.params, f.cfg);
  EXPECT_EQ(out.maps.shape(), (Shape{16, 16, 45}));
  EXPECT_EQ(out.offsets.shape(), (Shape{5 * 5 * 9, 4}));
  EXPECT_EQ(out.objectness.shape(), (Shape{5 * 5 * 9}));

  const auto anchors = anchors_for(f.cfg, 16, 16);
  ASSERT_EQ(anchors.size(), out.objectness.value().size());
  const Tensor& maps = out.maps.value();
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    const std::size_t t = anchors[a].scale_index * 3 + anchors[a].ratio_index;
    const std::size_t r = anchors[a].grid_row * 3 + 1, c = anchors[a].grid_col * 3 + 1;
    const Real p = out.objectness.value()[a];
    EXPECT_EQ(p, maps.at(r, c, 5 * t + 4));
    EXPECT_GT(p, 0);
    EXPECT_LT(p, 1);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(out.offsets.value().at(a, j), maps.at(r, c, 5 * t + j));
  }
}

TEST(Rpn, LossMatchesClosedForm) {
  // Three anchors: positive, negative, neutral.
  Tape tape;
  Var obj = tape.leaf(Tensor({3}, Buffer{0.8, 0.3, 0.5}));
  Var off = tape.leaf(Tensor({3, 4}, Buffer{0.1, 0.2, 0.3, 0.4, 9, 9, 9, 9, 9, 9, 9, 9}));
  RpnOutput out{off, off, obj};
  AnchorAssignment as;
  as.labels = {AnchorLabel::kPositive, AnchorLabel::kNegative, AnchorLabel::kNeutral};
  as.matched_gt = {0, -1, -1};
  as.targets = {{0, 0, 0, 1}, {}, {}};
  as.promoted = {false, false, false};
  LossTerms t = rpn_loss(out, as);
  const Real cls = -(std::log(0.8) + std::log(0.7)) / 2;
  const Real reg = (0.01 + 0.04 + 0.09 + 0.36) / 4;
  EXPECT_NEAR(t.classification, cls, 1e-12);
  EXPECT_NEAR(t.regression, reg, 1e-12);
  EXPECT_NEAR(t.total.value().item(), cls + reg, 1e-12);
  tape.backward(t.total);
  EXPECT_EQ(tape.grad(obj)[2], 0);  // neutral anchor is ignored
  for (std::size_t j = 4; j < 12; ++j) EXPECT_EQ(tape.grad(off)[j], 0);
}

TEST(Rpn, SampleCapLimitsEachLabel) {
  Tape tape;
  const std::size_t A = 20;
  Var obj = tape.leaf(Tensor({A}, 0.5));
  Var off = tape.leaf(Tensor({A, 4}));
  AnchorAssignment as;
  as.labels.assign(A, AnchorLabel::kNegative);
  for (std::size_t a = 0; a < 6; ++a) as.labels[a] = AnchorLabel::kPositive;
  as.matched_gt.assign(A, -1);
  as.targets.assign(A, {});
  as.promoted.assign(A, false);
  std::mt19937_64 rng(1);
  LossTerms t = rpn_loss({off, off, obj}, as, 3, &rng);
  tape.backward(t.total);
  std::size_t touched_pos = 0, touched_neg = 0;
  for (std::size_t a = 0; a < A; ++a) {
    if (tape.grad(obj)[a] == 0) continue;
    (a < 6 ? touched_pos : touched_neg) += 1;
  }
  EXPECT_EQ(touched_pos, 3u);
  EXPECT_EQ(touched_neg, 3u);
}

TEST(RoiPool, CropsFourteenThenPoolsToSeven) {
  std::mt19937_64 rng(9);
  const Tensor feature = oracle::random_tensor({16, 16, 5}, rng);
  const geometry::Box box{8, 12, 40, 56};  // image pixels, stride 4
  Tape tape;
  Var pooled = roi_pool(tape.constant(feature), box, 4);
  ASSERT_EQ(pooled.shape(), (Shape{7, 7, 5}));
  const Tensor crop = oracle::resample(feature, 3, 2, 13, 9, 14, 14);
  const Tensor want = oracle::maxpool(crop, 2, 2);
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(pooled.value()[i], want[i], 1e-12);
}

TEST(RoiPool, WindowRules) {
  const ops::SampleWindow w = roi_window({4, 4, 6, 6}, 16, 16, 4);  // under one cell
  EXPECT_EQ(w.y0, w.y1);
  EXPECT_EQ(w.x0, w.x1);
  EXPECT_THROW(roi_window({-8, 0, 8, 8}, 16, 16, 4), ArgumentError);
  EXPECT_THROW(roi_window({0, 0, 70, 8}, 16, 16, 4), ArgumentError);
  EXPECT_THROW(roi_window({5, 0, 5, 8}, 16, 16, 4), ArgumentError);
}

TEST(Rcnn, OutputsProbabilitiesAndOffsets) {
  Fixture f;
  Tape tape;
  Var pooled = tape.constant(oracle::random_tensor({7, 7, 32}, f.rng, 0, 1));
  RcnnOutput o = rcnn_forward(pooled, f.params, f.cfg);
  EXPECT_EQ(o.probs.shape(), (Shape{2}));
  EXPECT_EQ(o.offsets.shape(), (Shape{4}));
  EXPECT_NEAR(o.probs.value()[0] + o.probs.value()[1], 1, 1e-12);
  EXPECT_THROW(rcnn_forward(tape.constant(Tensor({6, 6, 32})), f.params, f.cfg), ShapeError);
}

TEST(Rcnn, LossMatchesClosedForm) {
  Tape tape;
  RcnnOutput a{tape.leaf(Tensor({2}, Buffer{0.9, 0.1})), tape.leaf(Tensor({4}, Buffer{1, 0, 0, 0}))};
  RcnnOutput b{tape.leaf(Tensor({2}, Buffer{0.4, 0.6})), tape.leaf(Tensor({4}, Buffer{5, 5, 5, 5}))};
  const RcnnOutput outs[] = {a, b};
  const RoiLabel labels[] = {{true, {0, 0, 0, 0}}, {false, {}}};
  LossTerms t = rcnn_loss(outs, labels);
  EXPECT_NEAR(t.classification, -(std::log(0.9) + std::log(0.6)) / 2, 1e-12);
  EXPECT_NEAR(t.regression, 0.25, 1e-12);
  EXPECT_THROW(rcnn_loss({}, {}), ArgumentError);
}

TEST(Proposals, TopKByObjectnessWithStableTies) {
  const Real scales[] = {8};
  const geometry::AspectRatio ratios[] = {{1, 1}};
  const auto anchors = geometry::generate_anchors(9, 9, 4, scales, ratios);
  ASSERT_EQ(anchors.size(), 9u);
  Tensor obj({9}, Buffer{0.1, 0.9, 0.5, 0.9, 0.2, 0.3, 0.5, 0.05, 0.7});
  const auto props = generate_proposals(Tensor({9, 4}), obj, anchors, 36, 36, 4);
  ASSERT_EQ(props.size(), 4u);
  EXPECT_EQ(props[0].anchor_index, 1u);
  EXPECT_EQ(props[1].anchor_index, 3u);
  EXPECT_EQ(props[2].anchor_index, 8u);
  EXPECT_EQ(props[3].anchor_index, 2u);
  EXPECT_EQ(props[0].box, anchors[1].box);
}

TEST(Detect, OutputInvariants) {
  Fixture f;
  f.cfg.score_threshold = 0;  // keep every candidate so NMS has work to do
  std::size_t seen = 0;
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor image = oracle::random_tensor({64, 64, 3}, f.rng, 0, 1);
    const auto dets = detect(image, f.params, f.cfg);
    seen += dets.size();
    for (std::size_t i = 0; i < dets.size(); ++i) {
      const auto& d = dets[i];
      EXPECT_TRUE(d.box.valid());
      EXPECT_GE(d.box.x1, 0);
      EXPECT_LE(d.box.x2, 64);
      EXPECT_NEAR(d.probs[0] + d.probs[1], 1, 1e-12);
      if (i > 0) {
        EXPECT_GE(dets[i - 1].lesion_probability(), d.lesion_probability());
      }
      for (std::size_t j = 0; j < i; ++j) EXPECT_LE(geometry::iou(dets[j].box, d.box), f.cfg.nms_threshold);
    }
  }
  EXPECT_GT(seen, 0u);
}

TEST(TrainingRois, LabelsAndQuota) {
  DetectorConfig cfg = desk_detector();
  std::mt19937_64 rng(4);
  const geometry::Box gt[] = {{10, 10, 40, 40}};
  std::vector<Proposal> props;
  for (int i = 0; i < 40; ++i) props.push_back({oracle::random_int_box(rng, 64), 0.5, 0});
  const auto rois = sample_training_rois(props, gt, 64, 64, cfg, rng);
  EXPECT_LE(rois.size(), cfg.rois_per_image);
  std::size_t lesions = 0;
  for (const auto& r : rois) {
    EXPECT_EQ(r.label.lesion, geometry::iou(r.box, gt[0]) >= cfg.lesion_iou);
    lesions += r.label.lesion;
  }
  EXPECT_GE(lesions, 1u);  // the ground-truth box itself is always a candidate
  EXPECT_LE(lesions, cfg.rois_per_image / 2);
}

TEST(Config, DefaultsAndValidation) {
  DetectorConfig cfg;
  EXPECT_EQ(cfg.positive_iou, Real(0.7));
  EXPECT_EQ(cfg.negative_iou, Real(0.4));
  EXPECT_EQ(cfg.roi_resample_size, 14u);
  EXPECT_EQ(cfg.roi_pooled_size, 7u);
  EXPECT_NO_THROW(cfg.validate());
  cfg.negative_iou = 0.8;
  EXPECT_THROW(cfg.validate(), ArgumentError);
  cfg = DetectorConfig{};
  cfg.backbone.stride = 6;
  EXPECT_THROW(cfg.validate(), ArgumentError);
  cfg = DetectorConfig{};
  cfg.roi_resample_size = 12;
  EXPECT_THROW(cfg.validate(), ArgumentError);
}

}  // namespace
