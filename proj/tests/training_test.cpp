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

#include <set>

#include "oracles.hpp"
#include "skinseg/training.hpp"

namespace {

using namespace skinseg;
using namespace skinseg::training;

// Small enough that a full train() call takes a few seconds.
TrainConfig tiny_config() {
  TrainConfig c;
  c.input_size = 32;
  c.epochs = 2;
  c.skinnet_epochs = 1;
  c.detector.backbone.channels = {4, 8};
  c.detector.backbone.stride = 4;
  c.detector.scale_anchors_to(32);
  c.detector.rpn_channels = 8;
  c.detector.head_channels = 4;
  c.detector.head_hidden = 16;
  c.detector.proposal_top_k = 16;
  c.detector.rois_per_image = 8;
  c.skinnet.input_size = 24;
  c.skinnet.layers_per_block = 1;
  c.skinnet.growth = 2;
  c.skinnet.dilation_rates = {1, 2};
  c.skinnet.bottleneck_channels = 4;
  return c;
}

std::map<std::string, Buffer> values_of(const ParameterStore& p) {
  std::map<std::string, Buffer> out;
  for (const auto& [name, t] : p.all()) out[name] = Buffer(t.values().begin(), t.values().end());
  return out;
}

// Names of parameter groups whose values differ between two snapshots.
std::set<std::string> changed_groups(const std::map<std::string, Buffer>& a, const std::map<std::string, Buffer>& b) {
  std::set<std::string> out;
  for (const auto& [name, v] : a) {
    if (v != b.at(name)) out.insert(name.substr(0, name.find('.')));
  }
  return out;
}

TEST(FourStep, EachStepMovesExactlyItsParameterGroups) {
  const TrainConfig cfg = tiny_config();
  Model model = Model::create(cfg.detector, cfg.skinnet, 1, cfg.input_size);
  OptimizerStates optim = OptimizerStates::create(model.params);
  const auto batch = data::synth_generate(3, 5, 32);
  std::mt19937_64 rng(2);
  auto before = values_of(model.params);
  std::vector<std::pair<Stage, std::set<std::string>>> seen;
  four_step_train_batch(batch, model, optim, 1e-3, rng, [&](Stage s, const ParameterStore& p) {
    auto after = values_of(p);
    seen.emplace_back(s, changed_groups(before, after));
    before = std::move(after);
  });
  using G = std::set<std::string>;
  ASSERT_EQ(seen.size(), 4u);
  EXPECT_EQ(seen[0].first, Stage::kRpnWithBase);
  EXPECT_EQ(seen[0].second, (G{"backbone", "rpn"}));
  EXPECT_EQ(seen[1].first, Stage::kRcnnWithBase);
  EXPECT_EQ(seen[1].second, (G{"backbone", "rcnn"}));
  EXPECT_EQ(seen[2].first, Stage::kRpn);
  EXPECT_EQ(seen[2].second, (G{"rpn"}));
  EXPECT_EQ(seen[3].first, Stage::kRcnn);
  EXPECT_EQ(seen[3].second, (G{"rcnn"}));
  for (Stage s : kDetectorStages) EXPECT_EQ(optim[s].step, 1u);
  EXPECT_EQ(optim[Stage::kSkinNet].step, 0u);
  // Everything is trainable again afterwards.
  for (const auto& [name, t] : model.params.all()) EXPECT_TRUE(t.requires_grad()) << name;
}

TEST(FourStep, SegmenterStepTouchesOnlySkinNet) {
  const TrainConfig cfg = tiny_config();
  Model model = Model::create(cfg.detector, cfg.skinnet, 1, cfg.input_size);
  OptimizerStates optim = OptimizerStates::create(model.params);
  const auto batch = data::synth_generate(2, 6, 32);
  const auto before = values_of(model.params);
  const StepRecord r = skinnet_train_batch(batch, model, optim, 1e-3);
  EXPECT_EQ(changed_groups(before, values_of(model.params)), (std::set<std::string>{"skinnet"}));
  ASSERT_TRUE(r.dice);
  EXPECT_FALSE(r.rpn_cls);
  EXPECT_NEAR(*r.dice, r.total, 1e-12);
}

TEST(FourStep, BatchWithoutBoxesIsSkipped) {
  const TrainConfig cfg = tiny_config();
  Model model = Model::create(cfg.detector, cfg.skinnet, 1, cfg.input_size);
  OptimizerStates optim = OptimizerStates::create(model.params);
  data::LabeledSample empty{"e", Tensor({32, 32, 3}), geometry::Mask(32, 32), {}};
  const data::LabeledSample batch[] = {empty};
  const auto before = values_of(model.params);
  std::mt19937_64 rng(0);
  EXPECT_TRUE(four_step_train_batch(batch, model, optim, 1e-3, rng).empty());
  EXPECT_EQ(values_of(model.params), before);
}

TEST(StageSets, PrefixesPerStage) {
  using P = std::vector<std::string>;
  EXPECT_EQ(trainable_prefixes(Stage::kRpnWithBase), (P{"backbone.", "rpn."}));
  EXPECT_EQ(trainable_prefixes(Stage::kRcnnWithBase), (P{"backbone.", "rcnn."}));
  EXPECT_EQ(trainable_prefixes(Stage::kRpn), (P{"rpn."}));
  EXPECT_EQ(trainable_prefixes(Stage::kRcnn), (P{"rcnn."}));
  EXPECT_EQ(trainable_prefixes(Stage::kSkinNet), (P{"skinnet."}));
}

TEST(Train, ZeroEpochsReturnsTheInitialModel) {
  TrainConfig cfg = tiny_config();
  cfg.epochs = 0;
  cfg.skinnet_epochs = 0;
  cfg.seed = 9;
  const auto data = data::synth_generate(10, 1, 32);
  const TrainResult r = train(data, cfg);
  const Model fresh = Model::create(cfg.detector, cfg.skinnet, 9, 32);
  EXPECT_TRUE(r.model.params == fresh.params);
  EXPECT_TRUE(r.log.steps.empty());
  EXPECT_TRUE(r.log.validation.empty());
}

TEST(Train, DeterministicForAFixedSeed) {
  TrainConfig cfg = tiny_config();
  cfg.seed = 4;
  cfg.flips = true;
  const auto data = data::synth_generate(12, 2, 32);
  const TrainResult a = train(data, cfg), b = train(data, cfg);
  EXPECT_TRUE(a.model.params == b.model.params);
  EXPECT_EQ(to_jsonl(a.log), to_jsonl(b.log));
  EXPECT_EQ(a.split.train, b.split.train);
  cfg.seed = 5;
  const TrainResult c = train(data, cfg);
  EXPECT_FALSE(a.model.params == c.model.params);
}

TEST(Train, LogShapeAndSplit) {
  const TrainConfig cfg = tiny_config();
  const auto data = data::synth_generate(20, 3, 48);  // resized to 32 on the way in
  const TrainResult r = train(data, cfg);
  EXPECT_EQ(r.split.train.size() + r.split.validation.size() + r.split.test.size(), 20u);
  const std::size_t batches = (r.split.train.size() + 3) / 4;
  EXPECT_EQ(r.log.steps.size(), cfg.epochs * batches * 4 + 1 * batches);
  for (std::size_t i = 0; i < r.log.steps.size(); ++i) EXPECT_EQ(r.log.steps[i].step, i);
  EXPECT_EQ(r.log.validation.size(), cfg.epochs + 1);
  EXPECT_EQ(r.model.input_size, 32u);
  const std::string jsonl = to_jsonl(r.log);
  EXPECT_EQ(jsonl.find("seconds"), std::string::npos);
  EXPECT_NE(timing_jsonl(r.log).find("seconds"), std::string::npos);
  std::istringstream lines(jsonl);
  std::string line;
  while (std::getline(lines, line)) EXPECT_TRUE(nlohmann::json::accept(line));
}

TEST(Train, RpnLossFallsOverTraining) {
  TrainConfig cfg = tiny_config();
  cfg.epochs = 8;
  cfg.skinnet_epochs = 0;
  cfg.split = {1, 0, 0};
  const auto data = data::synth_generate(16, 8, 32);
  const TrainResult r = train(data, cfg);
  std::vector<Real> rpn;
  for (const auto& s : r.log.steps) {
    if (s.stage == Stage::kRpnWithBase) rpn.push_back(s.total);
  }
  ASSERT_EQ(rpn.size(), 32u);
  const Real head = std::accumulate(rpn.begin(), rpn.begin() + 8, Real(0)) / 8;
  const Real tail = std::accumulate(rpn.end() - 8, rpn.end(), Real(0)) / 8;
  EXPECT_LT(tail, head);
}

TEST(Augmentation, FlipKeepsBoxConsistentAndIsAnInvolution) {
  const auto s = data::synth_generate(1, 3, 32).front();
  for (bool h : {false, true}) {
    for (bool v : {false, true}) {
      const auto f = flip(s, h, v);
      EXPECT_EQ(f.gt_box, geometry::mask_to_bbox(f.mask));
      EXPECT_EQ(f.mask.count(), s.mask.count());
      const auto back = flip(f, h, v);
      EXPECT_EQ(back.mask, s.mask);
      EXPECT_TRUE(oracle::bitwise_equal(back.image, s.image));
    }
  }
  const auto f = flip(s, true, false);
  EXPECT_EQ(f.gt_box.x1, 32 - s.gt_box.x2);
  EXPECT_EQ(f.gt_box.y1, s.gt_box.y1);
}

TEST(BestIou, PicksTheClosestDetection) {
  const geometry::Box gt{0, 0, 10, 10};
  const detection::Detection d[] = {{{20, 20, 30, 30}, {0.9, 0.1}}, {{0, 0, 10, 5}, {0.6, 0.4}}};
  EXPECT_NEAR(best_iou(d, gt), 0.5, 1e-12);
  EXPECT_EQ(best_iou({}, gt), 0);
}

TEST(Config, DeskScaleValues) {
  const TrainConfig c = desk_scale();
  EXPECT_EQ(c.input_size, 64u);
  EXPECT_EQ(c.epochs, 30u);
  EXPECT_EQ(c.segmenter_epochs(), 10u);
  EXPECT_EQ(c.skinnet.input_size, 32u);
  EXPECT_EQ(c.detector.backbone.stride, 4u);
  EXPECT_EQ(c.detector.anchor_scales, (std::vector<Real>{16, 32, 64}));
  EXPECT_EQ(c.learning_rate, Real(0.001));
  EXPECT_EQ(c.batch_size, 4u);
  EXPECT_NO_THROW(c.validate());
  EXPECT_NO_THROW(full_scale().validate());
}

TEST(Config, JsonRoundTripAndErrors) {
  TrainConfig c = tiny_config();
  c.seed = 77;
  c.flips = true;
  c.detector.regression = geometry::RegressionMode::kRawCoordinates;
  TrainConfig back = desk_scale();
  apply_json(to_json(c), back);
  EXPECT_EQ(to_json(back), to_json(c));

  TrainConfig d = desk_scale();
  EXPECT_THROW(apply_json(nlohmann::json{{"epochz", 3}}, d), ConfigError);
  EXPECT_THROW(apply_json(nlohmann::json{{"split", {0.5, 0.5, 0.5}}}, d), ConfigError);
  EXPECT_THROW(apply_json(nlohmann::json{{"epochs", "many"}}, d), ConfigError);
  EXPECT_THROW(apply_json(nlohmann::json{{"detector", {{"regression", "diagonal"}}}}, d), ConfigError);
  EXPECT_THROW(apply_json(nlohmann::json::array(), d), ConfigError);
  EXPECT_EQ(to_json(d), to_json(desk_scale()));  // failed updates leave the config alone
  EXPECT_NO_THROW(apply_json(nlohmann::json{{"dataset", "x"}}, d, {"dataset"}));
}

}  // namespace
