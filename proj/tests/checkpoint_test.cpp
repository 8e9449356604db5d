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

#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "skinseg/pipeline.hpp"

namespace {

using namespace skinseg;
namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  return fs::temp_directory_path() / ("skinseg_ckpt_" + std::to_string(::getpid()) + "_" + name);
}

Model small_model(std::uint64_t seed) {
  detection::DetectorConfig det;
  det.backbone.channels = {4, 8};
  det.backbone.stride = 4;
  det.scale_anchors_to(64);
  det.rpn_channels = 8;
  det.head_channels = 4;
  det.head_hidden = 8;
  det.score_threshold = 0;
  skinnet::SkinNetConfig seg;
  seg.input_size = 24;
  seg.layers_per_block = 1;
  seg.growth = 2;
  seg.dilation_rates = {1, 2};
  seg.bottleneck_channels = 4;
  return Model::create(det, seg, seed, 64);
}

TEST(Checkpoint, ByteLayoutOfASmallStore) {
  ParameterStore p;
  p.add("b", Tensor({2}, Buffer{1.5, -2}));
  p.add("a", Tensor({1, 1}, Buffer{0.25}));
  const std::string bytes = encode_checkpoint(p, nlohmann::json{{"k", 1}});
  ASSERT_EQ(bytes.substr(0, 8), "SKSGCKPT");
  EXPECT_EQ(bytes.substr(8, 4), std::string("\x01\x00\x00\x00", 4));
  std::uint64_t mlen = 0;
  for (int i = 0; i < 8; ++i) mlen |= std::uint64_t(std::uint8_t(bytes[12 + i])) << (8 * i);
  const auto manifest = nlohmann::json::parse(bytes.substr(20, mlen));
  EXPECT_EQ(manifest["dtype"], "float64");
  EXPECT_EQ(manifest["hyperparameters"]["k"], 1);
  ASSERT_EQ(manifest["tensors"].size(), 2u);
  EXPECT_EQ(manifest["tensors"][0]["name"], "a");  // name order
  EXPECT_EQ(bytes.size(), 20 + mlen + 3 * 8);
  // Little-endian IEEE doubles: 0.25, 1.5, -2.
  const std::uint64_t expect[] = {0x3FD0000000000000ULL, 0x3FF8000000000000ULL, 0xC000000000000000ULL};
  for (int k = 0; k < 3; ++k) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(std::uint8_t(bytes[20 + mlen + 8 * k + i])) << (8 * i);
    EXPECT_EQ(v, expect[k]);
  }
}

TEST(Checkpoint, ModelRoundTripIsBitExact) {
  Model m = small_model(5);
  const fs::path path = scratch("model.ckpt");
  m.save(path);
  Model back = Model::load(path);
  EXPECT_TRUE(back.params == m.params);
  EXPECT_EQ(back.hyperparameters(), m.hyperparameters());
  EXPECT_EQ(back.input_size, 64u);
  const auto s = data::synth_generate(1, 3, 64).front();
  const auto d1 = detection::detect(s.image, m.params, m.detector);
  const auto d2 = detection::detect(s.image, back.params, back.detector);
  ASSERT_EQ(d1.size(), d2.size());
  for (std::size_t i = 0; i < d1.size(); ++i) EXPECT_EQ(d1[i].box, d2[i].box);
  EXPECT_EQ(pipeline::segment_full(s.image, m).mask, pipeline::segment_full(s.image, back).mask);
  fs::remove(path);
}

TEST(Checkpoint, StructuralErrors) {
  ParameterStore p;
  p.add("w", Tensor({3}, Buffer{1, 2, 3}));
  const std::string good = encode_checkpoint(p, {});
  EXPECT_NO_THROW(decode_checkpoint(good));
  std::string bad = good;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), CheckpointError);
  bad = good;
  bad[8] = 2;
  EXPECT_THROW(decode_checkpoint(bad), CheckpointError);
  EXPECT_THROW(decode_checkpoint(good + "z"), CheckpointError);
  EXPECT_THROW(decode_checkpoint(good.substr(0, good.size() - 1)), CheckpointError);
  bad = good;
  bad[19] = '\x7f';  // absurd manifest length
  EXPECT_THROW(decode_checkpoint(bad), CheckpointError);
  EXPECT_THROW(load_checkpoint(scratch("does_not_exist")), CheckpointError);
}

TEST(Checkpoint, EveryTruncationIsRejected) {
  Model m = small_model(1);
  ParameterStore p;
  p.add("x", Tensor({4, 2}, 0.5));
  p.add("y", Tensor({3}, -1));
  const std::string good = encode_checkpoint(p, m.hyperparameters());
  for (std::size_t n = 0; n < good.size(); ++n) {
    EXPECT_THROW(decode_checkpoint(good.substr(0, n)), CheckpointError) << "length " << n;
  }
}

TEST(Checkpoint, ManifestCorruptionIsRejected) {
  auto with_manifest = [](const std::string& text) {
    std::string out = "SKSGCKPT";
    out += std::string("\x01\x00\x00\x00", 4);
    for (int i = 0; i < 8; ++i) out.push_back(char((text.size() >> (8 * i)) & 0xFF));
    return out + text;
  };
  EXPECT_THROW(decode_checkpoint(with_manifest("{not json")), CheckpointError);
  EXPECT_THROW(decode_checkpoint(with_manifest("{}")), CheckpointError);
  EXPECT_THROW(decode_checkpoint(with_manifest(R"({"tensors":[{"name":"a","shape":[2],"count":3}]})")), CheckpointError);
  EXPECT_THROW(decode_checkpoint(with_manifest(R"({"tensors":[{"name":"a","shape":"x","count":1}]})")), CheckpointError);
  EXPECT_THROW(
      decode_checkpoint(with_manifest(R"({"tensors":[{"name":"a","shape":[1],"count":1},{"name":"a","shape":[1],"count":1}]})") +
                        std::string(16, '\0')),
      CheckpointError);
}

TEST(Checkpoint, ModelLoadChecksParameterShapes) {
  Model m = small_model(2);
  const fs::path path = scratch("shapes.ckpt");
  ParameterStore wrong = m.params;
  wrong.all().erase("rcnn.cls.bias");
  wrong.add("rcnn.cls.bias", Tensor({3}));
  save_checkpoint(path, wrong, m.hyperparameters());
  EXPECT_THROW(Model::load(path), CheckpointError);
  ParameterStore extra = m.params;
  extra.add("zzz", Tensor({1}));
  save_checkpoint(path, extra, m.hyperparameters());
  EXPECT_THROW(Model::load(path), CheckpointError);
  save_checkpoint(path, m.params, {});
  EXPECT_THROW(Model::load(path), CheckpointError);
  fs::remove(path);
}

}  // namespace
