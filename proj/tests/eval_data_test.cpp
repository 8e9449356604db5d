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
#include <set>

#include "oracles.hpp"
#include "skinseg/metrics.hpp"
#include "skinseg/pipeline.hpp"

namespace {

using namespace skinseg;
using geometry::Box;
using geometry::Mask;

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("skinseg_eval_data_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// ---------------------------------------------------------------------------
// Metrics

TEST(Metrics, MatchConfusionCountsAndDefinitions) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t h = 1 + rng() % 12, w = 1 + rng() % 12;
    const Mask gt = oracle::random_mask(h, w, 0.4, rng), pred = oracle::random_mask(h, w, 0.4, rng);
    const auto c = oracle::confusion(pred, gt);
    const auto r = eval::compute_metrics(pred, gt);
    ASSERT_EQ(r.tp, c.tp);
    ASSERT_EQ(r.fp, c.fp);
    ASSERT_EQ(r.tn, c.tn);
    ASSERT_EQ(r.fn, c.fn);
    const double n = double(h * w);
    EXPECT_NEAR(r.ac, double(c.tp + c.tn) / n, 1e-15);
    if (c.tp + c.fn > 0) {
      EXPECT_NEAR(r.se, double(c.tp) / double(c.tp + c.fn), 1e-15);
    }
    if (c.tn + c.fp > 0) {
      EXPECT_NEAR(r.sp, double(c.tn) / double(c.tn + c.fp), 1e-15);
    }
    if (c.tp + c.fp + c.fn > 0) {
      EXPECT_NEAR(r.ji, double(c.tp) / double(c.tp + c.fp + c.fn), 1e-15);
      EXPECT_NEAR(r.dc, 2.0 * double(c.tp) / double(2 * c.tp + c.fp + c.fn), 1e-15);
      // Dice and Jaccard are tied by DC = 2 JI / (1 + JI).
      EXPECT_NEAR(r.dc, 2 * r.ji / (1 + r.ji), 1e-12);
    }
    for (Real v : {r.ac, r.dc, r.ji, r.se, r.sp}) {
      EXPECT_GE(v, 0);
      EXPECT_LE(v, 1);
    }
  }
}

TEST(Metrics, PerfectPredictionScoresOne) {
  std::mt19937_64 rng(2);
  const Mask gt = oracle::random_mask(10, 10, 0.5, rng);
  const auto r = eval::compute_metrics(gt, gt);
  for (Real v : {r.ac, r.dc, r.ji, r.se, r.sp}) EXPECT_EQ(v, 1);
  EXPECT_FALSE(r.vacuous());
}

TEST(Metrics, VacuousRatiosAreOneAndFlagged) {
  const Mask empty(4, 4);
  const auto r = eval::compute_metrics(empty, empty);
  EXPECT_TRUE(r.se_vacuous);
  EXPECT_TRUE(r.overlap_vacuous);
  EXPECT_FALSE(r.sp_vacuous);
  EXPECT_EQ(r.dc, 1);
  EXPECT_EQ(r.ji, 1);
  EXPECT_EQ(r.se, 1);
  Mask full(2, 2, {1, 1, 1, 1});
  const auto f = eval::compute_metrics(full, full);
  EXPECT_TRUE(f.sp_vacuous);
  EXPECT_EQ(f.sp, 1);
  EXPECT_THROW(eval::compute_metrics(Mask(2, 3), Mask(3, 2)), ShapeError);
}

TEST(Metrics, HandComputedExample) {
  // TP 2, FP 1, FN 1, TN 5
  const Mask gt(3, 3, {1, 1, 1, 0, 0, 0, 0, 0, 0});
  const Mask pred(3, 3, {1, 1, 0, 1, 0, 0, 0, 0, 0});
  const auto r = eval::compute_metrics(pred, gt);
  EXPECT_NEAR(r.ac, 7.0 / 9.0, 1e-15);
  EXPECT_NEAR(r.dc, 4.0 / 6.0, 1e-15);
  EXPECT_NEAR(r.ji, 2.0 / 4.0, 1e-15);
  EXPECT_NEAR(r.se, 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(r.sp, 5.0 / 6.0, 1e-15);
}

TEST(Metrics, AggregateIsMeanAndPopulationStd) {
  std::vector<eval::MetricsReport> rs(3);
  rs[0].dc = 0.2;
  rs[1].dc = 0.4;
  rs[2].dc = 0.9;
  const auto a = eval::aggregate(rs);
  EXPECT_EQ(a.count, 3u);
  const double m = 0.5;
  EXPECT_NEAR(a.dc.mean, m, 1e-15);
  EXPECT_NEAR(a.dc.std, std::sqrt((0.09 + 0.01 + 0.16) / 3), 1e-15);
  EXPECT_EQ(eval::aggregate({}).count, 0u);
  const auto j = eval::to_json(a);
  EXPECT_NEAR(j["DC"]["mean"].get<double>(), m, 1e-15);
}

// ---------------------------------------------------------------------------
// Splits

TEST(KFold, PartitionsIndicesEvenly) {
  for (std::size_t n : {5u, 10u, 23u, 100u}) {
    for (std::size_t k : {2u, 3u, 5u}) {
      if (n < k) continue;
      const auto folds = eval::kfold_split(n, k, 42);
      ASSERT_EQ(folds.size(), k);
      std::multiset<std::size_t> all;
      std::size_t lo = n, hi = 0;
      for (const auto& f : folds) {
        all.insert(f.begin(), f.end());
        lo = std::min(lo, f.size());
        hi = std::max(hi, f.size());
      }
      EXPECT_LE(hi - lo, 1u);
      ASSERT_EQ(all.size(), n);
      std::size_t expect = 0;
      for (std::size_t v : all) EXPECT_EQ(v, expect++);
      EXPECT_EQ(folds, eval::kfold_split(n, k, 42));
    }
  }
  EXPECT_NE(eval::kfold_split(50, 5, 1), eval::kfold_split(50, 5, 2));
  EXPECT_THROW(eval::kfold_split(10, 1, 0), ArgumentError);
  EXPECT_THROW(eval::kfold_split(3, 5, 0), ArgumentError);
}

TEST(Split, SeventyTwentyTen) {
  const auto s = eval::split_indices(200, {0.7, 0.2, 0.1}, 3);
  EXPECT_EQ(s.train.size(), 140u);
  EXPECT_EQ(s.validation.size(), 40u);
  EXPECT_EQ(s.test.size(), 20u);
  std::set<std::size_t> all(s.train.begin(), s.train.end());
  all.insert(s.validation.begin(), s.validation.end());
  all.insert(s.test.begin(), s.test.end());
  EXPECT_EQ(all.size(), 200u);
  EXPECT_THROW(eval::split_indices(10, {0.5, 0.5, 0.5}, 0), ArgumentError);
  EXPECT_THROW(eval::split_indices(10, {1.2, -0.2, 0}, 0), ArgumentError);
}

// ---------------------------------------------------------------------------
// Dataset I/O

TEST(Dataset, SaveLoadRoundTripIsLosslessAfterQuantization) {
  const fs::path dir = scratch_dir("roundtrip");
  const auto samples = data::synth_generate(4, 10, 40);
  const auto manifest = data::save_dataset(dir, samples);
  const auto loaded = data::load_dataset(manifest);
  ASSERT_EQ(loaded.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(loaded[i].id, samples[i].id);
    EXPECT_EQ(loaded[i].mask, samples[i].mask);
    EXPECT_EQ(loaded[i].gt_box, samples[i].gt_box);
    for (std::size_t k = 0; k < samples[i].image.size(); ++k) {
      EXPECT_NEAR(loaded[i].image[k], samples[i].image[k], 0.5 / 255 + 1e-12);
    }
  }
  // Quantized values survive a second trip unchanged.
  const auto again = data::load_dataset(data::save_dataset(dir / "again", loaded));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_TRUE(oracle::bitwise_equal(again[i].image, loaded[i].image));
  fs::remove_all(dir);
}

TEST(Dataset, IngestionErrors) {
  const fs::path dir = scratch_dir("errors");
  const auto samples = data::synth_generate(2, 11, 32);
  data::save_dataset(dir, samples);
  auto write = [&](const std::string& text) {
    std::ofstream(dir / "bad.tsv") << text;
    return dir / "bad.tsv";
  };
  EXPECT_THROW(data::load_dataset(dir / "missing.tsv"), data::IngestionError);
  EXPECT_THROW(data::load_dataset(write("a\timages/x.png\n")), data::IngestionError);
  EXPECT_THROW(data::load_dataset(write("a\timages/none.png\tmasks/none.png\n")), data::IngestionError);

  // Mask of a different size.
  io::write_png(dir / "small.png", io::from_mask(Mask(8, 8)));
  EXPECT_THROW(data::load_dataset(write("a\timages/" + samples[0].id + ".png\tsmall.png\n")), data::IngestionError);

  // Empty masks are skipped, the rest still load.
  io::write_png(dir / "empty.png", io::from_mask(Mask(32, 32)));
  const auto loaded = data::load_dataset(write("a\timages/" + samples[0].id + ".png\tempty.png\n" + "b\timages/" +
                                               samples[1].id + ".png\tmasks/" + samples[1].id + ".png\r\n\n"));
  ASSERT_EQ(loaded.size(), 1u);
  EXPECT_EQ(loaded[0].id, "b");
  fs::remove_all(dir);
}

// ---------------------------------------------------------------------------
// Resizing

TEST(Resize, NearestMaskFollowsCentreRule) {
  std::mt19937_64 rng(5);
  const Mask m = oracle::random_mask(13, 7, 0.5, rng);
  const Mask r = data::resize_mask(m, 5, 11);
  for (std::size_t y = 0; y < 5; ++y) {
    for (std::size_t x = 0; x < 11; ++x) {
      const auto sy = std::size_t(std::floor((y + 0.5) * 13 / 5)), sx = std::size_t(std::floor((x + 0.5) * 7 / 11));
      EXPECT_EQ(r.at(y, x), m.at(sy, sx));
    }
  }
  EXPECT_EQ(data::resize_mask(m, 13, 7), m);
  // Integer upscaling replicates pixels exactly.
  const Mask up = data::resize_mask(m, 26, 14);
  for (std::size_t y = 0; y < 26; ++y) {
    for (std::size_t x = 0; x < 14; ++x) EXPECT_EQ(up.at(y, x), m.at(y / 2, x / 2));
  }
}

TEST(Resize, PairScalesImageAndRecomputesBox) {
  const auto s = data::synth_generate(1, 12, 64).front();
  const auto r = data::resize_pair(s, 32);
  EXPECT_EQ(r.image.shape(), (Shape{32, 32, 3}));
  EXPECT_EQ(r.gt_box, geometry::mask_to_bbox(r.mask));
  EXPECT_NEAR(r.gt_box.x1, s.gt_box.x1 / 2, 1);
  EXPECT_NEAR(r.gt_box.y2, s.gt_box.y2 / 2, 1);
  // Bilinear corners are preserved.
  EXPECT_NEAR(r.image.at(0, 0, 0), s.image.at(0, 0, 0), 1e-12);
  EXPECT_NEAR(r.image.at(31, 31, 2), s.image.at(63, 63, 2), 1e-12);
}

// ---------------------------------------------------------------------------
// Synthetic data

TEST(Synth, DeterministicSingleLesionWithinAreaBounds) {
  const auto a = data::synth_generate(30, 77, 64), b = data::synth_generate(30, 77, 64);
  ASSERT_EQ(a.size(), 30u);
  std::set<std::string> ids;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ids.insert(a[i].id);
    EXPECT_TRUE(oracle::bitwise_equal(a[i].image, b[i].image));
    EXPECT_EQ(a[i].mask, b[i].mask);
    const Real frac = Real(a[i].mask.count()) / Real(64 * 64);
    EXPECT_GE(frac, data::kMinLesionFraction);
    EXPECT_LE(frac, data::kMaxLesionFraction);
    EXPECT_EQ(a[i].gt_box, geometry::mask_to_bbox(a[i].mask));
    // One 4-connected component.
    const Box& g = a[i].gt_box;
    std::size_t r0 = 0, c0 = 0;
    for (std::size_t r = std::size_t(g.y1); r < std::size_t(g.y2) && !a[i].mask.at(r0, c0); ++r) {
      for (std::size_t c = std::size_t(g.x1); c < std::size_t(g.x2); ++c) {
        if (a[i].mask.at(r, c)) {
          r0 = r, c0 = c;
          break;
        }
      }
    }
    EXPECT_EQ(data::component_at(a[i].mask, r0, c0), a[i].mask);
    for (Real v : a[i].image.values()) {
      EXPECT_GE(v, 0);
      EXPECT_LE(v, 1);
    }
  }
  EXPECT_EQ(ids.size(), 30u);
  EXPECT_FALSE(oracle::bitwise_equal(data::synth_generate(1, 78, 64)[0].image, a[0].image));
  EXPECT_THROW(data::synth_generate(1, 0, 16), ArgumentError);
}

// ---------------------------------------------------------------------------
// Cropping and the full pipeline

TEST(Crops, PixelRectHoldsExactlyTheCentresInsideTheBox) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<Real> u(-5, 45);
  for (int trial = 0; trial < 2000; ++trial) {
    Real x1 = u(rng), x2 = u(rng), y1 = u(rng), y2 = u(rng);
    if (x1 > x2) std::swap(x1, x2);
    if (y1 > y2) std::swap(y1, y2);
    const Box b{x1, y1, x2, y2};
    const auto r = pipeline::pixel_rect(b, 40, 40);
    ASSERT_GE(r.height(), 1u);
    ASSERT_GE(r.width(), 1u);
    ASSERT_LE(r.row1, 40u);
    ASSERT_LE(r.col1, 40u);
    std::size_t inside_rows = 0;
    for (std::size_t y = 0; y < 40; ++y) inside_rows += (y + 0.5 >= y1 && y + 0.5 <= y2);
    if (inside_rows > 0) {
      EXPECT_EQ(r.height(), inside_rows);
      for (std::size_t y = r.row0; y < r.row1; ++y) {
        EXPECT_GE(y + 0.5, y1);
        EXPECT_LE(y + 0.5, y2);
      }
    } else {
      EXPECT_EQ(r.height(), 1u);  // centre-pixel fallback
    }
  }
}

TEST(Crops, ExpandBoxAddsMarginAndClips) {
  EXPECT_EQ(pipeline::expand_box({10, 20, 30, 30}, 0.1, 64, 64), (Box{8, 19, 32, 31}));
  EXPECT_EQ(pipeline::expand_box({0, 0, 64, 10}, 0.1, 64, 64), (Box{0, 0, 64, 11}));
}

TEST(Crops, PasteInvertsCrop) {
  std::mt19937_64 rng(7);
  const Mask m = oracle::random_mask(20, 16, 0.5, rng);
  const pipeline::PixelRect r{3, 2, 15, 11};
  const Mask pasted = pipeline::paste(pipeline::crop_mask(m, r), r, 20, 16);
  for (std::size_t y = 0; y < 20; ++y) {
    for (std::size_t x = 0; x < 16; ++x) {
      const bool in = y >= 3 && y < 15 && x >= 2 && x < 11;
      EXPECT_EQ(pasted.at(y, x), in ? m.at(y, x) : 0);
    }
  }
}

Model small_model(Real score_threshold) {
  detection::DetectorConfig det;
  det.backbone.channels = {4, 8};
  det.backbone.stride = 4;
  det.scale_anchors_to(64);
  det.rpn_channels = 8;
  det.head_channels = 4;
  det.head_hidden = 8;
  det.score_threshold = score_threshold;
  skinnet::SkinNetConfig seg;
  seg.input_size = 24;
  seg.layers_per_block = 1;
  seg.growth = 2;
  seg.dilation_rates = {1, 2};
  seg.bottleneck_channels = 4;
  return Model::create(det, seg, 3, 64);
}

TEST(SegmentFull, MaskStaysInsideTheExpandedTopBox) {
  Model model = small_model(0);
  // Bias the segmenter to call every pixel lesion, so the pasted mask must
  // fill the crop rectangle exactly.
  model.params.get("skinnet.out.bias") = Tensor({2}, Buffer{-20, 20});
  const auto samples = data::synth_generate(6, 13, 64);
  std::size_t nonempty = 0;
  for (const auto& s : samples) {
    const auto res = pipeline::segment_full(s.image, model);
    ASSERT_TRUE(res.detected());
    EXPECT_EQ(res.mask.height(), 64u);
    EXPECT_EQ(res.mask.width(), 64u);
    const auto dets = detection::detect(s.image, model.params, model.detector);
    EXPECT_EQ(res.detection->box, dets.front().box);
    EXPECT_EQ(res.crop_box, pipeline::expand_box(dets.front().box, pipeline::kCropMargin, 64, 64));
    const auto& r = res.crop_rect;
    for (std::size_t y = 0; y < 64; ++y) {
      for (std::size_t x = 0; x < 64; ++x) {
        const bool in = y >= r.row0 && y < r.row1 && x >= r.col0 && x < r.col1;
        EXPECT_EQ(res.mask.at(y, x) != 0, in);
        nonempty += res.mask.at(y, x);
      }
    }
  }
  EXPECT_GT(nonempty, 0u);
}

TEST(SegmentFull, NoDetectionGivesEmptyMask) {
  Model model = small_model(1);  // nothing can exceed probability 1
  const auto s = data::synth_generate(1, 14, 64).front();
  const auto res = pipeline::segment_full(s.image, model);
  EXPECT_FALSE(res.detected());
  EXPECT_EQ(res.mask.count(), 0u);
  EXPECT_EQ(res.mask.height(), 64u);
}

}  // namespace
