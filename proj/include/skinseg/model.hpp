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

#include <set>

#include <json.hpp>

#include "skinseg/checkpoint.hpp"
#include "skinseg/detection.hpp"
#include "skinseg/skinnet.hpp"

namespace skinseg {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace config {

using nlohmann::json;

inline void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  std::set<std::string> allowed(known.begin(), known.end());
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

inline json to_json(const detection::DetectorConfig& c) {
  json ratios = json::array();
  for (const auto& r : c.anchor_ratios) ratios.push_back({r.w, r.h});
  return {{"backbone", {{"in_channels", c.backbone.in_channels}, {"channels", c.backbone.channels}, {"stride", c.backbone.stride}}},
          {"anchor_scales", c.anchor_scales},
          {"anchor_ratios", ratios},
          {"positive_iou", c.positive_iou},
          {"negative_iou", c.negative_iou},
          {"rpn_channels", c.rpn_channels},
          {"rpn_sample_cap", c.rpn_sample_cap},
          {"proposal_top_k", c.proposal_top_k},
          {"roi_resample_size", c.roi_resample_size},
          {"roi_pooled_size", c.roi_pooled_size},
          {"head_channels", c.head_channels},
          {"head_hidden", c.head_hidden},
          {"lesion_iou", c.lesion_iou},
          {"rois_per_image", c.rois_per_image},
          {"lesion_roi_fraction", c.lesion_roi_fraction},
          {"jittered_gt_rois", c.jittered_gt_rois},
          {"score_threshold", c.score_threshold},
          {"nms_threshold", c.nms_threshold},
          {"regression", c.regression == geometry::RegressionMode::kOffsets ? "offsets" : "raw"}};
}

inline void from_json(const json& j, detection::DetectorConfig& c) {
  const std::string w = "detector";
  reject_unknown(j, {"backbone", "anchor_scales", "anchor_ratios", "positive_iou", "negative_iou", "rpn_channels",
                     "rpn_sample_cap", "proposal_top_k", "roi_resample_size", "roi_pooled_size", "head_channels",
                     "head_hidden", "lesion_iou", "rois_per_image", "lesion_roi_fraction", "jittered_gt_rois",
                     "score_threshold", "nms_threshold", "regression"},
                 w);
  if (j.contains("backbone")) {
    const json& b = j.at("backbone");
    reject_unknown(b, {"in_channels", "channels", "stride"}, w + ".backbone");
    read(b, "in_channels", c.backbone.in_channels, w + ".backbone");
    read(b, "channels", c.backbone.channels, w + ".backbone");
    read(b, "stride", c.backbone.stride, w + ".backbone");
  }
  read(j, "anchor_scales", c.anchor_scales, w);
  if (j.contains("anchor_ratios")) {
    c.anchor_ratios.clear();
    for (const auto& r : j.at("anchor_ratios")) {
      if (!r.is_array() || r.size() != 2) throw ConfigError(w + ".anchor_ratios: expected [w, h] pairs");
      c.anchor_ratios.push_back({r[0].get<Real>(), r[1].get<Real>()});
    }
  }
  read(j, "positive_iou", c.positive_iou, w);
  read(j, "negative_iou", c.negative_iou, w);
  read(j, "rpn_channels", c.rpn_channels, w);
  read(j, "rpn_sample_cap", c.rpn_sample_cap, w);
  read(j, "proposal_top_k", c.proposal_top_k, w);
  read(j, "roi_resample_size", c.roi_resample_size, w);
  read(j, "roi_pooled_size", c.roi_pooled_size, w);
  read(j, "head_channels", c.head_channels, w);
  read(j, "head_hidden", c.head_hidden, w);
  read(j, "lesion_iou", c.lesion_iou, w);
  read(j, "rois_per_image", c.rois_per_image, w);
  read(j, "lesion_roi_fraction", c.lesion_roi_fraction, w);
  read(j, "jittered_gt_rois", c.jittered_gt_rois, w);
  read(j, "score_threshold", c.score_threshold, w);
  read(j, "nms_threshold", c.nms_threshold, w);
  if (j.contains("regression")) {
    const auto mode = j.at("regression").get<std::string>();
    if (mode == "offsets") {
      c.regression = geometry::RegressionMode::kOffsets;
    } else if (mode == "raw") {
      c.regression = geometry::RegressionMode::kRawCoordinates;
    } else {
      throw ConfigError(w + ".regression: expected 'offsets' or 'raw'");
    }
  }
  try {
    c.validate();
  } catch (const ArgumentError& e) {
    throw ConfigError(e.what());
  }
}

inline json to_json(const skinnet::SkinNetConfig& c) {
  return {{"input_size", c.input_size},         {"in_channels", c.in_channels},
          {"layers_per_block", c.layers_per_block}, {"growth", c.growth},
          {"dilation_rates", c.dilation_rates}, {"bottleneck_channels", c.bottleneck_channels}};
}

inline void from_json(const json& j, skinnet::SkinNetConfig& c) {
  const std::string w = "skinnet";
  reject_unknown(j, {"input_size", "in_channels", "layers_per_block", "growth", "dilation_rates", "bottleneck_channels"}, w);
  read(j, "input_size", c.input_size, w);
  read(j, "in_channels", c.in_channels, w);
  read(j, "layers_per_block", c.layers_per_block, w);
  read(j, "growth", c.growth, w);
  read(j, "dilation_rates", c.dilation_rates, w);
  read(j, "bottleneck_channels", c.bottleneck_channels, w);
  try {
    c.validate();
  } catch (const ArgumentError& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace config

/// Detector and segmenter parameters in one store ("backbone.", "rpn.",
/// "rcnn.", "skinnet." prefixes) plus the configs that shape them.
struct Model {
  detection::DetectorConfig detector;
  skinnet::SkinNetConfig skinnet;
  std::size_t input_size = 0;  // full-image side the detector was trained at; 0 if unknown
  ParameterStore params;

  static Model create(const detection::DetectorConfig& det, const skinnet::SkinNetConfig& seg, std::uint64_t seed,
                      std::size_t input_size = 0) {
    Model m{det, seg, input_size, {}};
    std::mt19937_64 rng(seed);
    detection::init_detector_params(m.params, det, rng);
    skinnet::init_skinnet_params(m.params, seg, rng);
    return m;
  }

  nlohmann::json hyperparameters() const {
    return {{"detector", config::to_json(detector)}, {"skinnet", config::to_json(skinnet)}, {"input_size", input_size}};
  }

  void save(const std::filesystem::path& path) const { save_checkpoint(path, params, hyperparameters()); }

  static Model load(const std::filesystem::path& path) {
    Checkpoint ck = load_checkpoint(path);
    Model m;
    const auto& h = ck.hyperparameters;
    if (!h.contains("detector") || !h.contains("skinnet")) throw CheckpointError("checkpoint lacks model configuration");
    config::from_json(h.at("detector"), m.detector);
    config::from_json(h.at("skinnet"), m.skinnet);
    config::read(h, "input_size", m.input_size, "checkpoint");
    m.params = std::move(ck.params);
    Model reference = create(m.detector, m.skinnet, 0);
    for (const auto& [name, t] : reference.params.all()) {
      if (!m.params.contains(name) || m.params.get(name).shape() != t.shape()) {
        throw CheckpointError("checkpoint parameter '" + name + "' missing or mis-shaped");
      }
    }
    if (m.params.count() != reference.params.count()) throw CheckpointError("checkpoint has unexpected parameters");
    return m;
  }
};

}  // namespace skinseg
