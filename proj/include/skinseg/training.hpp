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

#include <array>
#include <chrono>
#include <functional>
#include <iostream>
#include <optional>

#include "skinseg/metrics.hpp"
#include "skinseg/optim.hpp"
#include "skinseg/pipeline.hpp"

namespace skinseg::training {

using data::LabeledSample;
using geometry::Box;

struct TrainConfig {
  Real learning_rate = kDefaultLearningRate;
  std::size_t epochs = 30;
  // Segmenter epochs; follows `epochs` when unset.
  std::optional<std::size_t> skinnet_epochs;
  std::size_t batch_size = 4;
  std::uint64_t seed = 0;
  std::size_t input_size = 64;
  std::array<Real, 3> split{Real(0.7), Real(0.2), Real(0.1)};
  bool flips = false;
  detection::DetectorConfig detector;
  skinnet::SkinNetConfig skinnet;

  std::size_t segmenter_epochs() const { return skinnet_epochs.value_or(epochs); }

  void validate() const {
    if (!(learning_rate > 0)) throw ArgumentError("train: learning rate must be positive");
    if (batch_size == 0) throw ArgumentError("train: batch size must be positive");
    if (input_size == 0 || input_size % detector.backbone.stride != 0) {
      throw ArgumentError("train: input size must be a positive multiple of the backbone stride");
    }
    Real total = 0;
    for (Real f : split) {
      if (f < 0 || f > 1) throw ArgumentError("train: split fractions must lie in [0,1]");
      total += f;
    }
    if (std::abs(total - 1) > Real(1e-9)) throw ArgumentError("train: split fractions must sum to 1");
    detector.validate();
    skinnet.validate();
  }
};

/// 64x64 images on one CPU core: a stride-4 backbone keeps a 16x16 feature
/// map, anchors follow the image size and crops are segmented at 32x32.
/// The segmenter converges within a few epochs and costs far more per epoch
/// than the detector, so it gets 10.
inline TrainConfig desk_scale() {
  TrainConfig c;
  c.input_size = 64;
  c.epochs = 30;
  c.skinnet_epochs = 10;
  c.detector.backbone.stride = 4;
  c.detector.scale_anchors_to(c.input_size);
  c.skinnet.input_size = 32;
  return c;
}

/// 512x512 inputs and 100 epochs with the 128-pixel segmenter.
inline TrainConfig full_scale() {
  TrainConfig c;
  c.input_size = 512;
  c.epochs = 100;
  c.skinnet.input_size = 128;
  return c;
}

// ---------------------------------------------------------------------------
// Log

enum class Stage { kRpnWithBase, kRcnnWithBase, kRpn, kRcnn, kSkinNet };

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::kRpnWithBase: return "rpn+base";
    case Stage::kRcnnWithBase: return "rcnn+base";
    case Stage::kRpn: return "rpn";
    case Stage::kRcnn: return "rcnn";
    case Stage::kSkinNet: return "skinnet";
  }
  return "?";
}

/// One optimizer step. Loss terms a stage does not compute stay unset.
struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::size_t batch = 0;
  Stage stage = Stage::kRpnWithBase;
  std::optional<Real> rpn_cls, rpn_reg, rcnn_cls, rcnn_reg, dice;
  Real total = 0;
  double seconds = 0;  // wall clock, kept out of the persisted log
};

struct ValidationRecord {
  std::size_t epoch = 0;
  Stage stage = Stage::kRpnWithBase;  // kRpnWithBase marks detector epochs
  Real score = 0;                     // detector: mean best IoU; segmenter: mean DC
  std::size_t samples = 0;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<ValidationRecord> validation;
};

inline nlohmann::json to_json(const StepRecord& r) {
  nlohmann::json j{{"step", r.step}, {"epoch", r.epoch}, {"batch", r.batch}, {"stage", stage_name(r.stage)}};
  auto opt = [&](const char* key, const std::optional<Real>& v) {
    if (v) j[key] = *v;
  };
  opt("rpn_cls", r.rpn_cls);
  opt("rpn_reg", r.rpn_reg);
  opt("rcnn_cls", r.rcnn_cls);
  opt("rcnn_reg", r.rcnn_reg);
  opt("dice", r.dice);
  j["total"] = r.total;
  return j;
}

inline nlohmann::json to_json(const ValidationRecord& r) {
  const bool det = r.stage != Stage::kSkinNet;
  return {{"validation_epoch", r.epoch},
          {"model", det ? "detector" : "skinnet"},
          {det ? "mean_best_iou" : "mean_dc", r.score},
          {"samples", r.samples}};
}

/// One JSON object per line: steps in order, then validation records.
/// Timing is excluded so that equal seeds give equal files.
inline std::string to_jsonl(const TrainLog& log) {
  std::string out;
  for (const auto& r : log.steps) out += to_json(r).dump() + "\n";
  for (const auto& r : log.validation) out += to_json(r).dump() + "\n";
  return out;
}

inline std::string timing_jsonl(const TrainLog& log) {
  std::string out;
  for (const auto& r : log.steps) out += nlohmann::json{{"step", r.step}, {"seconds", r.seconds}}.dump() + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Four-step schedule

inline constexpr std::array<Stage, 4> kDetectorStages{Stage::kRpnWithBase, Stage::kRcnnWithBase, Stage::kRpn,
                                                       Stage::kRcnn};

/// Parameter-name prefixes each stage trains.
inline std::vector<std::string> trainable_prefixes(Stage s) {
  switch (s) {
    case Stage::kRpnWithBase: return {"backbone.", "rpn."};
    case Stage::kRcnnWithBase: return {"backbone.", "rcnn."};
    case Stage::kRpn: return {"rpn."};
    case Stage::kRcnn: return {"rcnn."};
    case Stage::kSkinNet: return {"skinnet."};
  }
  return {};
}

inline std::vector<Tensor*> trainable_set(ParameterStore& params, Stage s) {
  std::vector<Tensor*> out;
  for (const auto& prefix : trainable_prefixes(s)) {
    auto part = params.with_prefix(prefix);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

/// Separate Adam state for every stage's trainable set.
struct OptimizerStates {
  std::array<AdamState, 5> states;

  static OptimizerStates create(ParameterStore& params) {
    OptimizerStates o;
    for (std::size_t i = 0; i < o.states.size(); ++i) o.states[i] = AdamState(trainable_set(params, Stage(i)));
    return o;
  }

  AdamState& operator[](Stage s) { return states[std::size_t(s)]; }
};

/// Runs `loss_of` for each sample on its own tape with only the stage's
/// parameters trainable, averages gradients over the batch and applies one
/// Adam update to that set.
template <typename LossFn>
StepRecord optimize_stage(Stage stage, std::size_t batch_size, ParameterStore& params, AdamState& state, Real lr,
                          LossFn&& loss_of) {
  const auto t0 = std::chrono::steady_clock::now();
  params.clear_grads();
  params.set_trainable("", false);
  for (const auto& prefix : trainable_prefixes(stage)) params.set_trainable(prefix, true);
  StepRecord rec;
  rec.stage = stage;
  const Real inv = Real(1) / Real(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i) {
    Tape tape;
    Var loss = loss_of(tape, i, rec, inv);
    rec.total += loss.value().item() * inv;
    tape.backward(ops::scale(loss, inv));
  }
  const auto set = trainable_set(params, stage);
  adam_step(set, state, lr);
  params.clear_grads();
  params.set_trainable("", true);
  rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

/// Called after each of the four steps with the step's stage.
using StepObserver = std::function<void(Stage, const ParameterStore&)>;

/// Steps 1-4 on one batch: RPN with the base network, RCNN head with the
/// base network, then RPN alone and RCNN head alone with the base frozen.
/// Samples without a usable ground-truth box are dropped; an empty batch is
/// skipped with a warning.
inline std::vector<StepRecord> four_step_train_batch(std::span<const LabeledSample> batch, Model& model,
                                                     OptimizerStates& optim, Real lr, std::mt19937_64& rng,
                                                     const StepObserver& observer = {}) {
  std::vector<const LabeledSample*> usable;
  for (const auto& s : batch) {
    if (s.gt_box.valid()) usable.push_back(&s);
  }
  if (usable.empty()) {
    std::cerr << "warning: skipping a batch without ground-truth boxes\n";
    return {};
  }
  std::vector<StepRecord> records;
  for (Stage stage : kDetectorStages) {
    const bool rpn = stage == Stage::kRpnWithBase || stage == Stage::kRpn;
    StepRecord rec = optimize_stage(stage, usable.size(), model.params, optim[stage], lr,
                                    [&](Tape& tape, std::size_t i, StepRecord& r, Real w) {
                                      const Box gt[] = {usable[i]->gt_box};
                                      detection::LossTerms t =
                                          rpn ? detection::rpn_training_loss(tape, usable[i]->image, gt, model.params,
                                                                             model.detector, rng)
                                              : detection::rcnn_training_loss(tape, usable[i]->image, gt, model.params,
                                                                              model.detector, rng);
                                      auto& cls = rpn ? r.rpn_cls : r.rcnn_cls;
                                      auto& reg = rpn ? r.rpn_reg : r.rcnn_reg;
                                      cls = cls.value_or(0) + t.classification * w;
                                      reg = reg.value_or(0) + t.regression * w;
                                      return t.total;
                                    });
    if (observer) observer(stage, model.params);
    records.push_back(rec);
  }
  return records;
}

/// One segmenter update on ground-truth-box crops.
inline StepRecord skinnet_train_batch(std::span<const LabeledSample> batch, Model& model, OptimizerStates& optim, Real lr) {
  const std::size_t S = model.skinnet.input_size;
  return optimize_stage(Stage::kSkinNet, batch.size(), model.params, optim[Stage::kSkinNet], lr,
                        [&](Tape& tape, std::size_t i, StepRecord& r, Real w) {
                          const auto& s = batch[i];
                          const auto in = pipeline::prepare_crop(s.image, s.gt_box, S, &s.mask);
                          Var probs = skinnet::skinnet_forward(tape.constant(in.crop), model.params, model.skinnet);
                          Var loss = skinnet::dice_loss(probs, skinnet::one_hot(in.mask));
                          r.dice = r.dice.value_or(0) + loss.value().item() * w;
                          return loss;
                        });
}

// ---------------------------------------------------------------------------
// Augmentation

inline LabeledSample flip(const LabeledSample& s, bool horizontal, bool vertical) {
  if (!horizontal && !vertical) return s;
  const std::size_t H = s.image.dim(0), W = s.image.dim(1), C = s.image.dim(2);
  LabeledSample out{s.id, Tensor(s.image.shape()), geometry::Mask(H, W), {}};
  for (std::size_t y = 0; y < H; ++y) {
    const std::size_t sy = vertical ? H - 1 - y : y;
    for (std::size_t x = 0; x < W; ++x) {
      const std::size_t sx = horizontal ? W - 1 - x : x;
      for (std::size_t c = 0; c < C; ++c) out.image.at(y, x, c) = s.image.at(sy, sx, c);
      out.mask.set(y, x, s.mask.at(sy, sx));
    }
  }
  out.gt_box = geometry::mask_to_bbox(out.mask);
  return out;
}

// ---------------------------------------------------------------------------
// Validation

/// Highest IoU between any detection and the ground-truth box; 0 when
/// nothing is detected.
inline Real best_iou(std::span<const detection::Detection> detections, const Box& gt) {
  Real best = 0;
  for (const auto& d : detections) best = std::max(best, geometry::iou(d.box, gt));
  return best;
}

inline Real mean_best_iou(std::span<const LabeledSample> samples, Model& model) {
  if (samples.empty()) return 0;
  Real sum = 0;
  for (const auto& s : samples) sum += best_iou(detection::detect(s.image, model.params, model.detector), s.gt_box);
  return sum / Real(samples.size());
}

// ---------------------------------------------------------------------------
// Orchestration

struct TrainResult {
  Model model;
  TrainLog log;
  eval::SplitIndices split;
};

/// Receives one line per finished epoch.
using ProgressFn = std::function<void(const std::string&)>;

inline std::vector<LabeledSample> gather(std::span<const LabeledSample> all, std::span<const std::size_t> idx) {
  std::vector<LabeledSample> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(all[i]);
  return out;
}

inline ParameterStore snapshot(const ParameterStore& params, std::span<const std::string> prefixes) {
  ParameterStore out;
  for (const auto& [name, t] : params.all()) {
    for (const auto& p : prefixes) {
      if (name.starts_with(p)) {
        out.add(name, t);
        break;
      }
    }
  }
  return out;
}

inline void restore(ParameterStore& params, const ParameterStore& snap) {
  for (const auto& [name, t] : snap.all()) params.get(name).buffer() = t.buffer();
}

/// Detector epochs with the four-step schedule, then segmenter epochs on
/// ground-truth crops. Each stage keeps the parameters of its best
/// validation epoch (mean best IoU for the detector, mean DC of the full
/// pipeline for the segmenter); without a validation split the last epoch
/// is kept.
inline TrainResult train(std::span<const LabeledSample> dataset, const TrainConfig& cfg, const ProgressFn& progress = {}) {
  if (dataset.empty()) throw ArgumentError("train: empty dataset");
  cfg.validate();
  std::vector<LabeledSample> samples;
  samples.reserve(dataset.size());
  for (const auto& s : dataset) {
    const bool sized = s.image.dim(0) == cfg.input_size && s.image.dim(1) == cfg.input_size;
    samples.push_back(sized ? s : data::resize_pair(s, cfg.input_size));
  }

  TrainResult res{Model::create(cfg.detector, cfg.skinnet, cfg.seed, cfg.input_size), {}, eval::split_indices(samples.size(), cfg.split, cfg.seed)};
  Model& model = res.model;
  const auto train_set = gather(samples, res.split.train);
  const auto val_set = gather(samples, res.split.validation);
  if (train_set.empty()) throw ArgumentError("train: the training split is empty");

  OptimizerStates optim = OptimizerStates::create(model.params);
  std::mt19937_64 rng(cfg.seed ^ 0x5eed5eed5eed5eedULL);
  std::size_t step = 0;

  auto epoch_batches = [&](std::size_t epoch, auto&& run_batch) {
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    std::bernoulli_distribution coin(0.5);
    for (std::size_t b = 0, start = 0; start < order.size(); ++b, start += cfg.batch_size) {
      std::vector<LabeledSample> batch;
      for (std::size_t k = start; k < std::min(order.size(), start + cfg.batch_size); ++k) {
        const LabeledSample& s = train_set[order[k]];
        if (cfg.flips) {
          const bool h = coin(rng), v = coin(rng);
          batch.push_back(flip(s, h, v));
        } else {
          batch.push_back(s);
        }
      }
      for (StepRecord r : run_batch(batch)) {
        r.step = step++;
        r.epoch = epoch;
        r.batch = b;
        res.log.steps.push_back(r);
      }
    }
  };

  const std::vector<std::string> detector_prefixes{"backbone.", "rpn.", "rcnn."};
  ParameterStore best_detector = snapshot(model.params, detector_prefixes);
  Real best_score = -1;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    epoch_batches(epoch, [&](std::span<const LabeledSample> batch) {
      return four_step_train_batch(batch, model, optim, cfg.learning_rate, rng);
    });
    std::string line = "detector epoch " + std::to_string(epoch + 1) + "/" + std::to_string(cfg.epochs);
    if (!val_set.empty()) {
      const Real score = mean_best_iou(val_set, model);
      res.log.validation.push_back({epoch, Stage::kRpnWithBase, score, val_set.size()});
      line += " val mean best IoU " + std::to_string(score);
      if (score > best_score) {
        best_score = score;
        best_detector = snapshot(model.params, detector_prefixes);
      }
    } else {
      best_detector = snapshot(model.params, detector_prefixes);
    }
    if (progress) progress(line);
  }
  restore(model.params, best_detector);

  // The detector is fixed from here on, so validation detections are reused.
  std::vector<std::optional<detection::Detection>> val_detections;
  const std::size_t seg_epochs = cfg.segmenter_epochs();
  if (seg_epochs > 0) {
    for (const auto& s : val_set) {
      const auto d = detection::detect(s.image, model.params, model.detector);
      val_detections.push_back(d.empty() ? std::nullopt : std::optional(d.front()));
    }
  }
  const std::vector<std::string> skinnet_prefixes{"skinnet."};
  ParameterStore best_skinnet = snapshot(model.params, skinnet_prefixes);
  best_score = -1;
  for (std::size_t epoch = 0; epoch < seg_epochs; ++epoch) {
    epoch_batches(epoch, [&](std::span<const LabeledSample> batch) {
      return std::vector<StepRecord>{skinnet_train_batch(batch, model, optim, cfg.learning_rate)};
    });
    std::string line = "skinnet epoch " + std::to_string(epoch + 1) + "/" + std::to_string(seg_epochs);
    if (!val_set.empty()) {
      Real sum = 0;
      for (std::size_t i = 0; i < val_set.size(); ++i) {
        const auto& s = val_set[i];
        const geometry::Mask pred = val_detections[i]
                                        ? pipeline::segment_with_box(s.image, *val_detections[i], model).mask
                                        : geometry::Mask(s.mask.height(), s.mask.width());
        sum += eval::compute_metrics(pred, s.mask).dc;
      }
      const Real score = sum / Real(val_set.size());
      res.log.validation.push_back({epoch, Stage::kSkinNet, score, val_set.size()});
      line += " val mean DC " + std::to_string(score);
      if (score > best_score) {
        best_score = score;
        best_skinnet = snapshot(model.params, skinnet_prefixes);
      }
    } else {
      best_skinnet = snapshot(model.params, skinnet_prefixes);
    }
    if (progress) progress(line);
  }
  restore(model.params, best_skinnet);
  return res;
}

// ---------------------------------------------------------------------------
// Config files

inline nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json j{{"learning_rate", c.learning_rate}, {"epochs", c.epochs},   {"batch_size", c.batch_size},
                   {"seed", c.seed},                   {"input_size", c.input_size}, {"split", c.split},
                   {"flips", c.flips},                 {"detector", config::to_json(c.detector)},
                   {"skinnet", config::to_json(c.skinnet)}};
  if (c.skinnet_epochs) j["skinnet_epochs"] = *c.skinnet_epochs;
  return j;
}

inline constexpr std::initializer_list<const char*> kTrainConfigKeys{
    "learning_rate", "epochs", "skinnet_epochs", "batch_size", "seed", "input_size", "split", "flips", "detector", "skinnet"};

/// Fields present in `j` override `out`; unknown keys are rejected. On error
/// `out` is left unchanged.
inline void apply_json(const nlohmann::json& j, TrainConfig& out, std::initializer_list<const char*> extra_keys = {}) {
  TrainConfig c = out;
  std::vector<const char*> keys(kTrainConfigKeys);
  keys.insert(keys.end(), extra_keys.begin(), extra_keys.end());
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* k) { return key == k; })) {
      throw ConfigError("config: unknown key '" + key + "'");
    }
  }
  const std::string w = "config";
  config::read(j, "learning_rate", c.learning_rate, w);
  config::read(j, "epochs", c.epochs, w);
  if (j.contains("skinnet_epochs")) {
    std::size_t e = 0;
    config::read(j, "skinnet_epochs", e, w);
    c.skinnet_epochs = e;
  }
  config::read(j, "batch_size", c.batch_size, w);
  config::read(j, "seed", c.seed, w);
  config::read(j, "input_size", c.input_size, w);
  config::read(j, "split", c.split, w);
  config::read(j, "flips", c.flips, w);
  if (j.contains("detector")) config::from_json(j.at("detector"), c.detector);
  if (j.contains("skinnet")) config::from_json(j.at("skinnet"), c.skinnet);
  try {
    c.validate();
  } catch (const ArgumentError& e) {
    throw ConfigError(e.what());
  }
  out = std::move(c);
}

}  // namespace skinseg::training
