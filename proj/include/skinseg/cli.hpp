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

// `skinseg synth|train|detect|segment|eval`. Exit codes: 0 success,
// 1 runtime failure, 2 usage error.

#include <fstream>
#include <ostream>

#include <CLI11.hpp>

#include "skinseg/training.hpp"

namespace skinseg::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
  if (!f) throw std::runtime_error("failed writing " + path.string());
}

inline nlohmann::json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline nlohmann::json box_json(const geometry::Box& b) { return {b.x1, b.y1, b.x2, b.y2}; }

/// Training settings plus the paths a run reads and writes.
struct RunConfig {
  training::TrainConfig train = training::desk_scale();
  fs::path dataset;  // manifest
  fs::path output_dir = "run";
  fs::path checkpoint;  // defaults to <output_dir>/model.ckpt

  fs::path checkpoint_path() const { return checkpoint.empty() ? output_dir / "model.ckpt" : checkpoint; }
};

inline void apply_run_json(const nlohmann::json& j, RunConfig& rc) {
  training::apply_json(j, rc.train, {"dataset", "output_dir", "checkpoint"});
  if (j.contains("dataset")) rc.dataset = j.at("dataset").get<std::string>();
  if (j.contains("output_dir")) rc.output_dir = j.at("output_dir").get<std::string>();
  if (j.contains("checkpoint")) rc.checkpoint = j.at("checkpoint").get<std::string>();
}

/// Scales the image size and the anchor scales together.
inline void resize_run(training::TrainConfig& c, std::size_t size) {
  if (size == 0) throw UsageError("--size must be positive");
  for (Real& s : c.detector.anchor_scales) s *= Real(size) / Real(c.input_size);
  c.input_size = size;
}

/// Manifest samples at the size the model expects, with each original
/// extent so that outputs can be mapped back.
struct PreparedSample {
  data::LabeledSample original;
  Tensor model_image;
};

inline std::vector<PreparedSample> prepare(const fs::path& manifest, std::size_t model_size) {
  std::vector<PreparedSample> out;
  for (auto& s : data::load_dataset(manifest)) {
    Tensor img = model_size ? data::resize_image(s.image, model_size, model_size) : s.image;
    out.push_back({std::move(s), std::move(img)});
  }
  return out;
}

inline geometry::Box to_original(const geometry::Box& b, const PreparedSample& p) {
  const Real sy = Real(p.original.image.dim(0)) / Real(p.model_image.dim(0));
  const Real sx = Real(p.original.image.dim(1)) / Real(p.model_image.dim(1));
  return geometry::Box{b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy};
}

// ---------------------------------------------------------------------------
// Subcommands

inline void run_synth(std::size_t n, std::uint64_t seed, std::size_t size, const fs::path& out, std::ostream& log) {
  const auto samples = data::synth_generate(n, seed, size);
  const auto manifest = data::save_dataset(out, samples);
  log << "wrote " << samples.size() << " samples, manifest " << manifest.string() << "\n";
}

inline void run_train(const RunConfig& rc, std::ostream& log) {
  if (rc.dataset.empty()) throw UsageError("train: no dataset manifest (--data or \"dataset\" in the config)");
  if (!fs::is_regular_file(rc.dataset)) throw std::runtime_error("dataset manifest not found: " + rc.dataset.string());
  const auto samples = data::load_dataset(rc.dataset);
  const auto res = training::train(samples, rc.train, [&](const std::string& line) { log << line << "\n" << std::flush; });
  fs::create_directories(rc.output_dir);
  res.model.save(rc.checkpoint_path());
  write_text(rc.output_dir / "train_log.jsonl", training::to_jsonl(res.log));
  write_text(rc.output_dir / "train_timing.jsonl", training::timing_jsonl(res.log));
  nlohmann::json split{{"train", nlohmann::json::array()}, {"validation", nlohmann::json::array()}, {"test", nlohmann::json::array()}};
  for (auto i : res.split.train) split["train"].push_back(samples[i].id);
  for (auto i : res.split.validation) split["validation"].push_back(samples[i].id);
  for (auto i : res.split.test) split["test"].push_back(samples[i].id);
  write_text(rc.output_dir / "split.json", split.dump(2) + "\n");
  write_text(rc.output_dir / "config.json", training::to_json(rc.train).dump(2) + "\n");
  log << "checkpoint " << rc.checkpoint_path().string() << "\n";
}

inline void run_detect(const fs::path& checkpoint, const fs::path& manifest, const fs::path& out, std::ostream& log) {
  Model model = Model::load(checkpoint);
  nlohmann::json report = nlohmann::json::array();
  for (const auto& p : prepare(manifest, model.input_size)) {
    const auto dets = detection::detect(p.model_image, model.params, model.detector);
    nlohmann::json entry{{"id", p.original.id}, {"gt_box", box_json(p.original.gt_box)}, {"detections", nlohmann::json::array()}};
    std::vector<geometry::Box> boxes;
    for (const auto& d : dets) {
      boxes.push_back(to_original(d.box, p));
      entry["detections"].push_back({{"box", box_json(boxes.back())}, {"lesion_probability", d.lesion_probability()}});
    }
    Real best = 0;
    for (const auto& b : boxes) best = std::max(best, geometry::iou(b, p.original.gt_box));
    entry["best_iou"] = best;
    report.push_back(entry);
    io::Image8 overlay = io::from_tensor(p.original.image);
    io::draw_box(overlay, p.original.gt_box, io::kGreen);
    if (!boxes.empty()) io::draw_box(overlay, boxes.front(), io::kRed);
    io::write_png(out / "overlays" / (p.original.id + ".png"), overlay);
  }
  write_text(out / "detections.json", report.dump(2) + "\n");
  log << "detected " << report.size() << " images into " << out.string() << "\n";
}

inline void run_segment(const fs::path& checkpoint, const fs::path& manifest, const fs::path& out, std::ostream& log) {
  Model model = Model::load(checkpoint);
  nlohmann::json report = nlohmann::json::array();
  for (const auto& p : prepare(manifest, model.input_size)) {
    const auto res = pipeline::segment_full(p.model_image, model);
    const auto& orig = p.original;
    const geometry::Mask mask = data::resize_mask(res.mask, orig.mask.height(), orig.mask.width());
    io::write_png(out / "masks" / (orig.id + ".png"), io::from_mask(mask));
    io::Image8 overlay = io::from_tensor(orig.image);
    io::draw_contour(overlay, orig.mask, io::kGreen);
    io::draw_contour(overlay, mask, io::kRed);
    nlohmann::json entry{{"id", orig.id}, {"detected", res.detected()}};
    if (res.detected()) {
      const auto box = to_original(res.detection->box, p);
      io::draw_box(overlay, box, io::kBlue);
      entry["box"] = box_json(box);
      entry["lesion_probability"] = res.detection->lesion_probability();
    }
    io::write_png(out / "overlays" / (orig.id + ".png"), overlay);
    report.push_back(entry);
  }
  write_text(out / "segmentation.json", report.dump(2) + "\n");
  log << "segmented " << report.size() << " images into " << out.string() << "\n";
}

/// Pairs every PNG in `gt_dir` with the same file name in `pred_dir`.
inline nlohmann::json evaluate_dirs(const fs::path& pred_dir, const fs::path& gt_dir) {
  if (!fs::is_directory(gt_dir)) throw std::runtime_error("not a directory: " + gt_dir.string());
  if (!fs::is_directory(pred_dir)) throw std::runtime_error("not a directory: " + pred_dir.string());
  std::vector<fs::path> names;
  for (const auto& e : fs::directory_iterator(gt_dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") names.push_back(e.path().filename());
  }
  std::sort(names.begin(), names.end());
  if (names.empty()) throw std::runtime_error("no PNG masks in " + gt_dir.string());
  std::vector<eval::MetricsReport> reports;
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& name : names) {
    const fs::path pred = pred_dir / name;
    if (!fs::exists(pred)) throw std::runtime_error("missing prediction " + pred.string());
    const auto r = eval::compute_metrics(io::to_mask(io::read_png(pred, 1)), io::to_mask(io::read_png(gt_dir / name, 1)));
    reports.push_back(r);
    nlohmann::json j = eval::to_json(r);
    j["id"] = name.stem().string();
    samples.push_back(j);
  }
  return {{"samples", samples}, {"aggregate", eval::to_json(eval::aggregate(reports))}};
}

// ---------------------------------------------------------------------------
// Entry point

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Lesion detection and segmentation", "skinseg"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "Write a synthetic dataset and manifest");
  std::size_t n = 50, size = 64;
  std::uint64_t seed = 0;
  fs::path synth_out;
  synth->add_option("--n", n, "Number of samples")->capture_default_str();
  synth->add_option("--seed", seed, "Random seed")->capture_default_str();
  synth->add_option("--size", size, "Image side in pixels")->capture_default_str();
  synth->add_option("--out", synth_out, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Train detector and segmenter");
  fs::path config_path, data_path, train_out, train_ckpt;
  std::optional<std::size_t> epochs, skinnet_epochs, train_size;
  std::optional<std::uint64_t> train_seed;
  std::optional<Real> lr;
  std::string preset = "desk";
  train->add_option("--config", config_path, "JSON run config")->check(CLI::ExistingFile);
  train->add_option("--preset", preset, "Base settings: desk or full")->check(CLI::IsMember({"desk", "full"}));
  train->add_option("--data", data_path, "Dataset manifest");
  train->add_option("--epochs", epochs, "Detector epochs");
  train->add_option("--skinnet-epochs", skinnet_epochs, "Segmenter epochs");
  train->add_option("--seed", train_seed, "Random seed");
  train->add_option("--lr", lr, "Adam learning rate");
  train->add_option("--size", train_size, "Input image side (anchor scales follow)");
  train->add_option("--out", train_out, "Output directory");
  train->add_option("--checkpoint", train_ckpt, "Checkpoint path (default <out>/model.ckpt)");

  fs::path ckpt, manifest, infer_out;
  auto* detect = app.add_subcommand("detect", "Detect lesions and draw box overlays");
  detect->add_option("--checkpoint", ckpt, "Trained checkpoint")->required()->check(CLI::ExistingFile);
  detect->add_option("--data", manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  detect->add_option("--out", infer_out, "Output directory")->required();

  auto* segment = app.add_subcommand("segment", "Segment lesions and draw contour overlays");
  segment->add_option("--checkpoint", ckpt, "Trained checkpoint")->required()->check(CLI::ExistingFile);
  segment->add_option("--data", manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  segment->add_option("--out", infer_out, "Output directory")->required();

  auto* evaluate = app.add_subcommand("eval", "Score predicted masks against ground truth");
  fs::path pred_dir, gt_dir, report_path;
  evaluate->add_option("--pred", pred_dir, "Predicted mask directory")->required();
  evaluate->add_option("--gt", gt_dir, "Ground-truth mask directory")->required();
  evaluate->add_option("--out", report_path, "Report JSON path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    if (*synth) {
      run_synth(n, seed, size, synth_out, out);
    } else if (*train) {
      RunConfig rc;
      if (preset == "full") rc.train = training::full_scale();
      if (!config_path.empty()) apply_run_json(read_json(config_path), rc);
      if (train_size) resize_run(rc.train, *train_size);
      if (epochs) rc.train.epochs = *epochs;
      if (skinnet_epochs) rc.train.skinnet_epochs = *skinnet_epochs;
      if (train_seed) rc.train.seed = *train_seed;
      if (lr) rc.train.learning_rate = *lr;
      if (!data_path.empty()) rc.dataset = data_path;
      if (!train_out.empty()) rc.output_dir = train_out;
      if (!train_ckpt.empty()) rc.checkpoint = train_ckpt;
      try {
        rc.train.validate();
      } catch (const ArgumentError& e) {
        throw UsageError(e.what());
      }
      run_train(rc, out);
    } else if (*detect) {
      run_detect(ckpt, manifest, infer_out, out);
    } else if (*segment) {
      run_segment(ckpt, manifest, infer_out, out);
    } else if (*evaluate) {
      write_text(report_path, evaluate_dirs(pred_dir, gt_dir).dump(2) + "\n");
      out << "wrote " << report_path.string() << "\n";
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitOk;
}

}  // namespace skinseg::cli
