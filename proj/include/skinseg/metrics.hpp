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
#include <random>

#include <json.hpp>

#include "skinseg/geometry.hpp"

namespace skinseg::eval {

using geometry::Mask;

/// Pixel-level segmentation scores with lesion as the positive class.
/// A ratio whose denominator is zero is reported as 1 and flagged.
struct MetricsReport {
  std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;
  Real ac = 0, dc = 0, ji = 0, se = 0, sp = 0;
  bool se_vacuous = false;       // no lesion pixels in the ground truth
  bool sp_vacuous = false;       // no background pixels in the ground truth
  bool overlap_vacuous = false;  // neither mask has lesion pixels (DC, JI)

  std::uint64_t total() const { return tp + fp + tn + fn; }
  bool vacuous() const { return se_vacuous || sp_vacuous || overlap_vacuous; }
};

inline MetricsReport metrics_from_counts(std::uint64_t tp, std::uint64_t fp, std::uint64_t tn, std::uint64_t fn) {
  MetricsReport r{tp, fp, tn, fn};
  const auto ratio = [](std::uint64_t num, std::uint64_t den, bool& vacuous) {
    if (den == 0) {
      vacuous = true;
      return Real(1);
    }
    return Real(num) / Real(den);
  };
  bool unused = false;
  r.ac = ratio(tp + tn, r.total(), unused);
  r.se = ratio(tp, tp + fn, r.se_vacuous);
  r.sp = ratio(tn, tn + fp, r.sp_vacuous);
  r.ji = ratio(tp, tp + fp + fn, r.overlap_vacuous);
  r.dc = ratio(2 * tp, 2 * tp + fp + fn, r.overlap_vacuous);
  return r;
}

inline MetricsReport compute_metrics(const Mask& pred, const Mask& gt) {
  if (pred.height() != gt.height() || pred.width() != gt.width()) {
    throw ShapeError("compute_metrics: prediction " + std::to_string(pred.height()) + "x" + std::to_string(pred.width()) +
                     " vs ground truth " + std::to_string(gt.height()) + "x" + std::to_string(gt.width()));
  }
  std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;
  const auto p = pred.data();
  const auto g = gt.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i]) {
      g[i] ? ++tp : ++fp;
    } else {
      g[i] ? ++fn : ++tn;
    }
  }
  return metrics_from_counts(tp, fp, tn, fn);
}

struct MetricSummary {
  Real mean = 0;
  Real std = 0;  // population standard deviation
};

struct AggregateReport {
  std::size_t count = 0;
  MetricSummary ac, dc, ji, se, sp;
};

inline AggregateReport aggregate(std::span<const MetricsReport> reports) {
  AggregateReport out;
  out.count = reports.size();
  if (reports.empty()) return out;
  auto summarize = [&](auto field) {
    Real m = 0;
    for (const auto& r : reports) m += field(r);
    m /= Real(reports.size());
    Real v = 0;
    for (const auto& r : reports) v += (field(r) - m) * (field(r) - m);
    return MetricSummary{m, std::sqrt(v / Real(reports.size()))};
  };
  out.ac = summarize([](const MetricsReport& r) { return r.ac; });
  out.dc = summarize([](const MetricsReport& r) { return r.dc; });
  out.ji = summarize([](const MetricsReport& r) { return r.ji; });
  out.se = summarize([](const MetricsReport& r) { return r.se; });
  out.sp = summarize([](const MetricsReport& r) { return r.sp; });
  return out;
}

inline nlohmann::json to_json(const MetricsReport& r) {
  return {{"TP", r.tp}, {"FP", r.fp}, {"TN", r.tn}, {"FN", r.fn}, {"AC", r.ac}, {"DC", r.dc}, {"JI", r.ji},
          {"SE", r.se}, {"SP", r.sp}, {"vacuous", {{"SE", r.se_vacuous}, {"SP", r.sp_vacuous}, {"overlap", r.overlap_vacuous}}}};
}

inline nlohmann::json to_json(const AggregateReport& a) {
  auto s = [](const MetricSummary& m) { return nlohmann::json{{"mean", m.mean}, {"std", m.std}}; };
  return {{"count", a.count}, {"AC", s(a.ac)}, {"DC", s(a.dc)}, {"JI", s(a.ji)}, {"SE", s(a.se)}, {"SP", s(a.sp)}};
}

// ---------------------------------------------------------------------------
// Splitting

/// Seeded shuffle, then contiguous chunks; the first n % k folds get one
/// extra index.
inline std::vector<std::vector<std::size_t>> kfold_split(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ArgumentError("kfold_split: need at least 2 folds");
  if (n < k) throw ArgumentError("kfold_split: fewer samples than folds");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<std::vector<std::size_t>> folds(k);
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t len = n / k + (f < n % k ? 1 : 0);
    folds[f].assign(idx.begin() + long(pos), idx.begin() + long(pos + len));
    pos += len;
  }
  return folds;
}

struct SplitIndices {
  std::vector<std::size_t> train, validation, test;
};

/// Seeded shuffle cut into train/validation/test by `fractions`.
inline SplitIndices split_indices(std::size_t n, std::array<Real, 3> fractions, std::uint64_t seed) {
  const Real total = fractions[0] + fractions[1] + fractions[2];
  for (Real f : fractions) {
    if (f < 0) throw ArgumentError("split fractions must be non-negative");
  }
  if (std::abs(total - Real(1)) > Real(1e-9)) throw ArgumentError("split fractions must sum to 1");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto n_train = std::size_t(std::llround(fractions[0] * Real(n)));
  const auto n_val = std::min(n - n_train, std::size_t(std::llround(fractions[1] * Real(n))));
  SplitIndices s;
  s.train.assign(idx.begin(), idx.begin() + long(n_train));
  s.validation.assign(idx.begin() + long(n_train), idx.begin() + long(n_train + n_val));
  s.test.assign(idx.begin() + long(n_train + n_val), idx.end());
  return s;
}

}  // namespace skinseg::eval
