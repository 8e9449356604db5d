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

// Labelled samples: manifest ingestion, resizing and the synthetic lesion
// generator.
//
// Manifest format: one sample per line, "id<TAB>image_path<TAB>mask_path".
// Relative paths are resolved against the manifest's directory. Images are
// 8-bit RGB PNGs; masks are 8-bit grayscale PNGs with 0 = background and
// 255 = lesion.

#include <fstream>
#include <iostream>
#include <numbers>
#include <random>

#include "skinseg/image_io.hpp"
#include "skinseg/ops.hpp"

namespace skinseg::data {

using geometry::Box;
using geometry::Mask;

struct LabeledSample {
  std::string id;
  Tensor image;  // [H,W,3], values in [0,1]
  Mask mask;
  Box gt_box;
};

class IngestionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline Tensor resize_image(const Tensor& image, std::size_t out_h, std::size_t out_w) {
  require_rank(image, 3, "resize_image");
  if (image.dim(0) == out_h && image.dim(1) == out_w) return image;
  Tape tape;
  return ops::bilinear_resize(tape.constant(image), out_h, out_w).value();
}

/// Nearest-neighbour resize: output pixel i samples source floor((i + 0.5) * in / out).
inline Mask resize_mask(const Mask& mask, std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0) throw ArgumentError("resize_mask: output extents must be positive");
  if (mask.height() == out_h && mask.width() == out_w) return mask;
  Mask out(out_h, out_w);
  for (std::size_t r = 0; r < out_h; ++r) {
    const std::size_t sr = std::min(mask.height() - 1, (2 * r + 1) * mask.height() / (2 * out_h));
    for (std::size_t c = 0; c < out_w; ++c) {
      const std::size_t sc = std::min(mask.width() - 1, (2 * c + 1) * mask.width() / (2 * out_w));
      out.set(r, c, mask.at(sr, sc));
    }
  }
  return out;
}

/// Bilinear image, nearest-neighbour mask, ground-truth box recomputed.
/// Throws geometry::EmptyMaskError when the lesion vanishes at the new size.
inline LabeledSample resize_pair(const LabeledSample& s, std::size_t size) {
  if (size == 0) throw ArgumentError("resize_pair: size must be positive");
  LabeledSample out{s.id, resize_image(s.image, size, size), resize_mask(s.mask, size, size), {}};
  out.gt_box = geometry::mask_to_bbox(out.mask);
  return out;
}

// ---------------------------------------------------------------------------
// Manifest I/O

struct ManifestEntry {
  std::string id;
  std::filesystem::path image, mask;
};

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& manifest) {
  std::ifstream f(manifest);
  if (!f) throw IngestionError("cannot open manifest " + manifest.string());
  const auto root = manifest.parent_path();
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::size_t start = 0;
    for (std::size_t tab; (tab = line.find('\t', start)) != std::string::npos; start = tab + 1) {
      cols.push_back(line.substr(start, tab - start));
    }
    cols.push_back(line.substr(start));
    if (cols.size() != 3 || cols[0].empty()) {
      throw IngestionError(manifest.string() + ":" + std::to_string(lineno) + ": expected id<TAB>image<TAB>mask");
    }
    auto resolve = [&](const std::string& p) {
      std::filesystem::path path(p);
      return path.is_absolute() ? path : root / path;
    };
    out.push_back(ManifestEntry{cols[0], resolve(cols[1]), resolve(cols[2])});
  }
  return out;
}

inline LabeledSample load_sample(const ManifestEntry& e) {
  io::Image8 rgb, gray;
  try {
    rgb = io::read_png(e.image, 3);
    gray = io::read_png(e.mask, 1);
  } catch (const io::ImageIoError& err) {
    throw IngestionError("sample '" + e.id + "': " + err.what());
  }
  if (rgb.height != gray.height || rgb.width != gray.width) {
    throw IngestionError("sample '" + e.id + "': image is " + std::to_string(rgb.width) + "x" + std::to_string(rgb.height) +
                         " but mask is " + std::to_string(gray.width) + "x" + std::to_string(gray.height));
  }
  LabeledSample s{e.id, io::to_tensor(rgb), io::to_mask(gray), {}};
  s.gt_box = geometry::mask_to_bbox(s.mask);
  return s;
}

/// Loads every manifest entry. Samples with an empty mask are skipped with a
/// warning on stderr; unreadable files and size mismatches throw.
inline std::vector<LabeledSample> load_dataset(const std::filesystem::path& manifest) {
  std::vector<LabeledSample> out;
  for (const ManifestEntry& e : read_manifest(manifest)) {
    try {
      out.push_back(load_sample(e));
    } catch (const geometry::EmptyMaskError&) {
      std::cerr << "warning: skipping sample '" << e.id << "': empty mask\n";
    }
  }
  return out;
}

/// Writes images/<id>.png, masks/<id>.png and manifest.tsv under `dir`.
/// Returns the manifest path.
inline std::filesystem::path save_dataset(const std::filesystem::path& dir, std::span<const LabeledSample> samples) {
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "masks");
  const auto manifest = dir / "manifest.tsv";
  std::ofstream f(manifest, std::ios::trunc);
  if (!f) throw IngestionError("cannot write manifest " + manifest.string());
  for (const LabeledSample& s : samples) {
    const std::string img = "images/" + s.id + ".png", msk = "masks/" + s.id + ".png";
    io::write_png(dir / img, io::from_tensor(s.image));
    io::write_png(dir / msk, io::from_mask(s.mask));
    f << s.id << '\t' << img << '\t' << msk << '\n';
  }
  return manifest;
}

// ---------------------------------------------------------------------------
// Synthetic lesions

inline constexpr Real kMinLesionFraction = Real(0.02);
inline constexpr Real kMaxLesionFraction = Real(0.30);

/// Keeps only the 4-connected component containing (r0, c0).
inline Mask component_at(const Mask& m, std::size_t r0, std::size_t c0) {
  Mask out(m.height(), m.width());
  if (!m.at(r0, c0)) return out;
  std::vector<std::pair<std::size_t, std::size_t>> stack{{r0, c0}};
  out.set(r0, c0, true);
  while (!stack.empty()) {
    auto [r, c] = stack.back();
    stack.pop_back();
    const std::pair<long, long> nb[4] = {{long(r) - 1, long(c)}, {long(r) + 1, long(c)}, {long(r), long(c) - 1}, {long(r), long(c) + 1}};
    for (auto [y, x] : nb) {
      if (y < 0 || x < 0 || y >= long(m.height()) || x >= long(m.width())) continue;
      if (!m.at(std::size_t(y), std::size_t(x)) || out.at(std::size_t(y), std::size_t(x))) continue;
      out.set(std::size_t(y), std::size_t(x), true);
      stack.emplace_back(std::size_t(y), std::size_t(x));
    }
  }
  return out;
}

namespace detail {

struct BlobShape {
  Real cy, cx, a, b, theta;
  std::array<Real, 3> amp, phase;

  Real boundary(Real phi) const {
    Real s = 1;
    for (std::size_t j = 0; j < 3; ++j) s += amp[j] * std::sin(Real(j + 2) * phi + phase[j]);
    return s;
  }

  bool inside(Real y, Real x) const {
    const Real dy = y - cy, dx = x - cx;
    const Real u = (dx * std::cos(theta) + dy * std::sin(theta)) / a;
    const Real v = (-dx * std::sin(theta) + dy * std::cos(theta)) / b;
    const Real rho = std::sqrt(u * u + v * v);
    return rho <= boundary(std::atan2(v, u));
  }
};

}  // namespace detail

/// One irregular ellipse-like lesion per image on a textured skin-toned
/// background. Lesion area is 2%..30% of the image, the mask is a single
/// 4-connected component, and output depends only on (n, seed, size).
inline std::vector<LabeledSample> synth_generate(std::size_t n, std::uint64_t seed, std::size_t size) {
  if (size < 32) throw ArgumentError("synth_generate: size must be at least 32");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<Real> u01(0, 1);
  auto uni = [&](Real lo, Real hi) { return lo + (hi - lo) * u01(rng); };
  std::normal_distribution<Real> noise(0, 1);
  const Real S = Real(size);
  const Real pi = std::numbers::pi_v<Real>;

  std::vector<LabeledSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Mask mask;
    detail::BlobShape blob{};
    for (;;) {
      const Real frac = uni(Real(0.03), Real(0.25));
      const Real aspect = uni(Real(0.6), Real(1.0));
      blob.a = std::sqrt(frac * S * S / (pi * aspect));
      blob.b = blob.a * aspect;
      blob.theta = uni(0, pi);
      for (std::size_t j = 0; j < 3; ++j) {
        blob.amp[j] = uni(0, Real(0.08));
        blob.phase[j] = uni(0, 2 * pi);
      }
      const Real reach = blob.a * Real(1.25) + 1;
      if (2 * reach >= S) continue;
      blob.cy = uni(reach, S - reach);
      blob.cx = uni(reach, S - reach);
      Mask raw(size, size);
      for (std::size_t r = 0; r < size; ++r) {
        for (std::size_t c = 0; c < size; ++c) raw.set(r, c, blob.inside(Real(r) + Real(0.5), Real(c) + Real(0.5)));
      }
      mask = component_at(raw, std::size_t(blob.cy), std::size_t(blob.cx));
      const Real area = Real(mask.count()) / (S * S);
      if (area >= kMinLesionFraction && area <= kMaxLesionFraction) break;
    }

    const std::array<Real, 3> skin{uni(0.78, 0.92), uni(0.58, 0.70), uni(0.48, 0.60)};
    const std::array<Real, 3> lesion{uni(0.30, 0.55), uni(0.16, 0.32), uni(0.10, 0.24)};
    const Real gy = uni(-0.08, 0.08), gx = uni(-0.08, 0.08);
    std::array<Real, 4> wave_f, wave_p;
    for (std::size_t j = 0; j < 4; ++j) {
      wave_f[j] = uni(1, 5) * 2 * pi / S;
      wave_p[j] = uni(0, 2 * pi);
    }
    Tensor image({size, size, 3});
    for (std::size_t r = 0; r < size; ++r) {
      for (std::size_t c = 0; c < size; ++c) {
        const Real y = Real(r), x = Real(c);
        const Real texture = Real(0.025) * (std::sin(wave_f[0] * x + wave_p[0]) + std::sin(wave_f[1] * y + wave_p[1]) +
                                            std::sin(wave_f[2] * (x + y) + wave_p[2]) +
                                            std::sin(wave_f[3] * (x - y) + wave_p[3]));
        const Real shade = gy * (y / S - Real(0.5)) + gx * (x / S - Real(0.5)) + texture;
        const bool in = mask.at(r, c);
        Real depth = 0;
        if (in) {
          const Real dy = (y + Real(0.5) - blob.cy) / blob.b, dx = (x + Real(0.5) - blob.cx) / blob.a;
          depth = Real(0.12) * std::max(Real(0), Real(1) - std::sqrt(dy * dy + dx * dx));
        }
        for (std::size_t ch = 0; ch < 3; ++ch) {
          const Real base = in ? lesion[ch] - depth : skin[ch];
          image.at(r, c, ch) = std::clamp(base + shade + Real(0.03) * noise(rng), Real(0), Real(1));
        }
      }
    }
    char id[32];
    std::snprintf(id, sizeof id, "synth_%05zu", i);
    LabeledSample s{id, std::move(image), std::move(mask), {}};
    s.gt_box = geometry::mask_to_bbox(s.mask);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace skinseg::data
