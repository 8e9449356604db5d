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
#include <cstring>
#include <filesystem>

#include <png.h>

#include "skinseg/geometry.hpp"

namespace skinseg::io {

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 8-bit interleaved image, 1 (gray) or 3 (RGB) channels.
struct Image8 {
  std::size_t height = 0, width = 0, channels = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }
};

/// Reads any PNG and converts it to RGB (channels 3) or grayscale (1).
inline Image8 read_png(const std::filesystem::path& path, std::size_t channels) {
  if (channels != 1 && channels != 3) throw ImageIoError("read_png: channels must be 1 or 3");
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw ImageIoError("cannot read " + path.string() + ": " + img.message);
  }
  img.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  Image8 out{img.height, img.width, channels, std::vector<std::uint8_t>(PNG_IMAGE_SIZE(img))};
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw ImageIoError("cannot decode " + path.string() + ": " + msg);
  }
  return out;
}

inline void write_png(const std::filesystem::path& path, const Image8& image) {
  if (image.channels != 1 && image.channels != 3) throw ImageIoError("write_png: channels must be 1 or 3");
  if (image.pixels.size() != image.height * image.width * image.channels) throw ImageIoError("write_png: bad buffer size");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = image.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&img, path.c_str(), 0, image.pixels.data(), 0, nullptr)) {
    throw ImageIoError("cannot write " + path.string() + ": " + img.message);
  }
}

inline std::uint8_t to_byte(Real v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, Real(0), Real(1)) * Real(255)));
}

/// [H,W,C] tensor with values in [0,1].
inline Tensor to_tensor(const Image8& image) {
  Tensor t({image.height, image.width, image.channels});
  for (std::size_t i = 0; i < image.pixels.size(); ++i) t[i] = Real(image.pixels[i]) / Real(255);
  return t;
}

inline Image8 from_tensor(const Tensor& t) {
  require_rank(t, 3, "from_tensor");
  Image8 out{t.dim(0), t.dim(1), t.dim(2), std::vector<std::uint8_t>(t.size())};
  for (std::size_t i = 0; i < t.size(); ++i) out.pixels[i] = to_byte(t[i]);
  return out;
}

/// Gray values >= 128 are lesion.
inline geometry::Mask to_mask(const Image8& gray) {
  if (gray.channels != 1) throw ImageIoError("to_mask: expected a single-channel image");
  std::vector<std::uint8_t> bits(gray.pixels.size());
  for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = gray.pixels[i] >= 128 ? 1 : 0;
  return geometry::Mask(gray.height, gray.width, std::move(bits));
}

/// 0 / 255 grayscale image.
inline Image8 from_mask(const geometry::Mask& mask) {
  Image8 out{mask.height(), mask.width(), 1, std::vector<std::uint8_t>(mask.size())};
  for (std::size_t i = 0; i < mask.size(); ++i) out.pixels[i] = mask.data()[i] ? 255 : 0;
  return out;
}

// ---------------------------------------------------------------------------
// Overlay drawing

struct Rgb {
  std::uint8_t r, g, b;
};

inline constexpr Rgb kGreen{0, 255, 0};
inline constexpr Rgb kRed{255, 0, 0};
inline constexpr Rgb kBlue{0, 0, 255};

inline void put(Image8& img, long y, long x, Rgb c) {
  if (y < 0 || x < 0 || y >= long(img.height) || x >= long(img.width)) return;
  img.at(std::size_t(y), std::size_t(x), 0) = c.r;
  img.at(std::size_t(y), std::size_t(x), 1) = c.g;
  img.at(std::size_t(y), std::size_t(x), 2) = c.b;
}

/// One-pixel outline of the pixels covered by a half-open box.
inline void draw_box(Image8& img, const geometry::Box& b, Rgb c) {
  const long x0 = long(std::floor(b.x1)), y0 = long(std::floor(b.y1));
  const long x1 = long(std::ceil(b.x2)) - 1, y1 = long(std::ceil(b.y2)) - 1;
  for (long x = x0; x <= x1; ++x) {
    put(img, y0, x, c);
    put(img, y1, x, c);
  }
  for (long y = y0; y <= y1; ++y) {
    put(img, y, x0, c);
    put(img, y, x1, c);
  }
}

/// Marks foreground pixels with a 4-neighbour outside the mask.
inline void draw_contour(Image8& img, const geometry::Mask& m, Rgb c) {
  const long H = long(m.height()), W = long(m.width());
  auto fg = [&](long y, long x) { return y >= 0 && x >= 0 && y < H && x < W && m.at(std::size_t(y), std::size_t(x)); };
  for (long y = 0; y < H; ++y) {
    for (long x = 0; x < W; ++x) {
      if (fg(y, x) && (!fg(y - 1, x) || !fg(y + 1, x) || !fg(y, x - 1) || !fg(y, x + 1))) put(img, y, x, c);
    }
  }
}

}  // namespace skinseg::io
