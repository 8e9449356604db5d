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

// Checkpoint file layout (all integers little-endian):
//
//   offset 0   8 bytes   magic "SKSGCKPT"
//   offset 8   u32       format version (1)
//   offset 12  u64       manifest length M in bytes
//   offset 20  M bytes   UTF-8 JSON manifest
//   then                 tensor payloads, concatenated in manifest order,
//                        each element an IEEE-754 binary64 little-endian
//
// Manifest:
//   {"dtype": "float64", "hyperparameters": {...},
//    "tensors": [{"name": str, "shape": [int...], "count": int}, ...]}

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "skinseg/params.hpp"

namespace skinseg {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::array<char, 8> kCheckpointMagic = {'S', 'K', 'S', 'G', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <typename U>
U get_le(const unsigned char* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= U(p[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline std::string encode_checkpoint(const ParameterStore& params, const nlohmann::json& hyper) {
  nlohmann::json manifest;
  manifest["dtype"] = "float64";
  manifest["hyperparameters"] = hyper.is_null() ? nlohmann::json::object() : hyper;
  manifest["tensors"] = nlohmann::json::array();
  for (const auto& [name, t] : params.all()) {
    manifest["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"count", t.size()}});
  }
  const std::string text = manifest.dump();
  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint64_t>(out, text.size());
  out += text;
  for (const auto& [name, t] : params.all()) {
    for (Real v : t.values()) {
      const double d = static_cast<double>(v);
      detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(d));
    }
  }
  return out;
}

struct Checkpoint {
  ParameterStore params;
  nlohmann::json hyperparameters;
};

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 20 || std::memcmp(p, kCheckpointMagic.data(), 8) != 0) {
    throw CheckpointError("not a checkpoint file (bad magic)");
  }
  if (detail::get_le<std::uint32_t>(p + 8) != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version");
  }
  const auto mlen = detail::get_le<std::uint64_t>(p + 12);
  if (mlen > bytes.size() - 20) throw CheckpointError("truncated checkpoint manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(20, mlen));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("bad checkpoint manifest: ") + e.what());
  }
  Checkpoint ck;
  std::size_t ofs = 20 + mlen;
  try {
    ck.hyperparameters = manifest.value("hyperparameters", nlohmann::json::object());
    for (const auto& entry : manifest.at("tensors")) {
      const auto shape = entry.at("shape").get<Shape>();
      const auto count = entry.at("count").get<std::size_t>();
      if (shape.empty() || count != shape_numel(shape)) throw CheckpointError("tensor count disagrees with shape");
      if (count > (bytes.size() - ofs) / 8) throw CheckpointError("truncated checkpoint payload");
      Buffer values(count);
      for (std::size_t i = 0; i < count; ++i) {
        values[i] = static_cast<Real>(std::bit_cast<double>(detail::get_le<std::uint64_t>(p + ofs + 8 * i)));
      }
      ofs += 8 * count;
      ck.params.add(entry.at("name").get<std::string>(), Tensor(shape, std::move(values)));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("bad checkpoint manifest: ") + e.what());
  } catch (const ArgumentError& e) {
    throw CheckpointError(std::string("bad checkpoint manifest: ") + e.what());
  } catch (const ShapeError& e) {
    throw CheckpointError(std::string("bad checkpoint manifest: ") + e.what());
  }
  if (ofs != bytes.size()) throw CheckpointError("trailing bytes after checkpoint payload");
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const ParameterStore& params,
                            const nlohmann::json& hyper = {}) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot write checkpoint " + path.string());
  const std::string bytes = encode_checkpoint(params, hyper);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("failed writing checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot read checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace skinseg
