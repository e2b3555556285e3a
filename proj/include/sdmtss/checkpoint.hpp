// Copyright 2026 The sdmtss Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

// Flat parameter container file.
//
//   magic    8 bytes  "SDMTSSCK"
//   version  u32      (1)
//   n_meta   u32, then n_meta x { key: str, value: str }
//   n_tensor u32, then n_tensor x { name: str, rank: u32, dims: u64[rank],
//                                   values: f64[prod(dims)] }
//
// str is a u32 byte length followed by the bytes. Everything little-endian.
// Entries are written in key order, so equal contents give equal files.

#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "sdmtss/autodiff.hpp"
#include "sdmtss/error.hpp"

namespace sdmtss {

using ParamMap = std::map<std::string, ad::Tensor>;

struct CheckpointFile {
  std::map<std::string, std::string> meta;
  ParamMap tensors;
};

inline constexpr char kCheckpointMagic[8] = {'S', 'D', 'M', 'T', 'S', 'S', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::vector<unsigned char> encode_checkpoint(const CheckpointFile& ck) {
  std::vector<unsigned char> out(kCheckpointMagic, kCheckpointMagic + 8);
  const auto put = [&](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    out.insert(out.end(), b, b + n);
  };
  const auto put_u32 = [&](std::uint32_t v) { put(&v, 4); };
  const auto put_str = [&](const std::string& s) {
    put_u32(static_cast<std::uint32_t>(s.size()));
    put(s.data(), s.size());
  };
  put_u32(kCheckpointVersion);
  put_u32(static_cast<std::uint32_t>(ck.meta.size()));
  for (const auto& [k, v] : ck.meta) {
    put_str(k);
    put_str(v);
  }
  put_u32(static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    put_str(name);
    put_u32(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) {
      const std::uint64_t v = d;
      put(&v, 8);
    }
    put(t.values.data(), t.values.size() * sizeof(double));
  }
  return out;
}

inline CheckpointFile decode_checkpoint(const std::vector<unsigned char>& bytes,
                                        const std::string& what = "checkpoint") {
  std::size_t pos = 0;
  const auto need = [&](std::size_t n) {
    if (pos + n > bytes.size()) throw FormatError(what + ": truncated");
  };
  const auto get = [&](void* p, std::size_t n) {
    need(n);
    std::memcpy(p, bytes.data() + pos, n);
    pos += n;
  };
  const auto get_u32 = [&] {
    std::uint32_t v;
    get(&v, 4);
    return v;
  };
  const auto get_str = [&] {
    const auto n = get_u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes.data() + pos), n);
    pos += n;
    return s;
  };
  need(8);
  if (std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) throw FormatError(what + ": bad magic");
  pos = 8;
  const auto version = get_u32();
  if (version != kCheckpointVersion)
    throw FormatError(what + ": unsupported version " + std::to_string(version));
  CheckpointFile ck;
  const auto n_meta = get_u32();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    auto k = get_str();
    ck.meta[k] = get_str();
  }
  const auto n_tensor = get_u32();
  for (std::uint32_t i = 0; i < n_tensor; ++i) {
    auto name = get_str();
    const auto rank = get_u32();
    ad::Shape shape(rank);
    for (auto& d : shape) {
      std::uint64_t v;
      get(&v, 8);
      d = static_cast<std::size_t>(v);
    }
    const std::size_t n = ad::numel(shape);
    if (n > (bytes.size() - pos) / sizeof(double)) throw FormatError(what + ": truncated tensor " + name);
    std::vector<double> values(n);
    get(values.data(), n * sizeof(double));
    ck.tensors.emplace(std::move(name), ad::Tensor(std::move(shape), std::move(values), true));
  }
  if (pos != bytes.size()) throw FormatError(what + ": trailing bytes");
  return ck;
}

inline void save_checkpoint(const CheckpointFile& ck, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(ck);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed: " + path.string());
}

inline CheckpointFile load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  std::vector<unsigned char> bytes(std::istreambuf_iterator<char>(in), {});
  return decode_checkpoint(bytes, path.string());
}

}  // namespace sdmtss
