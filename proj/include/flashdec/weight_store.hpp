// Copyright 2026 The flashdec Authors. All Rights Reserved.
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

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "flashdec/decoder.hpp"
#include "flashdec/errors.hpp"
#include "flashdec/tensor.hpp"

namespace flashdec {

static_assert(std::endian::native == std::endian::little,
              "the container format is written with native little-endian stores");

// Binary container shared by decoder weights, datasets and selections:
//   "FVAE" | u32 version | u64 header length | header JSON (UTF-8)
//   | u32 tensor count | per tensor: u16 name length, name, u8 dtype
//   (0 = f32, 1 = f64), u8 rank, u64 extents, raw row-major payload
//   | u32 CRC32 of every preceding byte.
namespace store {

inline constexpr char kMagic[4] = {'F', 'V', 'A', 'E'};
inline constexpr std::uint32_t kVersion = 1;

enum class DType : std::uint8_t { kF32 = 0, kF64 = 1 };

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::kF32 : DType::kF64;
}

struct StoredTensor {
  std::string name;
  DType dtype = DType::kF64;
  Shape shape;
  std::vector<std::uint8_t> payload;

  template <typename T>
  static StoredTensor from(std::string name, const Tensor<T>& t) {
    StoredTensor s{std::move(name), dtype_of<T>(), t.shape(), {}};
    s.payload.resize(static_cast<std::size_t>(t.numel()) * sizeof(T));
    if (!s.payload.empty()) std::memcpy(s.payload.data(), t.raw(), s.payload.size());
    return s;
  }

  // Converts when the stored dtype differs from T.
  template <typename T>
  Tensor<T> as() const {
    const std::int64_t n = shape_numel(shape);
    std::vector<T> data(static_cast<std::size_t>(n));
    if (dtype == DType::kF32) {
      std::vector<float> raw(static_cast<std::size_t>(n));
      if (n) std::memcpy(raw.data(), payload.data(), payload.size());
      for (std::int64_t i = 0; i < n; ++i) data[i] = static_cast<T>(raw[i]);
    } else {
      std::vector<double> raw(static_cast<std::size_t>(n));
      if (n) std::memcpy(raw.data(), payload.data(), payload.size());
      for (std::int64_t i = 0; i < n; ++i) data[i] = static_cast<T>(raw[i]);
    }
    return Tensor<T>(shape, std::move(data));
  }
};

struct Container {
  nlohmann::json header;
  std::vector<StoredTensor> tensors;

  const StoredTensor& get(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return t;
    }
    throw FormatError("container has no tensor '" + name + "'");
  }
  bool contains(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return true;
    }
    return false;
  }
};

namespace detail {

template <typename U>
void put(std::vector<std::uint8_t>& buf, U v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  buf.insert(buf.end(), p, p + sizeof(U));
}

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& buf, std::size_t end) : buf_(buf), end_(end) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }

  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  std::vector<std::uint8_t> bytes(std::size_t n) {
    need(n);
    std::vector<std::uint8_t> v(buf_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                buf_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return v;
  }

  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (n > end_ - pos_) throw FormatError("truncated container");
  }
  const std::vector<std::uint8_t>& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large buffers in chunks.
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

inline std::vector<std::uint8_t> encode(const nlohmann::json& header,
                                        const std::vector<StoredTensor>& tensors) {
  std::vector<std::uint8_t> buf;
  buf.insert(buf.end(), kMagic, kMagic + 4);
  detail::put<std::uint32_t>(buf, kVersion);
  const std::string text = header.dump();
  detail::put<std::uint64_t>(buf, text.size());
  buf.insert(buf.end(), text.begin(), text.end());
  detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.name.size() > 0xffff) throw FormatError("tensor name too long: " + t.name);
    if (t.shape.size() > 0xff) throw FormatError("tensor rank too large: " + t.name);
    detail::put<std::uint16_t>(buf, static_cast<std::uint16_t>(t.name.size()));
    buf.insert(buf.end(), t.name.begin(), t.name.end());
    detail::put<std::uint8_t>(buf, static_cast<std::uint8_t>(t.dtype));
    detail::put<std::uint8_t>(buf, static_cast<std::uint8_t>(t.shape.size()));
    for (auto e : t.shape) detail::put<std::uint64_t>(buf, static_cast<std::uint64_t>(e));
    buf.insert(buf.end(), t.payload.begin(), t.payload.end());
  }
  detail::put<std::uint32_t>(buf, detail::crc32_of(buf.data(), buf.size()));
  return buf;
}

inline Container decode(const std::vector<std::uint8_t>& buf) {
  if (buf.size() < 8 || std::memcmp(buf.data(), kMagic, 4) != 0) {
    throw FormatError("not a weight container (bad magic)");
  }
  if (buf.size() < 4 + 4 + 8 + 4 + 4) throw FormatError("truncated container");
  const std::size_t body = buf.size() - 4;
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, buf.data() + body, 4);
  detail::Reader r(buf, body);
  r.str(4);
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) {
    throw FormatError("unsupported container version " + std::to_string(version));
  }
  if (detail::crc32_of(buf.data(), body) != stored_crc) {
    throw ChecksumError("container checksum mismatch");
  }
  Container c;
  const auto hlen = r.get<std::uint64_t>();
  try {
    c.header = nlohmann::json::parse(r.str(static_cast<std::size_t>(hlen)));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("container header is not valid JSON: ") + e.what());
  }
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    StoredTensor t;
    t.name = r.str(r.get<std::uint16_t>());
    const auto dt = r.get<std::uint8_t>();
    if (dt > 1) throw FormatError("unknown dtype tag " + std::to_string(dt));
    t.dtype = static_cast<DType>(dt);
    const auto rank = r.get<std::uint8_t>();
    for (int k = 0; k < rank; ++k) t.shape.push_back(static_cast<std::int64_t>(r.get<std::uint64_t>()));
    const std::size_t elem = t.dtype == DType::kF32 ? 4 : 8;
    t.payload = r.bytes(static_cast<std::size_t>(shape_numel(t.shape)) * elem);
    c.tensors.push_back(std::move(t));
  }
  if (r.pos() != body) throw FormatError("trailing bytes after last tensor");
  return c;
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("failed writing '" + path.string() + "'");
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f), {});
}

inline void write_container(const std::filesystem::path& path, const nlohmann::json& header,
                            const std::vector<StoredTensor>& tensors) {
  write_file(path, encode(header, tensors));
}

inline Container read_container(const std::filesystem::path& path) {
  return decode(read_file(path));
}

}  // namespace store

template <typename T>
std::vector<std::uint8_t> encode_weights(const Decoder<T>& d) {
  nlohmann::json header{{"section", "decoder"},
                        {"config", d.config().to_json()},
                        {"config_hash", hex64(d.config().hash())}};
  std::vector<store::StoredTensor> tensors;
  for (const auto& [name, t] : d.params()) tensors.push_back(store::StoredTensor::from(name, t));
  return store::encode(header, tensors);
}

template <typename T>
void save_weights(const Decoder<T>& d, const std::filesystem::path& path) {
  store::write_file(path, encode_weights(d));
}

template <typename T>
Decoder<T> decode_weights(const store::Container& c, const DecoderConfig* declared = nullptr) {
  if (c.header.value("section", std::string()) != "decoder") {
    throw FormatError("container does not hold decoder weights");
  }
  DecoderConfig config;
  try {
    config = DecoderConfig::from_json(c.header.at("config"));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("embedded config invalid: ") + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("embedded config missing: ") + e.what());
  }
  if (c.header.value("config_hash", std::string()) != hex64(config.hash())) {
    throw FormatError("embedded config hash does not match its config text");
  }
  if (declared && declared->hash() != config.hash()) {
    throw ConfigError("weight file was written for a different decoder config");
  }
  typename Decoder<T>::ParamMap params;
  for (const auto& t : c.tensors) {
    if (!params.emplace(t.name, t.as<T>()).second) {
      throw FormatError("duplicate tensor '" + t.name + "'");
    }
  }
  try {
    return Decoder<T>(std::move(config), std::move(params));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("weights do not match embedded config: ") + e.what());
  }
}

template <typename T>
Decoder<T> load_weights(const std::filesystem::path& path, const DecoderConfig* declared = nullptr) {
  return decode_weights<T>(store::read_container(path), declared);
}

}  // namespace flashdec
