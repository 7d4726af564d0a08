// Copyright 2026 The Chisel Authors
// SPDX-License-Identifier: Apache-2.0

// Weight file.
//
//   "CHSLWGT\0"  u32 version=1
//   u32 meta_len, meta_len bytes of JSON (model config, catalog hash, training metadata)
//   u32 tensor_count, then per tensor:
//     u16 name_len, name, u8 rank, u64 dims[rank], u8 flags (bit0 frozen, bit1 trainable),
//     f32 values[product(dims)]
//   u64 FNV-1a-64 of all preceding bytes

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "chisel/binary_io.hpp"
#include "chisel/errors.hpp"
#include "chisel/model.hpp"
#include "json.hpp"

namespace chisel {

struct WeightFile {
  Model model;
  nlohmann::json meta = nlohmann::json::object();
};

inline constexpr std::string_view kWeightMagic{"CHSLWGT\0", 8};
inline constexpr std::uint32_t kWeightVersion = 1;

inline std::vector<std::uint8_t> encode_weights(const Model& model, nlohmann::json meta) {
  meta["width_divisor"] = model.config().width_divisor;
  meta["num_classes"] = model.config().num_classes;
  ByteWriter w;
  w.put_magic(kWeightMagic);
  w.put(kWeightVersion);
  w.put_string32(meta.dump());
  w.put(static_cast<std::uint32_t>(kNumParams));
  for (std::size_t i = 0; i < kNumParams; ++i) {
    const auto& p = model.param(i);
    w.put_string16(p.name);
    w.put(static_cast<std::uint8_t>(p.value.rank()));
    for (auto d : p.value.shape()) w.put(static_cast<std::uint64_t>(d));
    w.put(static_cast<std::uint8_t>((p.frozen ? 1 : 0) | (p.trainable ? 2 : 0)));
    w.put_array(p.value.data());
  }
  w.seal();
  return w.bytes();
}

inline void save_weights(const std::filesystem::path& path, const Model& model, const nlohmann::json& meta = {}) {
  ByteWriter w;
  w.put_bytes(encode_weights(model, meta.is_null() ? nlohmann::json::object() : meta));
  w.write_file(path);
}

inline WeightFile decode_weights(ByteReader r) {
  r.verify_seal();
  r.expect_magic(kWeightMagic);
  if (const auto v = r.get<std::uint32_t>(); v != kWeightVersion) {
    throw IoError(r.what() + ": unsupported weight file version " + std::to_string(v));
  }
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(r.get_string32());
  } catch (const nlohmann::json::exception& e) {
    throw IoError(r.what() + ": bad metadata: " + e.what());
  }
  ModelConfig cfg;
  cfg.width_divisor = meta.value("width_divisor", std::size_t{1});
  cfg.num_classes = meta.value("num_classes", std::size_t{905});
  WeightFile out{Model(cfg), meta};
  const auto count = r.get<std::uint32_t>();
  if (count != kNumParams) throw IoError(r.what() + ": expected " + std::to_string(kNumParams) + " tensors");
  for (std::size_t i = 0; i < count; ++i) {
    const std::string name = r.get_string16();
    auto& p = out.model.param(i);
    if (name != p.name) throw IoError(r.what() + ": tensor " + name + " where " + p.name + " was expected");
    Shape shape(r.get<std::uint8_t>());
    for (auto& d : shape) d = r.get<std::uint64_t>();
    if (shape != p.value.shape()) {
      throw IoError(r.what() + ": " + name + " has shape " + shape_str(shape) + ", model expects " + shape_str(p.value.shape()));
    }
    const auto flags = r.get<std::uint8_t>();
    p.frozen = flags & 1;
    p.trainable = flags & 2;
    p.value = Tensor(shape, r.get_array<float>(shape_size(shape)));
  }
  if (!r.at_end()) throw IoError(r.what() + ": trailing bytes");
  return out;
}

inline WeightFile load_weights(const std::filesystem::path& path) { return decode_weights(ByteReader::from_file(path)); }

}  // namespace chisel
