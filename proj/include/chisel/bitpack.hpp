// Copyright 2026 The Chisel Authors
// SPDX-License-Identifier: Apache-2.0

// LSB-first bit streams. Signed values are stored as b-bit two's complement.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "chisel/errors.hpp"

namespace chisel {

inline std::size_t packed_bytes(std::size_t count, unsigned bits) { return (count * bits + 7) / 8; }

/// Smallest b with 2^b >= n (0 for n <= 1).
inline unsigned index_bits(std::size_t n) {
  unsigned b = 0;
  while ((std::size_t{1} << b) < n) ++b;
  return b;
}

class BitWriter {
 public:
  void put(std::uint64_t value, unsigned bits) {
    for (unsigned i = 0; i < bits; ++i) {
      if (fill_ == 0) bytes_.push_back(0);
      if ((value >> i) & 1u) bytes_.back() |= static_cast<std::uint8_t>(1u << fill_);
      fill_ = (fill_ + 1) & 7u;
    }
  }

  void put_signed(std::int64_t value, unsigned bits) {
    const std::uint64_t mask = bits >= 64 ? ~std::uint64_t{0} : ((std::uint64_t{1} << bits) - 1);
    put(static_cast<std::uint64_t>(value) & mask, bits);
  }

  const std::vector<std::uint8_t>& bytes() const { return bytes_; }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
  unsigned fill_ = 0;
};

class BitReader {
 public:
  explicit BitReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint64_t get(unsigned bits) {
    if (pos_ + bits > bytes_.size() * 8) throw IoError("bit stream truncated");
    std::uint64_t v = 0;
    for (unsigned i = 0; i < bits; ++i, ++pos_) {
      if ((bytes_[pos_ >> 3] >> (pos_ & 7)) & 1u) v |= std::uint64_t{1} << i;
    }
    return v;
  }

  std::int64_t get_signed(unsigned bits) {
    const std::uint64_t v = get(bits);
    if (bits == 0 || bits >= 64) return static_cast<std::int64_t>(v);
    const std::uint64_t sign = std::uint64_t{1} << (bits - 1);
    return static_cast<std::int64_t>((v ^ sign) - sign);
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> pack_signed(std::span<const std::int32_t> values, unsigned bits) {
  BitWriter w;
  for (auto v : values) w.put_signed(v, bits);
  return w.take();
}

inline std::vector<std::int32_t> unpack_signed(std::span<const std::uint8_t> bytes, std::size_t count, unsigned bits) {
  BitReader r(bytes);
  std::vector<std::int32_t> out(count);
  for (auto& v : out) v = static_cast<std::int32_t>(r.get_signed(bits));
  return out;
}

inline std::vector<std::uint8_t> pack_bits(std::span<const std::uint8_t> flags) {
  BitWriter w;
  for (auto f : flags) w.put(f ? 1u : 0u, 1);
  return w.take();
}

inline std::vector<std::uint8_t> unpack_bits(std::span<const std::uint8_t> bytes, std::size_t count) {
  BitReader r(bytes);
  std::vector<std::uint8_t> out(count);
  for (auto& f : out) f = static_cast<std::uint8_t>(r.get(1));
  return out;
}

}  // namespace chisel
