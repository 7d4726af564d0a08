// Copyright 2026 The Chisel Authors
// SPDX-License-Identifier: Apache-2.0

// Little-endian byte buffers used by the on-disk containers. Every container
// ends with the FNV-1a-64 of all bytes before it.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "chisel/errors.hpp"
#include "chisel/hash.hpp"

namespace chisel {

static_assert(std::endian::native == std::endian::little,
              "container formats are little-endian; big-endian hosts need byte swapping");

class ByteWriter {
 public:
  template <typename T>
    requires std::is_trivially_copyable_v<T>
  void put(const T& v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }

  template <typename T>
    requires std::is_trivially_copyable_v<T>
  void put_array(std::span<const T> values) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(values.data());
    bytes_.insert(bytes_.end(), p, p + values.size_bytes());
  }

  void put_bytes(std::span<const std::uint8_t> b) { bytes_.insert(bytes_.end(), b.begin(), b.end()); }

  void put_string16(std::string_view s) {
    put(static_cast<std::uint16_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }

  void put_string32(std::string_view s) {
    put(static_cast<std::uint32_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }

  void put_magic(std::string_view magic) { bytes_.insert(bytes_.end(), magic.begin(), magic.end()); }

  /// Appends the content hash of everything written so far.
  void seal() { put(fnv1a(bytes_)); }

  std::size_t size() const { return bytes_.size(); }
  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

  void write_file(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes_.data()), static_cast<std::streamsize>(bytes_.size()));
    if (!out) throw IoError("short write to " + path.string());
  }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<std::uint8_t> bytes, std::string what = "buffer")
      : bytes_(std::move(bytes)), what_(std::move(what)) {}

  static ByteReader from_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return ByteReader(std::move(bytes), path.string());
  }

  /// Checks the trailing content hash and drops it from the readable range.
  void verify_seal() {
    if (bytes_.size() < sizeof(std::uint64_t)) throw IoError(what_ + ": truncated");
    const std::size_t body = bytes_.size() - sizeof(std::uint64_t);
    std::uint64_t stored;
    std::memcpy(&stored, bytes_.data() + body, sizeof stored);
    if (fnv1a(std::span(bytes_.data(), body)) != stored) {
      throw IoError(what_ + ": content hash mismatch");
    }
    end_ = body;
    sealed_hash_ = stored;
  }

  bool starts_with(std::string_view magic) const {
    return bytes_.size() - pos_ >= magic.size() &&
           std::string_view(reinterpret_cast<const char*>(bytes_.data() + pos_), magic.size()) == magic;
  }

  void expect_magic(std::string_view magic) {
    need(magic.size());
    if (std::string_view(reinterpret_cast<const char*>(bytes_.data() + pos_), magic.size()) != magic) {
      throw IoError(what_ + ": bad magic, expected " + std::string(magic));
    }
    pos_ += magic.size();
  }

  template <typename T>
    requires std::is_trivially_copyable_v<T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  template <typename T>
    requires std::is_trivially_copyable_v<T>
  std::vector<T> get_array(std::size_t count) {
    need(count * sizeof(T));
    std::vector<T> out(count);
    std::memcpy(out.data(), bytes_.data() + pos_, count * sizeof(T));
    pos_ += count * sizeof(T);
    return out;
  }

  std::vector<std::uint8_t> get_bytes(std::size_t n) { return get_array<std::uint8_t>(n); }

  std::string get_string16() { return get_chars(get<std::uint16_t>()); }
  std::string get_string32() { return get_chars(get<std::uint32_t>()); }

  bool at_end() const { return pos_ == limit(); }
  std::uint64_t sealed_hash() const { return sealed_hash_; }
  const std::string& what() const { return what_; }

 private:
  std::size_t limit() const { return end_ ? end_ : bytes_.size(); }

  void need(std::size_t n) const {
    if (pos_ + n > limit()) throw IoError(what_ + ": truncated");
  }

  std::string get_chars(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  std::vector<std::uint8_t> bytes_;
  std::string what_;
  std::size_t pos_ = 0;
  std::size_t end_ = 0;
  std::uint64_t sealed_hash_ = 0;
};

inline std::uint64_t file_checksum(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  Fnv1a h;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    h.update(buf, static_cast<std::size_t>(in.gcount()));
  }
  return h.digest();
}

}  // namespace chisel
