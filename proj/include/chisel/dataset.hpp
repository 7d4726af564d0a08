// Copyright 2026 The Chisel Authors
// SPDX-License-Identifier: Apache-2.0

// UJIIndoorLoc ingestion: CSV parsing, RSSI normalisation, the reference-point
// catalog, the 80:20 split, per-RP augmentation and the 24x24 image layout.

#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "chisel/binary_io.hpp"
#include "chisel/errors.hpp"
#include "chisel/hash.hpp"
#include "chisel/rng.hpp"
#include "chisel/tensor.hpp"

namespace chisel {

inline constexpr std::size_t kNumAps = 520;
inline constexpr std::size_t kImageSide = 24;
inline constexpr std::size_t kImagePixels = kImageSide * kImageSide;
inline constexpr std::size_t kCsvColumns = kNumAps + 9;
/// Dataset convention for "access point not detected".
inline constexpr int kRssiAbsent = 100;

using Rssi = std::array<float, kNumAps>;
using Image = std::array<float, kImagePixels>;

struct RawRecord {
  std::array<int, kNumAps> rssi{};
  double longitude = 0.0;
  double latitude = 0.0;
  int floor = 0;
  int building = 0;
  int space = 0;
  int relative_position = 0;
  int user = 0;
  int phone = 0;
  std::int64_t timestamp = 0;
};

struct Coordinate {
  double longitude = 0.0;
  double latitude = 0.0;
};

inline double distance(const Coordinate& a, const Coordinate& b) {
  return std::hypot(a.longitude - b.longitude, a.latitude - b.latitude);
}

/// (building, floor, space, relative position): one reference point.
struct RpKey {
  int building = 0;
  int floor = 0;
  int space = 0;
  int relative_position = 0;

  friend auto operator<=>(const RpKey&, const RpKey&) = default;
};

struct RecordMeta {
  RpKey rp;
  Coordinate coord;
  int user = 0;
  int phone = 0;
  std::int64_t timestamp = 0;
};

struct Fingerprint {
  Rssi rssi{};
  RecordMeta meta;
};

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '"')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '"' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

template <typename T>
T parse_number(std::string_view field, std::size_t row, std::size_t col) {
  field = trim(field);
  T v{};
  const auto* end = field.data() + field.size();
  auto [ptr, ec] = std::from_chars(field.data(), end, v);
  if (ec != std::errc() || ptr != end || field.empty()) {
    throw DataError("row " + std::to_string(row) + " column " + std::to_string(col + 1) +
                    ": non-numeric value '" + std::string(field) + "'");
  }
  return v;
}

}  // namespace detail

/// Parses a UJIIndoorLoc CSV (header row, then 520 WAP columns, LONGITUDE,
/// LATITUDE, FLOOR, BUILDINGID, SPACEID, RELATIVEPOSITION, USERID, PHONEID,
/// TIMESTAMP). Raw integers and the absent sentinel are preserved.
inline std::vector<RawRecord> parse_ujiindoorloc(std::istream& in,
                                                 std::vector<std::string>* warnings = nullptr) {
  std::vector<RawRecord> records;
  std::string line;
  std::size_t row = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++row;
    if (detail::trim(line).empty()) continue;
    if (!header_seen) {
      header_seen = true;
      continue;
    }
    const auto fields = detail::split_commas(line);
    if (fields.size() != kCsvColumns) {
      throw DataError("row " + std::to_string(row) + ": expected " + std::to_string(kCsvColumns) +
                      " columns, got " + std::to_string(fields.size()));
    }
    RawRecord r;
    for (std::size_t a = 0; a < kNumAps; ++a) r.rssi[a] = detail::parse_number<int>(fields[a], row, a);
    std::size_t c = kNumAps;
    r.longitude = detail::parse_number<double>(fields[c], row, c);
    ++c;
    r.latitude = detail::parse_number<double>(fields[c], row, c);
    ++c;
    r.floor = detail::parse_number<int>(fields[c], row, c);
    ++c;
    r.building = detail::parse_number<int>(fields[c], row, c);
    ++c;
    r.space = detail::parse_number<int>(fields[c], row, c);
    ++c;
    r.relative_position = detail::parse_number<int>(fields[c], row, c);
    ++c;
    r.user = detail::parse_number<int>(fields[c], row, c);
    ++c;
    r.phone = detail::parse_number<int>(fields[c], row, c);
    ++c;
    r.timestamp = detail::parse_number<std::int64_t>(fields[c], row, c);
    records.push_back(r);
  }
  if (records.empty() && warnings != nullptr) warnings->push_back("no data rows found");
  return records;
}

inline std::vector<RawRecord> parse_ujiindoorloc_file(const std::filesystem::path& path,
                                                      std::vector<std::string>* warnings = nullptr) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return parse_ujiindoorloc(in, warnings);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

/// Maps raw dBm (or the absent sentinel) to [0, 1]: sentinel -> 0, otherwise
/// clamp to [-100, 0] and rescale linearly.
inline float normalize_rssi(int raw) {
  if (raw == kRssiAbsent) return 0.0f;
  const int v = std::clamp(raw, -100, 0);
  return static_cast<float>(v + 100) / 100.0f;
}

inline Fingerprint to_fingerprint(const RawRecord& r) {
  Fingerprint fp;
  for (std::size_t a = 0; a < kNumAps; ++a) fp.rssi[a] = normalize_rssi(r.rssi[a]);
  fp.meta.rp = {r.building, r.floor, r.space, r.relative_position};
  fp.meta.coord = {r.longitude, r.latitude};
  fp.meta.user = r.user;
  fp.meta.phone = r.phone;
  fp.meta.timestamp = r.timestamp;
  return fp;
}

// ---------------------------------------------------------------------------
// Image layout: AP a sits at flat index a of a row-major 24x24 image; the tail is zero.

inline Image to_image(const Rssi& rssi) {
  Image img{};
  std::copy(rssi.begin(), rssi.end(), img.begin());
  return img;
}

inline Rssi from_image(const Image& img) {
  Rssi rssi{};
  std::copy_n(img.begin(), kNumAps, rssi.begin());
  return rssi;
}

// ---------------------------------------------------------------------------
// Reference-point catalog

class RpCatalog {
 public:
  struct Entry {
    RpKey key;
    Coordinate centroid;
  };

  RpCatalog() = default;

  /// One class per distinct RP tuple, ordered by tuple; centroid = mean coordinate of its samples.
  template <typename Range>
  static RpCatalog build(const Range& metas) {
    std::map<RpKey, std::pair<Coordinate, std::size_t>> acc;
    for (const RecordMeta& m : metas) {
      auto& [sum, n] = acc[m.rp];
      sum.longitude += m.coord.longitude;
      sum.latitude += m.coord.latitude;
      ++n;
    }
    std::vector<Entry> entries;
    entries.reserve(acc.size());
    for (const auto& [key, v] : acc) {
      const double n = static_cast<double>(v.second);
      entries.push_back({key, {v.first.longitude / n, v.first.latitude / n}});
    }
    return RpCatalog(std::move(entries));
  }

  explicit RpCatalog(std::vector<Entry> entries) : entries_(std::move(entries)) {
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (!index_.emplace(entries_[i].key, static_cast<int>(i)).second) {
        throw DataError("duplicate RP tuple in catalog");
      }
    }
  }

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }

  std::optional<int> index_of(const RpKey& key) const {
    auto it = index_.find(key);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  const RpKey& key(int cls) const { return entry(cls).key; }
  const Coordinate& centroid(int cls) const { return entry(cls).centroid; }

  std::uint64_t hash() const {
    Fnv1a h;
    for (const auto& e : entries_) {
      h.update_value(e.key.building);
      h.update_value(e.key.floor);
      h.update_value(e.key.space);
      h.update_value(e.key.relative_position);
      h.update_value(e.centroid.longitude);
      h.update_value(e.centroid.latitude);
    }
    return h.digest();
  }

  /// class-index,building,floor,space,relpos,lon,lat
  void write_csv(std::ostream& os) const {
    os << "class,building,floor,space,relpos,lon,lat\n";
    os << std::setprecision(17);
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& e = entries_[i];
      os << i << ',' << e.key.building << ',' << e.key.floor << ',' << e.key.space << ','
         << e.key.relative_position << ',' << e.centroid.longitude << ',' << e.centroid.latitude << '\n';
    }
  }

  static RpCatalog read_csv(std::istream& in) {
    std::string line;
    std::getline(in, line);
    std::vector<Entry> entries;
    std::size_t row = 1;
    while (std::getline(in, line)) {
      ++row;
      if (detail::trim(line).empty()) continue;
      const auto f = detail::split_commas(line);
      if (f.size() != 7) throw DataError("catalog row " + std::to_string(row) + ": expected 7 fields");
      const auto cls = detail::parse_number<std::size_t>(f[0], row, 0);
      if (cls != entries.size()) throw DataError("catalog row " + std::to_string(row) + ": class out of order");
      Entry e;
      e.key = {detail::parse_number<int>(f[1], row, 1), detail::parse_number<int>(f[2], row, 2),
               detail::parse_number<int>(f[3], row, 3), detail::parse_number<int>(f[4], row, 4)};
      e.centroid = {detail::parse_number<double>(f[5], row, 5), detail::parse_number<double>(f[6], row, 6)};
      entries.push_back(e);
    }
    return RpCatalog(std::move(entries));
  }

 private:
  const Entry& entry(int cls) const {
    if (cls < 0 || static_cast<std::size_t>(cls) >= entries_.size()) {
      throw DataError("class " + std::to_string(cls) + " not in catalog");
    }
    return entries_[static_cast<std::size_t>(cls)];
  }

  std::vector<Entry> entries_;
  std::map<RpKey, int> index_;
};

// ---------------------------------------------------------------------------
// Train/validation split

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};

/// 80:20 split of record indices, stratified per class. Classes with fewer
/// than five samples are pooled and assigned at random. The validation size is
/// exactly floor(N / 5); per-class quotas are floor(n / 5) plus one for the
/// classes with the largest remainders until the total is met.
inline Split split_train_val(const std::vector<int>& labels, std::uint64_t seed) {
  constexpr std::size_t kMinStratified = 5;
  const std::size_t n = labels.size();
  const std::size_t target = n / 5;

  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < n; ++i) by_class[labels[i]].push_back(i);

  std::vector<std::size_t> pool;
  struct Quota {
    int cls;
    std::size_t count;
    std::size_t remainder;
  };
  std::vector<Quota> quotas;
  std::size_t assigned = 0;
  for (const auto& [cls, idx] : by_class) {
    if (idx.size() < kMinStratified) {
      pool.insert(pool.end(), idx.begin(), idx.end());
    } else {
      quotas.push_back({cls, idx.size() / 5, idx.size() % 5});
      assigned += idx.size() / 5;
    }
  }
  std::sort(pool.begin(), pool.end());
  std::size_t remaining = target - assigned;
  std::size_t pool_quota = std::min(remaining, (pool.size() * 2 + 5) / 10);
  std::size_t extra = remaining - pool_quota;

  std::vector<std::size_t> order(quotas.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return quotas[a].remainder > quotas[b].remainder;
  });
  for (std::size_t k = 0; extra > 0 && k < order.size(); ++k, --extra) ++quotas[order[k]].count;
  pool_quota += std::min(extra, pool.size() - pool_quota);

  Split split;
  for (const auto& q : quotas) {
    std::vector<std::size_t> idx = by_class[q.cls];
    Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(q.cls)));
    rng.shuffle(std::span(idx));
    split.validation.insert(split.validation.end(), idx.begin(), idx.begin() + static_cast<long>(q.count));
    split.train.insert(split.train.end(), idx.begin() + static_cast<long>(q.count), idx.end());
  }
  Rng pool_rng(Rng::derive(seed, UINT64_MAX));
  pool_rng.shuffle(std::span(pool));
  split.validation.insert(split.validation.end(), pool.begin(), pool.begin() + static_cast<long>(pool_quota));
  split.train.insert(split.train.end(), pool.begin() + static_cast<long>(pool_quota), pool.end());
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.validation.begin(), split.validation.end());
  return split;
}

// ---------------------------------------------------------------------------
// Augmentation

/// Per-AP sampling interval inside one RP: mean m of the AP's non-zero values
/// and the mean absolute deviation d of those values from m. The interval is
/// [max(0, m - d), min(1, m + d)]; `observed` is false for an AP that is zero
/// in every sample.
struct ApInterval {
  bool observed = false;
  float lo = 0.0f;
  float hi = 0.0f;
};

inline std::array<ApInterval, kNumAps> ap_intervals(std::span<const Rssi> samples) {
  if (samples.empty()) throw DataError("augment_rp: empty sample set");
  std::array<ApInterval, kNumAps> out{};
  for (std::size_t a = 0; a < kNumAps; ++a) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& s : samples) {
      if (s[a] != 0.0f) {
        sum += s[a];
        ++count;
      }
    }
    if (count == 0) continue;
    const double mean = sum / static_cast<double>(count);
    double dev = 0.0;
    for (const auto& s : samples) {
      if (s[a] != 0.0f) dev += std::abs(s[a] - mean);
    }
    dev /= static_cast<double>(count);
    out[a].observed = true;
    out[a].lo = static_cast<float>(std::max(0.0, mean - dev));
    out[a].hi = static_cast<float>(std::min(1.0, mean + dev));
  }
  return out;
}

/// Draws `count` synthetic fingerprints for one RP.
inline std::vector<Rssi> augment_rp(std::span<const Rssi> samples, std::size_t count, Rng& rng) {
  const auto intervals = ap_intervals(samples);
  std::vector<Rssi> out(count);
  for (auto& fp : out) {
    for (std::size_t a = 0; a < kNumAps; ++a) {
      const auto& iv = intervals[a];
      fp[a] = iv.observed ? static_cast<float>(rng.uniform(iv.lo, iv.hi)) : 0.0f;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Labelled image sets

/// Images in one contiguous row-major buffer with class labels and true coordinates.
struct LabeledImages {
  std::vector<float> pixels;
  std::vector<int> labels;
  std::vector<Coordinate> coords;
  std::vector<RpKey> keys;

  std::size_t size() const { return labels.size(); }

  void add(const Rssi& rssi, int label, const Coordinate& c, const RpKey& key) {
    const Image img = to_image(rssi);
    pixels.insert(pixels.end(), img.begin(), img.end());
    labels.push_back(label);
    coords.push_back(c);
    keys.push_back(key);
  }

  std::span<const float> image(std::size_t i) const {
    return std::span(pixels).subspan(i * kImagePixels, kImagePixels);
  }

  Rssi rssi(std::size_t i) const {
    Rssi r{};
    std::copy_n(pixels.begin() + static_cast<long>(i * kImagePixels), kNumAps, r.begin());
    return r;
  }

  /// NHWC batch tensor [idx.size(), 24, 24, 1].
  template <typename T = float>
  BasicTensor<T> batch(std::span<const std::size_t> idx) const {
    BasicTensor<T> t({idx.size(), kImageSide, kImageSide, 1});
    for (std::size_t b = 0; b < idx.size(); ++b) {
      std::copy_n(pixels.begin() + static_cast<long>(idx[b] * kImagePixels), kImagePixels,
                  t.data().begin() + static_cast<long>(b * kImagePixels));
    }
    return t;
  }

  std::vector<int> batch_labels(std::span<const std::size_t> idx) const {
    std::vector<int> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(labels[i]);
    return out;
  }
};

/// Synthetic samples for every class: `per_sample` draws per original sample,
/// with an independent RNG stream per class. Originals are not touched.
inline LabeledImages augment_dataset(const LabeledImages& original, std::size_t per_sample,
                                     std::uint64_t seed, const RpCatalog& catalog) {
  std::map<int, std::vector<Rssi>> by_class;
  for (std::size_t i = 0; i < original.size(); ++i) by_class[original.labels[i]].push_back(original.rssi(i));
  LabeledImages out;
  for (const auto& [cls, samples] : by_class) {
    Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(cls)));
    const auto synth = augment_rp(samples, samples.size() * per_sample, rng);
    for (const auto& fp : synth) out.add(fp, cls, catalog.centroid(cls), catalog.key(cls));
  }
  return out;
}

inline LabeledImages concat(const LabeledImages& a, const LabeledImages& b) {
  LabeledImages out = a;
  out.pixels.insert(out.pixels.end(), b.pixels.begin(), b.pixels.end());
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  out.coords.insert(out.coords.end(), b.coords.begin(), b.coords.end());
  out.keys.insert(out.keys.end(), b.keys.begin(), b.keys.end());
  return out;
}

// ---------------------------------------------------------------------------
// Dataset cache
//
// Layout (little-endian):
//   "CHSLDAT\0"  u32 version=1
//   u64 train_csv_checksum  u64 test_csv_checksum  u64 catalog_hash
//   u32 n_classes, then per class: i32 building, floor, space, relpos; f64 lon, lat
//   u32 n_pool  u32 n_test
//   per record (pool, then test): i32 building, floor, space, relpos, user, phone;
//     f64 lon, lat; i64 timestamp; f32 pixels[576] (row-major 24x24 image)
//   u64 FNV-1a-64 of all preceding bytes

struct DatasetCache {
  static constexpr std::uint32_t kVersion = 1;

  RpCatalog catalog;
  std::vector<Fingerprint> pool;
  std::vector<Fingerprint> test;
  std::uint64_t train_checksum = 0;
  std::uint64_t test_checksum = 0;

  /// Labels of pool records; every pool tuple is in the catalog by construction.
  std::vector<int> pool_labels() const {
    std::vector<int> out;
    out.reserve(pool.size());
    for (const auto& fp : pool) out.push_back(*catalog.index_of(fp.meta.rp));
    return out;
  }

  LabeledImages pool_images(std::span<const std::size_t> idx) const {
    LabeledImages out;
    for (auto i : idx) {
      const auto& fp = pool[i];
      out.add(fp.rssi, *catalog.index_of(fp.meta.rp), fp.meta.coord, fp.meta.rp);
    }
    return out;
  }

  /// Test records whose RP tuple is missing from the catalog get label -1.
  LabeledImages test_images() const {
    LabeledImages out;
    for (const auto& fp : test) out.add(fp.rssi, catalog.index_of(fp.meta.rp).value_or(-1), fp.meta.coord, fp.meta.rp);
    return out;
  }

  void save(const std::filesystem::path& path) const {
    ByteWriter w;
    w.put_magic(std::string_view("CHSLDAT\0", 8));
    w.put(kVersion);
    w.put(train_checksum);
    w.put(test_checksum);
    w.put(catalog.hash());
    w.put(static_cast<std::uint32_t>(catalog.size()));
    for (const auto& e : catalog.entries()) {
      w.put<std::int32_t>(e.key.building);
      w.put<std::int32_t>(e.key.floor);
      w.put<std::int32_t>(e.key.space);
      w.put<std::int32_t>(e.key.relative_position);
      w.put(e.centroid.longitude);
      w.put(e.centroid.latitude);
    }
    w.put(static_cast<std::uint32_t>(pool.size()));
    w.put(static_cast<std::uint32_t>(test.size()));
    for (const auto* set : {&pool, &test}) {
      for (const auto& fp : *set) {
        const auto& m = fp.meta;
        for (int v : {m.rp.building, m.rp.floor, m.rp.space, m.rp.relative_position, m.user, m.phone}) {
          w.put<std::int32_t>(v);
        }
        w.put(m.coord.longitude);
        w.put(m.coord.latitude);
        w.put<std::int64_t>(m.timestamp);
        const Image img = to_image(fp.rssi);
        w.put_array(std::span<const float>(img));
      }
    }
    w.seal();
    w.write_file(path);
  }

  static DatasetCache load(const std::filesystem::path& path) {
    auto r = ByteReader::from_file(path);
    r.verify_seal();
    r.expect_magic(std::string_view("CHSLDAT\0", 8));
    if (const auto v = r.get<std::uint32_t>(); v != kVersion) {
      throw IoError(path.string() + ": unsupported cache version " + std::to_string(v));
    }
    DatasetCache c;
    c.train_checksum = r.get<std::uint64_t>();
    c.test_checksum = r.get<std::uint64_t>();
    const auto catalog_hash = r.get<std::uint64_t>();
    const auto n_classes = r.get<std::uint32_t>();
    std::vector<RpCatalog::Entry> entries(n_classes);
    for (auto& e : entries) {
      e.key.building = r.get<std::int32_t>();
      e.key.floor = r.get<std::int32_t>();
      e.key.space = r.get<std::int32_t>();
      e.key.relative_position = r.get<std::int32_t>();
      e.centroid.longitude = r.get<double>();
      e.centroid.latitude = r.get<double>();
    }
    c.catalog = RpCatalog(std::move(entries));
    if (c.catalog.hash() != catalog_hash) throw IoError(path.string() + ": catalog hash mismatch");
    const auto n_pool = r.get<std::uint32_t>();
    const auto n_test = r.get<std::uint32_t>();
    auto read_set = [&](std::vector<Fingerprint>& out, std::size_t n) {
      out.resize(n);
      for (auto& fp : out) {
        auto& m = fp.meta;
        m.rp.building = r.get<std::int32_t>();
        m.rp.floor = r.get<std::int32_t>();
        m.rp.space = r.get<std::int32_t>();
        m.rp.relative_position = r.get<std::int32_t>();
        m.user = r.get<std::int32_t>();
        m.phone = r.get<std::int32_t>();
        m.coord.longitude = r.get<double>();
        m.coord.latitude = r.get<double>();
        m.timestamp = r.get<std::int64_t>();
        const auto px = r.get_array<float>(kImagePixels);
        std::copy_n(px.begin(), kNumAps, fp.rssi.begin());
      }
    };
    read_set(c.pool, n_pool);
    read_set(c.test, n_test);
    if (!r.at_end()) throw IoError(path.string() + ": trailing bytes");
    return c;
  }
};

/// Builds the cache from parsed records: the catalog comes from the whole training file.
inline DatasetCache build_cache(const std::vector<RawRecord>& train, const std::vector<RawRecord>& test) {
  DatasetCache c;
  c.pool.reserve(train.size());
  for (const auto& r : train) c.pool.push_back(to_fingerprint(r));
  c.test.reserve(test.size());
  for (const auto& r : test) c.test.push_back(to_fingerprint(r));
  std::vector<RecordMeta> metas;
  metas.reserve(c.pool.size());
  for (const auto& fp : c.pool) metas.push_back(fp.meta);
  c.catalog = RpCatalog::build(metas);
  return c;
}

}  // namespace chisel
