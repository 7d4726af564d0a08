// Copyright 2026 The Chisel Authors
// SPDX-License-Identifier: Apache-2.0

// Synthetic fingerprints with learnable class structure, for tests that need
// data shaped like the real corpus.

#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "chisel/dataset.hpp"
#include "chisel/rng.hpp"

namespace chisel::testing {

struct SyntheticSpec {
  std::size_t classes = 8;
  std::size_t per_class = 12;
  std::size_t aps_per_class = 12;
  double noise_dbm = 4.0;
  std::uint64_t seed = 1;
};

/// RP tuple and coordinate of class c.
inline RpKey synthetic_key(std::size_t c) {
  return {static_cast<int>(c % 3), static_cast<int>((c / 3) % 4), static_cast<int>(100 + c), 1 + static_cast<int>(c % 2)};
}

inline Coordinate synthetic_coord(std::size_t c) {
  return {-7600.0 + 7.0 * static_cast<double>(c % 10), 4864800.0 + 9.0 * static_cast<double>(c / 10)};
}

/// Raw records: each class hears its own subset of APs at class-specific levels.
inline std::vector<RawRecord> synthetic_records(const SyntheticSpec& s) {
  Rng proto_rng(s.seed);
  std::vector<std::vector<std::pair<std::size_t, int>>> protos(s.classes);
  for (auto& p : protos) {
    for (std::size_t k = 0; k < s.aps_per_class; ++k) {
      p.emplace_back(proto_rng.below(kNumAps), -90 + static_cast<int>(proto_rng.below(60)));
    }
  }
  Rng rng(s.seed + 1);
  std::vector<RawRecord> out;
  for (std::size_t i = 0; i < s.per_class; ++i) {
    for (std::size_t c = 0; c < s.classes; ++c) {
      RawRecord r;
      r.rssi.fill(kRssiAbsent);
      for (const auto& [ap, level] : protos[c]) {
        const int v = level + static_cast<int>(std::lround(rng.uniform(-s.noise_dbm, s.noise_dbm)));
        r.rssi[ap] = std::clamp(v, -100, 0);
      }
      const RpKey key = synthetic_key(c);
      const Coordinate base = synthetic_coord(c);
      r.building = key.building;
      r.floor = key.floor;
      r.space = key.space;
      r.relative_position = key.relative_position;
      r.longitude = base.longitude + rng.uniform(-1.0, 1.0);
      r.latitude = base.latitude + rng.uniform(-1.0, 1.0);
      r.user = 1;
      r.phone = 2;
      r.timestamp = 1371700000 + static_cast<std::int64_t>(out.size());
      out.push_back(r);
    }
  }
  return out;
}

inline void write_csv(const std::filesystem::path& path, const std::vector<RawRecord>& records) {
  std::ofstream os(path);
  for (std::size_t a = 1; a <= kNumAps; ++a) os << "WAP" << std::string(a < 10 ? "00" : a < 100 ? "0" : "") << a << ',';
  os << "LONGITUDE,LATITUDE,FLOOR,BUILDINGID,SPACEID,RELATIVEPOSITION,USERID,PHONEID,TIMESTAMP\n";
  os.precision(15);
  for (const auto& r : records) {
    for (int v : r.rssi) os << v << ',';
    os << r.longitude << ',' << r.latitude << ',' << r.floor << ',' << r.building << ',' << r.space << ','
       << r.relative_position << ',' << r.user << ',' << r.phone << ',' << r.timestamp << '\n';
  }
}

/// Labelled images from raw records against a catalog built over the same records.
inline LabeledImages synthetic_images(const SyntheticSpec& s, RpCatalog* catalog_out = nullptr) {
  const auto records = synthetic_records(s);
  std::vector<Fingerprint> fps;
  std::vector<RecordMeta> metas;
  for (const auto& r : records) {
    fps.push_back(to_fingerprint(r));
    metas.push_back(fps.back().meta);
  }
  const auto catalog = RpCatalog::build(metas);
  LabeledImages out;
  for (const auto& fp : fps) out.add(fp.rssi, *catalog.index_of(fp.meta.rp), fp.meta.coord, fp.meta.rp);
  if (catalog_out) *catalog_out = catalog;
  return out;
}

inline LabeledImages subset(const LabeledImages& set, const std::vector<std::size_t>& idx) {
  LabeledImages out;
  for (auto i : idx) out.add(set.rssi(i), set.labels[i], set.coords[i], set.keys[i]);
  return out;
}

}  // namespace chisel::testing
