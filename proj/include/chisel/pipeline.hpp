// Copyright 2026 The Chisel Authors
// SPDX-License-Identifier: Apache-2.0

// End-to-end steps shared by the command-line tool and the acceptance runner:
// run configuration, splits, training, model loading, sweep grids and cells.

#pragma once

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "chisel/compress.hpp"
#include "chisel/dataset.hpp"
#include "chisel/evaluation.hpp"
#include "chisel/inference.hpp"
#include "chisel/train.hpp"
#include "chisel/weights_io.hpp"
#include "json.hpp"

namespace chisel {

/// Everything that determines a trained model.
struct RunConfig {
  TrainConfig train;
  bool augment = false;
  std::size_t augment_per_sample = 1;
  std::uint64_t seed = 0;
  std::size_t width_divisor = 1;
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"train", c.train}, {"augment", c.augment}, {"augment_per_sample", c.augment_per_sample},
       {"seed", c.seed},   {"width_divisor", c.width_divisor}};
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
  if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
  c.augment = j.value("augment", c.augment);
  c.augment_per_sample = j.value("augment_per_sample", c.augment_per_sample);
  c.seed = j.value("seed", c.seed);
  c.width_divisor = j.value("width_divisor", c.width_divisor);
}

inline void validate(const RunConfig& c) {
  validate(c.train);
  if (c.augment && c.augment_per_sample == 0) throw ConfigError("augment_per_sample must be positive");
  if (c.width_divisor != 1 && c.width_divisor != 2 && c.width_divisor != 4) throw ConfigError("width_divisor must be 1, 2 or 4");
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

struct Splits {
  LabeledImages train;  // augmented when the run asks for it
  LabeledImages val;
  LabeledImages test;
};

/// 80/20 stratified split of the training pool, optional augmentation of the
/// training part, and the published test file.
inline Splits make_splits(const DatasetCache& cache, const RunConfig& run) {
  const auto labels = cache.pool_labels();
  const auto split = split_train_val(labels, Rng::derive(run.seed, 0x5B117));
  Splits s;
  s.train = cache.pool_images(split.train);
  s.val = cache.pool_images(split.validation);
  if (run.augment) s.train = augment_dataset(s.train, run.augment_per_sample, Rng::derive(run.seed, 0xA0C), cache.catalog);
  s.test = cache.test_images();
  return s;
}

/// Weight-file metadata: the run echo and the catalog hash, no wall-clock fields.
inline nlohmann::json model_meta(const RunConfig& run, const DatasetCache& cache) {
  return {{"run", run}, {"catalog_hash", hex64(cache.catalog.hash())}, {"classes", cache.catalog.size()}};
}

/// Stage 1 then stage 2. `log` is filled as training proceeds so a caller can
/// keep it when training throws.
inline Model train_model(const Splits& splits, const DatasetCache& cache, const RunConfig& run, TrainLog& log,
                         const ProgressFn& progress = {}) {
  validate(run);
  Model m(ModelConfig{run.width_divisor, cache.catalog.size()}, Rng::derive(run.seed, 0x1417));
  TrainConfig tc = run.train;
  tc.seed = Rng::derive(run.seed, 0x7EA1);
  train_stage1(m, splits.train, splits.val, tc, log, progress);
  train_stage2(m, splits.train, splits.val, tc, log, progress);
  return m;
}

// ---------------------------------------------------------------------------
// Model files

struct LoadedModel {
  Model model;
  nlohmann::json meta;
  std::optional<CompressedModel> compressed;
};

/// Reads a weight file or a compressed model file, told apart by magic.
inline LoadedModel load_model_file(const std::filesystem::path& path) {
  auto reader = ByteReader::from_file(path);
  if (reader.starts_with(kCompressedMagic)) {
    auto cm = decode_compressed(std::move(reader));
    LoadedModel lm{cm.to_model(), cm.meta, cm};
    return lm;
  }
  auto wf = decode_weights(std::move(reader));
  return {std::move(wf.model), std::move(wf.meta), std::nullopt};
}

/// Rejects a model trained against a different catalog than `cache`.
inline void check_catalog(const nlohmann::json& meta, const DatasetCache& cache) {
  const std::string want = hex64(cache.catalog.hash());
  if (!meta.contains("catalog_hash")) throw DataError("model file carries no catalog hash");
  if (meta.at("catalog_hash").get<std::string>() != want) {
    throw DataError("model catalog hash " + meta.at("catalog_hash").get<std::string>() + " does not match cache catalog " + want);
  }
}

inline RunConfig run_of(const nlohmann::json& meta) {
  if (!meta.contains("run")) throw DataError("model file carries no run configuration");
  return meta.at("run").get<RunConfig>();
}

// ---------------------------------------------------------------------------
// Sweep grids

/// 4 bit-widths x {WO, WA} x 4 sparsities x {PTQ, QAT}, then FP32 at each sparsity.
inline std::vector<CompressionConfig> default_grid(const CompressionConfig& base = {}) {
  std::vector<CompressionConfig> out;
  for (bool qat : {false, true}) {
    for (QuantMode mode : {QuantMode::WO, QuantMode::WA}) {
      for (int bits : {2, 4, 8, 16}) {
        for (double s : {0.0, 0.25, 0.5, 0.75}) {
          CompressionConfig c = base;
          c.bits = bits;
          c.mode = mode;
          c.sparsity = s;
          c.qat = qat;
          out.push_back(c);
        }
      }
    }
  }
  for (double s : {0.0, 0.25, 0.5, 0.75}) {
    CompressionConfig c = base;
    c.bits = 32;
    c.mode = QuantMode::NQ;
    c.sparsity = s;
    c.qat = false;
    out.push_back(c);
  }
  return out;
}

/// Grid file: {"defaults": {...}, "cells": [{...}, ...]} or axes
/// {"defaults": {...}, "bits": [...], "modes": [...], "sparsities": [...], "qat": [...], "fp32_sparsities": [...]}.
inline std::vector<CompressionConfig> parse_grid(const nlohmann::json& j, CompressionConfig base = {}) {
  if (!j.is_object()) throw ConfigError("grid must be a JSON object");
  try {
    if (j.contains("defaults")) {
      nlohmann::json merged = base;
      merged.update(j.at("defaults"));
      base = merged.get<CompressionConfig>();
    }
    std::vector<CompressionConfig> out;
    if (j.contains("cells")) {
      for (const auto& cell : j.at("cells")) {
        nlohmann::json merged = base;
        merged.update(cell);
        out.push_back(merged.get<CompressionConfig>());
      }
    } else if (j.contains("bits")) {
      const auto modes = j.value("modes", std::vector<std::string>{"WO", "WA"});
      const auto sparsities = j.value("sparsities", std::vector<double>{0.0});
      const auto qats = j.value("qat", std::vector<bool>{false});
      for (bool qat : qats) {
        for (const auto& mode : modes) {
          for (int bits : j.at("bits").get<std::vector<int>>()) {
            for (double s : sparsities) {
              CompressionConfig c = base;
              c.bits = bits;
              c.mode = parse_quant_mode(mode);
              c.sparsity = s;
              c.qat = qat;
              out.push_back(c);
            }
          }
        }
      }
    }
    for (double s : j.value("fp32_sparsities", std::vector<double>{})) {
      CompressionConfig c = base;
      c.bits = 32;
      c.mode = QuantMode::NQ;
      c.sparsity = s;
      c.qat = false;
      out.push_back(c);
    }
    for (const auto& c : out) validate(c);
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("grid: ") + e.what());
  }
}

struct CellResult {
  CompressionConfig config;
  bool ok = false;
  std::string error;
  int error_code = 0;
  EvalReport eval;
  FootprintReport footprint;
  std::size_t file_bytes = 0;
  std::optional<LatencyStats> latency;
  std::filesystem::path file;

  nlohmann::json row() const {
    if (!ok) return {{"config", config.label()}, {"ok", false}, {"error", error}};
    auto j = report_row(config, eval, footprint.total_bytes, latency ? &*latency : nullptr);
    j["ok"] = true;
    j["file_bytes"] = file_bytes;
    j["median_position_m"] = eval.median_error;
    j["unseen_rp_samples"] = eval.unseen;
    return j;
  }
};

/// Compress, save, evaluate. A failing cell is reported, not thrown.
inline CellResult run_cell(const Model& trained, const CompressionConfig& cfg, const Splits& splits, const RpCatalog& catalog,
                           const nlohmann::json& provenance, const std::filesystem::path& out_dir) {
  CellResult r;
  r.config = cfg;
  try {
    auto res = compress(trained, cfg, splits.train, splits.val);
    if (provenance.is_object()) res.model.meta.update(provenance);
    r.footprint = res.footprint;
    if (!out_dir.empty()) {
      std::filesystem::create_directories(out_dir);
      r.file = out_dir / (cfg.label() + ".chc");
      r.file_bytes = save_compressed(r.file, res.model);
    } else {
      r.file_bytes = encode_compressed(res.model).bytes.size();
    }
    const Model m = res.model.to_model();
    r.eval = evaluate(m, splits.test, catalog);
    r.eval.config = cfg;
    r.ok = true;
  } catch (const std::exception& e) {
    r.error = e.what();
  }
  return r;
}

/// Runs every cell on `jobs` threads; results keep grid order.
inline std::vector<CellResult> run_sweep(const Model& trained, const std::vector<CompressionConfig>& grid, const Splits& splits,
                                         const RpCatalog& catalog, const nlohmann::json& provenance,
                                         const std::filesystem::path& out_dir, std::size_t jobs,
                                         const std::function<void(const CellResult&)>& on_done = {}) {
  std::vector<CellResult> results(grid.size());
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < grid.size();) {
      results[i] = run_cell(trained, grid[i], splits, catalog, provenance, out_dir);
      if (on_done) {
        std::lock_guard lock(mu);
        on_done(results[i]);
      }
    }
  };
  jobs = std::max<std::size_t>(1, std::min(jobs, grid.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < jobs; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  return results;
}

inline std::vector<Rssi> rssi_samples(const LabeledImages& set, std::size_t limit) {
  std::vector<Rssi> out;
  for (std::size_t i = 0; i < std::min(limit, set.size()); ++i) out.push_back(set.rssi(i));
  return out;
}

}  // namespace chisel
