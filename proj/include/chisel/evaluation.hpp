// Copyright 2026 The Chisel Authors
// SPDX-License-Identifier: Apache-2.0

// Localization metrics, the KNN sanity baseline and the latency harness.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "chisel/dataset.hpp"
#include "chisel/errors.hpp"
#include "chisel/hash.hpp"
#include "chisel/inference.hpp"
#include "json.hpp"

namespace chisel {

/// Meters between the centroid of predicted class `cls` and the true coordinate.
inline double position_error(const RpCatalog& catalog, int cls, const Coordinate& truth) {
  return distance(catalog.centroid(cls), truth);
}

/// Nearest catalog centroid to a coordinate; used as the reference class of
/// test samples whose RP never appears in training.
inline int nearest_class(const RpCatalog& catalog, const Coordinate& c) {
  int best = -1;
  double best_d = 0.0;
  for (std::size_t i = 0; i < catalog.size(); ++i) {
    const double d = distance(catalog.entries()[i].centroid, c);
    if (best < 0 || d < best_d) {
      best = static_cast<int>(i);
      best_d = d;
    }
  }
  return best;
}

struct EvalReport {
  std::size_t samples = 0;
  std::size_t unseen = 0;
  double building_accuracy = 0.0;  // percent
  double floor_accuracy = 0.0;     // percent; building and floor both right
  double class_accuracy = 0.0;     // percent
  double mean_error = 0.0;         // meters
  double median_error = 0.0;
  std::vector<double> errors;
  std::string model_hash;
  nlohmann::json config = nlohmann::json::object();

  nlohmann::json to_json(bool with_errors = false) const {
    nlohmann::json j = {{"samples", samples},
                        {"unseen_rp_samples", unseen},
                        {"building_accuracy", building_accuracy},
                        {"floor_accuracy", floor_accuracy},
                        {"class_accuracy", class_accuracy},
                        {"mean_position_error_m", mean_error},
                        {"median_position_error_m", median_error},
                        {"model_hash", model_hash},
                        {"config", config}};
    if (with_errors) j["errors_m"] = errors;
    return j;
  }

  std::string summary() const {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "building %.2f%%  floor %.2f%%  class %.2f%%  position %.3f m (median %.3f)  n=%zu unseen=%zu",
                  building_accuracy, floor_accuracy, class_accuracy, mean_error, median_error, samples, unseen);
    return buf;
  }
};

namespace detail {

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<long>(mid), v.end());
  const double hi = v[mid];
  if (v.size() % 2) return hi;
  return 0.5 * (hi + *std::max_element(v.begin(), v.begin() + static_cast<long>(mid)));
}

inline double percent(std::size_t hits, std::size_t n) { return 100.0 * static_cast<double>(hits) / static_cast<double>(n); }

}  // namespace detail

/// Scores per-sample predictions: building and floor decoded from the
/// predicted class's RP tuple, error from its centroid.
inline EvalReport score_predictions(const std::vector<int>& predicted, const LabeledImages& test, const RpCatalog& catalog) {
  if (test.size() == 0) throw DataError("evaluation needs a non-empty test set");
  if (predicted.size() != test.size()) throw ShapeError("one prediction per test sample expected");
  EvalReport r;
  r.samples = test.size();
  std::size_t b = 0, f = 0, c = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const int p = predicted[i];
    const RpKey& pk = catalog.key(p);
    const RpKey& tk = test.keys[i];
    int truth = test.labels[i];
    if (truth < 0) {
      ++r.unseen;
      truth = nearest_class(catalog, test.coords[i]);
    }
    const bool building = pk.building == tk.building;
    b += building;
    f += building && pk.floor == tk.floor;
    c += p == truth;
    r.errors.push_back(position_error(catalog, p, test.coords[i]));
  }
  r.building_accuracy = detail::percent(b, r.samples);
  r.floor_accuracy = detail::percent(f, r.samples);
  r.class_accuracy = detail::percent(c, r.samples);
  r.mean_error = std::accumulate(r.errors.begin(), r.errors.end(), 0.0) / static_cast<double>(r.samples);
  r.median_error = detail::median(r.errors);
  return r;
}

inline std::vector<int> predict_all(const Engine& engine, const LabeledImages& set, std::size_t chunk = 256) {
  std::vector<int> out;
  out.reserve(set.size());
  for (std::size_t s = 0; s < set.size(); s += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = s; i < std::min(set.size(), s + chunk); ++i) idx.push_back(i);
    const auto p = engine.predict(set.batch<float>(idx));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

inline EvalReport evaluate(const Model& model, const LabeledImages& test, const RpCatalog& catalog) {
  if (model.config().num_classes != catalog.size()) {
    throw ConfigError("model has " + std::to_string(model.config().num_classes) + " classes but the catalog has " +
                      std::to_string(catalog.size()));
  }
  EvalReport r = score_predictions(predict_all(Engine::compile(model), test, 256), test, catalog);
  r.model_hash = hex64(model.hash({Block::encoder, Block::classifier}));
  return r;
}

/// k nearest training fingerprints in normalized RSSI space: mean coordinate,
/// majority building and (building, floor), majority class. Vote ties go to
/// the label of the nearer neighbour.
inline EvalReport knn_baseline(const LabeledImages& train, const LabeledImages& test, const RpCatalog& catalog, std::size_t k) {
  if (k < 1) throw ConfigError("knn k must be at least 1");
  if (train.size() == 0) throw DataError("knn needs training samples");
  if (test.size() == 0) throw DataError("evaluation needs a non-empty test set");
  k = std::min(k, train.size());
  EvalReport r;
  r.samples = test.size();
  std::size_t b = 0, f = 0, c = 0;
  std::vector<std::pair<double, std::size_t>> d(train.size());
  auto vote = [&](auto key_of) {
    std::map<decltype(key_of(0)), std::pair<std::size_t, std::size_t>> count;  // key -> (votes, -rank)
    for (std::size_t j = 0; j < k; ++j) {
      auto& e = count[key_of(d[j].second)];
      if (e.first == 0) e.second = j;
      ++e.first;
    }
    auto best = count.begin();
    for (auto it = count.begin(); it != count.end(); ++it) {
      if (it->second.first > best->second.first || (it->second.first == best->second.first && it->second.second < best->second.second)) best = it;
    }
    return best->first;
  };
  for (std::size_t i = 0; i < test.size(); ++i) {
    const Rssi q = test.rssi(i);
    for (std::size_t t = 0; t < train.size(); ++t) {
      const auto img = train.image(t);
      double s = 0.0;
      for (std::size_t a = 0; a < kNumAps; ++a) {
        const double diff = static_cast<double>(img[a]) - q[a];
        s += diff * diff;
      }
      d[t] = {s, t};
    }
    std::partial_sort(d.begin(), d.begin() + static_cast<long>(k), d.end());
    Coordinate mean{};
    for (std::size_t j = 0; j < k; ++j) {
      mean.longitude += train.coords[d[j].second].longitude / static_cast<double>(k);
      mean.latitude += train.coords[d[j].second].latitude / static_cast<double>(k);
    }
    const RpKey& tk = test.keys[i];
    const int bld = vote([&](std::size_t t) { return train.keys[t].building; });
    const auto bf = vote([&](std::size_t t) { return std::pair(train.keys[t].building, train.keys[t].floor); });
    const int cls = vote([&](std::size_t t) { return train.labels[t]; });
    int truth = test.labels[i];
    if (truth < 0) {
      ++r.unseen;
      truth = nearest_class(catalog, test.coords[i]);
    }
    b += bld == tk.building;
    f += bf.first == tk.building && bf.second == tk.floor;
    c += cls == truth;
    r.errors.push_back(distance(mean, test.coords[i]));
  }
  r.building_accuracy = detail::percent(b, r.samples);
  r.floor_accuracy = detail::percent(f, r.samples);
  r.class_accuracy = detail::percent(c, r.samples);
  r.mean_error = std::accumulate(r.errors.begin(), r.errors.end(), 0.0) / static_cast<double>(r.samples);
  r.median_error = detail::median(r.errors);
  r.config = {{"method", "knn"}, {"k", k}};
  return r;
}

// ---------------------------------------------------------------------------
// Latency

struct LatencyStats {
  std::size_t repetitions = 0;
  std::size_t warmup = 0;
  double mean_ms = 0.0;
  double median_ms = 0.0;
  double p95_ms = 0.0;
  double min_ms = 0.0;

  nlohmann::json to_json() const {
    return {{"repetitions", repetitions}, {"warmup", warmup}, {"mean_ms", mean_ms},
            {"median_ms", median_ms},     {"p95_ms", p95_ms}, {"min_ms", min_ms}};
  }
};

/// Median latency ratio against a baseline (1.0 means equal; below 1 is faster).
inline double latency_ratio(const LatencyStats& s, const LatencyStats& baseline) { return s.median_ms / baseline.median_ms; }

/// Single-sample wall time of RSSI vector -> image -> class, cycling through
/// `samples`. Ten warm-up inferences are excluded.
inline LatencyStats latency_bench(const Engine& engine, const std::vector<Rssi>& samples, std::size_t repetitions = 100,
                                  std::size_t warmup = 10) {
  if (repetitions < 100) throw ConfigError("latency_bench needs at least 100 repetitions");
  if (samples.empty()) throw DataError("latency_bench needs at least one sample");
  using clock = std::chrono::steady_clock;
  volatile int sink = 0;
  auto once = [&](std::size_t i) {
    const Image img = to_image(samples[i % samples.size()]);
    Tensor x({1, kImageSide, kImageSide, 1}, std::vector<float>(img.begin(), img.end()));
    sink = sink + engine.predict(x)[0];
  };
  for (std::size_t i = 0; i < warmup; ++i) once(i);
  std::vector<double> ms(repetitions);
  for (std::size_t i = 0; i < repetitions; ++i) {
    const auto t0 = clock::now();
    once(i);
    ms[i] = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
  }
  LatencyStats s;
  s.repetitions = repetitions;
  s.warmup = warmup;
  s.mean_ms = std::accumulate(ms.begin(), ms.end(), 0.0) / static_cast<double>(ms.size());
  s.median_ms = detail::median(ms);
  std::sort(ms.begin(), ms.end());
  s.p95_ms = ms[std::min(ms.size() - 1, static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(ms.size()))) - 1)];
  s.min_ms = ms.front();
  return s;
}

/// One machine-readable sweep/report row.
inline nlohmann::json report_row(const CompressionConfig& cfg, const EvalReport& eval, std::size_t bytes,
                                 const LatencyStats* latency = nullptr) {
  nlohmann::json j = {{"config", cfg.label()},
                      {"bits", cfg.bits},
                      {"mode", quant_mode_name(cfg.mode)},
                      {"sparsity", cfg.sparsity},
                      {"qat", cfg.qat},
                      {"prune", prune_kind_name(cfg.prune)},
                      {"building_pct", eval.building_accuracy},
                      {"floor_pct", eval.floor_accuracy},
                      {"class_pct", eval.class_accuracy},
                      {"position_m", eval.mean_error},
                      {"bytes", bytes}};
  j["latency_ms"] = latency ? nlohmann::json(latency->median_ms) : nlohmann::json(nullptr);
  return j;
}

}  // namespace chisel
