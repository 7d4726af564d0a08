// Copyright 2026 The Chisel Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance runner: one PASS/FAIL/SKIP line per criterion.
//
//   chisel_acceptance [--group property|dataset|all] [--uji-dir DIR] [--work-dir DIR]
//
// Dataset criteria (8-14) need trainingData.csv and validationData.csv from
// UJIIndoorLoc in --uji-dir or $CHISEL_UJI_DIR; without them they print SKIP.
// Exit: 0 all ran and passed, 1 any failure, 77 nothing failed but something skipped.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "chisel/grad_check.hpp"
#include "chisel/pipeline.hpp"
#include "synthetic.hpp"

namespace fs = std::filesystem;
using namespace chisel;

namespace {

// Tolerances.
constexpr double kGradTol = 1e-3;
constexpr std::size_t kExpectedParams = 171209;
constexpr double kMinBuildingPct = 99.0;
constexpr double kMinFloorPct = 88.0;
constexpr double kMaxMeanErrorM = 9.0;
constexpr int kAugmentWinsNeeded = 2;  // of 3 seeds
constexpr double kGentlePruneMaxRise = 0.10;
constexpr double kMaxFileRatio = 0.25;
constexpr double kMaxHeadlineRise = 0.15;
constexpr double kKnnLo = 7.0;
constexpr double kKnnHi = 13.0;
constexpr std::size_t kKnnK = 5;
constexpr std::size_t kLatencyReps = 100;

enum class Status { pass, fail, skip };

struct Outcome {
  Status status = Status::pass;
  std::string detail;
};

Outcome verdict(bool ok, std::string detail) { return {ok ? Status::pass : Status::fail, std::move(detail)}; }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------------------
// 1. Gradients

using DG = Graph<double>;
using DT = BasicTensor<double>;
using DP = Parameter<double>;

DT rnd(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  DT t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

DT off_zero(Shape shape, Rng& rng) {
  DT t(std::move(shape));
  for (auto& v : t.data()) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.1, 1.0);
  return t;
}

DT spaced(Shape shape, Rng& rng) {
  DT t(std::move(shape));
  std::vector<std::size_t> order(t.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(std::span(order));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.01 * static_cast<double>(order[i]) - 0.5;
  return t;
}

Outcome gradients() {
  double worst = 0.0;
  std::string where;
  auto note = [&](const GradCheckResult& r, const std::string& op) {
    if (r.max_rel_error > worst || where.empty()) {
      worst = std::max(worst, r.max_rel_error);
      where = op + ":" + r.worst_param;
    }
  };
  const GradCheckOptions opt{.epsilon = 1e-3};
  for (int s = 0; s < 5; ++s) {
    Rng rng(s);
    DP x{"x", rnd({2, 5, 6, 3}, rng)}, k{"k", rnd({3, 3, 3, 4}, rng)}, b{"b", rnd({4}, rng)};
    const std::size_t stride = s % 2 ? 2 : 1;
    DT w = rnd({2, stride == 1 ? 5u : 3u, stride == 1 ? 6u : 3u, 4}, rng);
    note(grad_check<double>([&](DG& g) { return ops::weighted_sum(g, ops::conv2d(g, g.parameter(x), g.parameter(k), g.parameter(b), stride), w); },
                            {&x, &k, &b}, opt),
         "conv2d");
    DP xp{"x", spaced({2, 4, 6, 3}, rng)};
    DT wp = rnd({2, 2, 3, 3}, rng);
    note(grad_check<double>([&](DG& g) { return ops::weighted_sum(g, ops::maxpool2x2(g, g.parameter(xp)), wp); }, {&xp}, opt),
         "maxpool");
    DP xu{"x", rnd({1, 3, 2, 2}, rng)};
    DT wu = rnd({1, 6, 4, 2}, rng);
    note(grad_check<double>([&](DG& g) { return ops::weighted_sum(g, ops::upsample2x(g, g.parameter(xu)), wu); }, {&xu}, opt),
         "upsample");
    DP xd{"x", rnd({3, 7}, rng)}, wd{"w", rnd({7, 5}, rng)}, bd{"b", rnd({5}, rng)};
    DT cd = rnd({3, 5}, rng);
    note(grad_check<double>(
             [&](DG& g) { return ops::weighted_sum(g, ops::dense(g, g.parameter(xd), g.parameter(wd), g.parameter(bd)), cd); },
             {&xd, &wd, &bd}, opt),
         "dense");
    DP xr{"x", off_zero({4, 6}, rng)};
    DT cr = rnd({4, 6}, rng);
    note(grad_check<double>([&](DG& g) { return ops::weighted_sum(g, ops::relu(g, g.parameter(xr)), cr); }, {&xr}, opt), "relu");
    DP xb{"x", rnd({5, 4}, rng)}, gamma{"gamma", rnd({4}, rng, 0.5, 1.5)}, beta{"beta", rnd({4}, rng)};
    DP mean{"mean", rnd({4}, rng), false}, var{"var", rnd({4}, rng, 0.5, 2.0), false};
    DT cb = rnd({5, 4}, rng);
    const Mode mode = s % 2 ? Mode::infer : Mode::train;
    note(grad_check<double>(
             [&](DG& g) {
               return ops::weighted_sum(
                   g, ops::batchnorm(g, g.parameter(xb), g.parameter(gamma), g.parameter(beta), mean, var, mode), cb);
             },
             {&xb, &gamma, &beta}, opt),
         "batchnorm");
    DP logits{"logits", rnd({3, 11}, rng, -3, 3)};
    const std::vector<int> labels{s % 11, (s * 3) % 11, (s * 7 + 1) % 11};
    note(grad_check<double>([&](DG& g) { return ops::softmax_cross_entropy(g, g.parameter(logits), labels); }, {&logits}, opt),
         "softmax_ce");
    DP out{"out", rnd({2, 3, 3, 1}, rng)};
    DT target = rnd({2, 3, 3, 1}, rng);
    note(grad_check<double>([&](DG& g) { return ops::mse(g, g.parameter(out), target); }, {&out}, opt), "mse");
  }

  // Quarter-width clone of the full network, long double, kink-crossing stencils skipped.
  std::size_t checked = 0, kinks = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    CaeCnn<long double> m(ModelConfig{4, 905}, seed);
    Rng rng(seed + 50);
    for (std::size_t i = 0; i < kNumParams; ++i) {
      auto& p = m.param(i);
      if (p.value.rank() == 1 && p.trainable) {
        for (auto& v : p.value.data()) v += rng.uniform(-0.1, 0.1);
      }
    }
    BasicTensor<long double> x({4, 24, 24, 1});
    for (auto& v : x.data()) v = rng.uniform();
    std::vector<int> labels(4);
    for (auto& y : labels) y = static_cast<int>(rng.below(905));
    GradCheckOptions mo;
    mo.epsilon = 1e-5;
    mo.max_per_param = 12;
    mo.seed = seed;
    mo.skip_kinks = true;
    const auto ae = grad_check<long double>(
        [&](Graph<long double>& g) { return ops::mse(g, m.decode(g, m.encode(g, g.constant(x))), x); },
        m.parameters({Block::encoder, Block::decoder}), mo);
    const auto cls = grad_check<long double>(
        [&](Graph<long double>& g) {
          return ops::softmax_cross_entropy(g, m.classify(g, m.encode(g, g.constant(x)), Mode::train), labels);
        },
        m.parameters({Block::encoder, Block::classifier}), mo);
    note(ae, "caecnn/4 autoencoder");
    note(cls, "caecnn/4 classifier");
    checked += ae.checked + cls.checked;
    kinks += ae.kinks + cls.kinks;
  }
  const bool coverage = checked * 4 >= (checked + kinks) * 3;
  return verdict(worst < kGradTol && coverage,
                 fmt("max rel err %.2e (worst %s), tol %.0e; network coords checked %zu, kink-skipped %zu", worst, where.c_str(),
                     kGradTol, checked, kinks));
}

// ---------------------------------------------------------------------------
// 2. Architecture

Outcome architecture() {
  const std::vector<Shape> table = {{24, 24, 16}, {12, 12, 16}, {12, 12, 8}, {24, 24, 8}, {24, 24, 1},
                                    {12, 12, 8},  {12, 12, 16}, {6, 6, 16},  {6, 6, 32},  {6, 6, 32},
                                    {3, 3, 32},   {288},        {128},       {128},       {905}};
  Model m(ModelConfig{}, 1);
  std::vector<Shape> trace;
  ForwardHooks<float> hooks;
  hooks.trace = &trace;
  Graph<float> g(false);
  Tensor x({2, 24, 24, 1});
  const auto z = m.encode(g, g.constant(x), &hooks);
  m.decode(g, z, &hooks);
  m.classify(g, z, Mode::infer, &hooks);
  const auto spec = build_spec();
  std::vector<Shape> declared;
  for (const auto& l : spec.layers) declared.push_back(l.output);
  const std::size_t n = count_params(spec, {Block::encoder, Block::classifier});
  std::size_t stored = 0;
  for (auto* p : m.parameters({Block::encoder, Block::classifier})) stored += p->value.size();
  return verdict(trace == table && declared == table && n == kExpectedParams && stored == kExpectedParams,
                 fmt("%zu/%zu layer shapes traced, params %zu (stored %zu), expected %zu", trace == table ? table.size() : 0,
                     table.size(), n, stored, kExpectedParams));
}

// ---------------------------------------------------------------------------
// 3. Quantizer

Outcome quantizer() {
  std::size_t checks = 0, bad = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    for (int b : {2, 4, 8, 16}) {
      Rng rng(seed * 7 + static_cast<std::uint64_t>(b));
      Tensor w({3, 3, 2, 5});
      for (auto& v : w.data()) v = static_cast<float>(rng.uniform(-2, 2));
      Tensor neg = w;
      for (auto& v : neg.data()) v = -v;
      const auto scales = channel_scales(w);
      const auto q = quantize_tensor(w, b, scales);
      const auto qn = quantize_tensor(neg, b, scales);
      const auto wq = dequantize(q);
      const auto again = quantize_tensor(wq, b, scales);
      const std::int32_t levels = weight_levels(b);
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double s = scales[i % scales.size()];
        const double clipped = std::clamp<double>(w[i], -s, s);
        ++checks;
        bad += qn.codes[i] != -q.codes[i] || again.codes[i] != q.codes[i] || std::abs(q.codes[i]) > levels ||
               std::abs(clipped - wq[i]) > s / (2.0 * levels) * (1 + 1e-5) + 1e-7;
      }
    }
  }
  return verdict(bad == 0, fmt("%zu element checks over 100 seeds x bits {2,4,8,16}, %zu violations", checks, bad));
}

// ---------------------------------------------------------------------------
// 4. Pruning

Outcome pruning() {
  std::ostringstream d;
  bool ok = true;
  Model m(ModelConfig{}, 3);
  for (double s : {0.25, 0.5, 0.75}) {
    Model c = m;
    const auto rep = prune_model(c, PruneKind::connection, s);
    const double err = std::abs(rep.global_sparsity() - s);
    ok &= err <= 1.0 / static_cast<double>(rep.total_weights);
    double max_pruned = 0.0, min_kept = 1e30;
    for (const auto& l : kDeployLayers) {
      const auto& p = m.param(l.weight);
      const auto& mask = c.param(l.weight).mask;
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double a = std::abs(p.value[i]);
        if (mask.empty() || mask[i]) {
          min_kept = std::min(min_kept, a);
        } else {
          max_pruned = std::max(max_pruned, a);
        }
      }
    }
    ok &= max_pruned <= min_kept;
    d << "S=" << s << " got " << rep.global_sparsity() << " (|err| " << err << ", max pruned " << max_pruned << " <= min kept "
      << min_kept << "); ";
  }

  // Ten fine-tune steps: 160 samples, batch 16, one epoch.
  testing::SyntheticSpec spec;
  spec.classes = 8;
  spec.per_class = 20;
  RpCatalog cat;
  const auto train = testing::synthetic_images(spec, &cat);
  Model f(ModelConfig{1, cat.size()}, 4);
  prune_model(f, PruneKind::connection_filter, 0.5);
  FineTuneConfig ft;
  ft.epochs = 1;
  ft.batch_size = 16;
  ft.lr = 1e-2;
  const auto before = f.hash();
  fine_tune<float>(f, train, LabeledImages{}, ft, nullptr, nullptr);
  std::size_t leaks = 0;
  for (const auto& l : kDeployLayers) {
    const auto& p = f.param(l.weight);
    for (std::size_t i = 0; i < p.value.size(); ++i) leaks += !p.mask.empty() && !p.mask[i] && p.value[i] != 0.0f;
  }
  // fine_tune keeps the best-validation snapshot; with a learning rate this
  // large the weights always move, but the check only needs the masks.
  ok &= leaks == 0;
  d << "10 fine-tune steps: " << leaks << " pruned weights revived" << (f.hash() == before ? " (weights unchanged)" : "");
  return verdict(ok, d.str());
}

// ---------------------------------------------------------------------------
// 5. Augmentation

Outcome augmentation() {
  std::size_t values = 0, outside = 0, zero_broken = 0, nondeterministic = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng gen(seed + 100);
    std::vector<Rssi> rp(2 + gen.below(5));
    for (auto& fp : rp) {
      for (auto& v : fp) v = gen.uniform() < 0.3 ? static_cast<float>(gen.uniform()) : 0.0f;
    }
    const auto iv = ap_intervals(rp);
    Rng a(seed), b(seed);
    const auto synth = augment_rp(rp, 20, a);
    nondeterministic += synth != augment_rp(rp, 20, b);
    for (const auto& fp : synth) {
      for (std::size_t ap = 0; ap < kNumAps; ++ap) {
        ++values;
        if (!iv[ap].observed) {
          zero_broken += fp[ap] != 0.0f;
        } else {
          outside += fp[ap] < std::max(0.0f, iv[ap].lo) || fp[ap] > std::min(1.0f, iv[ap].hi) || fp[ap] < 0.0f || fp[ap] > 1.0f;
        }
      }
    }
  }
  return verdict(outside == 0 && zero_broken == 0 && nondeterministic == 0,
                 fmt("%zu values over 50 seeds: %zu outside [m-d,m+d]∩[0,1], %zu absent APs non-zero, %zu non-deterministic seeds",
                     values, outside, zero_broken, nondeterministic));
}

// ---------------------------------------------------------------------------
// 6. Freeze

TrainConfig toy_train(std::size_t e1, std::size_t e2) {
  TrainConfig c;
  c.stage1_epochs = e1;
  c.stage2_epochs = e2;
  c.batch_size = 16;
  c.patience = 0;
  c.seed = 3;
  return c;
}

Outcome freeze() {
  testing::SyntheticSpec s;
  s.classes = 5;
  s.per_class = 6;
  s.seed = 24;
  const auto data = testing::synthetic_images(s);
  Model m(ModelConfig{}, 4);
  TrainLog log;
  train_stage1(m, data, data, toy_train(2, 0), log);
  const auto enc = m.hash({Block::encoder});
  const auto cls = m.hash({Block::classifier});
  train_stage2(m, data, data, toy_train(0, 5), log);
  return verdict(m.hash({Block::encoder}) == enc && m.hash({Block::classifier}) != cls,
                 fmt("encoder hash %s -> %s, classifier %s", hex64(enc).c_str(), hex64(m.hash({Block::encoder})).c_str(),
                     m.hash({Block::classifier}) != cls ? "changed" : "UNCHANGED"));
}

// ---------------------------------------------------------------------------
// 7. Round trips

Outcome round_trips(const fs::path& work) {
  Rng rng(3);
  std::size_t image_bad = 0;
  for (int s = 0; s < 50; ++s) {
    Rssi r{};
    for (auto& v : r) v = static_cast<float>(rng.uniform());
    const Image img = to_image(r);
    image_bad += from_image(img) != r;
    for (std::size_t i = kNumAps; i < kImagePixels; ++i) image_bad += img[i] != 0.0f;
  }
  // Distinct entries land on distinct pixels.
  Rssi idx{};
  for (std::size_t i = 0; i < kNumAps; ++i) idx[i] = static_cast<float>(i + 1);
  const Image img = to_image(idx);
  std::vector<float> px(img.begin(), img.end());
  std::sort(px.begin(), px.end());
  image_bad += std::adjacent_find(px.begin() + (kImagePixels - kNumAps), px.end()) != px.end();

  Model m(ModelConfig{}, 12);
  const auto wpath = work / "acceptance_weights.chw";
  save_weights(wpath, m, {{"seed", 12}});
  const auto back = load_weights(wpath);
  const bool weights_ok = back.model.hash() == m.hash() && encode_weights(back.model, back.meta) == encode_weights(m, {{"seed", 12}});

  bool compressed_ok = true;
  for (const auto& [bits, mode, sparsity] : std::vector<std::tuple<int, QuantMode, double>>{
           {32, QuantMode::NQ, 0.0}, {4, QuantMode::WO, 0.25}, {2, QuantMode::WA, 0.75}, {8, QuantMode::WA, 0.5}, {16, QuantMode::WO, 0.0}}) {
    CompressionConfig c;
    c.bits = bits;
    c.mode = mode;
    c.sparsity = sparsity;
    Model p = m;
    if (sparsity > 0) prune_model(p, c.prune, sparsity);
    if (mode == QuantMode::WA) {
      p.activation_quant().bits = bits;
      p.activation_quant().ranges.fill(0.75f);
    }
    const auto cm = pack_model(p, c);
    const auto cpath = work / "acceptance_model.chc";
    save_compressed(cpath, cm);
    const auto loaded = load_compressed(cpath);
    compressed_ok &= encode_compressed(loaded).bytes == encode_compressed(cm).bytes && loaded.to_model().hash() == cm.to_model().hash();
  }
  fs::remove(wpath);
  fs::remove(work / "acceptance_model.chc");
  return verdict(image_bad == 0 && weights_ok && compressed_ok,
                 fmt("image<->vector %s, weight file %s, compressed file (5 configs) %s", image_bad ? "BROKEN" : "bijective",
                     weights_ok ? "bit-exact" : "DIFFERS", compressed_ok ? "bit-exact" : "DIFFERS"));
}

// ---------------------------------------------------------------------------
// 8-14. Dataset scale

struct DatasetRun {
  DatasetCache cache;
  fs::path work;
  std::map<std::pair<bool, std::uint64_t>, EvalReport> by_run;  // (augment, seed)
  std::optional<Model> da_model;
  std::optional<Splits> da_splits;
  std::map<std::string, CellResult> cells;
  std::optional<LatencyStats> fp32_latency;

  RunConfig run(bool augment, std::uint64_t seed) const {
    RunConfig r;
    r.augment = augment;
    r.seed = seed;
    return r;
  }

  const EvalReport& trained(bool augment, std::uint64_t seed) {
    const auto key = std::pair{augment, seed};
    if (auto it = by_run.find(key); it != by_run.end()) return it->second;
    const RunConfig rc = run(augment, seed);
    const auto path = work / fmt("chisel%s-seed%llu.chw", augment ? "-da" : "", static_cast<unsigned long long>(seed));
    const Splits splits = make_splits(cache, rc);
    Model m;
    if (fs::exists(path)) {
      auto wf = load_weights(path);
      check_catalog(wf.meta, cache);
      m = std::move(wf.model);
    } else {
      std::fprintf(stderr, "[acceptance] training %s seed %llu\n", augment ? "CHISEL-DA" : "CHISEL", static_cast<unsigned long long>(seed));
      TrainLog log;
      m = train_model(splits, cache, rc, log);
      save_weights(path, m, model_meta(rc, cache));
    }
    if (augment && seed == 0) {
      da_model = m;
      da_splits = splits;
    }
    return by_run[key] = evaluate(m, splits.test, cache.catalog);
  }

  const CellResult& cell(CompressionConfig c) {
    const auto label = c.label();
    if (auto it = cells.find(label); it != cells.end()) return it->second;
    trained(true, 0);
    std::fprintf(stderr, "[acceptance] compressing %s\n", label.c_str());
    auto r = run_cell(*da_model, c, *da_splits, cache.catalog, {}, work / "cells");
    if (!r.ok) throw std::runtime_error(label + ": " + r.error);
    return cells[label] = std::move(r);
  }
};

CompressionConfig cfg(int bits, QuantMode mode, double sparsity, bool qat) {
  CompressionConfig c;
  c.bits = bits;
  c.mode = mode;
  c.sparsity = sparsity;
  c.qat = qat;
  return c;
}

Outcome full_training(DatasetRun& d) {
  const auto& r = d.trained(true, 0);
  return verdict(r.building_accuracy >= kMinBuildingPct && r.floor_accuracy >= kMinFloorPct && r.mean_error <= kMaxMeanErrorM,
                 fmt("CHISEL-DA seed 0: building %.2f%% (>= %.1f), floor %.2f%% (>= %.1f), mean error %.2f m (<= %.1f)",
                     r.building_accuracy, kMinBuildingPct, r.floor_accuracy, kMinFloorPct, r.mean_error, kMaxMeanErrorM));
}

Outcome augmentation_effect(DatasetRun& d) {
  int wins = 0;
  std::ostringstream s;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const double da = d.trained(true, seed).mean_error;
    const double plain = d.trained(false, seed).mean_error;
    wins += da < plain;
    s << fmt("seed %llu: DA %.2f m vs %.2f m; ", static_cast<unsigned long long>(seed), da, plain);
  }
  s << wins << "/3 wins (need " << kAugmentWinsNeeded << ")";
  return verdict(wins >= kAugmentWinsNeeded, s.str());
}

Outcome qat_vs_ptq(DatasetRun& d) {
  bool ok = true;
  std::ostringstream s;
  for (int bits : {2, 4}) {
    for (double sp : {0.0, 0.25, 0.5, 0.75}) {
      const double q = d.cell(cfg(bits, QuantMode::WA, sp, true)).eval.mean_error;
      const double p = d.cell(cfg(bits, QuantMode::WA, sp, false)).eval.mean_error;
      ok &= q <= p;
      s << fmt("INT%d-WA-%d%%: QAT %.2f / PTQ %.2f; ", bits, static_cast<int>(sp * 100), q, p);
    }
  }
  return verdict(ok, s.str());
}

Outcome gentle_pruning(DatasetRun& d) {
  const double base = d.cell(cfg(32, QuantMode::NQ, 0.0, false)).eval.mean_error;
  const double pruned = d.cell(cfg(32, QuantMode::NQ, 0.25, false)).eval.mean_error;
  const double rise = pruned / base - 1.0;
  return verdict(rise < kGentlePruneMaxRise,
                 fmt("FP32 %.3f m, FP32-25%% %.3f m, change %+.1f%% (< %+.0f%%)", base, pruned, 100 * rise, 100 * kGentlePruneMaxRise));
}

Outcome compression_headline(DatasetRun& d) {
  const auto& fp = d.cell(cfg(32, QuantMode::NQ, 0.0, false));
  const auto& q = d.cell(cfg(4, QuantMode::WO, 0.25, true));
  const double ratio = static_cast<double>(q.file_bytes) / static_cast<double>(fp.file_bytes);
  const double rise = q.eval.mean_error / fp.eval.mean_error - 1.0;
  return verdict(ratio <= kMaxFileRatio && rise <= kMaxHeadlineRise,
                 fmt("INT4-WO-25%%-QAT %zu B vs FP32 %zu B (%.1f%%, <= %.0f%%); error %.3f vs %.3f m (%+.1f%%, <= %+.0f%%)", q.file_bytes,
                     fp.file_bytes, 100 * ratio, 100 * kMaxFileRatio, q.eval.mean_error, fp.eval.mean_error, 100 * rise,
                     100 * kMaxHeadlineRise));
}

Outcome latency(DatasetRun& d) {
  const auto samples = rssi_samples(d.cache.test_images(), 64);
  auto bench = [&](const CellResult& c) { return latency_bench(Engine::compile(load_compressed(c.file)), samples, kLatencyReps); };
  const auto base = bench(d.cell(cfg(32, QuantMode::NQ, 0.0, false)));
  const auto wo = bench(d.cell(cfg(4, QuantMode::WO, 0.25, true)));
  const auto wa = bench(d.cell(cfg(4, QuantMode::WA, 0.5, true)));
  return verdict(wo.median_ms < base.median_ms && wa.median_ms < base.median_ms,
                 fmt("median ms over %zu reps: FP32 %.4f, INT4-WO-25%% %.4f, INT4-WA-50%% %.4f", kLatencyReps, base.median_ms,
                     wo.median_ms, wa.median_ms));
}

Outcome knn(DatasetRun& d) {
  std::vector<std::size_t> all(d.cache.pool.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const auto r = knn_baseline(d.cache.pool_images(all), d.cache.test_images(), d.cache.catalog, kKnnK);
  return verdict(r.mean_error >= kKnnLo && r.mean_error <= kKnnHi,
                 fmt("k=%zu mean error %.2f m (band [%.0f, %.0f])", kKnnK, r.mean_error, kKnnLo, kKnnHi));
}

struct Criterion {
  int id;
  const char* name;
  bool dataset;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CHISEL acceptance criteria"};
  std::string group = "all";
  std::string uji_dir;
  std::string work_dir = (fs::temp_directory_path() / "chisel_acceptance").string();
  app.add_option("--group", group, "Which criteria to run")->check(CLI::IsMember({"property", "dataset", "all"}));
  app.add_option("--uji-dir", uji_dir, "Directory with trainingData.csv and validationData.csv (default $CHISEL_UJI_DIR)");
  app.add_option("--work-dir", work_dir, "Scratch directory for trained models and compressed files");
  CLI11_PARSE(app, argc, argv);
  if (uji_dir.empty()) {
    if (const char* env = std::getenv("CHISEL_UJI_DIR")) uji_dir = env;
  }
  fs::create_directories(work_dir);

  std::optional<DatasetRun> data;
  std::string data_missing;
  auto dataset = [&]() -> DatasetRun* {
    if (data) return &*data;
    if (uji_dir.empty()) {
      data_missing = "UJIIndoorLoc not provided (set CHISEL_UJI_DIR)";
      return nullptr;
    }
    const fs::path train = fs::path(uji_dir) / "trainingData.csv";
    const fs::path test = fs::path(uji_dir) / "validationData.csv";
    if (!fs::exists(train) || !fs::exists(test)) {
      data_missing = "missing trainingData.csv/validationData.csv in " + uji_dir;
      return nullptr;
    }
    data.emplace();
    data->cache = build_cache(parse_ujiindoorloc_file(train), parse_ujiindoorloc_file(test));
    data->work = work_dir;
    return &*data;
  };
  auto gated = [&](Outcome (*f)(DatasetRun&)) {
    return [&, f]() -> Outcome {
      if (DatasetRun* d = dataset()) return f(*d);
      return {Status::skip, data_missing};
    };
  };

  const std::vector<Criterion> criteria = {
      {1, "gradient correctness", false, gradients},
      {2, "architecture fidelity", false, architecture},
      {3, "quantizer suite", false, quantizer},
      {4, "pruning suite", false, pruning},
      {5, "augmentation suite", false, augmentation},
      {6, "freeze contract", false, freeze},
      {7, "round-trip contracts", false, [&] { return round_trips(work_dir); }},
      {8, "full training CHISEL-DA", true, gated(full_training)},
      {9, "augmentation effect", true, gated(augmentation_effect)},
      {10, "QAT vs PTQ", true, gated(qat_vs_ptq)},
      {11, "gentle pruning", true, gated(gentle_pruning)},
      {12, "compression headline", true, gated(compression_headline)},
      {13, "latency direction", true, gated(latency)},
      {14, "KNN oracle", true, gated(knn)},
  };

  std::size_t pass = 0, fail = 0, skip = 0;
  for (const auto& c : criteria) {
    if ((group == "property" && c.dataset) || (group == "dataset" && !c.dataset)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {Status::fail, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const char* tag = o.status == Status::pass ? "PASS" : o.status == Status::fail ? "FAIL" : "SKIP";
    std::printf("[%s] %2d %-26s %s (%.1fs)\n", tag, c.id, c.name, o.detail.c_str(), secs);
    std::fflush(stdout);
    (o.status == Status::pass ? pass : o.status == Status::fail ? fail : skip)++;
  }
  std::printf("%zu passed, %zu failed, %zu skipped\n", pass, fail, skip);
  if (fail) return 1;
  return skip ? 77 : 0;
}
