// Copyright 2026 The Chisel Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "chisel/bitpack.hpp"
#include "chisel/compress.hpp"
#include "chisel/prune.hpp"
#include "chisel/quantize.hpp"
#include "synthetic.hpp"

namespace chisel {
namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

LabeledImages toy_set(std::size_t classes, std::size_t per_class, std::uint64_t seed) {
  testing::SyntheticSpec s;
  s.classes = classes;
  s.per_class = per_class;
  s.seed = seed;
  return testing::synthetic_images(s);
}

// ---------------------------------------------------------------------------
// Quantizer

TEST(Quantizer, ChannelScaleMeanAbs) {
  const Tensor w({2, 1}, std::vector<float>{-0.2f, 0.4f});
  EXPECT_NEAR(channel_scales(w)[0], 0.3f, 1e-7);
  const Tensor z({3, 2}, std::vector<float>{0, 1, 0, -2, 0, 3});
  const auto s = channel_scales(z);
  EXPECT_EQ(s[0], 1.0f);
  EXPECT_NEAR(s[1], 2.0f, 1e-7);
}

TEST(Quantizer, ChannelScaleSignInvariant) {
  auto w = random_tensor({3, 3, 4, 6}, 5);
  auto neg = w;
  for (auto& v : neg.data()) v = -v;
  EXPECT_EQ(channel_scales(w), channel_scales(neg));
}

TEST(Quantizer, HandComputedFourBit) {
  EXPECT_EQ(weight_levels(4), 7);
  const Tensor w({1, 1}, std::vector<float>{0.25f});
  const auto q = quantize_tensor(w, 4, {0.3f});
  EXPECT_EQ(q.codes[0], 6);
  EXPECT_NEAR(dequantize(q)[0], 6.0 / 7.0 * 0.3, 1e-7);
  EXPECT_NEAR(dequantize(q)[0], 0.2571, 1e-4);
}

TEST(Quantizer, TwoBitIsTernary) {
  const auto w = random_tensor({64, 4}, 9, -3, 3);
  const auto q = quantize_tensor(w, 2, channel_scales(w));
  for (auto c : q.codes) EXPECT_TRUE(c == -1 || c == 0 || c == 1);
}

TEST(Quantizer, ZeroMapsToZero) {
  for (int b : {2, 4, 8, 16}) {
    const Tensor w({2, 1}, std::vector<float>{0.0f, 0.5f});
    const auto q = quantize_tensor(w, b, {0.25f});
    EXPECT_EQ(q.codes[0], 0);
    EXPECT_EQ(dequantize(q)[0], 0.0f);
  }
}

TEST(Quantizer, RejectsBadInput) {
  const Tensor w({2, 1}, 0.5f);
  EXPECT_THROW(quantize_tensor(w, 4, {0.0f}), NumericError);
  EXPECT_THROW(quantize_tensor(w, 4, {-1.0f}), NumericError);
  EXPECT_THROW(quantize_tensor(w, 4, {1.0f, 1.0f}), ShapeError);
  EXPECT_THROW(quantize_tensor(w, 3, {1.0f}), ConfigError);
  EXPECT_THROW(quantize_tensor(w, 32, {1.0f}), ConfigError);
}

TEST(Quantizer, PropertiesOverSeeds) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    for (int b : {2, 4, 8, 16}) {
      const auto w = random_tensor({3, 3, 2, 5}, seed * 7 + b, -2, 2);
      auto neg = w;
      for (auto& v : neg.data()) v = -v;
      const auto scales = channel_scales(w);
      const auto q = quantize_tensor(w, b, scales);
      const auto qn = quantize_tensor(neg, b, scales);
      const auto wq = dequantize(q);
      const auto again = quantize_tensor(wq, b, scales);
      const std::int32_t levels = weight_levels(b);
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double s = scales[i % scales.size()];
        ASSERT_EQ(qn.codes[i], -q.codes[i]) << "symmetry seed " << seed << " bits " << b;
        ASSERT_EQ(again.codes[i], q.codes[i]) << "idempotence seed " << seed << " bits " << b;
        ASSERT_LE(std::abs(q.codes[i]), levels);
        const double clipped = std::clamp<double>(w[i], -s, s);
        ASSERT_LE(std::abs(clipped - wq[i]), s / (2.0 * levels) * (1 + 1e-5) + 1e-7) << "bound seed " << seed;
      }
    }
  }
}

TEST(ActivationQuant, Examples) {
  EXPECT_EQ(quantize_activation(0.0, 8, 4.0), 0.0);
  EXPECT_DOUBLE_EQ(quantize_activation(4.0, 8, 4.0), 4.0);
  EXPECT_DOUBLE_EQ(quantize_activation(9.0, 8, 4.0), 4.0);
  EXPECT_NEAR(quantize_activation(1.0, 8, 4.0), 64.0 / 255.0 * 4.0, 1e-12);
  EXPECT_NEAR(quantize_activation(1.0, 8, 4.0), 1.0039, 1e-4);
  EXPECT_EQ(quantize_activation(1.0, 8, 0.0), 0.0);
  EXPECT_THROW(quantize_activation(1.0, 1, 4.0), ConfigError);
}

TEST(FakeQuant, ForwardMatchesPtq) {
  Parameter<float> p("w", random_tensor({6, 3}, 4));
  Graph<float> g;
  const auto out = ops::fake_quant(g, g.parameter(p), 4);
  const auto ref = dequantize(quantize_tensor(p.value, 4, channel_scales(p.value)));
  EXPECT_EQ(g.value(out), ref);
}

TEST(FakeQuant, StraightThroughGradient) {
  Parameter<double> p("w", BasicTensor<double>({2, 1}, std::vector<double>{0.1, 0.7}));
  // scale = 0.4: 0.1 is inside the clip range, 0.7 outside.
  Graph<double> g;
  const BasicTensor<double> c({2, 1}, std::vector<double>{3.0, 5.0});
  g.backward(ops::weighted_sum(g, ops::fake_quant(g, g.parameter(p), 8), c));
  EXPECT_DOUBLE_EQ(p.grad[0], 3.0);
  EXPECT_DOUBLE_EQ(p.grad[1], 0.0);
}

// In-range STE gradient equals the finite-difference gradient of the
// unquantized function evaluated at the dequantized weights.
TEST(FakeQuant, SteMatchesSurrogateFiniteDifference) {
  Rng rng(17);
  BasicTensor<double> x({4, 6});
  for (auto& v : x.data()) v = rng.uniform(-1, 1);
  BasicTensor<double> c({4, 3});
  for (auto& v : c.data()) v = rng.uniform(-1, 1);
  Parameter<double> w("w", BasicTensor<double>({6, 3}));
  for (auto& v : w.value.data()) v = rng.uniform(-1, 1);
  Parameter<double> b("b", BasicTensor<double>({3}, 0.1));

  Graph<double> g;
  g.backward(ops::weighted_sum(g, ops::dense(g, g.constant(x), ops::fake_quant(g, g.parameter(w), 8), g.parameter(b)), c));
  const auto wq = fake_quantize(w.value, 8);
  const auto scales = channel_scales(w.value);

  auto surrogate = [&](const BasicTensor<double>& wv) {
    Graph<double> h(false);
    return h.value(ops::weighted_sum(h, ops::dense(h, h.constant(x), h.constant(wv), h.constant(b.value)), c))[0];
  };
  std::size_t inside = 0;
  for (std::size_t i = 0; i < w.value.size(); ++i) {
    if (std::abs(w.value[i] / scales[i % 3]) > 1.0) {
      EXPECT_EQ(w.grad[i], 0.0);
      continue;
    }
    ++inside;
    auto plus = wq, minus = wq;
    plus[i] += 1e-6;
    minus[i] -= 1e-6;
    const double fd = (surrogate(plus) - surrogate(minus)) / 2e-6;
    EXPECT_NEAR(w.grad[i], fd, 1e-7 * std::max(1.0, std::abs(fd)));
  }
  EXPECT_GT(inside, 0u);
}

// ---------------------------------------------------------------------------
// Pruning

TEST(Pruning, ConnectionExample) {
  const Tensor w({4}, std::vector<float>{0.1f, -0.2f, 0.3f, -0.4f});
  const auto m = connection_masks<float>({&w}, 0.5);
  EXPECT_EQ(m[0], (Mask{0, 0, 1, 1}));
  EXPECT_EQ(connection_masks<float>({&w}, 0.0)[0], (Mask{1, 1, 1, 1}));
  EXPECT_THROW(connection_masks<float>({&w}, 1.0), ConfigError);
  EXPECT_THROW(connection_masks<float>({&w}, -0.1), ConfigError);
}

TEST(Pruning, ConnectionRankingProperty) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto a = random_tensor({7, 5}, seed);
    const auto b = random_tensor({3, 3, 2, 4}, seed + 100, -0.5, 0.5);
    const double s = 0.05 + 0.9 * Rng(seed).uniform();
    const auto masks = connection_masks<float>({&a, &b}, s);
    double max_pruned = 0, min_kept = 1e9;
    std::size_t pruned = 0;
    for (int t = 0; t < 2; ++t) {
      const auto& w = t == 0 ? a : b;
      for (std::size_t i = 0; i < w.size(); ++i) {
        if (masks[t][i]) {
          min_kept = std::min(min_kept, static_cast<double>(std::abs(w[i])));
        } else {
          max_pruned = std::max(max_pruned, static_cast<double>(std::abs(w[i])));
          ++pruned;
        }
      }
    }
    EXPECT_EQ(pruned, static_cast<std::size_t>(std::floor(s * (a.size() + b.size()))));
    EXPECT_LE(max_pruned, min_kept);
  }
}

TEST(Pruning, FilterExample) {
  // Two filters: norm 0.1 (channel 0) and 5.0 (channel 1).
  const Tensor k({1, 1, 1, 2}, std::vector<float>{0.1f, 5.0f});
  EXPECT_EQ(filters_to_prune(k, 0.5), (std::vector<std::size_t>{0}));
  EXPECT_TRUE(filters_to_prune(k, 0.0).empty());
  const Tensor one({3, 3, 1, 1}, 0.2f);
  EXPECT_TRUE(filters_to_prune(one, 0.75).empty());
  EXPECT_THROW(filters_to_prune(Tensor({4, 4}), 0.5), ShapeError);
}

TEST(Pruning, FilterFractionFirstReachesTarget) {
  const auto k = random_tensor({3, 3, 8, 16}, 3);
  for (double s : {0.1, 0.25, 0.5, 0.75}) {
    const auto f = filters_to_prune(k, s);
    EXPECT_GE(f.size() / 16.0, s);
    EXPECT_LT((f.size() - 1) / 16.0, s);
  }
}

TEST(Pruning, ModelGlobalSparsityWithinOneWeight) {
  Model m(ModelConfig{}, 3);
  for (double s : {0.25, 0.5, 0.75}) {
    Model c = m;
    const auto rep = prune_model(c, PruneKind::connection, s);
    EXPECT_LE(std::abs(rep.global_sparsity() - s), 1.0 / rep.total_weights);
    Model cf = m;
    const auto rep2 = prune_model(cf, PruneKind::connection_filter, s);
    EXPECT_LE(std::abs(rep2.global_sparsity() - s), 1.0 / rep2.total_weights);
    for (std::size_t l = 0; l < kDeployLayers.size(); ++l) {
      if (!kDeployLayers[l].conv) continue;
      EXPECT_FALSE(rep2.pruned_filters[l].empty()) << kDeployLayers[l].name;
    }
  }
}

TEST(Pruning, ZeroedFilterGivesZeroChannel) {
  Model m(ModelConfig{}, 8);
  for (auto* p : m.parameters()) {
    if (p->value.rank() == 1 && p->trainable) {
      for (auto& v : p->value.data()) v = 0.05f;
    }
  }
  const auto rep = prune_model(m, PruneKind::filter, 0.5);
  const auto& dead = rep.pruned_filters[0];
  ASSERT_EQ(dead.size(), 8u);
  const auto x = toy_set(3, 2, 4);
  std::vector<std::size_t> idx(x.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  ForwardHooks<float> hooks;
  Tensor first;
  hooks.activation = [&](Graph<float>& g, Graph<float>::Id id, std::size_t point) {
    if (point == 0) first = g.value(id);
    return id;
  };
  Graph<float> g(false);
  m.encode(g, g.constant(x.batch(idx)), &hooks);
  for (std::size_t i = 0; i < first.size(); ++i) {
    if (std::binary_search(dead.begin(), dead.end(), i % 16)) {
      ASSERT_EQ(first[i], 0.0f);
    }
  }
}

// ---------------------------------------------------------------------------
// Bit packing

TEST(BitPack, SignedRoundTrip) {
  for (unsigned b : {2u, 4u, 8u, 16u, 32u}) {
    Rng rng(b);
    std::vector<std::int32_t> v(101);
    const std::int64_t lim = b == 32 ? 0x7fffffff : (std::int64_t{1} << (b - 1)) - 1;
    for (auto& x : v) x = static_cast<std::int32_t>(static_cast<std::int64_t>(rng.below(2 * lim + 1)) - lim);
    const auto bytes = pack_signed(v, b);
    EXPECT_EQ(bytes.size(), packed_bytes(v.size(), b));
    EXPECT_EQ(unpack_signed(bytes, v.size(), b), v);
  }
}

TEST(BitPack, BitsAndIndexWidth) {
  const Mask m = {1, 0, 0, 1, 1, 0, 1, 0, 1, 1};
  const auto bytes = pack_bits(m);
  EXPECT_EQ(bytes.size(), 2u);
  EXPECT_EQ(bytes[0], 0b01011001);
  EXPECT_EQ(unpack_bits(bytes, m.size()), m);
  EXPECT_EQ(index_bits(1), 0u);
  EXPECT_EQ(index_bits(2), 1u);
  EXPECT_EQ(index_bits(1152), 11u);
  EXPECT_EQ(index_bits(116745), 17u);
  BitReader r(bytes);
  r.get(16);
  EXPECT_THROW(r.get(1), IoError);
}

// ---------------------------------------------------------------------------
// Footprint and configs

CompressionConfig cfg_of(int bits, QuantMode mode, double s, bool qat = false) {
  CompressionConfig c;
  c.bits = bits;
  c.mode = mode;
  c.sparsity = s;
  c.qat = qat;
  return c;
}

TEST(Config, Validation) {
  EXPECT_NO_THROW(validate(cfg_of(32, QuantMode::NQ, 0)));
  EXPECT_NO_THROW(validate(cfg_of(4, QuantMode::WA, 0.75, true)));
  EXPECT_THROW(validate(cfg_of(32, QuantMode::WO, 0)), ConfigError);
  EXPECT_THROW(validate(cfg_of(8, QuantMode::NQ, 0)), ConfigError);
  EXPECT_THROW(validate(cfg_of(6, QuantMode::WO, 0)), ConfigError);
  EXPECT_THROW(validate(cfg_of(8, QuantMode::WO, 1.0)), ConfigError);
  EXPECT_THROW(validate(cfg_of(32, QuantMode::NQ, 0, true)), ConfigError);
  EXPECT_EQ(cfg_of(4, QuantMode::WO, 0.25, true).label(), "INT4-WO-25%-QAT");
  EXPECT_EQ(cfg_of(32, QuantMode::NQ, 0.5).label(), "FP32-NQ-50%");
  nlohmann::json j = cfg_of(8, QuantMode::WA, 0.5, true);
  EXPECT_EQ(j.get<CompressionConfig>().label(), "INT8-WA-50%-QAT");
}

TEST(Footprint, Fp32Baseline) {
  Model m(ModelConfig{}, 1);
  const auto r = footprint_estimate(m, cfg_of(32, QuantMode::NQ, 0));
  EXPECT_EQ(r.total_bytes, 171209u * 4u);
  EXPECT_EQ(r.total_bytes, 684836u);
}

TEST(Footprint, HandComputedInt8) {
  // Quantized weights: N bytes + 4 per channel; biases and batchnorm float32.
  Model m(ModelConfig{}, 1);
  const auto r = footprint_estimate(m, cfg_of(8, QuantMode::WO, 0));
  std::size_t expect = 0;
  for (std::size_t id = 0; id < kNumParams; ++id) {
    const auto& p = m.param(id);
    if (param_block(id) == Block::decoder) continue;
    if (is_deploy_weight(id)) {
      expect += p.value.size() + 4 * p.value.shape().back();
    } else {
      expect += 4 * p.value.size();
    }
  }
  EXPECT_EQ(r.total_bytes, expect);
  const auto wa = footprint_estimate(m, cfg_of(8, QuantMode::WA, 0));
  EXPECT_EQ(wa.total_bytes, expect + 7 * 4);
}

TEST(Footprint, MonotoneInBitsAndSparsity) {
  Model m(ModelConfig{}, 2);
  for (auto kind : {PruneKind::connection, PruneKind::filter, PruneKind::connection_filter}) {
    std::vector<std::vector<std::size_t>> bytes;
    for (int b : {2, 4, 8, 16, 32}) {
      bytes.emplace_back();
      for (double s : {0.0, 0.25, 0.5, 0.75}) {
        auto c = cfg_of(b, b == 32 ? QuantMode::NQ : QuantMode::WO, s);
        c.prune = kind;
        bytes.back().push_back(footprint_estimate(m, c).total_bytes);
      }
    }
    for (std::size_t i = 0; i < bytes.size(); ++i) {
      for (std::size_t j = 0; j < bytes[i].size(); ++j) {
        if (i > 0) {
          EXPECT_LE(bytes[i - 1][j], bytes[i][j]) << prune_kind_name(kind);
        }
        if (j > 0) {
          EXPECT_LE(bytes[i][j], bytes[i][j - 1]) << prune_kind_name(kind);
        }
      }
    }
  }
}

TEST(Footprint, EncodingChoice) {
  EXPECT_EQ(choose_encoding(1000, 1000, 8, true), Encoding::dense);
  EXPECT_EQ(choose_encoding(1000, 250, 8, true), Encoding::bitmap);
  EXPECT_EQ(choose_encoding(1000, 10, 8, true), Encoding::coordinate);
  EXPECT_EQ(choose_encoding(1000, 10, 8, false), Encoding::dense);
  EXPECT_EQ(encoded_bytes(Encoding::bitmap, 1000, 250, 8), 125u + 250u);
  EXPECT_EQ(encoded_bytes(Encoding::coordinate, 1000, 10, 8), (10u * 18u + 7u) / 8u);
}

// ---------------------------------------------------------------------------
// Compressed models and files

struct Trained {
  LabeledImages train = toy_set(6, 8, 31);
  LabeledImages val = toy_set(6, 3, 32);
  Model model{ModelConfig{}, 5};
  Trained() {
    TrainConfig c;
    c.stage1_epochs = 2;
    c.stage2_epochs = 6;
    c.batch_size = 16;
    c.patience = 0;
    TrainLog log;
    train_stage1(model, train, val, c, log);
    train_stage2(model, train, val, c, log);
  }
};

const Trained& trained() {
  static const Trained t;
  return t;
}

CompressionConfig quick(CompressionConfig c) {
  c.qat_epochs = 2;
  c.finetune_epochs = 2;
  c.batch_size = 16;
  c.calibration_samples = 20;
  c.seed = 4;
  return c;
}

TEST(Compress, Fp32IdentityPipeline) {
  const auto& t = trained();
  const auto r = compress(t.model, quick(cfg_of(32, QuantMode::NQ, 0)), t.train, t.val);
  EXPECT_FALSE(r.fine_tuned);
  const Model out = r.model.to_model();
  EXPECT_EQ(out.hash({Block::encoder, Block::classifier}), t.model.hash({Block::encoder, Block::classifier}));
  const std::vector<std::size_t> idx = {0, 1, 2};
  EXPECT_EQ(out.predict_proba(t.val.batch<float>(idx)), t.model.predict_proba(t.val.batch<float>(idx)));
  EXPECT_EQ(r.footprint.total_bytes, 684836u);
}

TEST(Compress, PtqMatchesFakeQuantForward) {
  const auto& t = trained();
  const auto r = compress(t.model, quick(cfg_of(4, QuantMode::WO, 0)), t.train, t.val);
  Model q = r.model.to_model();
  ForwardHooks<float> fq;
  fq.weight = [](Graph<float>& g, Graph<float>::Id w, Parameter<float>&) { return ops::fake_quant(g, w, 4); };
  std::vector<std::size_t> idx(t.val.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Model ref = t.model;
  Graph<float> g(false);
  const auto logits = ref.classify(g, ref.encode(g, g.constant(t.val.batch<float>(idx)), &fq), Mode::infer, &fq);
  Graph<float> h(false);
  const auto logits2 = q.classify(h, q.encode(h, h.constant(t.val.batch<float>(idx))), Mode::infer);
  EXPECT_EQ(g.value(logits), h.value(logits2));
}

TEST(Compress, MasksSurviveFineTune) {
  const auto& t = trained();
  auto c = quick(cfg_of(8, QuantMode::WA, 0.5, true));
  const auto r = compress(t.model, c, t.train, t.val);
  EXPECT_TRUE(r.fine_tuned);
  EXPECT_LE(std::abs(r.prune.global_sparsity() - 0.5), 1.0 / r.prune.total_weights);
  const Model m = r.model.to_model();
  std::size_t zeros = 0, total = 0;
  for (const auto& l : kDeployLayers) {
    const auto& w = m.param(l.weight);
    total += w.value.size();
    for (std::size_t i = 0; i < w.value.size(); ++i) {
      if (!w.mask.empty() && !w.mask[i]) {
        ASSERT_EQ(w.value[i], 0.0f);
      }
      zeros += w.value[i] == 0.0f;
    }
  }
  EXPECT_GE(zeros, r.prune.pruned_weights);
  EXPECT_TRUE(m.activation_quant().enabled());
  for (float rng : m.activation_quant().ranges) EXPECT_GE(rng, 0.0f);
}

TEST(Compress, Deterministic) {
  const auto& t = trained();
  const auto c = quick(cfg_of(4, QuantMode::WA, 0.25, true));
  EXPECT_EQ(compress(t.model, c, t.train, t.val).model.hash(), compress(t.model, c, t.train, t.val).model.hash());
}

TEST(CompressedFile, PayloadEqualsEstimateAndRoundTrips) {
  const auto& t = trained();
  const auto dir = std::filesystem::temp_directory_path() / "chisel_compress_test";
  std::filesystem::create_directories(dir);
  for (const auto& c : {cfg_of(32, QuantMode::NQ, 0), cfg_of(2, QuantMode::WO, 0.75), cfg_of(8, QuantMode::WA, 0.25),
                        cfg_of(16, QuantMode::WO, 0.5), cfg_of(32, QuantMode::NQ, 0.75)}) {
    auto q = quick(c);
    q.finetune_epochs = 0;
    const auto r = compress(t.model, q, t.train, t.val);
    const auto enc = encode_compressed(r.model);
    EXPECT_EQ(enc.payload_bytes, r.footprint.total_bytes) << c.label();
    EXPECT_EQ(footprint_estimate(t.model, q).total_bytes, r.footprint.total_bytes) << c.label();
    const auto path = dir / "m.chc";
    save_compressed(path, r.model);
    const auto back = load_compressed(path);
    EXPECT_EQ(encode_compressed(back).bytes, enc.bytes) << c.label();
    EXPECT_EQ(back.to_model().hash(), r.model.to_model().hash()) << c.label();
    EXPECT_EQ(back.config.label(), c.label());
  }
  std::filesystem::remove_all(dir);
}

TEST(CompressedFile, CorruptionRejected) {
  const auto& t = trained();
  const auto r = compress(t.model, quick(cfg_of(4, QuantMode::WO, 0.5)), t.train, t.val);
  auto bytes = encode_compressed(r.model).bytes;
  bytes[bytes.size() / 2] ^= 0x10;
  EXPECT_THROW(decode_compressed(ByteReader(bytes)), IoError);
  EXPECT_THROW(load_compressed("/nonexistent/model.chc"), IoError);
}

}  // namespace
}  // namespace chisel
