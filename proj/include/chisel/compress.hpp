// Copyright 2026 The Chisel Authors
// SPDX-License-Identifier: Apache-2.0

// Compression pipeline (prune -> QAT fine-tune or PTQ -> quantize -> calibrate),
// footprint accounting and the compressed model file.
//
// Footprint. Each conv/dense weight tensor with N entries, K of them kept by
// its pruning mask, stored at b bits per entry (b = 32 for unquantized float
// words), uses the cheapest of
//   dense       ceil(N*b/8)                    codes for every entry
//   bitmap      ceil(N/8) + ceil(K*b/8)        keep-bitmap, then kept codes
//   coordinate  ceil(K*(b + ceil(log2 N))/8)   (index, code) pairs
// plus 4 bytes per output-channel scale when quantized. Biases and batchnorm
// vectors are dense float32; the decoder is not part of the deployed model.
// WA mode adds 4 bytes per activation range. The compressed file's payload
// section is exactly this many bytes.
//
// Compressed file:
//   "CHSLCMP\0"  u32 version=1
//   u32 meta_len, JSON (config echo, model config, provenance)
//   u32 tensor_count, then per tensor:
//     u16 name_len, name, u8 rank, u64 dims[rank], u8 quantized, u8 bits,
//     u8 encoding (0 dense, 1 bitmap, 2 coordinate), u64 kept, u32 scale_count
//   u8 activation_bits, u8 range_count
//   u64 payload_bytes
//   payload: per tensor f32 scales[scale_count] then its encoded stream; f32 ranges[range_count]
//   u64 FNV-1a-64 of all preceding bytes

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "chisel/binary_io.hpp"
#include "chisel/bitpack.hpp"
#include "chisel/dataset.hpp"
#include "chisel/errors.hpp"
#include "chisel/model.hpp"
#include "chisel/prune.hpp"
#include "chisel/quantize.hpp"
#include "chisel/train.hpp"
#include "json.hpp"

namespace chisel {

enum class QuantMode { NQ, WO, WA };

inline const char* quant_mode_name(QuantMode m) {
  switch (m) {
    case QuantMode::NQ:
      return "NQ";
    case QuantMode::WO:
      return "WO";
    case QuantMode::WA:
      return "WA";
  }
  return "?";
}

inline QuantMode parse_quant_mode(const std::string& s) {
  if (s == "NQ") return QuantMode::NQ;
  if (s == "WO") return QuantMode::WO;
  if (s == "WA") return QuantMode::WA;
  throw ConfigError("unknown quantization mode '" + s + "' (expected NQ, WO or WA)");
}

struct CompressionConfig {
  int bits = 32;
  QuantMode mode = QuantMode::NQ;
  double sparsity = 0.0;
  bool qat = false;
  PruneKind prune = PruneKind::connection_filter;
  std::size_t qat_epochs = 10;
  /// Post-prune float fine-tune, applied when not QAT and sparsity >= finetune_min_sparsity.
  std::size_t finetune_epochs = 10;
  double finetune_min_sparsity = 0.5;
  double finetune_lr = 1e-4;
  std::size_t batch_size = 64;
  std::size_t calibration_samples = 512;
  double activation_ema = 0.99;
  std::uint64_t seed = 0;

  /// e.g. INT4-WO-25%-QAT, FP32-NQ-50%.
  std::string label() const {
    std::string s = bits == 32 ? "FP32" : "INT" + std::to_string(bits);
    s += "-";
    s += quant_mode_name(mode);
    s += "-" + std::to_string(static_cast<int>(std::lround(sparsity * 100))) + "%";
    if (mode != QuantMode::NQ) s += qat ? "-QAT" : "-PTQ";
    return s;
  }
};

inline void validate(const CompressionConfig& c) {
  if (c.bits != 2 && c.bits != 4 && c.bits != 8 && c.bits != 16 && c.bits != 32) {
    throw ConfigError("bits must be one of 2, 4, 8, 16, 32 (got " + std::to_string(c.bits) + ")");
  }
  if ((c.bits == 32) != (c.mode == QuantMode::NQ)) throw ConfigError("bits == 32 exactly when mode is NQ (" + c.label() + ")");
  check_sparsity(c.sparsity);
  if (c.qat && c.mode == QuantMode::NQ) throw ConfigError("qat needs a quantized mode (WO or WA)");
  if (c.batch_size < 2) throw ConfigError("batch_size must be at least 2");
  if (!(c.activation_ema >= 0.0 && c.activation_ema < 1.0)) throw ConfigError("activation_ema must be in [0, 1)");
  if (!(c.finetune_lr > 0.0)) throw ConfigError("finetune_lr must be positive");
}

inline void to_json(nlohmann::json& j, const CompressionConfig& c) {
  j = {{"bits", c.bits},
       {"mode", quant_mode_name(c.mode)},
       {"sparsity", c.sparsity},
       {"qat", c.qat},
       {"prune", prune_kind_name(c.prune)},
       {"qat_epochs", c.qat_epochs},
       {"finetune_epochs", c.finetune_epochs},
       {"finetune_min_sparsity", c.finetune_min_sparsity},
       {"finetune_lr", c.finetune_lr},
       {"batch_size", c.batch_size},
       {"calibration_samples", c.calibration_samples},
       {"activation_ema", c.activation_ema},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, CompressionConfig& c) {
  c.bits = j.value("bits", c.bits);
  if (j.contains("mode")) c.mode = parse_quant_mode(j.at("mode").get<std::string>());
  c.sparsity = j.value("sparsity", c.sparsity);
  c.qat = j.value("qat", c.qat);
  if (j.contains("prune")) c.prune = parse_prune_kind(j.at("prune").get<std::string>());
  c.qat_epochs = j.value("qat_epochs", c.qat_epochs);
  c.finetune_epochs = j.value("finetune_epochs", c.finetune_epochs);
  c.finetune_min_sparsity = j.value("finetune_min_sparsity", c.finetune_min_sparsity);
  c.finetune_lr = j.value("finetune_lr", c.finetune_lr);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.calibration_samples = j.value("calibration_samples", c.calibration_samples);
  c.activation_ema = j.value("activation_ema", c.activation_ema);
  c.seed = j.value("seed", c.seed);
}

// ---------------------------------------------------------------------------
// Stored tensors and encodings

enum class Encoding : std::uint8_t { dense = 0, bitmap = 1, coordinate = 2 };

inline const char* encoding_name(Encoding e) {
  switch (e) {
    case Encoding::dense:
      return "dense";
    case Encoding::bitmap:
      return "bitmap";
    case Encoding::coordinate:
      return "coordinate";
  }
  return "?";
}

inline std::size_t encoded_bytes(Encoding e, std::size_t n, std::size_t kept, unsigned bits) {
  switch (e) {
    case Encoding::dense:
      return packed_bytes(n, bits);
    case Encoding::bitmap:
      return packed_bytes(n, 1) + packed_bytes(kept, bits);
    case Encoding::coordinate:
      return packed_bytes(kept, bits + index_bits(n));
  }
  return 0;
}

/// Cheapest encoding; ties prefer dense, then bitmap.
inline Encoding choose_encoding(std::size_t n, std::size_t kept, unsigned bits, bool maskable) {
  if (!maskable) return Encoding::dense;
  Encoding best = Encoding::dense;
  for (Encoding e : {Encoding::bitmap, Encoding::coordinate}) {
    if (encoded_bytes(e, n, kept, bits) < encoded_bytes(best, n, kept, bits)) best = e;
  }
  return best;
}

/// One tensor of the deployable network. Quantized tensors hold signed codes
/// and per-channel scales; float tensors hold IEEE-754 bit patterns.
struct StoredTensor {
  std::string name;
  Shape shape;
  bool quantized = false;
  unsigned bits = 32;
  std::vector<float> scales;
  std::vector<std::int32_t> words;
  Mask mask;  // 1 = kept; empty = every entry kept
  bool maskable = false;

  std::size_t size() const { return words.size(); }
  std::size_t kept() const { return mask.empty() ? words.size() : words.size() - count_pruned(mask); }
  bool is_kept(std::size_t i) const { return mask.empty() || mask[i]; }
  Encoding encoding() const { return choose_encoding(size(), kept(), bits, maskable && !mask.empty()); }
  std::size_t data_bytes() const { return encoded_bytes(encoding(), size(), kept(), bits); }
  std::size_t scale_bytes() const { return scales.size() * sizeof(float); }

  Tensor values() const {
    if (quantized) {
      QuantizedTensor q{shape, static_cast<int>(bits), scales, words};
      return dequantize<float>(q);
    }
    Tensor t(shape);
    for (std::size_t i = 0; i < words.size(); ++i) t[i] = std::bit_cast<float>(words[i]);
    return t;
  }
};

struct TensorFootprint {
  std::string name;
  std::size_t entries = 0;
  std::size_t kept = 0;
  unsigned bits = 32;
  Encoding encoding = Encoding::dense;
  std::size_t data_bytes = 0;
  std::size_t scale_bytes = 0;
};

struct FootprintReport {
  static constexpr const char* kFormula = "min-of-dense-bitmap-coordinate/v1";
  std::vector<TensorFootprint> tensors;
  std::size_t activation_bytes = 0;
  std::size_t total_bytes = 0;
  std::string config_label;

  nlohmann::json to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& t : tensors) {
      rows.push_back({{"name", t.name}, {"entries", t.entries}, {"kept", t.kept}, {"bits", t.bits},
                      {"encoding", encoding_name(t.encoding)}, {"data_bytes", t.data_bytes}, {"scale_bytes", t.scale_bytes}});
    }
    return {{"formula", kFormula}, {"config", config_label}, {"tensors", rows},
            {"activation_bytes", activation_bytes}, {"total_bytes", total_bytes}};
  }
};

struct CompressedModel {
  CompressionConfig config;
  ModelConfig model_config;
  std::vector<StoredTensor> tensors;
  ActivationQuant activations;
  nlohmann::json meta = nlohmann::json::object();

  FootprintReport footprint() const {
    FootprintReport r;
    r.config_label = config.label();
    for (const auto& t : tensors) {
      r.tensors.push_back({t.name, t.size(), t.kept(), t.bits, t.encoding(), t.data_bytes(), t.scale_bytes()});
      r.total_bytes += t.data_bytes() + t.scale_bytes();
    }
    if (activations.enabled()) r.activation_bytes = activations.ranges.size() * sizeof(float);
    r.total_bytes += r.activation_bytes;
    return r;
  }

  /// Inference model with dequantized weights and, in WA mode, static activation quantization.
  Model to_model() const {
    Model m(model_config);
    for (const auto& t : tensors) {
      auto& p = m.param(t.name);
      if (t.shape != p.value.shape()) throw IoError("tensor " + t.name + " has shape " + shape_str(t.shape));
      p.value = t.values();
      p.mask = t.mask;
    }
    m.set_frozen(Block::encoder, true);
    m.activation_quant() = activations;
    return m;
  }

  std::uint64_t hash() const {
    Fnv1a h;
    for (const auto& t : tensors) {
      h.update(t.name);
      h.update(t.words.data(), t.words.size() * sizeof(std::int32_t));
      h.update(t.scales.data(), t.scales.size() * sizeof(float));
      h.update(t.mask.data(), t.mask.size());
    }
    h.update_value(activations.bits);
    h.update(activations.ranges.data(), activations.ranges.size() * sizeof(float));
    return h.digest();
  }
};

inline bool is_deploy_weight(std::size_t id) {
  return std::any_of(kDeployLayers.begin(), kDeployLayers.end(), [&](const WeightedLayer& l) { return l.weight == id; });
}

/// Stores the deployable (encoder + classifier) tensors of `model` under `cfg`:
/// conv and dense weights quantized with their own channel scales (unless NQ),
/// everything else float32. The decoder is not stored.
inline CompressedModel pack_model(const Model& model, const CompressionConfig& cfg) {
  validate(cfg);
  CompressedModel out;
  out.config = cfg;
  out.model_config = model.config();
  for (std::size_t id = 0; id < kNumParams; ++id) {
    if (param_block(id) == Block::decoder) continue;
    const auto& p = model.param(id);
    StoredTensor t;
    t.name = p.name;
    t.shape = p.value.shape();
    t.maskable = is_deploy_weight(id);
    if (t.maskable) t.mask = p.mask;
    if (t.maskable && cfg.mode != QuantMode::NQ) {
      t.quantized = true;
      t.bits = static_cast<unsigned>(cfg.bits);
      t.scales = channel_scales(p.value);
      t.words = quantize_tensor(p.value, cfg.bits, t.scales).codes;
    } else {
      t.words.resize(p.value.size());
      for (std::size_t i = 0; i < p.value.size(); ++i) t.words[i] = std::bit_cast<std::int32_t>(p.value[i]);
    }
    if (!t.mask.empty()) {
      for (std::size_t i = 0; i < t.words.size(); ++i) {
        if (!t.mask[i]) t.words[i] = 0;
      }
      // A dense stream does not record the mask; drop it so a reloaded file compares equal.
      if (count_pruned(t.mask) == 0 || t.encoding() == Encoding::dense) t.mask.clear();
    }
    out.tensors.push_back(std::move(t));
  }
  if (cfg.mode == QuantMode::WA) out.activations = model.activation_quant();
  return out;
}

// ---------------------------------------------------------------------------
// Compressed file

inline constexpr std::string_view kCompressedMagic{"CHSLCMP\0", 8};
inline constexpr std::uint32_t kCompressedVersion = 1;

struct EncodedFile {
  std::vector<std::uint8_t> bytes;
  std::size_t payload_bytes = 0;
};

inline EncodedFile encode_compressed(const CompressedModel& cm) {
  nlohmann::json meta = cm.meta;
  meta["config"] = cm.config;
  meta["width_divisor"] = cm.model_config.width_divisor;
  meta["num_classes"] = cm.model_config.num_classes;

  ByteWriter payload;
  for (const auto& t : cm.tensors) {
    payload.put_array(std::span<const float>(t.scales));
    const bool sgn = t.quantized;
    BitWriter bw;
    auto put_word = [&](std::int32_t w) {
      if (sgn) {
        bw.put_signed(w, t.bits);
      } else {
        bw.put(static_cast<std::uint32_t>(w), t.bits);
      }
    };
    switch (t.encoding()) {
      case Encoding::dense:
        for (auto w : t.words) put_word(w);
        payload.put_bytes(bw.bytes());
        break;
      case Encoding::bitmap: {
        payload.put_bytes(pack_bits(t.mask));
        for (std::size_t i = 0; i < t.size(); ++i) {
          if (t.is_kept(i)) put_word(t.words[i]);
        }
        payload.put_bytes(bw.bytes());
        break;
      }
      case Encoding::coordinate: {
        const unsigned ib = index_bits(t.size());
        for (std::size_t i = 0; i < t.size(); ++i) {
          if (!t.is_kept(i)) continue;
          bw.put(i, ib);
          put_word(t.words[i]);
        }
        payload.put_bytes(bw.bytes());
        break;
      }
    }
  }
  if (cm.activations.enabled()) payload.put_array(std::span<const float>(cm.activations.ranges));

  ByteWriter w;
  w.put_magic(kCompressedMagic);
  w.put(kCompressedVersion);
  w.put_string32(meta.dump());
  w.put(static_cast<std::uint32_t>(cm.tensors.size()));
  for (const auto& t : cm.tensors) {
    w.put_string16(t.name);
    w.put(static_cast<std::uint8_t>(t.shape.size()));
    for (auto d : t.shape) w.put(static_cast<std::uint64_t>(d));
    w.put(static_cast<std::uint8_t>(t.quantized));
    w.put(static_cast<std::uint8_t>(t.bits));
    w.put(static_cast<std::uint8_t>(t.encoding()));
    w.put(static_cast<std::uint64_t>(t.kept()));
    w.put(static_cast<std::uint32_t>(t.scales.size()));
  }
  w.put(static_cast<std::uint8_t>(cm.activations.bits));
  w.put(static_cast<std::uint8_t>(cm.activations.enabled() ? cm.activations.ranges.size() : 0));
  w.put(static_cast<std::uint64_t>(payload.size()));
  w.put_bytes(payload.bytes());
  w.seal();
  return {w.bytes(), payload.size()};
}

inline std::size_t save_compressed(const std::filesystem::path& path, const CompressedModel& cm) {
  const auto enc = encode_compressed(cm);
  ByteWriter w;
  w.put_bytes(enc.bytes);
  w.write_file(path);
  return enc.bytes.size();
}

inline CompressedModel decode_compressed(ByteReader r) {
  r.verify_seal();
  r.expect_magic(kCompressedMagic);
  if (const auto v = r.get<std::uint32_t>(); v != kCompressedVersion) {
    throw IoError(r.what() + ": unsupported compressed model version " + std::to_string(v));
  }
  CompressedModel cm;
  try {
    cm.meta = nlohmann::json::parse(r.get_string32());
    cm.config = cm.meta.at("config").get<CompressionConfig>();
    cm.model_config.width_divisor = cm.meta.at("width_divisor").get<std::size_t>();
    cm.model_config.num_classes = cm.meta.at("num_classes").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(r.what() + ": bad metadata: " + e.what());
  }
  cm.meta.erase("config");
  cm.meta.erase("width_divisor");
  cm.meta.erase("num_classes");

  struct Header {
    Encoding encoding;
    std::size_t kept;
    std::size_t scales;
  };
  std::vector<Header> headers(r.get<std::uint32_t>());
  cm.tensors.resize(headers.size());
  for (std::size_t k = 0; k < headers.size(); ++k) {
    auto& t = cm.tensors[k];
    t.name = r.get_string16();
    t.shape.resize(r.get<std::uint8_t>());
    for (auto& d : t.shape) d = r.get<std::uint64_t>();
    t.quantized = r.get<std::uint8_t>() != 0;
    t.bits = r.get<std::uint8_t>();
    const auto enc = r.get<std::uint8_t>();
    if (enc > 2) throw IoError(r.what() + ": unknown encoding for " + t.name);
    headers[k] = {static_cast<Encoding>(enc), r.get<std::uint64_t>(), r.get<std::uint32_t>()};
    t.maskable = std::find(kParamNames.begin(), kParamNames.end(), t.name) != kParamNames.end() &&
                 is_deploy_weight(static_cast<std::size_t>(std::find(kParamNames.begin(), kParamNames.end(), t.name) - kParamNames.begin()));
  }
  cm.activations.bits = r.get<std::uint8_t>();
  const std::size_t n_ranges = r.get<std::uint8_t>();
  if (n_ranges != 0 && n_ranges != cm.activations.ranges.size()) throw IoError(r.what() + ": bad activation range count");
  const auto payload_bytes = r.get<std::uint64_t>();
  const auto payload = r.get_bytes(payload_bytes);
  if (!r.at_end()) throw IoError(r.what() + ": trailing bytes");

  ByteReader p(payload, r.what() + " payload");
  for (std::size_t k = 0; k < cm.tensors.size(); ++k) {
    auto& t = cm.tensors[k];
    const auto& h = headers[k];
    const std::size_t n = shape_size(t.shape);
    t.scales = p.get_array<float>(h.scales);
    t.words.assign(n, 0);
    auto get_word = [&](BitReader& br) {
      return t.quantized ? static_cast<std::int32_t>(br.get_signed(t.bits)) : static_cast<std::int32_t>(br.get(t.bits));
    };
    switch (h.encoding) {
      case Encoding::dense: {
        const auto bytes = p.get_bytes(packed_bytes(n, t.bits));
        BitReader br(bytes);
        for (auto& w : t.words) w = get_word(br);
        break;
      }
      case Encoding::bitmap: {
        t.mask = unpack_bits(p.get_bytes(packed_bytes(n, 1)), n);
        const auto bytes = p.get_bytes(packed_bytes(h.kept, t.bits));
        BitReader br(bytes);
        for (std::size_t i = 0; i < n; ++i) {
          if (t.mask[i]) t.words[i] = get_word(br);
        }
        break;
      }
      case Encoding::coordinate: {
        const unsigned ib = index_bits(n);
        const auto bytes = p.get_bytes(packed_bytes(h.kept, t.bits + ib));
        BitReader br(bytes);
        t.mask.assign(n, 0);
        for (std::size_t j = 0; j < h.kept; ++j) {
          const auto i = static_cast<std::size_t>(br.get(ib));
          if (i >= n) throw IoError("coordinate index out of range in " + t.name);
          t.mask[i] = 1;
          t.words[i] = get_word(br);
        }
        break;
      }
    }
  }
  if (n_ranges) {
    const auto ranges = p.get_array<float>(n_ranges);
    std::copy(ranges.begin(), ranges.end(), cm.activations.ranges.begin());
  }
  if (!p.at_end()) throw IoError(r.what() + ": payload size mismatch");
  return cm;
}

inline CompressedModel load_compressed(const std::filesystem::path& path) {
  return decode_compressed(ByteReader::from_file(path));
}

// ---------------------------------------------------------------------------
// Pipeline

/// Max of every activation point over `images` (inference mode, no activation quantization).
template <typename T>
std::array<float, kActivationPoints.size()> calibrate_ranges(CaeCnn<T>& model, const LabeledImages& images,
                                                             const ForwardHooks<T>* weight_hooks = nullptr) {
  std::array<float, kActivationPoints.size()> ranges{};
  ForwardHooks<T> hooks;
  if (weight_hooks) hooks.weight = weight_hooks->weight;
  hooks.activation = [&](Graph<T>& g, typename Graph<T>::Id x, std::size_t point) {
    for (auto v : g.value(x).data()) ranges[point] = std::max(ranges[point], static_cast<float>(v));
    return x;
  };
  for (std::size_t s = 0; s < images.size(); s += 256) {
    std::vector<std::size_t> idx;
    for (std::size_t i = s; i < std::min(images.size(), s + 256); ++i) idx.push_back(i);
    Graph<T> g(false);
    model.classify(g, model.encode(g, g.constant(images.batch<T>(idx)), &hooks), Mode::infer, &hooks);
  }
  return ranges;
}

/// First `count` samples of a seeded shuffle of `set`.
inline LabeledImages sample_subset(const LabeledImages& set, std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> order(set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(std::span(order));
  order.resize(std::min(count, order.size()));
  LabeledImages out;
  for (auto i : order) out.add(set.rssi(i), set.labels[i], set.coords[i], set.keys[i]);
  return out;
}

struct CompressResult {
  CompressedModel model;
  PruneReport prune;
  FootprintReport footprint;
  std::vector<EpochRecord> finetune;
  bool fine_tuned = false;
};

/// Runs one configuration against a trained model. `train` feeds fine-tuning
/// and calibration; `val` selects the best fine-tune epoch.
inline CompressResult compress(const Model& trained, const CompressionConfig& cfg, const LabeledImages& train,
                               const LabeledImages& val) {
  validate(cfg);
  Model model = trained;
  model.activation_quant() = {};
  for (auto* p : model.parameters()) p->mask.clear();
  CompressResult res;
  res.prune = prune_model(model, cfg.prune, cfg.sparsity);

  const bool quantized = cfg.mode != QuantMode::NQ;
  const bool wa = cfg.mode == QuantMode::WA;
  const int bits = cfg.bits;
  LabeledImages calibration;
  if (wa) calibration = sample_subset(train, cfg.calibration_samples, Rng::derive(cfg.seed, 0xCA1));

  ForwardHooks<float> fq;
  if (quantized) {
    fq.weight = [bits](Graph<float>& g, Graph<float>::Id w, Parameter<float>&) { return ops::fake_quant(g, w, bits); };
  }

  FineTuneConfig ft;
  ft.batch_size = cfg.batch_size;
  ft.lr = cfg.finetune_lr;
  ft.seed = Rng::derive(cfg.seed, 0xF1E);
  if (cfg.qat) {
    if (wa) model.activation_quant() = {bits, calibrate_ranges(model, calibration, &fq)};
    ForwardHooks<float> train_hooks = fq;
    if (wa) {
      const double momentum = cfg.activation_ema;
      train_hooks.activation = [&model, bits, momentum](Graph<float>& g, Graph<float>::Id x, std::size_t point) {
        float batch_max = 0.0f;
        for (auto v : g.value(x).data()) batch_max = std::max(batch_max, v);
        float& r = model.activation_quant().ranges[point];
        r = static_cast<float>(momentum * r + (1.0 - momentum) * batch_max);
        return ops::activation_quant(g, x, bits, r);
      };
    }
    ft.epochs = cfg.qat_epochs;
    fine_tune(model, train, val, ft, &train_hooks, &fq, &res.finetune);
    res.fine_tuned = cfg.qat_epochs > 0;
  } else if (cfg.sparsity > 0.0 && cfg.sparsity >= cfg.finetune_min_sparsity && cfg.finetune_epochs > 0) {
    ft.epochs = cfg.finetune_epochs;
    fine_tune<float>(model, train, val, ft, nullptr, nullptr, &res.finetune);
    res.fine_tuned = true;
  }
  model.set_frozen(Block::encoder, true);

  if (wa && !cfg.qat) {
    model.activation_quant() = {};
    model.activation_quant() = {bits, calibrate_ranges(model, calibration, &fq)};
  }
  res.model = pack_model(model, cfg);
  res.model.meta["source_hash"] = hex64(trained.hash({Block::encoder, Block::classifier}));
  res.model.meta["prune"] = {{"kind", prune_kind_name(res.prune.kind)},
                             {"target", res.prune.target},
                             {"achieved", res.prune.global_sparsity()},
                             {"layers", res.prune.layers},
                             {"layer_sparsity", res.prune.layer_sparsity}};
  res.footprint = res.model.footprint();
  return res;
}

/// Footprint of `model` under `cfg` without fine-tuning: prune, quantize, account.
inline FootprintReport footprint_estimate(const Model& model, const CompressionConfig& cfg) {
  validate(cfg);
  Model copy = model;
  for (auto* p : copy.parameters()) p->mask.clear();
  prune_model(copy, cfg.prune, cfg.sparsity);
  if (cfg.mode == QuantMode::WA) copy.activation_quant().bits = cfg.bits;
  return pack_model(copy, cfg).footprint();
}

}  // namespace chisel
