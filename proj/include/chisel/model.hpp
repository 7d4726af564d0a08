// Copyright 2026 The Chisel Authors
// SPDX-License-Identifier: Apache-2.0

// The convolutional autoencoder + CNN classifier: layer table, weight store
// and graph builders for the encoder, decoder and classifier blocks.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "chisel/autodiff.hpp"
#include "chisel/dataset.hpp"
#include "chisel/errors.hpp"
#include "chisel/hash.hpp"
#include "chisel/quantize.hpp"
#include "chisel/rng.hpp"
#include "chisel/tensor.hpp"

namespace chisel {

enum class Block { encoder, decoder, classifier };

inline const char* block_name(Block b) {
  switch (b) {
    case Block::encoder:
      return "encoder";
    case Block::decoder:
      return "decoder";
    case Block::classifier:
      return "classifier";
  }
  return "?";
}

struct ModelConfig {
  /// Divides every hidden channel count; 1 is the full network.
  std::size_t width_divisor = 1;
  std::size_t num_classes = 905;
};

enum class LayerKind { conv, maxpool, upsample, flatten, dense, batchnorm };

struct LayerSpec {
  Block block;
  LayerKind kind;
  std::string name;
  Shape output;  // per-sample, HWC or [F]
  std::size_t params = 0;
  bool relu = false;
};

struct ModelSpec {
  ModelConfig config;
  std::vector<LayerSpec> layers;
};

namespace detail {

inline std::size_t scaled(std::size_t channels, std::size_t divisor) {
  if (divisor == 0 || channels % divisor != 0) {
    throw ConfigError("width divisor " + std::to_string(divisor) + " does not divide " + std::to_string(channels));
  }
  return channels / divisor;
}

}  // namespace detail

/// Channel widths after the width divisor.
struct Widths {
  std::size_t enc1, enc2, cls1, cls2, cls3, cls4, fc1, classes;

  explicit Widths(const ModelConfig& c)
      : enc1(detail::scaled(16, c.width_divisor)),
        enc2(detail::scaled(8, c.width_divisor)),
        cls1(detail::scaled(8, c.width_divisor)),
        cls2(detail::scaled(16, c.width_divisor)),
        cls3(detail::scaled(32, c.width_divisor)),
        cls4(detail::scaled(32, c.width_divisor)),
        fc1(detail::scaled(128, c.width_divisor)),
        classes(c.num_classes) {
    if (classes == 0) throw ConfigError("num_classes must be positive");
  }

  std::size_t flatten() const { return 3 * 3 * cls4; }
};

inline ModelSpec build_spec(const ModelConfig& cfg = {}) {
  const Widths w(cfg);
  const std::size_t s = kImageSide, h = kImageSide / 2, q = kImageSide / 4, e = kImageSide / 8;
  auto conv = [](std::size_t cin, std::size_t cout) { return 9 * cin * cout + cout; };
  ModelSpec spec{cfg, {}};
  auto& L = spec.layers;
  L.push_back({Block::encoder, LayerKind::conv, "enc.conv1", {s, s, w.enc1}, conv(1, w.enc1), true});
  L.push_back({Block::encoder, LayerKind::maxpool, "enc.pool", {h, h, w.enc1}, 0, false});
  L.push_back({Block::encoder, LayerKind::conv, "enc.conv2", {h, h, w.enc2}, conv(w.enc1, w.enc2), true});
  L.push_back({Block::decoder, LayerKind::upsample, "dec.up", {s, s, w.enc2}, 0, false});
  L.push_back({Block::decoder, LayerKind::conv, "dec.conv", {s, s, 1}, conv(w.enc2, 1), true});
  L.push_back({Block::classifier, LayerKind::conv, "cls.conv1", {h, h, w.cls1}, conv(w.enc2, w.cls1), true});
  L.push_back({Block::classifier, LayerKind::conv, "cls.conv2", {h, h, w.cls2}, conv(w.cls1, w.cls2), true});
  L.push_back({Block::classifier, LayerKind::maxpool, "cls.pool1", {q, q, w.cls2}, 0, false});
  L.push_back({Block::classifier, LayerKind::conv, "cls.conv3", {q, q, w.cls3}, conv(w.cls2, w.cls3), true});
  L.push_back({Block::classifier, LayerKind::conv, "cls.conv4", {q, q, w.cls4}, conv(w.cls3, w.cls4), true});
  L.push_back({Block::classifier, LayerKind::maxpool, "cls.pool2", {e, e, w.cls4}, 0, false});
  L.push_back({Block::classifier, LayerKind::flatten, "cls.flatten", {w.flatten()}, 0, false});
  L.push_back({Block::classifier, LayerKind::dense, "cls.fc1", {w.fc1}, w.flatten() * w.fc1 + w.fc1, true});
  L.push_back({Block::classifier, LayerKind::batchnorm, "cls.bn", {w.fc1}, 4 * w.fc1, false});
  L.push_back({Block::classifier, LayerKind::dense, "cls.fc2", {w.classes}, w.fc1 * w.classes + w.classes, false});
  return spec;
}

/// Parameter count of the given blocks; batchnorm counts gamma, beta and both running statistics.
inline std::size_t count_params(const ModelSpec& spec, std::initializer_list<Block> blocks) {
  std::size_t n = 0;
  for (const auto& l : spec.layers) {
    if (std::find(blocks.begin(), blocks.end(), l.block) != blocks.end()) n += l.params;
  }
  return n;
}

inline std::string describe(const ModelSpec& spec) {
  std::ostringstream os;
  os << "block       layer        output        params\n";
  for (const auto& l : spec.layers) {
    char line[96];
    std::snprintf(line, sizeof line, "%-11s %-12s %-13s %zu\n", block_name(l.block), l.name.c_str(),
                  shape_str(l.output).c_str(), l.params);
    os << line;
  }
  os << "encoder+classifier parameters: " << count_params(spec, {Block::encoder, Block::classifier}) << '\n';
  os << "decoder parameters: " << count_params(spec, {Block::decoder}) << '\n';
  return os.str();
}

/// Indices into the weight store.
enum ParamId : std::size_t {
  kEnc1W, kEnc1B, kEnc2W, kEnc2B,
  kDecW, kDecB,
  kCls1W, kCls1B, kCls2W, kCls2B, kCls3W, kCls3B, kCls4W, kCls4B,
  kFc1W, kFc1B, kBnGamma, kBnBeta, kBnMean, kBnVar, kFc2W, kFc2B,
  kNumParams
};

inline constexpr std::array<std::string_view, kNumParams> kParamNames = {
    "enc.conv1.w", "enc.conv1.b", "enc.conv2.w", "enc.conv2.b", "dec.conv.w", "dec.conv.b",
    "cls.conv1.w", "cls.conv1.b", "cls.conv2.w", "cls.conv2.b", "cls.conv3.w", "cls.conv3.b",
    "cls.conv4.w", "cls.conv4.b", "cls.fc1.w",   "cls.fc1.b",   "cls.bn.gamma", "cls.bn.beta",
    "cls.bn.mean", "cls.bn.var",  "cls.fc2.w",   "cls.fc2.b"};

inline Block param_block(std::size_t id) {
  if (id <= kEnc2B) return Block::encoder;
  if (id <= kDecB) return Block::decoder;
  return Block::classifier;
}

/// A weighted layer of the deployable network (encoder + classifier).
struct WeightedLayer {
  std::string_view name;
  std::size_t weight;
  std::size_t bias;
  bool conv;
};

inline constexpr std::array<WeightedLayer, 8> kDeployLayers = {{
    {"enc.conv1", kEnc1W, kEnc1B, true},
    {"enc.conv2", kEnc2W, kEnc2B, true},
    {"cls.conv1", kCls1W, kCls1B, true},
    {"cls.conv2", kCls2W, kCls2B, true},
    {"cls.conv3", kCls3W, kCls3B, true},
    {"cls.conv4", kCls4W, kCls4B, true},
    {"cls.fc1", kFc1W, kFc1B, false},
    {"cls.fc2", kFc2W, kFc2B, false},
}};

/// Post-ReLU tensors of the deployable network, in forward order.
inline constexpr std::array<std::string_view, 7> kActivationPoints = {
    "enc.conv1", "enc.conv2", "cls.conv1", "cls.conv2", "cls.conv3", "cls.conv4", "cls.fc1"};

/// Static activation quantization applied at every activation point (bits == 0 disables it).
struct ActivationQuant {
  int bits = 0;
  std::array<float, kActivationPoints.size()> ranges{};

  bool enabled() const { return bits > 0; }
};

template <typename T>
struct ForwardHooks {
  using Id = typename Graph<T>::Id;
  /// Replaces a conv/dense weight node (fake quantization during QAT).
  std::function<Id(Graph<T>&, Id, Parameter<T>&)> weight;
  /// Replaces an activation-point node; overrides the model's static activation quantization.
  std::function<Id(Graph<T>&, Id, std::size_t)> activation;
  /// Receives every layer output shape (batch axis stripped), in layer-table order.
  std::vector<Shape>* trace = nullptr;
};

template <typename T>
class CaeCnn {
 public:
  using Id = typename Graph<T>::Id;
  using Hooks = ForwardHooks<T>;

  explicit CaeCnn(ModelConfig cfg = {}, std::uint64_t seed = 0) : config_(cfg) {
    const Widths w(cfg);
    params_.resize(kNumParams);
    auto conv = [&](std::size_t wid, std::size_t cin, std::size_t cout) {
      set(wid, Shape{3, 3, cin, cout});
      set(wid + 1, Shape{cout});
    };
    conv(kEnc1W, 1, w.enc1);
    conv(kEnc2W, w.enc1, w.enc2);
    conv(kDecW, w.enc2, 1);
    conv(kCls1W, w.enc2, w.cls1);
    conv(kCls2W, w.cls1, w.cls2);
    conv(kCls3W, w.cls2, w.cls3);
    conv(kCls4W, w.cls3, w.cls4);
    set(kFc1W, Shape{w.flatten(), w.fc1});
    set(kFc1B, Shape{w.fc1});
    set(kBnGamma, Shape{w.fc1}, T{1});
    set(kBnBeta, Shape{w.fc1});
    set(kBnMean, Shape{w.fc1});
    set(kBnVar, Shape{w.fc1}, T{1});
    params_[kBnMean].trainable = false;
    params_[kBnVar].trainable = false;
    set(kFc2W, Shape{w.fc1, w.classes});
    set(kFc2B, Shape{w.classes});
    initialize(seed);
  }

  const ModelConfig& config() const { return config_; }
  ModelSpec spec() const { return build_spec(config_); }

  Parameter<T>& param(std::size_t id) { return params_.at(id); }
  const Parameter<T>& param(std::size_t id) const { return params_.at(id); }

  Parameter<T>& param(std::string_view name) {
    for (std::size_t i = 0; i < kNumParams; ++i) {
      if (kParamNames[i] == name) return params_[i];
    }
    throw ConfigError("no parameter named " + std::string(name));
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& p : params_) out.push_back(&p);
    return out;
  }

  std::vector<Parameter<T>*> parameters(std::initializer_list<Block> blocks) {
    std::vector<Parameter<T>*> out;
    for (std::size_t i = 0; i < kNumParams; ++i) {
      if (std::find(blocks.begin(), blocks.end(), param_block(i)) != blocks.end()) out.push_back(&params_[i]);
    }
    return out;
  }

  void set_frozen(Block b, bool frozen) {
    for (std::size_t i = 0; i < kNumParams; ++i) {
      if (param_block(i) == b) params_[i].frozen = frozen;
    }
  }

  ActivationQuant& activation_quant() { return act_quant_; }
  const ActivationQuant& activation_quant() const { return act_quant_; }

  /// Content hash over names, shapes and values of the given blocks.
  std::uint64_t hash(std::initializer_list<Block> blocks = {Block::encoder, Block::decoder, Block::classifier}) const {
    Fnv1a h;
    for (std::size_t i = 0; i < kNumParams; ++i) {
      if (std::find(blocks.begin(), blocks.end(), param_block(i)) == blocks.end()) continue;
      const auto& p = params_[i];
      h.update(p.name);
      for (auto d : p.value.shape()) h.update_value(static_cast<std::uint64_t>(d));
      h.update(p.value.data().data(), p.value.size() * sizeof(T));
    }
    return h.digest();
  }

  /// [N,24,24,1] -> [N,12,12,8] feature map.
  Id encode(Graph<T>& g, Id x, const Hooks* hooks = nullptr) {
    check_input(g.value(x));
    Id h = conv_relu(g, x, kEnc1W, 0, hooks);
    h = traced(g, ops::maxpool2x2(g, h), hooks);
    return conv_relu(g, h, kEnc2W, 1, hooks);
  }

  /// [N,12,12,8] -> [N,24,24,1] reconstruction.
  Id decode(Graph<T>& g, Id z, const Hooks* hooks = nullptr) {
    Id h = traced(g, ops::upsample2x(g, z), hooks);
    h = ops::conv2d(g, h, g.parameter(params_[kDecW]), g.parameter(params_[kDecB]));
    return traced(g, ops::relu(g, h), hooks);
  }

  /// [N,12,12,8] feature map -> [N,C] logits.
  Id classify(Graph<T>& g, Id z, Mode mode, const Hooks* hooks = nullptr) {
    Id h = conv_relu(g, z, kCls1W, 2, hooks);
    h = conv_relu(g, h, kCls2W, 3, hooks);
    h = traced(g, ops::maxpool2x2(g, h), hooks);
    h = conv_relu(g, h, kCls3W, 4, hooks);
    h = conv_relu(g, h, kCls4W, 5, hooks);
    h = traced(g, ops::maxpool2x2(g, h), hooks);
    h = traced(g, ops::flatten(g, h), hooks);
    h = ops::dense(g, h, weight(g, kFc1W, hooks), g.parameter(params_[kFc1B]));
    h = activation(g, ops::relu(g, h), 6, hooks);
    traced(g, h, hooks);
    h = traced(g, ops::batchnorm(g, h, g.parameter(params_[kBnGamma]), g.parameter(params_[kBnBeta]),
                                 params_[kBnMean], params_[kBnVar], mode),
               hooks);
    return traced(g, ops::dense(g, h, weight(g, kFc2W, hooks), g.parameter(params_[kFc2B])), hooks);
  }

  /// Class probabilities for [N,24,24,1] images, batchnorm in inference mode.
  BasicTensor<T> predict_proba(const BasicTensor<T>& images, std::size_t chunk = 256) const {
    check_input(images);
    const std::size_t n = images.dim(0), classes = config_.num_classes;
    BasicTensor<T> out({n, classes});
    // Inference tapes never write parameters, so concurrent callers can share the model.
    auto& self = const_cast<CaeCnn&>(*this);
    for (std::size_t start = 0; start < n; start += chunk) {
      const std::size_t m = std::min(chunk, n - start);
      BasicTensor<T> part({m, kImageSide, kImageSide, 1});
      std::copy_n(images.data().begin() + static_cast<long>(start * kImagePixels), m * kImagePixels, part.data().begin());
      Graph<T> g(false);
      const Id logits = self.classify(g, self.encode(g, g.constant(std::move(part))), Mode::infer);
      const auto probs = softmax(g.value(logits));
      std::copy(probs.data().begin(), probs.data().end(), out.data().begin() + static_cast<long>(start * classes));
    }
    return out;
  }

  std::vector<int> predict(const BasicTensor<T>& images) const { return argmax_rows(predict_proba(images)); }

  static std::vector<int> argmax_rows(const BasicTensor<T>& probs) {
    const std::size_t n = probs.dim(0), c = probs.dim(1);
    std::vector<int> out(n);
    for (std::size_t r = 0; r < n; ++r) {
      const auto row = probs.data().subspan(r * c, c);
      out[r] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    return out;
  }

  /// Fan-in scaled uniform weights: sqrt(6 / fan_in) ahead of a ReLU, sqrt(1 / fan_in)
  /// for the logit layer. Biases and batchnorm shift start at 0.
  void initialize(std::uint64_t seed) {
    for (std::size_t i = 0; i < kNumParams; ++i) {
      auto& p = params_[i];
      if (p.value.rank() < 2) continue;
      const Shape& s = p.value.shape();
      const std::size_t fan_in = p.value.size() / s.back();
      const double limit = std::sqrt((i == kFc2W ? 1.0 : 6.0) / static_cast<double>(fan_in));
      Rng rng(Rng::derive(seed, i));
      for (auto& v : p.value.data()) v = static_cast<T>(rng.uniform(-limit, limit));
    }
  }

 private:
  void set(std::size_t id, Shape shape, T fill = T{0}) {
    params_[id] = Parameter<T>(std::string(kParamNames[id]), BasicTensor<T>(std::move(shape), fill));
  }

  static void check_input(const BasicTensor<T>& x) {
    if (x.rank() != 4 || x.dim(1) != kImageSide || x.dim(2) != kImageSide || x.dim(3) != 1) {
      throw ShapeError("model input must be [N,24,24,1], got " + shape_str(x.shape()));
    }
  }

  Id weight(Graph<T>& g, std::size_t id, const Hooks* hooks) {
    Id w = g.parameter(params_[id]);
    if (hooks && hooks->weight) w = hooks->weight(g, w, params_[id]);
    return w;
  }

  Id activation(Graph<T>& g, Id x, std::size_t point, const Hooks* hooks) {
    if (hooks && hooks->activation) return hooks->activation(g, x, point);
    if (act_quant_.enabled()) return ops::activation_quant(g, x, act_quant_.bits, act_quant_.ranges[point]);
    return x;
  }

  Id traced(Graph<T>& g, Id x, const Hooks* hooks) {
    if (hooks && hooks->trace) {
      const Shape& s = g.value(x).shape();
      hooks->trace->push_back(Shape(s.begin() + 1, s.end()));
    }
    return x;
  }

  Id conv_relu(Graph<T>& g, Id x, std::size_t wid, std::size_t point, const Hooks* hooks) {
    Id h = ops::conv2d(g, x, weight(g, wid, hooks), g.parameter(params_[wid + 1]));
    return traced(g, activation(g, ops::relu(g, h), point, hooks), hooks);
  }

  ModelConfig config_;
  std::vector<Parameter<T>> params_;
  ActivationQuant act_quant_;
};

using Model = CaeCnn<float>;

}  // namespace chisel
