// Copyright 2026 The Chisel Authors
// SPDX-License-Identifier: Apache-2.0

// Symmetric per-channel weight quantizer, unsigned activation quantizer and
// their straight-through graph ops.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "chisel/autodiff.hpp"
#include "chisel/errors.hpp"
#include "chisel/tensor.hpp"

namespace chisel {

/// Positive levels per sign: 2^(b-1) - 1.
inline std::int32_t weight_levels(int bits) {
  if (bits != 2 && bits != 4 && bits != 8 && bits != 16) {
    throw ConfigError("weight bits must be one of 2, 4, 8, 16 (got " + std::to_string(bits) + ")");
  }
  return (std::int32_t{1} << (bits - 1)) - 1;
}

/// Unsigned levels for activations: 2^b - 1.
inline std::int64_t activation_levels(int bits) {
  if (bits < 2 || bits > 16) throw ConfigError("activation bits must be in [2, 16] (got " + std::to_string(bits) + ")");
  return (std::int64_t{1} << bits) - 1;
}

/// Output channels are the last axis for both conv [Kh,Kw,Cin,Cout] and dense [In,Out] weights.
inline std::size_t channel_count(const Shape& shape) { return shape.back(); }

/// Mean |w| per output channel; an all-zero channel gets scale 1.
template <typename T>
std::vector<float> channel_scales(const BasicTensor<T>& w) {
  const std::size_t c = channel_count(w.shape());
  std::vector<double> sum(c, 0.0);
  for (std::size_t i = 0; i < w.size(); ++i) sum[i % c] += std::abs(static_cast<double>(w[i]));
  const double per = static_cast<double>(w.size() / c);
  std::vector<float> out(c);
  for (std::size_t k = 0; k < c; ++k) {
    const float s = static_cast<float>(sum[k] / per);
    out[k] = s > 0.0f ? s : 1.0f;
  }
  return out;
}

/// Integer code of one weight: round(clip(w / scale, -1, 1) * L).
inline std::int32_t quant_code(double w, double scale, std::int32_t levels) {
  const double u = std::clamp(w / scale, -1.0, 1.0);
  return static_cast<std::int32_t>(std::round(u * levels));
}

inline double dequant_code(std::int32_t code, double scale, std::int32_t levels) {
  return static_cast<double>(code) / levels * scale;
}

struct QuantizedTensor {
  Shape shape;
  int bits = 0;
  std::vector<float> scales;
  std::vector<std::int32_t> codes;
};

template <typename T>
QuantizedTensor quantize_tensor(const BasicTensor<T>& w, int bits, const std::vector<float>& scales) {
  const std::int32_t levels = weight_levels(bits);
  const std::size_t c = channel_count(w.shape());
  if (scales.size() != c) throw ShapeError("quantize_tensor: " + std::to_string(scales.size()) + " scales for " + std::to_string(c) + " channels");
  for (float s : scales) {
    if (!(s > 0.0f) || !std::isfinite(s)) throw NumericError("quantize_tensor: non-positive scale");
  }
  QuantizedTensor q{w.shape(), bits, scales, std::vector<std::int32_t>(w.size())};
  for (std::size_t i = 0; i < w.size(); ++i) q.codes[i] = quant_code(w[i], scales[i % c], levels);
  return q;
}

template <typename T = float>
BasicTensor<T> dequantize(const QuantizedTensor& q) {
  const std::int32_t levels = weight_levels(q.bits);
  const std::size_t c = channel_count(q.shape);
  BasicTensor<T> out(q.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(dequant_code(q.codes[i], q.scales[i % c], levels));
  return out;
}

/// Quantize-dequantize with the tensor's own channel scales; same arithmetic as quantize_tensor + dequantize.
template <typename T>
BasicTensor<T> fake_quantize(const BasicTensor<T>& w, int bits) {
  return dequantize<T>(quantize_tensor(w, bits, channel_scales(w)));
}

/// Unsigned activation quantizer on [0, r] with 2^b - 1 levels.
inline double quantize_activation(double x, int bits, double range) {
  if (!(range > 0.0)) return 0.0;
  const double levels = static_cast<double>(activation_levels(bits));
  const double code = std::round(std::clamp(x, 0.0, range) / range * levels);
  return code / levels * range;
}

namespace ops {

/// Fake-quantized weights. Scales follow the current weights; backward is the
/// clipped straight-through estimator (pass where |w / scale| <= 1).
template <typename T>
typename Graph<T>::Id fake_quant(Graph<T>& g, typename Graph<T>::Id w, int bits) {
  const BasicTensor<T>& wv = g.value(w);
  const auto scales = channel_scales(wv);
  const std::size_t c = scales.size();
  BasicTensor<T> out = fake_quantize(wv, bits);
  std::vector<std::uint8_t> pass(wv.size());
  for (std::size_t i = 0; i < wv.size(); ++i) pass[i] = std::abs(static_cast<double>(wv[i]) / scales[i % c]) <= 1.0;
  return g.record(
      std::move(out), {w},
      [=, pass = std::move(pass)](Graph<T>& gr, const BasicTensor<T>& dy) {
        auto* d = gr.grad_buffer(w);
        for (std::size_t i = 0; i < pass.size(); ++i) {
          if (pass[i]) (*d)[i] += dy[i];
        }
      },
      "fake_quant");
}

/// Quantized activations on [0, range]; gradient passes where x <= range.
template <typename T>
typename Graph<T>::Id activation_quant(Graph<T>& g, typename Graph<T>::Id x, int bits, double range) {
  const BasicTensor<T>& xv = g.value(x);
  BasicTensor<T> out(xv.shape());
  std::vector<std::uint8_t> pass(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    out[i] = static_cast<T>(quantize_activation(xv[i], bits, range));
    pass[i] = range > 0.0 && static_cast<double>(xv[i]) <= range;
  }
  return g.record(
      std::move(out), {x},
      [=, pass = std::move(pass)](Graph<T>& gr, const BasicTensor<T>& dy) {
        auto* d = gr.grad_buffer(x);
        for (std::size_t i = 0; i < pass.size(); ++i) {
          if (pass[i]) (*d)[i] += dy[i];
        }
      },
      "activation_quant");
}

}  // namespace ops
}  // namespace chisel
