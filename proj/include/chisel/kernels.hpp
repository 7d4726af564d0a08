// Copyright 2026 The Chisel Authors
// SPDX-License-Identifier: Apache-2.0

// Forward and backward kernels on raw row-major buffers. Activations are NHWC,
// convolution kernels are [Kh, Kw, Cin, Cout], dense weights are [In, Out].

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "chisel/errors.hpp"
#include "chisel/tensor.hpp"

namespace chisel::kernels {

enum class Padding { same, valid };

struct ConvGeometry {
  std::size_t batch = 0;
  std::size_t in_h = 0, in_w = 0, in_c = 0;
  std::size_t k_h = 0, k_w = 0, out_c = 0;
  std::size_t stride = 1;
  std::size_t out_h = 0, out_w = 0;
  std::size_t pad_top = 0, pad_left = 0;

  std::size_t patch() const { return k_h * k_w * in_c; }
  std::size_t rows() const { return batch * out_h * out_w; }
};

inline ConvGeometry conv_geometry(const Shape& input, const Shape& kernel, std::size_t stride,
                                  Padding padding) {
  if (input.size() != 4) throw ShapeError("conv2d: input must be NHWC, got " + shape_str(input));
  if (kernel.size() != 4) {
    throw ShapeError("conv2d: kernel must be KhKwCinCout, got " + shape_str(kernel));
  }
  if (input[3] != kernel[2]) {
    throw ShapeError("conv2d: input channels " + std::to_string(input[3]) +
                     " != kernel Cin " + std::to_string(kernel[2]));
  }
  if (stride != 1 && stride != 2) throw ShapeError("conv2d: stride must be 1 or 2");
  ConvGeometry g;
  g.batch = input[0];
  g.in_h = input[1];
  g.in_w = input[2];
  g.in_c = input[3];
  g.k_h = kernel[0];
  g.k_w = kernel[1];
  g.out_c = kernel[3];
  g.stride = stride;
  if (padding == Padding::same) {
    g.out_h = (g.in_h + stride - 1) / stride;
    g.out_w = (g.in_w + stride - 1) / stride;
    const std::size_t need_h = (g.out_h - 1) * stride + g.k_h;
    const std::size_t need_w = (g.out_w - 1) * stride + g.k_w;
    g.pad_top = need_h > g.in_h ? (need_h - g.in_h) / 2 : 0;
    g.pad_left = need_w > g.in_w ? (need_w - g.in_w) / 2 : 0;
  } else {
    if (g.in_h < g.k_h || g.in_w < g.k_w) {
      throw ShapeError("conv2d: valid padding with kernel larger than input");
    }
    g.out_h = (g.in_h - g.k_h) / stride + 1;
    g.out_w = (g.in_w - g.k_w) / stride + 1;
  }
  return g;
}

// C[M,N] (+)= A[M,K] * B[K,N]
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T{0});
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T{0}) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[K,N] += A[M,K]^T * B[M,N]
template <typename T>
void gemm_tn_acc(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T{0}) continue;
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[M,K] = A[M,N] * B[K,N]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * n;
    T* crow = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T* brow = b + p * n;
      T acc{0};
      for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      crow[p] = acc;
    }
  }
}

template <typename T>
void im2col(const ConvGeometry& g, const T* input, T* cols) {
  const std::size_t patch = g.patch();
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        T* row = cols + ((n * g.out_h + oy) * g.out_w + ox) * patch;
        for (std::size_t ky = 0; ky < g.k_h; ++ky) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad_top);
          for (std::size_t kx = 0; kx < g.k_w; ++kx) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad_left);
            T* dst = row + (ky * g.k_w + kx) * g.in_c;
            if (iy < 0 || ix < 0 || iy >= static_cast<long>(g.in_h) ||
                ix >= static_cast<long>(g.in_w)) {
              std::fill(dst, dst + g.in_c, T{0});
            } else {
              const T* src = input + ((n * g.in_h + iy) * g.in_w + ix) * g.in_c;
              std::copy(src, src + g.in_c, dst);
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_acc(const ConvGeometry& g, const T* cols, T* input_grad) {
  const std::size_t patch = g.patch();
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        const T* row = cols + ((n * g.out_h + oy) * g.out_w + ox) * patch;
        for (std::size_t ky = 0; ky < g.k_h; ++ky) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad_top);
          if (iy < 0 || iy >= static_cast<long>(g.in_h)) continue;
          for (std::size_t kx = 0; kx < g.k_w; ++kx) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad_left);
            if (ix < 0 || ix >= static_cast<long>(g.in_w)) continue;
            const T* src = row + (ky * g.k_w + kx) * g.in_c;
            T* dst = input_grad + ((n * g.in_h + iy) * g.in_w + ix) * g.in_c;
            for (std::size_t c = 0; c < g.in_c; ++c) dst[c] += src[c];
          }
        }
      }
    }
  }
}

/// Forward convolution; `cols` receives the im2col buffer for reuse in backward.
template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* input, const T* kernel, const T* bias,
                    std::vector<T>& cols, T* output) {
  cols.resize(g.rows() * g.patch());
  im2col(g, input, cols.data());
  gemm_nn(g.rows(), g.out_c, g.patch(), cols.data(), kernel, output, false);
  if (bias != nullptr) {
    for (std::size_t r = 0; r < g.rows(); ++r) {
      T* row = output + r * g.out_c;
      for (std::size_t c = 0; c < g.out_c; ++c) row[c] += bias[c];
    }
  }
}

template <typename T>
void conv2d_backward(const ConvGeometry& g, const std::vector<T>& cols, const T* kernel,
                     const T* out_grad, T* input_grad, T* kernel_grad, T* bias_grad) {
  if (kernel_grad != nullptr) {
    gemm_tn_acc(g.rows(), g.out_c, g.patch(), cols.data(), out_grad, kernel_grad);
  }
  if (bias_grad != nullptr) {
    for (std::size_t r = 0; r < g.rows(); ++r) {
      const T* row = out_grad + r * g.out_c;
      for (std::size_t c = 0; c < g.out_c; ++c) bias_grad[c] += row[c];
    }
  }
  if (input_grad != nullptr) {
    std::vector<T> dcols(g.rows() * g.patch());
    gemm_nt(g.rows(), g.out_c, g.patch(), out_grad, kernel, dcols.data());
    col2im_acc(g, dcols.data(), input_grad);
  }
}

/// 2x2/2 max pooling; `argmax` gets the flat input index that won each window
/// (first in row-major scan order on ties).
template <typename T>
void maxpool2x2_forward(const Shape& in, const T* input, T* output, std::size_t* argmax) {
  const std::size_t n = in[0], h = in[1], w = in[2], c = in[3];
  const std::size_t oh = h / 2, ow = w / 2;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          std::size_t best = ((b * h + 2 * y) * w + 2 * x) * c + ch;
          T best_v = input[best];
          for (std::size_t dy = 0; dy < 2; ++dy) {
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t idx = ((b * h + 2 * y + dy) * w + 2 * x + dx) * c + ch;
              if (input[idx] > best_v) {
                best_v = input[idx];
                best = idx;
              }
            }
          }
          const std::size_t o = ((b * oh + y) * ow + x) * c + ch;
          output[o] = best_v;
          if (argmax != nullptr) argmax[o] = best;
        }
      }
    }
  }
}

template <typename T>
void upsample2x_forward(const Shape& in, const T* input, T* output) {
  const std::size_t n = in[0], h = in[1], w = in[2], c = in[3];
  const std::size_t oh = 2 * h, ow = 2 * w;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        const T* src = input + ((b * h + y / 2) * w + x / 2) * c;
        std::copy(src, src + c, output + ((b * oh + y) * ow + x) * c);
      }
    }
  }
}

template <typename T>
void upsample2x_backward(const Shape& in, const T* out_grad, T* input_grad) {
  const std::size_t n = in[0], h = in[1], w = in[2], c = in[3];
  const std::size_t oh = 2 * h, ow = 2 * w;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        const T* src = out_grad + ((b * oh + y) * ow + x) * c;
        T* dst = input_grad + ((b * h + y / 2) * w + x / 2) * c;
        for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += src[ch];
      }
    }
  }
}

/// Inference-mode batchnorm per feature: y = gamma * (x - mean) / sqrt(var + eps) + beta.
template <typename T>
void batchnorm_infer(std::size_t rows, std::size_t features, const T* x, const T* gamma,
                     const T* beta, const T* mean, const T* var, double eps, T* y) {
  for (std::size_t f = 0; f < features; ++f) {
    const T inv = T(1) / static_cast<T>(std::sqrt(static_cast<accum_t<T>>(var[f]) + eps));
    for (std::size_t r = 0; r < rows; ++r) {
      y[r * features + f] = gamma[f] * (x[r * features + f] - mean[f]) * inv + beta[f];
    }
  }
}

/// Row-wise numerically stable softmax.
template <typename T>
void softmax_rows(std::size_t rows, std::size_t classes, const T* logits, T* probs) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = logits + r * classes;
    T* out = probs + r * classes;
    const T mx = *std::max_element(in, in + classes);
    accum_t<T> sum = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      out[c] = static_cast<T>(std::exp(static_cast<accum_t<T>>(in[c] - mx)));
      sum += out[c];
    }
    const T inv = static_cast<T>(1.0 / sum);
    for (std::size_t c = 0; c < classes; ++c) out[c] *= inv;
  }
}

}  // namespace chisel::kernels
