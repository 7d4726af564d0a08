// Copyright 2026 The Chisel Authors
// SPDX-License-Identifier: Apache-2.0

// Deployment engine: a forward-only encoder + classifier compiled from a
// (possibly pruned and dequantized) model.
//
// Compilation removes conv output channels that are constant zero (all-zero
// filter, non-positive bias) together with the matching input channels of the
// next layer, drops fc1 units the same way, folds inference batchnorm into
// fc2, and stores conv/dense weights in CSR form when their density is below
// `csr_density`. Outputs match the graph forward up to float rounding.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "chisel/compress.hpp"
#include "chisel/kernels.hpp"
#include "chisel/model.hpp"
#include "chisel/quantize.hpp"
#include "json.hpp"

namespace chisel {

struct EngineOptions {
  double csr_density = 0.4;
};

/// Row-compressed [rows, cols] matrix.
struct CsrMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<std::uint32_t> row_start;
  std::vector<std::uint32_t> col;
  std::vector<float> val;

  static CsrMatrix from_dense(std::size_t rows, std::size_t cols, const std::vector<float>& dense) {
    CsrMatrix m;
    m.rows = rows;
    m.cols = cols;
    m.row_start.reserve(rows + 1);
    m.row_start.push_back(0);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        const float v = dense[r * cols + c];
        if (v != 0.0f) {
          m.col.push_back(static_cast<std::uint32_t>(c));
          m.val.push_back(v);
        }
      }
      m.row_start.push_back(static_cast<std::uint32_t>(m.col.size()));
    }
    return m;
  }
};

/// y[m, n] = x[m, k] * W[k, n] with W dense or CSR.
struct Matrix {
  std::size_t k = 0, n = 0;
  std::vector<float> dense;
  CsrMatrix csr;
  bool sparse = false;

  std::size_t nnz() const {
    return sparse ? csr.val.size() : static_cast<std::size_t>(std::count_if(dense.begin(), dense.end(), [](float v) { return v != 0.0f; }));
  }

  /// y[0, n) += v * W[p, :]
  void axpy_row(std::size_t p, float v, float* y) const {
    if (!sparse) {
      const float* w = dense.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) y[j] += v * w[j];
      return;
    }
    for (std::uint32_t e = csr.row_start[p]; e < csr.row_start[p + 1]; ++e) y[csr.col[e]] += v * csr.val[e];
  }

  void multiply(std::size_t m, const float* x, float* y) const {
    if (!sparse) {
      kernels::gemm_nn(m, n, k, x, dense.data(), y, false);
      return;
    }
    std::fill(y, y + m * n, 0.0f);
    for (std::size_t i = 0; i < m; ++i) {
      const float* xr = x + i * k;
      float* yr = y + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const float xv = xr[p];
        if (xv == 0.0f) continue;
        for (std::uint32_t e = csr.row_start[p]; e < csr.row_start[p + 1]; ++e) yr[csr.col[e]] += xv * csr.val[e];
      }
    }
  }

  static Matrix make(std::size_t k, std::size_t n, std::vector<float> w, double csr_density) {
    Matrix m;
    m.k = k;
    m.n = n;
    const std::size_t nz = static_cast<std::size_t>(std::count_if(w.begin(), w.end(), [](float v) { return v != 0.0f; }));
    if (k * n > 0 && static_cast<double>(nz) < csr_density * static_cast<double>(k * n)) {
      m.csr = CsrMatrix::from_dense(k, n, w);
      m.sparse = true;
    } else {
      m.dense = std::move(w);
    }
    return m;
  }
};

class Engine {
 public:
  struct ConvStage {
    std::string name;
    std::size_t side = 0;  // input height = width
    std::size_t in_c = 0, out_c = 0, full_out_c = 0;
    Matrix weights;  // [9 * in_c, out_c]
    std::vector<float> bias;
    bool pool = false;
  };

  static Engine compile(const Model& model, EngineOptions opt = {}) {
    Engine e;
    e.options_ = opt;
    e.classes_ = model.config().num_classes;
    e.act_ = model.activation_quant();

    constexpr std::array<std::size_t, 6> kConvs = {kEnc1W, kEnc2W, kCls1W, kCls2W, kCls3W, kCls4W};
    constexpr std::array<std::size_t, 6> kSide = {24, 12, 12, 12, 6, 6};
    constexpr std::array<bool, 6> kPool = {true, false, false, true, false, true};

    // Forward liveness: an output channel is alive unless its filter is all zero
    // and its bias cannot lift it above the ReLU.
    std::vector<std::vector<std::uint8_t>> alive(kConvs.size());
    for (std::size_t l = 0; l < kConvs.size(); ++l) {
      const auto& w = model.param(kConvs[l]).value;
      const auto& b = model.param(kConvs[l] + 1).value;
      const std::size_t cout = w.dim(3);
      alive[l].assign(cout, 0);
      for (std::size_t c = 0; c < cout; ++c) alive[l][c] = b[c] > 0.0f;
      for (std::size_t i = 0; i < w.size(); ++i) {
        if (w[i] != 0.0f) alive[l][i % cout] = 1;
      }
    }
    // A channel read by no nonzero weight downstream is unused.
    const auto& fc1w = model.param(kFc1W).value;
    const std::size_t fc1_out = fc1w.dim(1);
    for (std::size_t l = kConvs.size(); l-- > 0;) {
      const std::size_t cout = alive[l].size();
      std::vector<std::uint8_t> used(cout, 0);
      if (l + 1 < kConvs.size()) {
        const auto& nw = model.param(kConvs[l + 1]).value;
        const std::size_t ncout = nw.dim(3), ncin = nw.dim(2);
        for (std::size_t i = 0; i < nw.size(); ++i) {
          if (nw[i] != 0.0f && alive[l + 1][i % ncout]) used[(i / ncout) % ncin] = 1;
        }
      } else {
        for (std::size_t r = 0; r < fc1w.dim(0); ++r) {
          for (std::size_t j = 0; j < fc1_out; ++j) {
            if (fc1w[r * fc1_out + j] != 0.0f) {
              used[r % cout] = 1;
              break;
            }
          }
        }
      }
      for (std::size_t c = 0; c < cout; ++c) alive[l][c] = alive[l][c] && used[c];
    }

    std::vector<std::size_t> in_keep = {0};
    for (std::size_t l = 0; l < kConvs.size(); ++l) {
      const auto& w = model.param(kConvs[l]).value;
      const auto& b = model.param(kConvs[l] + 1).value;
      const std::size_t cin = w.dim(2), cout = w.dim(3);
      std::vector<std::size_t> out_keep;
      for (std::size_t c = 0; c < cout; ++c) {
        if (alive[l][c]) out_keep.push_back(c);
      }
      ConvStage s;
      s.name = std::string(kParamNames[kConvs[l]].substr(0, kParamNames[kConvs[l]].size() - 2));
      s.side = kSide[l];
      s.in_c = in_keep.size();
      s.out_c = out_keep.size();
      s.full_out_c = cout;
      s.pool = kPool[l];
      std::vector<float> packed(9 * s.in_c * s.out_c);
      for (std::size_t t = 0; t < 9; ++t) {
        for (std::size_t a = 0; a < s.in_c; ++a) {
          for (std::size_t o = 0; o < s.out_c; ++o) {
            packed[(t * s.in_c + a) * s.out_c + o] = w[(t * cin + in_keep[a]) * cout + out_keep[o]];
          }
        }
      }
      s.weights = Matrix::make(9 * s.in_c, s.out_c, std::move(packed), opt.csr_density);
      for (auto o : out_keep) s.bias.push_back(b[o]);
      e.convs_.push_back(std::move(s));
      in_keep = std::move(out_keep);
    }

    // fc1 over the flattened [3,3,C] map restricted to kept channels.
    const std::size_t c4 = e.convs_.back().full_out_c;
    std::vector<std::size_t> rows;
    for (std::size_t p = 0; p < 9; ++p) {
      for (auto c : in_keep) rows.push_back(p * c4 + c);
    }
    const auto& fc1b = model.param(kFc1B).value;
    std::vector<std::uint8_t> unit_alive(fc1_out, 0);
    for (std::size_t j = 0; j < fc1_out; ++j) unit_alive[j] = fc1b[j] > 0.0f;
    for (auto r : rows) {
      for (std::size_t j = 0; j < fc1_out; ++j) {
        if (fc1w[r * fc1_out + j] != 0.0f) unit_alive[j] = 1;
      }
    }
    std::vector<std::size_t> units;
    for (std::size_t j = 0; j < fc1_out; ++j) {
      if (unit_alive[j]) units.push_back(j);
    }
    std::vector<float> w1(rows.size() * units.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      for (std::size_t u = 0; u < units.size(); ++u) w1[r * units.size() + u] = fc1w[rows[r] * fc1_out + units[u]];
    }
    e.fc1_ = Matrix::make(rows.size(), units.size(), std::move(w1), opt.csr_density);
    for (auto u : units) e.fc1_bias_.push_back(fc1b[u]);
    e.fc1_units_ = units;

    // Batchnorm fold: bn(x) = a * x + c, so fc2(bn(x)) = (a W2)^T x + (b2 + W2^T c).
    // A dead unit contributes its constant a * q(0) + c = c through the bias.
    const auto& gamma = model.param(kBnGamma).value;
    const auto& beta = model.param(kBnBeta).value;
    const auto& mean = model.param(kBnMean).value;
    const auto& var = model.param(kBnVar).value;
    const auto& w2 = model.param(kFc2W).value;
    const auto& b2 = model.param(kFc2B).value;
    const double eps = BatchNormOptions{}.eps;
    std::vector<double> bias2(b2.data().begin(), b2.data().end());
    std::vector<float> w2f(units.size() * e.classes_);
    std::vector<double> a(fc1_out), c(fc1_out);
    for (std::size_t j = 0; j < fc1_out; ++j) {
      a[j] = static_cast<double>(gamma[j]) / std::sqrt(static_cast<double>(var[j]) + eps);
      c[j] = static_cast<double>(beta[j]) - a[j] * mean[j];
      for (std::size_t k = 0; k < e.classes_; ++k) bias2[k] += c[j] * w2[j * e.classes_ + k];
    }
    for (std::size_t u = 0; u < units.size(); ++u) {
      for (std::size_t k = 0; k < e.classes_; ++k) {
        w2f[u * e.classes_ + k] = static_cast<float>(a[units[u]] * w2[units[u] * e.classes_ + k]);
      }
    }
    e.fc2_ = Matrix::make(units.size(), e.classes_, std::move(w2f), opt.csr_density);
    e.fc2_bias_.assign(bias2.begin(), bias2.end());
    return e;
  }

  static Engine compile(const CompressedModel& cm, EngineOptions opt = {}) { return compile(cm.to_model(), opt); }

  /// [N,24,24,1] images -> [N, classes] logits.
  Tensor logits(const Tensor& images) const {
    if (images.rank() != 4 || images.dim(1) != kImageSide || images.dim(2) != kImageSide || images.dim(3) != 1) {
      throw ShapeError("engine input must be [N,24,24,1], got " + shape_str(images.shape()));
    }
    const std::size_t n = images.dim(0);
    std::vector<float> x(images.data().begin(), images.data().end());
    std::vector<float> y;
    for (std::size_t l = 0; l < convs_.size(); ++l) {
      const auto& s = convs_[l];
      y.resize(n * s.side * s.side * s.out_c);
      conv(s, n, x.data(), y.data());
      finish(y, s.bias, l);
      if (s.pool) {
        x.resize(y.size() / 4);
        kernels::maxpool2x2_forward<float>({n, s.side, s.side, s.out_c}, y.data(), x.data(), nullptr);
      } else {
        x.swap(y);
      }
    }
    y.resize(n * fc1_.n);
    fc1_.multiply(n, x.data(), y.data());
    finish(y, fc1_bias_, 6);
    Tensor out({n, classes_});
    fc2_.multiply(n, y.data(), out.data().data());
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t k = 0; k < classes_; ++k) out[r * classes_ + k] += fc2_bias_[k];
    }
    return out;
  }

  Tensor predict_proba(const Tensor& images) const { return softmax(logits(images)); }
  std::vector<int> predict(const Tensor& images) const { return Model::argmax_rows(logits(images)); }

  const std::vector<ConvStage>& convs() const { return convs_; }
  std::size_t fc1_units() const { return fc1_units_.size(); }

  /// Multiply-accumulates per image counting stored nonzeros only.
  std::size_t macs() const {
    std::size_t total = 0;
    for (const auto& s : convs_) total += s.side * s.side * s.weights.nnz();
    return total + fc1_.nnz() + fc2_.nnz();
  }

  nlohmann::json describe() const {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& s : convs_) {
      layers.push_back({{"name", s.name}, {"in_channels", s.in_c}, {"out_channels", s.out_c},
                        {"full_out_channels", s.full_out_c}, {"format", s.weights.sparse ? "csr" : "dense"}, {"nnz", s.weights.nnz()}});
    }
    layers.push_back({{"name", "cls.fc1"}, {"inputs", fc1_.k}, {"units", fc1_.n}, {"format", fc1_.sparse ? "csr" : "dense"}, {"nnz", fc1_.nnz()}});
    layers.push_back({{"name", "cls.fc2+bn"}, {"inputs", fc2_.k}, {"units", fc2_.n}, {"format", fc2_.sparse ? "csr" : "dense"}, {"nnz", fc2_.nnz()}});
    return {{"layers", layers}, {"macs", macs()}, {"activation_bits", act_.bits}};
  }

 private:
  // 3x3 same-padded convolution, one weight-row update per nonzero input.
  // Accumulation order matches gemm over the im2col row, so results are
  // bitwise equal to the graph path.
  static void conv(const ConvStage& s, std::size_t n, const float* x, float* y) {
    const std::size_t side = s.side, cin = s.in_c, cout = s.out_c;
    std::fill(y, y + n * side * side * cout, 0.0f);
    if (cin == 0) return;
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t oy = 0; oy < side; ++oy) {
        for (std::size_t ox = 0; ox < side; ++ox) {
          float* yr = y + ((b * side + oy) * side + ox) * cout;
          for (std::size_t ky = 0; ky < 3; ++ky) {
            if (oy + ky < 1 || oy + ky > side) continue;
            const std::size_t iy = oy + ky - 1;
            for (std::size_t kx = 0; kx < 3; ++kx) {
              if (ox + kx < 1 || ox + kx > side) continue;
              const std::size_t ix = ox + kx - 1;
              const float* src = x + ((b * side + iy) * side + ix) * cin;
              const std::size_t row0 = (ky * 3 + kx) * cin;
              for (std::size_t a = 0; a < cin; ++a) {
                if (src[a] != 0.0f) s.weights.axpy_row(row0 + a, src[a], yr);
              }
            }
          }
        }
      }
    }
  }

  // Bias, ReLU, then activation quantization at `point` when enabled.
  void finish(std::vector<float>& y, const std::vector<float>& bias, std::size_t point) const {
    const std::size_t c = bias.size();
    if (c == 0) return;
    const bool q = act_.enabled();
    const float r = q ? act_.ranges[point] : 0.0f;
    for (std::size_t row = 0; row < y.size(); row += c) {
      float* p = y.data() + row;
      for (std::size_t k = 0; k < c; ++k) p[k] = std::max(0.0f, p[k] + bias[k]);
      if (!q) continue;
      // Zero stays zero; same arithmetic as quantize_activation otherwise.
      for (std::size_t k = 0; k < c; ++k) {
        if (p[k] != 0.0f) p[k] = static_cast<float>(quantize_activation(p[k], act_.bits, r));
      }
    }
  }

  EngineOptions options_;
  std::size_t classes_ = 0;
  ActivationQuant act_;
  std::vector<ConvStage> convs_;
  Matrix fc1_, fc2_;
  std::vector<float> fc1_bias_, fc2_bias_;
  std::vector<std::size_t> fc1_units_;
};

}  // namespace chisel
