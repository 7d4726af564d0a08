// Copyright 2026 The Chisel Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "chisel/errors.hpp"
#include "chisel/hash.hpp"
#include "chisel/kernels.hpp"
#include "chisel/tensor.hpp"

namespace chisel {

/// A named, persistent tensor owned by a model.
///
/// `frozen` parameters never receive gradients; `trainable == false` marks
/// stored state such as batchnorm running statistics. A non-empty `mask`
/// (1 = kept) pins pruned entries to zero through training.
template <typename T>
struct Parameter {
  Parameter() = default;
  Parameter(std::string n, BasicTensor<T> v, bool is_trainable = true)
      : name(std::move(n)), value(std::move(v)), trainable(is_trainable) {}

  std::string name;
  BasicTensor<T> value;
  BasicTensor<T> grad;
  bool frozen = false;
  bool trainable = true;
  std::vector<std::uint8_t> mask;

  bool learns() const { return trainable && !frozen; }

  void zero_grad() {
    if (grad.shape() != value.shape()) {
      grad = BasicTensor<T>(value.shape());
    } else {
      grad.fill(T{0});
    }
  }

  void apply_mask() {
    if (mask.empty()) return;
    for (std::size_t i = 0; i < value.size(); ++i) {
      if (!mask[i]) value[i] = T{0};
    }
  }
};

/// Tape of operator applications. Nodes are appended in evaluation order, so
/// the tape is already a topological order and backward walks it in reverse.
template <typename T>
class Graph {
 public:
  using Id = std::size_t;
  using Backward = std::function<void(Graph&, const BasicTensor<T>& out_grad)>;

  Graph() = default;
  /// `track_gradients == false` builds an inference tape: no node needs a gradient.
  explicit Graph(bool track_gradients) : track_(track_gradients) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf without gradient.
  Id constant(BasicTensor<T> value) {
    require_finite(value, "graph input");
    return push(std::move(value), false, nullptr, {});
  }

  /// Leaf bound to a parameter. Registering the same parameter twice returns
  /// the same node, so backward touches each parameter once.
  Id parameter(Parameter<T>& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return it->second;
    require_finite(p.value, "parameter " + p.name);
    const Id id = push(p.value, track_ && p.learns(), nullptr, {});
    nodes_[id].param = &p;
    param_nodes_.emplace(&p, id);
    return id;
  }

  /// Appends an operator output. Records `backward` only when some input needs a gradient.
  Id record(BasicTensor<T> value, const std::vector<Id>& inputs, Backward backward,
            const char* op) {
    if (!value.all_finite()) throw NumericError(std::string("non-finite output of ") + op);
    bool needs = false;
    for (Id i : inputs) needs = needs || nodes_.at(i).requires_grad;
    return push(std::move(value), needs, needs ? std::move(backward) : nullptr, inputs);
  }

  const BasicTensor<T>& value(Id id) const { return nodes_.at(id).value; }
  bool requires_grad(Id id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Adds `g` into the gradient of node `id` if that node needs one.
  void accumulate(Id id, const BasicTensor<T>& g) {
    Node& n = nodes_.at(id);
    if (!n.requires_grad) return;
    if (n.grad.empty()) {
      n.grad = g;
      return;
    }
    auto dst = n.grad.data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

  /// Mutable gradient buffer for node `id`, zero-initialised on first use.
  BasicTensor<T>* grad_buffer(Id id) {
    Node& n = nodes_.at(id);
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = BasicTensor<T>(n.value.shape());
    return &n.grad;
  }

  /// Reverse pass from a scalar node; parameter gradients are added to Parameter::grad.
  void backward(Id loss) {
    if (nodes_.at(loss).value.size() != 1) throw ShapeError("backward needs a scalar loss");
    if (!nodes_[loss].requires_grad) return;
    nodes_[loss].grad = BasicTensor<T>(nodes_[loss].value.shape(), T{1});
    for (Id i = loss + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) {
        n.backward(*this, n.grad);
      } else if (n.param != nullptr) {
        Parameter<T>& p = *n.param;
        if (p.grad.shape() != p.value.shape()) p.zero_grad();
        for (std::size_t k = 0; k < p.grad.size(); ++k) p.grad[k] += n.grad[k];
        ++param_visits_;
      }
    }
  }

  std::size_t parameter_visits() const { return param_visits_; }

  /// Piecewise ops (relu, maxpool) fold their discrete choices into a
  /// signature when enabled, so a caller can tell whether two evaluations took
  /// the same linear piece.
  void track_branches(bool on) { track_branches_ = on; }
  bool tracks_branches() const { return track_branches_; }
  void note_branches(const void* data, std::size_t n) { branches_.update(data, n); }
  std::uint64_t branch_signature() const { return branches_.digest(); }

 private:
  struct Node {
    BasicTensor<T> value;
    BasicTensor<T> grad;
    bool requires_grad = false;
    Backward backward;
    std::vector<Id> inputs;
    Parameter<T>* param = nullptr;
  };

  Id push(BasicTensor<T> value, bool requires_grad, Backward backward, std::vector<Id> inputs) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, std::move(backward),
                          std::move(inputs), nullptr});
    return nodes_.size() - 1;
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<T>*, Id> param_nodes_;
  std::size_t param_visits_ = 0;
  bool track_ = true;
  bool track_branches_ = false;
  Fnv1a branches_;
};

enum class Mode { train, infer };

struct BatchNormOptions {
  double momentum = 0.9;
  double eps = 1e-5;
};

namespace ops {

using kernels::Padding;

template <typename T>
typename Graph<T>::Id conv2d(Graph<T>& g, typename Graph<T>::Id x, typename Graph<T>::Id kernel,
                             typename Graph<T>::Id bias, std::size_t stride = 1,
                             Padding padding = Padding::same) {
  const auto& xv = g.value(x);
  const auto& kv = g.value(kernel);
  const auto geo = kernels::conv_geometry(xv.shape(), kv.shape(), stride, padding);
  if (g.value(bias).size() != geo.out_c) throw ShapeError("conv2d: bias length != Cout");
  BasicTensor<T> out({geo.batch, geo.out_h, geo.out_w, geo.out_c});
  auto cols = std::make_shared<std::vector<T>>();
  kernels::conv2d_forward(geo, xv.data().data(), kv.data().data(), g.value(bias).data().data(),
                          *cols, out.data().data());
  return g.record(
      std::move(out), {x, kernel, bias},
      [=](Graph<T>& gr, const BasicTensor<T>& dy) {
        auto* dx = gr.grad_buffer(x);
        auto* dk = gr.grad_buffer(kernel);
        auto* db = gr.grad_buffer(bias);
        kernels::conv2d_backward(geo, *cols, gr.value(kernel).data().data(), dy.data().data(),
                                 dx ? dx->data().data() : nullptr,
                                 dk ? dk->data().data() : nullptr,
                                 db ? db->data().data() : nullptr);
      },
      "conv2d");
}

template <typename T>
typename Graph<T>::Id maxpool2x2(Graph<T>& g, typename Graph<T>::Id x) {
  const auto& xv = g.value(x);
  if (xv.rank() != 4) throw ShapeError("maxpool2x2: input must be NHWC");
  if (xv.dim(1) % 2 != 0 || xv.dim(2) % 2 != 0) {
    throw ShapeError("maxpool2x2: odd spatial dims " + shape_str(xv.shape()));
  }
  BasicTensor<T> out({xv.dim(0), xv.dim(1) / 2, xv.dim(2) / 2, xv.dim(3)});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  kernels::maxpool2x2_forward(xv.shape(), xv.data().data(), out.data().data(), argmax->data());
  if (g.tracks_branches()) g.note_branches(argmax->data(), argmax->size() * sizeof(std::size_t));
  return g.record(
      std::move(out), {x},
      [=](Graph<T>& gr, const BasicTensor<T>& dy) {
        auto* dx = gr.grad_buffer(x);
        for (std::size_t o = 0; o < dy.size(); ++o) (*dx)[(*argmax)[o]] += dy[o];
      },
      "maxpool2x2");
}

template <typename T>
typename Graph<T>::Id upsample2x(Graph<T>& g, typename Graph<T>::Id x) {
  const auto& xv = g.value(x);
  if (xv.rank() != 4) throw ShapeError("upsample2x: input must be NHWC");
  const Shape in = xv.shape();
  BasicTensor<T> out({in[0], in[1] * 2, in[2] * 2, in[3]});
  kernels::upsample2x_forward(in, xv.data().data(), out.data().data());
  return g.record(
      std::move(out), {x},
      [=](Graph<T>& gr, const BasicTensor<T>& dy) {
        kernels::upsample2x_backward(in, dy.data().data(), gr.grad_buffer(x)->data().data());
      },
      "upsample2x");
}

/// Collapses every dimension after the first.
template <typename T>
typename Graph<T>::Id flatten(Graph<T>& g, typename Graph<T>::Id x) {
  const auto& xv = g.value(x);
  const std::size_t n = xv.dim(0);
  const Shape in = xv.shape();
  return g.record(
      xv.reshaped({n, xv.size() / n}), {x},
      [=](Graph<T>& gr, const BasicTensor<T>& dy) { gr.accumulate(x, dy.reshaped(in)); },
      "flatten");
}

template <typename T>
typename Graph<T>::Id dense(Graph<T>& g, typename Graph<T>::Id x, typename Graph<T>::Id weights,
                            typename Graph<T>::Id bias) {
  const auto& xv = g.value(x);
  const auto& wv = g.value(weights);
  if (xv.rank() != 2 || wv.rank() != 2) throw ShapeError("dense: expects [N,In] x [In,Out]");
  const std::size_t n = xv.dim(0), in = xv.dim(1), out_dim = wv.dim(1);
  if (wv.dim(0) != in) {
    throw ShapeError("dense: input length " + std::to_string(in) + " != weight rows " +
                     std::to_string(wv.dim(0)));
  }
  if (g.value(bias).size() != out_dim) throw ShapeError("dense: bias length != Out");
  BasicTensor<T> out({n, out_dim});
  kernels::gemm_nn(n, out_dim, in, xv.data().data(), wv.data().data(), out.data().data(), false);
  const auto& bv = g.value(bias);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < out_dim; ++c) out[r * out_dim + c] += bv[c];
  }
  return g.record(
      std::move(out), {x, weights, bias},
      [=](Graph<T>& gr, const BasicTensor<T>& dy) {
        if (auto* dw = gr.grad_buffer(weights)) {
          kernels::gemm_tn_acc(n, out_dim, in, gr.value(x).data().data(), dy.data().data(),
                               dw->data().data());
        }
        if (auto* db = gr.grad_buffer(bias)) {
          for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t c = 0; c < out_dim; ++c) (*db)[c] += dy[r * out_dim + c];
          }
        }
        if (auto* dx = gr.grad_buffer(x)) {
          BasicTensor<T> tmp({n, in});
          kernels::gemm_nt(n, out_dim, in, dy.data().data(), gr.value(weights).data().data(),
                           tmp.data().data());
          for (std::size_t i = 0; i < tmp.size(); ++i) (*dx)[i] += tmp[i];
        }
      },
      "dense");
}

template <typename T>
typename Graph<T>::Id relu(Graph<T>& g, typename Graph<T>::Id x) {
  BasicTensor<T> out = g.value(x);
  for (auto& v : out.data()) v = v > T{0} ? v : T{0};
  if (g.tracks_branches()) {
    std::vector<std::uint8_t> active(out.size());
    for (std::size_t i = 0; i < out.size(); ++i) active[i] = out[i] > T{0};
    g.note_branches(active.data(), active.size());
  }
  return g.record(
      std::move(out), {x},
      [=](Graph<T>& gr, const BasicTensor<T>& dy) {
        auto* dx = gr.grad_buffer(x);
        const auto& xv = gr.value(x);
        for (std::size_t i = 0; i < dy.size(); ++i) {
          if (xv[i] > T{0}) (*dx)[i] += dy[i];
        }
      },
      "relu");
}

/// Batch normalisation over the first axis of an [N, F] tensor. Train mode
/// normalises with batch statistics and updates the running estimates
/// (running = momentum * running + (1 - momentum) * batch); infer mode uses
/// the running estimates.
template <typename T>
typename Graph<T>::Id batchnorm(Graph<T>& g, typename Graph<T>::Id x, typename Graph<T>::Id gamma,
                                typename Graph<T>::Id beta, Parameter<T>& running_mean,
                                Parameter<T>& running_var, Mode mode,
                                BatchNormOptions opt = {}) {
  const auto& xv = g.value(x);
  if (xv.rank() != 2) throw ShapeError("batchnorm: expects [N,F]");
  const std::size_t n = xv.dim(0), f = xv.dim(1);
  if (g.value(gamma).size() != f || g.value(beta).size() != f || running_mean.value.size() != f ||
      running_var.value.size() != f) {
    throw ShapeError("batchnorm: feature dim " + std::to_string(f) +
                     " does not match parameter length");
  }
  const auto& gv = g.value(gamma);
  const auto& bv = g.value(beta);
  BasicTensor<T> out({n, f});
  if (mode == Mode::infer) {
    kernels::batchnorm_infer(n, f, xv.data().data(), gv.data().data(), bv.data().data(),
                             running_mean.value.data().data(), running_var.value.data().data(),
                             opt.eps, out.data().data());
    auto inv_std = std::make_shared<std::vector<T>>(f);
    for (std::size_t j = 0; j < f; ++j) {
      (*inv_std)[j] = static_cast<T>(1.0 / std::sqrt(static_cast<accum_t<T>>(running_var.value[j]) + opt.eps));
    }
    const BasicTensor<T> mean = running_mean.value;
    return g.record(
        std::move(out), {x, gamma, beta},
        [=](Graph<T>& gr, const BasicTensor<T>& dy) {
          const auto& xg = gr.value(x);
          const auto& gg = gr.value(gamma);
          auto* dx = gr.grad_buffer(x);
          auto* dgam = gr.grad_buffer(gamma);
          auto* dbet = gr.grad_buffer(beta);
          for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t j = 0; j < f; ++j) {
              const std::size_t i = r * f + j;
              const T xhat = (xg[i] - mean[j]) * (*inv_std)[j];
              if (dx) (*dx)[i] += dy[i] * gg[j] * (*inv_std)[j];
              if (dgam) (*dgam)[j] += dy[i] * xhat;
              if (dbet) (*dbet)[j] += dy[i];
            }
          }
        },
        "batchnorm");
  }
  if (n < 2) throw ShapeError("batchnorm: train mode needs batch size >= 2");
  auto xhat = std::make_shared<std::vector<T>>(n * f);
  auto inv_std = std::make_shared<std::vector<T>>(f);
  for (std::size_t j = 0; j < f; ++j) {
    accum_t<T> mean = 0.0;
    for (std::size_t r = 0; r < n; ++r) mean += xv[r * f + j];
    mean /= static_cast<accum_t<T>>(n);
    accum_t<T> var = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      const accum_t<T> d = xv[r * f + j] - mean;
      var += d * d;
    }
    var /= static_cast<accum_t<T>>(n);
    const accum_t<T> inv = 1.0 / std::sqrt(var + opt.eps);
    (*inv_std)[j] = static_cast<T>(inv);
    for (std::size_t r = 0; r < n; ++r) {
      const std::size_t i = r * f + j;
      (*xhat)[i] = static_cast<T>((xv[i] - mean) * inv);
      out[i] = gv[j] * (*xhat)[i] + bv[j];
    }
    running_mean.value[j] =
        static_cast<T>(opt.momentum * running_mean.value[j] + (1.0 - opt.momentum) * mean);
    running_var.value[j] =
        static_cast<T>(opt.momentum * running_var.value[j] + (1.0 - opt.momentum) * var);
  }
  return g.record(
      std::move(out), {x, gamma, beta},
      [=](Graph<T>& gr, const BasicTensor<T>& dy) {
        const auto& gg = gr.value(gamma);
        auto* dx = gr.grad_buffer(x);
        auto* dgam = gr.grad_buffer(gamma);
        auto* dbet = gr.grad_buffer(beta);
        for (std::size_t j = 0; j < f; ++j) {
          accum_t<T> sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t r = 0; r < n; ++r) {
            const std::size_t i = r * f + j;
            sum_dy += dy[i];
            sum_dy_xhat += dy[i] * (*xhat)[i];
          }
          if (dgam) (*dgam)[j] += static_cast<T>(sum_dy_xhat);
          if (dbet) (*dbet)[j] += static_cast<T>(sum_dy);
          if (!dx) continue;
          const accum_t<T> scale = gg[j] * (*inv_std)[j] / static_cast<accum_t<T>>(n);
          for (std::size_t r = 0; r < n; ++r) {
            const std::size_t i = r * f + j;
            (*dx)[i] += static_cast<T>(scale * (static_cast<accum_t<T>>(n) * dy[i] - sum_dy -
                                                (*xhat)[i] * sum_dy_xhat));
          }
        }
      },
      "batchnorm");
}

/// Mean sparse categorical cross-entropy over the batch; gradient (softmax - onehot) / N.
template <typename T>
typename Graph<T>::Id softmax_cross_entropy(Graph<T>& g, typename Graph<T>::Id logits,
                                            const std::vector<int>& labels) {
  const auto& lv = g.value(logits);
  if (lv.rank() != 2) throw ShapeError("softmax_cross_entropy: expects [N,C] logits");
  const std::size_t n = lv.dim(0), c = lv.dim(1);
  if (labels.size() != n) throw ShapeError("softmax_cross_entropy: label count != batch");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw DataError("label " + std::to_string(y) + " outside [0, " + std::to_string(c) + ")");
    }
  }
  auto probs = std::make_shared<std::vector<T>>(n * c);
  kernels::softmax_rows(n, c, lv.data().data(), probs->data());
  accum_t<T> loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const T* row = lv.data().data() + r * c;
    const accum_t<T> mx = *std::max_element(row, row + c);
    accum_t<T> sum = 0.0;
    for (std::size_t k = 0; k < c; ++k) sum += std::exp(static_cast<accum_t<T>>(row[k]) - mx);
    loss += std::log(sum) + mx - static_cast<accum_t<T>>(row[labels[r]]);
  }
  loss /= static_cast<accum_t<T>>(n);
  return g.record(
      BasicTensor<T>({1}, static_cast<T>(loss)), {logits},
      [=](Graph<T>& gr, const BasicTensor<T>& dy) {
        auto* dl = gr.grad_buffer(logits);
        const T scale = dy[0] / static_cast<T>(n);
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t k = 0; k < c; ++k) {
            const T onehot = static_cast<std::size_t>(labels[r]) == k ? T{1} : T{0};
            (*dl)[r * c + k] += scale * ((*probs)[r * c + k] - onehot);
          }
        }
      },
      "softmax_cross_entropy");
}

/// Mean squared error against a constant target; gradient 2 (out - target) / N.
template <typename T>
typename Graph<T>::Id mse(Graph<T>& g, typename Graph<T>::Id output, const BasicTensor<T>& target) {
  const auto& ov = g.value(output);
  require_same_shape(ov, target, "mse");
  accum_t<T> loss = 0.0;
  for (std::size_t i = 0; i < ov.size(); ++i) {
    const accum_t<T> d = static_cast<accum_t<T>>(ov[i]) - target[i];
    loss += d * d;
  }
  const accum_t<T> count = static_cast<accum_t<T>>(ov.size());
  return g.record(
      BasicTensor<T>({1}, static_cast<T>(loss / count)), {output},
      [=](Graph<T>& gr, const BasicTensor<T>& dy) {
        auto* d = gr.grad_buffer(output);
        const auto& o = gr.value(output);
        const T scale = static_cast<T>(2.0 / count) * dy[0];
        for (std::size_t i = 0; i < o.size(); ++i) (*d)[i] += scale * (o[i] - target[i]);
      },
      "mse");
}

/// Sum of all elements to a scalar; handy for gradient tests.
template <typename T>
typename Graph<T>::Id sum(Graph<T>& g, typename Graph<T>::Id x) {
  accum_t<T> s = 0.0;
  for (auto v : g.value(x).data()) s += v;
  return g.record(
      BasicTensor<T>({1}, static_cast<T>(s)), {x},
      [=](Graph<T>& gr, const BasicTensor<T>& dy) {
        auto* d = gr.grad_buffer(x);
        for (auto& v : d->data()) v += dy[0];
      },
      "sum");
}

/// Weighted sum with fixed random weights; gives every output element a distinct gradient.
template <typename T>
typename Graph<T>::Id weighted_sum(Graph<T>& g, typename Graph<T>::Id x, const BasicTensor<T>& w) {
  require_same_shape(g.value(x), w, "weighted_sum");
  accum_t<T> s = 0.0;
  const auto& xv = g.value(x);
  for (std::size_t i = 0; i < xv.size(); ++i) s += static_cast<accum_t<T>>(xv[i]) * w[i];
  return g.record(
      BasicTensor<T>({1}, static_cast<T>(s)), {x},
      [=](Graph<T>& gr, const BasicTensor<T>& dy) {
        auto* d = gr.grad_buffer(x);
        for (std::size_t i = 0; i < w.size(); ++i) (*d)[i] += dy[0] * w[i];
      },
      "weighted_sum");
}

}  // namespace ops

/// Softmax probabilities of [N, C] logits outside any graph.
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& logits) {
  if (logits.rank() != 2) throw ShapeError("softmax: expects [N,C]");
  BasicTensor<T> out(logits.shape());
  kernels::softmax_rows(logits.dim(0), logits.dim(1), logits.data().data(), out.data().data());
  return out;
}

}  // namespace chisel
