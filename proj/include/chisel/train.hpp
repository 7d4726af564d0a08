// Copyright 2026 The Chisel Authors
// SPDX-License-Identifier: Apache-2.0

// Two-stage training (reconstruction, then frozen-encoder classification) and
// the joint fine-tuning loop used after pruning and for quantization-aware training.

#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "chisel/autodiff.hpp"
#include "chisel/dataset.hpp"
#include "chisel/errors.hpp"
#include "chisel/model.hpp"
#include "chisel/optimizer.hpp"
#include "chisel/rng.hpp"
#include "json.hpp"

namespace chisel {

struct TrainConfig {
  std::size_t stage1_epochs = 100;
  std::size_t stage2_epochs = 150;
  std::size_t batch_size = 64;
  /// Epochs without validation improvement before stopping; 0 disables early stopping.
  std::size_t patience = 15;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"stage1_epochs", c.stage1_epochs}, {"stage2_epochs", c.stage2_epochs}, {"batch_size", c.batch_size},
       {"patience", c.patience}, {"lr", c.lr}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.stage1_epochs = j.value("stage1_epochs", c.stage1_epochs);
  c.stage2_epochs = j.value("stage2_epochs", c.stage2_epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.patience = j.value("patience", c.patience);
  c.lr = j.value("lr", c.lr);
  c.seed = j.value("seed", c.seed);
}

inline void validate(const TrainConfig& c) {
  if (c.batch_size < 2) throw ConfigError("batch_size must be at least 2 (batchnorm needs batch statistics)");
  if (!(c.lr > 0.0) || !std::isfinite(c.lr)) throw ConfigError("lr must be positive");
}

struct EpochRecord {
  std::string stage;
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  /// Stage 1: validation MSE. Classification stages: validation accuracy in [0, 1].
  double val_metric = 0.0;
  double seconds = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  bool stage1_complete = false;
  bool stage2_complete = false;
  std::size_t stage1_best_epoch = 0;
  std::size_t stage2_best_epoch = 0;
  double stage1_best_mse = std::numeric_limits<double>::infinity();
  double stage2_best_accuracy = 0.0;
  double untrained_val_mse = 0.0;
  double wall_seconds = 0.0;

  nlohmann::json to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& e : epochs) {
      rows.push_back({{"stage", e.stage}, {"epoch", e.epoch}, {"train_loss", e.train_loss},
                      {"val_loss", e.val_loss}, {"val_metric", e.val_metric}, {"seconds", e.seconds}});
    }
    return {{"epochs", rows},
            {"stage1_complete", stage1_complete},
            {"stage2_complete", stage2_complete},
            {"stage1_best_epoch", stage1_best_epoch},
            {"stage2_best_epoch", stage2_best_epoch},
            {"stage1_best_mse", std::isfinite(stage1_best_mse) ? nlohmann::json(stage1_best_mse) : nlohmann::json()},
            {"stage2_best_accuracy", stage2_best_accuracy},
            {"untrained_val_mse", untrained_val_mse},
            {"wall_seconds", wall_seconds}};
  }
};

using ProgressFn = std::function<void(const EpochRecord&)>;

/// Shuffled mini-batches; a trailing batch of one sample joins its predecessor.
inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch, Rng& rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(std::span(order));
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < n; s += batch) {
    out.emplace_back(order.begin() + static_cast<long>(s), order.begin() + static_cast<long>(std::min(n, s + batch)));
  }
  if (out.size() > 1 && out.back().size() == 1) {
    out[out.size() - 2].push_back(out.back()[0]);
    out.pop_back();
  }
  return out;
}

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

template <typename T>
std::vector<BasicTensor<T>> snapshot(CaeCnn<T>& model, std::initializer_list<Block> blocks) {
  std::vector<BasicTensor<T>> out;
  for (auto* p : model.parameters(blocks)) out.push_back(p->value);
  return out;
}

template <typename T>
void restore(CaeCnn<T>& model, std::initializer_list<Block> blocks, const std::vector<BasicTensor<T>>& saved) {
  std::size_t k = 0;
  for (auto* p : model.parameters(blocks)) p->value = saved[k++];
}

template <typename T>
std::vector<Parameter<T>*> learning(CaeCnn<T>& model, std::initializer_list<Block> blocks) {
  std::vector<Parameter<T>*> out;
  for (auto* p : model.parameters(blocks)) {
    if (p->learns()) out.push_back(p);
  }
  return out;
}

inline void check_labels(const LabeledImages& set, std::size_t classes, const char* what) {
  for (std::size_t i = 0; i < set.size(); ++i) {
    const int y = set.labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw DataError(std::string(what) + " sample " + std::to_string(i) + ": label " + std::to_string(y) +
                      " outside the catalog");
    }
  }
}

inline void check_finite_loss(double loss, const std::string& where) {
  if (!std::isfinite(loss)) throw NumericError("training diverged (non-finite loss) at " + where);
}

}  // namespace detail

/// Mean per-pixel reconstruction MSE of the autoencoder.
template <typename T>
double reconstruction_mse(CaeCnn<T>& model, const LabeledImages& set, std::size_t chunk = 256) {
  if (set.size() == 0) return 0.0;
  double total = 0.0;
  for (std::size_t s = 0; s < set.size(); s += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = s; i < std::min(set.size(), s + chunk); ++i) idx.push_back(i);
    Graph<T> g(false);
    const auto x = set.batch<T>(idx);
    const auto target = x;
    const auto out = model.decode(g, model.encode(g, g.constant(x)));
    total += g.value(ops::mse(g, out, target))[0] * static_cast<double>(idx.size());
  }
  return total / static_cast<double>(set.size());
}

/// Encoder feature maps [N,12,12,C] computed without gradients.
template <typename T>
BasicTensor<T> encode_all(CaeCnn<T>& model, const LabeledImages& set, std::size_t chunk = 256) {
  std::vector<T> data;
  Shape feature;
  for (std::size_t s = 0; s < set.size(); s += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = s; i < std::min(set.size(), s + chunk); ++i) idx.push_back(i);
    Graph<T> g(false);
    const auto& z = g.value(model.encode(g, g.constant(set.batch<T>(idx))));
    feature.assign(z.shape().begin() + 1, z.shape().end());
    data.insert(data.end(), z.data().begin(), z.data().end());
  }
  Shape shape{set.size()};
  shape.insert(shape.end(), feature.begin(), feature.end());
  return BasicTensor<T>(shape, std::move(data));
}

template <typename T>
BasicTensor<T> gather_rows(const BasicTensor<T>& x, std::span<const std::size_t> idx) {
  const std::size_t row = x.size() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = idx.size();
  BasicTensor<T> out(shape);
  for (std::size_t b = 0; b < idx.size(); ++b) {
    std::copy_n(x.data().begin() + static_cast<long>(idx[b] * row), row, out.data().begin() + static_cast<long>(b * row));
  }
  return out;
}

/// Top-1 accuracy in [0, 1] and mean cross-entropy over a labelled set.
struct ClassificationScore {
  double accuracy = 0.0;
  double loss = 0.0;
};

template <typename T>
ClassificationScore score_classifier(CaeCnn<T>& model, const LabeledImages& set, const ForwardHooks<T>* hooks = nullptr,
                                     std::size_t chunk = 256) {
  ClassificationScore sc;
  if (set.size() == 0) return sc;
  std::size_t hits = 0;
  for (std::size_t s = 0; s < set.size(); s += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = s; i < std::min(set.size(), s + chunk); ++i) idx.push_back(i);
    Graph<T> g(false);
    const auto logits = model.classify(g, model.encode(g, g.constant(set.batch<T>(idx)), hooks), Mode::infer, hooks);
    const auto labels = set.batch_labels(idx);
    sc.loss += g.value(ops::softmax_cross_entropy(g, logits, labels))[0] * static_cast<double>(idx.size());
    const auto pred = CaeCnn<T>::argmax_rows(g.value(logits));
    for (std::size_t b = 0; b < idx.size(); ++b) hits += pred[b] == labels[b];
  }
  sc.accuracy = static_cast<double>(hits) / static_cast<double>(set.size());
  sc.loss /= static_cast<double>(set.size());
  return sc;
}

/// Stage 1: encoder + decoder trained on reconstruction MSE; the weights with
/// the lowest validation MSE are kept.
template <typename T>
void train_stage1(CaeCnn<T>& model, const LabeledImages& train, const LabeledImages& val, const TrainConfig& cfg,
                  TrainLog& log, const ProgressFn& progress = {}) {
  validate(cfg);
  if (log.stage2_complete) throw ConfigError("stage 1 cannot run after stage 2");
  if (train.size() < 2) throw DataError("stage 1 needs at least 2 training samples");
  const auto t_start = std::chrono::steady_clock::now();
  model.set_frozen(Block::encoder, false);
  model.set_frozen(Block::decoder, false);
  const auto blocks = {Block::encoder, Block::decoder};
  auto params = detail::learning(model, blocks);
  Adam<T> adam(AdamOptions{.lr = cfg.lr});
  const LabeledImages& monitor = val.size() > 0 ? val : train;
  log.untrained_val_mse = reconstruction_mse(model, monitor);
  double best = log.untrained_val_mse;
  auto best_weights = detail::snapshot(model, blocks);
  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= cfg.stage1_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(Rng::derive(cfg.seed, 0x5100000 + epoch));
    double loss_sum = 0.0;
    for (const auto& batch : make_batches(train.size(), cfg.batch_size, rng)) {
      const auto x = train.batch<T>(batch);
      Graph<T> g;
      const auto out = model.decode(g, model.encode(g, g.constant(x)));
      const auto loss = ops::mse(g, out, x);
      const double lv = g.value(loss)[0];
      detail::check_finite_loss(lv, "stage 1 epoch " + std::to_string(epoch));
      for (auto* p : params) p->zero_grad();
      g.backward(loss);
      adam.step(params);
      loss_sum += lv * static_cast<double>(batch.size());
    }
    EpochRecord rec{"stage1", epoch, loss_sum / static_cast<double>(train.size()), 0.0, 0.0, 0.0};
    rec.val_metric = rec.val_loss = reconstruction_mse(model, monitor);
    detail::check_finite_loss(rec.val_loss, "stage 1 epoch " + std::to_string(epoch) + " validation");
    rec.seconds = detail::seconds_since(t0);
    log.epochs.push_back(rec);
    if (progress) progress(rec);
    if (rec.val_metric < best) {
      best = rec.val_metric;
      best_weights = detail::snapshot(model, blocks);
      log.stage1_best_epoch = epoch;
      since_best = 0;
    } else if (cfg.patience > 0 && ++since_best >= cfg.patience) {
      break;
    }
  }
  detail::restore(model, blocks, best_weights);
  log.stage1_best_mse = best;
  log.stage1_complete = true;
  log.wall_seconds += detail::seconds_since(t_start);
}

/// Stage 2: encoder frozen, classifier trained on cross-entropy over the
/// encoder's feature maps; the weights with the best validation accuracy are kept.
template <typename T>
void train_stage2(CaeCnn<T>& model, const LabeledImages& train, const LabeledImages& val, const TrainConfig& cfg,
                  TrainLog& log, const ProgressFn& progress = {}) {
  validate(cfg);
  if (!log.stage1_complete) throw ConfigError("stage 2 requires a completed stage 1");
  if (train.size() < 2) throw DataError("stage 2 needs at least 2 training samples");
  detail::check_labels(train, model.config().num_classes, "training");
  detail::check_labels(val, model.config().num_classes, "validation");
  const auto t_start = std::chrono::steady_clock::now();
  model.set_frozen(Block::encoder, true);
  const auto blocks = {Block::classifier};
  auto params = detail::learning(model, blocks);
  Adam<T> adam(AdamOptions{.lr = cfg.lr});

  // The encoder is frozen, so its feature maps are fixed for the whole stage.
  const auto train_z = encode_all(model, train);
  const auto val_z = val.size() > 0 ? encode_all(model, val) : train_z;
  const LabeledImages& monitor = val.size() > 0 ? val : train;
  auto val_score = [&] {
    ClassificationScore sc;
    std::size_t hits = 0;
    for (std::size_t s = 0; s < monitor.size(); s += 256) {
      std::vector<std::size_t> idx;
      for (std::size_t i = s; i < std::min(monitor.size(), s + 256); ++i) idx.push_back(i);
      Graph<T> g(false);
      const auto logits = model.classify(g, g.constant(gather_rows(val_z, idx)), Mode::infer);
      const auto labels = monitor.batch_labels(idx);
      sc.loss += g.value(ops::softmax_cross_entropy(g, logits, labels))[0] * static_cast<double>(idx.size());
      const auto pred = CaeCnn<T>::argmax_rows(g.value(logits));
      for (std::size_t b = 0; b < idx.size(); ++b) hits += pred[b] == labels[b];
    }
    sc.accuracy = static_cast<double>(hits) / static_cast<double>(monitor.size());
    sc.loss /= static_cast<double>(monitor.size());
    return sc;
  };

  double best = -1.0;
  auto best_weights = detail::snapshot(model, blocks);
  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= cfg.stage2_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(Rng::derive(cfg.seed, 0x5200000 + epoch));
    double loss_sum = 0.0;
    for (const auto& batch : make_batches(train.size(), cfg.batch_size, rng)) {
      Graph<T> g;
      const auto logits = model.classify(g, g.constant(gather_rows(train_z, batch)), Mode::train);
      const auto loss = ops::softmax_cross_entropy(g, logits, train.batch_labels(batch));
      const double lv = g.value(loss)[0];
      detail::check_finite_loss(lv, "stage 2 epoch " + std::to_string(epoch));
      for (auto* p : params) p->zero_grad();
      g.backward(loss);
      adam.step(params);
      loss_sum += lv * static_cast<double>(batch.size());
    }
    const auto sc = val_score();
    EpochRecord rec{"stage2", epoch, loss_sum / static_cast<double>(train.size()), sc.loss, sc.accuracy,
                    detail::seconds_since(t0)};
    log.epochs.push_back(rec);
    if (progress) progress(rec);
    if (rec.val_metric > best) {
      best = rec.val_metric;
      best_weights = detail::snapshot(model, blocks);
      log.stage2_best_epoch = epoch;
      since_best = 0;
    } else if (cfg.patience > 0 && ++since_best >= cfg.patience) {
      break;
    }
  }
  if (best >= 0.0) detail::restore(model, blocks, best_weights);
  log.stage2_best_accuracy = std::max(best, 0.0);
  log.stage2_complete = true;
  log.wall_seconds += detail::seconds_since(t_start);
}

struct FineTuneConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  double lr = 1e-4;
  std::uint64_t seed = 0;
};

/// Joint encoder + classifier training on cross-entropy. `train_hooks` shapes
/// the training forward (fake quantization, activation range tracking) and
/// `eval_hooks` the validation forward. Pruning masks stay enforced by the
/// optimizer. The model state (weights and activation ranges) with the best
/// validation accuracy is kept.
template <typename T>
void fine_tune(CaeCnn<T>& model, const LabeledImages& train, const LabeledImages& val, const FineTuneConfig& cfg,
               const ForwardHooks<T>* train_hooks, const ForwardHooks<T>* eval_hooks, std::vector<EpochRecord>* log = nullptr) {
  if (cfg.epochs == 0) return;
  if (cfg.batch_size < 2) throw ConfigError("fine-tune batch_size must be at least 2");
  if (train.size() < 2) throw DataError("fine-tune needs at least 2 training samples");
  detail::check_labels(train, model.config().num_classes, "training");
  detail::check_labels(val, model.config().num_classes, "validation");
  model.set_frozen(Block::encoder, false);
  const auto blocks = {Block::encoder, Block::classifier};
  auto params = detail::learning(model, blocks);
  Adam<T> adam(AdamOptions{.lr = cfg.lr});
  const LabeledImages& monitor = val.size() > 0 ? val : train;

  double best = score_classifier(model, monitor, eval_hooks).accuracy;
  auto best_weights = detail::snapshot(model, blocks);
  auto best_ranges = model.activation_quant();
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(Rng::derive(cfg.seed, 0x5300000 + epoch));
    double loss_sum = 0.0;
    for (const auto& batch : make_batches(train.size(), cfg.batch_size, rng)) {
      Graph<T> g;
      const auto z = model.encode(g, g.constant(train.batch<T>(batch)), train_hooks);
      const auto logits = model.classify(g, z, Mode::train, train_hooks);
      const auto loss = ops::softmax_cross_entropy(g, logits, train.batch_labels(batch));
      const double lv = g.value(loss)[0];
      detail::check_finite_loss(lv, "fine-tune epoch " + std::to_string(epoch));
      for (auto* p : params) p->zero_grad();
      g.backward(loss);
      adam.step(params);
      loss_sum += lv * static_cast<double>(batch.size());
    }
    const auto sc = score_classifier(model, monitor, eval_hooks);
    EpochRecord rec{"finetune", epoch, loss_sum / static_cast<double>(train.size()), sc.loss, sc.accuracy,
                    detail::seconds_since(t0)};
    if (log) log->push_back(rec);
    if (sc.accuracy > best) {
      best = sc.accuracy;
      best_weights = detail::snapshot(model, blocks);
      best_ranges = model.activation_quant();
    }
  }
  detail::restore(model, blocks, best_weights);
  model.activation_quant() = best_ranges;
  model.set_frozen(Block::encoder, true);
}

}  // namespace chisel
