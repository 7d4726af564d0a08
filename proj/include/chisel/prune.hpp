// Copyright 2026 The Chisel Authors
// SPDX-License-Identifier: Apache-2.0

// Magnitude (connection) pruning across all weight tensors and L2-norm filter
// pruning of convolutions.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "chisel/errors.hpp"
#include "chisel/model.hpp"
#include "chisel/tensor.hpp"

namespace chisel {

enum class PruneKind { connection, filter, connection_filter };

inline const char* prune_kind_name(PruneKind k) {
  switch (k) {
    case PruneKind::connection:
      return "connection";
    case PruneKind::filter:
      return "filter";
    case PruneKind::connection_filter:
      return "connection+filter";
  }
  return "?";
}

inline PruneKind parse_prune_kind(const std::string& s) {
  if (s == "connection") return PruneKind::connection;
  if (s == "filter") return PruneKind::filter;
  if (s == "connection+filter" || s == "connection_filter") return PruneKind::connection_filter;
  throw ConfigError("unknown prune kind '" + s + "'");
}

using Mask = std::vector<std::uint8_t>;  // 1 = kept

inline std::size_t count_pruned(const Mask& m) {
  return static_cast<std::size_t>(std::count(m.begin(), m.end(), std::uint8_t{0}));
}

inline void check_sparsity(double s) {
  if (!(s >= 0.0 && s < 1.0)) throw ConfigError("sparsity must be in [0, 1), got " + std::to_string(s));
}

/// Global magnitude pruning: zeroes the floor(S * N) smallest-|w| entries over
/// all tensors (N = total entries). Entries already pruned in `prior` rank
/// first; remaining ties break by tensor then element index.
template <typename T>
std::vector<Mask> connection_masks(const std::vector<const BasicTensor<T>*>& weights, double sparsity,
                                   const std::vector<Mask>* prior = nullptr) {
  check_sparsity(sparsity);
  struct Entry {
    bool prior_pruned;
    double magnitude;
    std::uint32_t tensor;
    std::uint32_t index;
  };
  std::vector<Entry> entries;
  std::size_t total = 0;
  std::size_t already = 0;
  for (std::size_t t = 0; t < weights.size(); ++t) {
    const auto& w = *weights[t];
    total += w.size();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const bool pp = prior != nullptr && !(*prior)[t].empty() && (*prior)[t][i] == 0;
      already += pp;
      entries.push_back({pp, std::abs(static_cast<double>(w[i])), static_cast<std::uint32_t>(t), static_cast<std::uint32_t>(i)});
    }
  }
  const std::size_t k = std::max(static_cast<std::size_t>(std::floor(sparsity * static_cast<double>(total))), already);
  std::vector<Mask> masks;
  for (const auto* w : weights) masks.emplace_back(w->size(), std::uint8_t{1});
  if (k == 0) return masks;
  auto before = [](const Entry& a, const Entry& b) {
    if (a.prior_pruned != b.prior_pruned) return a.prior_pruned;
    if (a.magnitude != b.magnitude) return a.magnitude < b.magnitude;
    if (a.tensor != b.tensor) return a.tensor < b.tensor;
    return a.index < b.index;
  };
  std::nth_element(entries.begin(), entries.begin() + static_cast<long>(k - 1), entries.end(), before);
  for (std::size_t j = 0; j < k; ++j) masks[entries[j].tensor][entries[j].index] = 0;
  return masks;
}

/// Filters (output channels) of a conv kernel [Kh,Kw,Cin,Cout] zeroed by ascending
/// L2 norm until the zeroed fraction reaches `sparsity`. The last filter always survives.
template <typename T>
std::vector<std::size_t> filters_to_prune(const BasicTensor<T>& kernel, double sparsity) {
  check_sparsity(sparsity);
  if (kernel.rank() != 4) throw ShapeError("filter pruning applies to conv kernels [Kh,Kw,Cin,Cout]");
  const std::size_t f = kernel.dim(3);
  std::vector<double> norm(f, 0.0);
  for (std::size_t i = 0; i < kernel.size(); ++i) norm[i % f] += static_cast<double>(kernel[i]) * kernel[i];
  std::vector<std::size_t> order(f);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return norm[a] < norm[b]; });
  // Smallest count with count / f >= sparsity, capped so one filter remains.
  std::size_t count = static_cast<std::size_t>(std::ceil(sparsity * static_cast<double>(f) - 1e-9));
  count = std::min(count, f - 1);
  order.resize(count);
  std::sort(order.begin(), order.end());
  return order;
}

template <typename T>
Mask filter_mask(const BasicTensor<T>& kernel, const std::vector<std::size_t>& filters) {
  const std::size_t f = kernel.dim(3);
  Mask m(kernel.size(), 1);
  for (std::size_t i = 0; i < kernel.size(); ++i) {
    if (std::binary_search(filters.begin(), filters.end(), i % f)) m[i] = 0;
  }
  return m;
}

struct PruneReport {
  PruneKind kind = PruneKind::connection_filter;
  double target = 0.0;
  std::size_t total_weights = 0;
  std::size_t pruned_weights = 0;
  std::vector<std::string> layers;
  std::vector<double> layer_sparsity;
  std::vector<std::vector<std::size_t>> pruned_filters;

  double global_sparsity() const {
    return total_weights ? static_cast<double>(pruned_weights) / static_cast<double>(total_weights) : 0.0;
  }
};

/// Prunes the conv and dense weights of the deployable network in place and
/// installs the masks on the parameters so later training keeps them at zero.
/// Biases of pruned filters are masked too.
template <typename T>
PruneReport prune_model(CaeCnn<T>& model, PruneKind kind, double sparsity) {
  check_sparsity(sparsity);
  PruneReport rep;
  rep.kind = kind;
  rep.target = sparsity;
  const std::size_t n_layers = kDeployLayers.size();
  std::vector<Mask> masks(n_layers);
  rep.pruned_filters.resize(n_layers);

  const double filter_share = kind == PruneKind::filter ? sparsity : kind == PruneKind::connection_filter ? sparsity / 2 : 0.0;
  if (filter_share > 0.0) {
    for (std::size_t l = 0; l < n_layers; ++l) {
      if (!kDeployLayers[l].conv) continue;
      const auto& w = model.param(kDeployLayers[l].weight).value;
      rep.pruned_filters[l] = filters_to_prune(w, filter_share);
      masks[l] = filter_mask(w, rep.pruned_filters[l]);
    }
  }
  if (kind != PruneKind::filter && sparsity > 0.0) {
    std::vector<const BasicTensor<T>*> weights;
    for (const auto& layer : kDeployLayers) weights.push_back(&model.param(layer.weight).value);
    masks = connection_masks(weights, sparsity, &masks);
  }

  for (std::size_t l = 0; l < n_layers; ++l) {
    const auto& layer = kDeployLayers[l];
    auto& w = model.param(layer.weight);
    if (masks[l].empty()) masks[l].assign(w.value.size(), 1);
    w.mask = masks[l];
    w.apply_mask();
    auto& b = model.param(layer.bias);
    if (!rep.pruned_filters[l].empty()) {
      b.mask.assign(b.value.size(), 1);
      for (auto f : rep.pruned_filters[l]) b.mask[f] = 0;
      b.apply_mask();
    }
    const std::size_t pruned = count_pruned(masks[l]);
    rep.layers.emplace_back(layer.name);
    rep.layer_sparsity.push_back(static_cast<double>(pruned) / static_cast<double>(w.value.size()));
    rep.total_weights += w.value.size();
    rep.pruned_weights += pruned;
  }
  return rep;
}

}  // namespace chisel
