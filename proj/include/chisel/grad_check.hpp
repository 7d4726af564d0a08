// Copyright 2026 The Chisel Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "chisel/autodiff.hpp"
#include "chisel/rng.hpp"

namespace chisel {

struct GradCheckOptions {
  double epsilon = 1e-3;
  /// Elements checked per parameter tensor; 0 checks all of them.
  std::size_t max_per_param = 0;
  std::uint64_t seed = 0;
  /// Skip coordinates whose central-difference stencil crosses a relu or maxpool kink.
  bool skip_kinks = false;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  /// Coordinates skipped because the +/- epsilon evaluations took different
  /// relu/maxpool branches (the function is not differentiable across the stencil).
  std::size_t kinks = 0;
};

/// Relative error with a small absolute floor so two near-zero derivatives compare equal.
inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max(std::abs(a) + std::abs(b), 1e-8);
}

/// Compares reverse-mode gradients with central finite differences on every
/// learning parameter in `params`. `loss` builds a fresh graph and returns the
/// scalar loss node; it must be deterministic.
template <typename T>
GradCheckResult grad_check(const std::function<typename Graph<T>::Id(Graph<T>&)>& loss,
                           const std::vector<Parameter<T>*>& params, GradCheckOptions opt = {}) {
  for (auto* p : params) p->zero_grad();
  {
    Graph<T> g;
    g.backward(loss(g));
  }
  auto eval = [&](std::uint64_t* signature) {
    Graph<T> g;
    g.track_branches(opt.skip_kinks);
    const accum_t<T> v = g.value(loss(g))[0];
    if (signature) *signature = g.branch_signature();
    return v;
  };
  std::uint64_t sig_base = 0;
  eval(&sig_base);
  GradCheckResult result;
  Rng rng(opt.seed);
  for (auto* p : params) {
    if (!p->learns()) continue;
    std::vector<std::size_t> idx(p->value.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (opt.max_per_param != 0 && idx.size() > opt.max_per_param) {
      rng.shuffle(std::span(idx));
      idx.resize(opt.max_per_param);
    }
    const auto analytic = p->grad;
    for (std::size_t i : idx) {
      const T saved = p->value[i];
      std::uint64_t sig_up = 0, sig_down = 0;
      p->value[i] = static_cast<T>(saved + opt.epsilon);
      const accum_t<T> up = eval(&sig_up);
      p->value[i] = static_cast<T>(saved - opt.epsilon);
      const accum_t<T> down = eval(&sig_down);
      p->value[i] = saved;
      if (opt.skip_kinks && (sig_up != sig_base || sig_down != sig_base)) {
        ++result.kinks;
        continue;
      }
      const double numeric = static_cast<double>((up - down) / (2 * static_cast<accum_t<T>>(opt.epsilon)));
      const double err = relative_error(analytic[i], numeric);
      ++result.checked;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_param = p->name;
        result.worst_index = i;
      }
    }
  }
  return result;
}

}  // namespace chisel
