// Copyright 2026 The Chisel Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <unordered_map>
#include <vector>

#include "chisel/autodiff.hpp"

namespace chisel {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adaptive-moment optimizer. Moments are keyed by parameter name so a state
/// survives copying the model that owns the parameters.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamOptions opt = {}) : opt_(opt) {}

  const AdamOptions& options() const { return opt_; }
  void set_lr(double lr) { opt_.lr = lr; }
  long step_count() const { return step_; }

  /// One update over every learning parameter. Masked entries stay zero.
  template <typename Range>
  void step(Range&& params) {
    for (Parameter<T>* p : params) {
      if (!p->learns() || p->grad.empty()) continue;
      if (!p->grad.all_finite()) throw NumericError("non-finite gradient in layer " + p->name);
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(step_));
    for (Parameter<T>* p : params) {
      if (!p->learns() || p->grad.empty()) continue;
      auto& st = moments_[p->name];
      if (st.m.size() != p->value.size()) {
        st.m.assign(p->value.size(), 0.0);
        st.v.assign(p->value.size(), 0.0);
      }
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        const double g = p->grad[i];
        st.m[i] = opt_.beta1 * st.m[i] + (1.0 - opt_.beta1) * g;
        st.v[i] = opt_.beta2 * st.v[i] + (1.0 - opt_.beta2) * g * g;
        const double mhat = st.m[i] / bc1;
        const double vhat = st.v[i] / bc2;
        p->value[i] -= static_cast<T>(opt_.lr * mhat / (std::sqrt(vhat) + opt_.eps));
      }
      p->apply_mask();
    }
  }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  AdamOptions opt_;
  long step_ = 0;
  std::unordered_map<std::string, Moments> moments_;
};

}  // namespace chisel
