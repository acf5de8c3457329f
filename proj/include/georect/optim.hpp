// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <numbers>
#include <unordered_map>
#include <vector>

#include "georect/graph.hpp"

namespace georect {

struct LrSchedule {
  double base_lr = 0.008;
  double min_lr = 1.6e-6;
  std::size_t warmup_iters = 0;
  std::size_t total_iters = 1;

  void validate() const {
    if (!(min_lr > 0.0) || !(min_lr <= base_lr))
      throw ConfigError("lr schedule requires 0 < min_lr <= base_lr");
    if (warmup_iters > total_iters) throw ConfigError("lr schedule requires warmup_iters <= total_iters");
  }
};

/// Linear warmup from 0 to base_lr over warmup_iters, then cosine decay that
/// reaches min_lr exactly at total_iters.
inline double cosine_lr(const LrSchedule& s, std::size_t iter) {
  if (iter > s.total_iters) iter = s.total_iters;
  if (iter < s.warmup_iters)
    return s.base_lr * static_cast<double>(iter) / static_cast<double>(s.warmup_iters);
  const std::size_t span = s.total_iters - s.warmup_iters;
  if (span == 0) return s.base_lr;
  const double t = static_cast<double>(iter - s.warmup_iters) / static_cast<double>(span);
  return s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + std::cos(std::numbers::pi * t));
}

/// Velocity buffers keyed by parameter.
using MomentumBuffers = std::unordered_map<const Parameter*, std::vector<double>>;

/// Global-norm clip (when clip_norm > 0), then p <- p - lr * (g + wd * p) with
/// decay only on parameters flagged for it. Gradients are zeroed afterwards.
/// Returns the pre-clip global gradient norm.
///
/// With `velocity` given and momentum mu > 0 the step becomes
/// b <- mu * b + (g + wd * p), p <- p - lr * b. mu = 0 reproduces the plain
/// step bit for bit.
inline double sgd_step(const ParameterList& params, double lr, double weight_decay, double clip_norm,
                       MomentumBuffers* velocity = nullptr, double momentum = 0.0) {
  if (lr < 0.0) throw ConfigError("sgd_step: negative learning rate");
  if (weight_decay < 0.0) throw ConfigError("sgd_step: negative weight decay");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("sgd_step: momentum must lie in [0, 1)");
  double sq = 0.0;
  for (const Parameter* p : params)
    for (double g : p->grad.values()) sq += g * g;
  const double norm = std::sqrt(sq);
  const double factor = (clip_norm > 0.0 && norm > clip_norm) ? clip_norm / norm : 1.0;
  const bool use_mom = velocity && momentum > 0.0;
  for (Parameter* p : params) {
    auto& v = p->value.values();
    const auto& g = p->grad.values();
    const double wd = p->decay ? weight_decay : 0.0;
    if (use_mom) {
      auto& b = (*velocity)[p];
      if (b.size() != v.size()) b.assign(v.size(), 0.0);
      for (std::size_t i = 0; i < v.size(); ++i) {
        b[i] = momentum * b[i] + (factor * g[i] + wd * v[i]);
        v[i] -= lr * b[i];
      }
    } else {
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * (factor * g[i] + wd * v[i]);
    }
    p->zero_grad();
  }
  return norm;
}

}  // namespace georect
