// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "georect/graph.hpp"

namespace georect {

/// Builds a scalar loss on the given graph from the current parameter values.
using LossBuilder = std::function<Var(Graph&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
};

namespace detail {

inline double eval_loss(const LossBuilder& loss_fn) {
  Graph g;
  const double v = loss_fn(g).item();
  if (!std::isfinite(v)) throw NumericError("grad_check: loss is not finite");
  return v;
}

}  // namespace detail

/// Central finite differences on every coordinate of `params`, compared to the
/// tape's gradients. Relative error uses max(|a|, |b|, 1e-8) as denominator.
inline GradCheckResult grad_check_detailed(const LossBuilder& loss_fn, const ParameterList& params, double eps) {
  if (!(eps >= 1e-6 && eps <= 1e-3)) throw ConfigError("grad_check: eps must lie in [1e-6, 1e-3]");
  for (Parameter* p : params) p->zero_grad();
  {
    Graph g;
    Var loss = loss_fn(g);
    if (!std::isfinite(loss.item())) throw NumericError("grad_check: loss is not finite");
    g.backward(loss);
  }
  GradCheckResult res;
  for (Parameter* p : params) {
    for (std::size_t i = 0; i < p->value.numel(); ++i) {
      const double saved = p->value[i];
      auto at = [&](double offset) {
        p->value[i] = saved + offset;
        return detail::eval_loss(loss_fn);
      };
      const double d1 = at(eps) - at(-eps), d2 = at(2.0 * eps) - at(-2.0 * eps);
      p->value[i] = saved;
      const double numeric = (8.0 * d1 - d2) / (12.0 * eps);
      const double analytic = p->grad[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      const double rel = std::abs(analytic - numeric) / denom;
      ++res.coordinates;
      if (rel > res.max_rel_error || res.coordinates == 1) {
        res.max_rel_error = std::max(res.max_rel_error, rel);
        res.worst_param = p->name;
        res.worst_index = i;
        res.analytic = analytic;
        res.numeric = numeric;
      }
    }
  }
  for (Parameter* p : params) p->zero_grad();
  return res;
}

inline double grad_check(const LossBuilder& loss_fn, const ParameterList& params, double eps = 1e-6) {
  return grad_check_detailed(loss_fn, params, eps).max_rel_error;
}

}  // namespace georect
