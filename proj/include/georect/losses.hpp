// SPDX-License-Identifier: Apache-2.0
/**
 * @file   losses.hpp
 * @brief  Training objective: ID cross-entropy and batch-hard triplet on the
 *         global and local descriptors, view classification, the
 *         orthogonality penalty between X_inv and View, prompt-offset
 *         regularization, and their weighted total.
 *
 * All batch losses are means over the batch.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <vector>

#include <json.hpp>

#include "georect/graph.hpp"

namespace georect {

namespace ag {

/// Mean softmax cross-entropy. `smoothing` > 0 mixes the one-hot target with
/// the uniform distribution.
inline Var cross_entropy(Var logits, const std::vector<int>& labels, double smoothing = 0.0) {
  Graph& g = *logits.g;
  const Tensor& z = logits.value();
  kernels::require_matrix(z, "cross_entropy");
  const std::size_t b = z.rows(), c = z.cols();
  if (labels.size() != b) throw InputError("cross_entropy: label count differs from batch size");
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= c)
      throw InputError("cross_entropy: label " + std::to_string(l) + " outside [0, " + std::to_string(c) + ")");
  Tensor p = georect::softmax_rows(z);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const double* zr = z.row(i);
    const double mx = *std::max_element(zr, zr + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(zr[j] - mx);
    const double lse = mx + std::log(s);
    double li = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double target = (1.0 - smoothing) * (static_cast<int>(j) == labels[i] ? 1.0 : 0.0) + smoothing / double(c);
      if (target > 0.0) li += target * (lse - zr[j]);
    }
    loss += li;
  }
  loss /= static_cast<double>(b);
  return g.record(Tensor::scalar(loss), {logits}, [&g, logits, labels, smoothing, p = std::move(p)]() mutable {
    return [&g, logits, labels, smoothing, p = std::move(p)](const Tensor& go) {
      if (Tensor* gl = g.grad_buffer(logits.id)) {
        const std::size_t b = p.rows(), c = p.cols();
        const double s = go[0] / static_cast<double>(b);
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            const double target =
                (1.0 - smoothing) * (static_cast<int>(j) == labels[i] ? 1.0 : 0.0) + smoothing / double(c);
            gl->row(i)[j] += s * (p.row(i)[j] - target);
          }
      }
    };
  });
}

/// Batch-hard triplet loss with Euclidean distance: for each anchor the
/// farthest positive and nearest negative, hinge at zero, averaged over the
/// anchors that have both.
inline Var triplet_batch_hard(Var features, const std::vector<int>& labels, double margin) {
  Graph& g = *features.g;
  const Tensor& x = features.value();
  kernels::require_matrix(x, "triplet");
  const std::size_t b = x.rows(), d = x.cols();
  if (labels.size() != b) throw InputError("triplet: label count differs from batch size");
  constexpr double kFloor = 1e-12;
  Tensor dist = Tensor::matrix(b, b);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double t = x(i, k) - x(j, k);
        s += t * t;
      }
      dist(i, j) = std::sqrt(std::max(s, kFloor));
    }
  struct Pick {
    std::size_t anchor, pos, neg;
    bool active;
  };
  std::vector<Pick> picks;
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t pos = b, neg = b;
    for (std::size_t j = 0; j < b; ++j) {
      if (j == i) continue;
      if (labels[j] == labels[i]) {
        if (pos == b || dist(i, j) > dist(i, pos)) pos = j;
      } else if (neg == b || dist(i, j) < dist(i, neg)) {
        neg = j;
      }
    }
    if (pos == b || neg == b) continue;
    const double h = dist(i, pos) - dist(i, neg) + margin;
    picks.push_back({i, pos, neg, h > 0.0});
    if (h > 0.0) loss += h;
  }
  if (picks.empty()) throw InputError("triplet: batch has no anchor with both a positive and a negative");
  const double n = static_cast<double>(picks.size());
  loss /= n;
  return g.record(Tensor::scalar(loss), {features}, [&g, features, picks, dist = std::move(dist), n]() mutable {
    return [&g, features, picks, dist = std::move(dist), n](const Tensor& go) {
      Tensor* gx = g.grad_buffer(features.id);
      if (!gx) return;
      const Tensor& x = g.value(features);
      const std::size_t d = x.cols();
      const double s = go[0] / n;
      auto push = [&](std::size_t i, std::size_t j, double sign) {
        const double dij = dist(i, j);
        if (dij <= std::sqrt(kFloor)) return;
        for (std::size_t k = 0; k < d; ++k) {
          const double u = sign * s * (x(i, k) - x(j, k)) / dij;
          gx->row(i)[k] += u;
          gx->row(j)[k] -= u;
        }
      };
      for (const auto& p : picks) {
        if (!p.active) continue;
        push(p.anchor, p.pos, 1.0);
        push(p.anchor, p.neg, -1.0);
      }
    };
  });
}

/// Orthogonality penalty between rows of inv and v, averaged over rows.
/// literal: sum_i |inv_i * v_i|; otherwise |<inv, v>|.
inline Var orthogonality(Var inv, Var v, bool literal = true) {
  Graph& g = *inv.g;
  const Tensor& a = inv.value();
  const Tensor& b = v.value();
  if (a.shape() != b.shape()) throw InputError("orth_loss: length mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t m = a.rows(), n = a.cols();
  double loss = 0.0;
  std::vector<double> row_sign(m, 0.0);
  for (std::size_t r = 0; r < m; ++r) {
    if (literal) {
      for (std::size_t j = 0; j < n; ++j) loss += std::abs(a.row(r)[j] * b.row(r)[j]);
    } else {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += a.row(r)[j] * b.row(r)[j];
      loss += std::abs(dot);
      row_sign[r] = (dot > 0.0) - (dot < 0.0);
    }
  }
  loss /= static_cast<double>(m);
  return g.record(Tensor::scalar(loss), {inv, v}, [&g, inv, v, literal, row_sign]() {
    return [&g, inv, v, literal, row_sign](const Tensor& go) {
      const Tensor& a = g.value(inv);
      const Tensor& b = g.value(v);
      const std::size_t m = a.rows(), n = a.cols();
      const double s = go[0] / static_cast<double>(m);
      Tensor* ga = g.grad_buffer(inv.id);
      Tensor* gb = g.grad_buffer(v.id);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < n; ++j) {
          const double p = a.row(r)[j] * b.row(r)[j];
          const double sg = literal ? static_cast<double>((p > 0.0) - (p < 0.0)) : row_sign[r];
          if (ga) ga->row(r)[j] += s * sg * b.row(r)[j];
          if (gb) gb->row(r)[j] += s * sg * a.row(r)[j];
        }
    };
  });
}

}  // namespace ag

// ---------------------------------------------------------------------------

struct LossWeights {
  double w_global = 1.0;
  double w_local = 1.0;
  double w_view_orth = 0.5;
  double w_geo = 0.1;

  void validate() const {
    if (w_global < 0 || w_local < 0 || w_view_orth < 0 || w_geo < 0)
      throw ConfigError("loss weights must be nonnegative");
  }
};

struct LossReport {
  double id_global = 0, tri_global = 0, id_local = 0, tri_local = 0, view = 0, orth = 0, geo = 0, total = 0;
};

inline double total_loss(const LossReport& r, const LossWeights& w) {
  return w.w_global * (r.id_global + r.tri_global) + w.w_local * (r.id_local + r.tri_local) +
         w.w_view_orth * (r.view + r.orth) + w.w_geo * r.geo;
}

inline nlohmann::json to_json(const LossReport& r) {
  return nlohmann::json{{"id_global", r.id_global}, {"tri_global", r.tri_global}, {"id_local", r.id_local},
                        {"tri_local", r.tri_local}, {"view", r.view},             {"orth", r.orth},
                        {"geo", r.geo},             {"total", r.total}};
}

// Tensor-level entry points.

inline double id_loss(const Tensor& logits, const std::vector<int>& labels, double smoothing = 0.0) {
  Graph g;
  return ag::cross_entropy(g.constant(logits), labels, smoothing).item();
}

inline double triplet_loss(const Tensor& features, const std::vector<int>& labels, double margin = 0.3) {
  std::map<int, int> counts;
  for (int l : labels) ++counts[l];
  if (counts.size() < 2) throw InputError("triplet: batch needs at least two identities");
  Graph g;
  return ag::triplet_batch_hard(g.constant(features), labels, margin).item();
}

inline double view_loss(const Tensor& view_logits, const std::vector<int>& view_labels) {
  return id_loss(view_logits, view_labels);
}

inline double orth_loss(const Tensor& inv, const Tensor& v, bool literal = true) {
  if (inv.numel() != v.numel()) throw InputError("orth_loss: length mismatch");
  Graph g;
  const Tensor a = inv.rank() == 1 ? inv.reshaped({1, inv.numel()}) : inv;
  const Tensor b = v.rank() == 1 ? v.reshaped({1, v.numel()}) : v;
  return ag::orthogonality(g.constant(a), g.constant(b), literal).item();
}

/// Squared Frobenius norm of the prompt offset.
inline double geo_reg(const Tensor& offset) {
  double s = 0.0;
  for (double v : offset.values()) s += v * v;
  return s;
}

}  // namespace georect
