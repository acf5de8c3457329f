// SPDX-License-Identifier: Apache-2.0
/**
 * @file   giqt.hpp
 * @brief  Geometry-induced query/key transformation. A small predictor maps
 *         the geometry embedding to per-head low-rank factors (U, V); queries
 *         and keys pass through T = I + U V^T, applied implicitly as
 *         x + (x V) U^T, optionally blended with the untransformed vectors
 *         by a per-head sigmoid gate. Values stay untouched.
 */
#pragma once

#include <string>
#include <vector>

#include "georect/layers.hpp"

namespace georect {

struct GiqtConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t rank = 8;
  bool gating = true;
  std::size_t predictor_hidden = 64;

  std::size_t d_k() const { return d_model / n_heads; }

  void validate() const {
    if (n_heads == 0 || d_model % n_heads != 0)
      throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by n_heads " + std::to_string(n_heads));
    if (rank < 1 || rank > d_k())
      throw ConfigError("rank must lie in [1, d_k=" + std::to_string(d_k()) + "], got " + std::to_string(rank));
    if (predictor_hidden < 1) throw ConfigError("predictor_hidden must be positive");
  }
};

/// Row-wise x' = x + (x V) U^T. Cost O(n d_k r); the d_k x d_k matrix is
/// never formed.
inline Tensor apply_low_rank(const Tensor& x, const Tensor& u, const Tensor& v) {
  if (x.rank() != 2 || u.rank() != 2 || v.rank() != 2) throw DimensionError("apply_low_rank expects matrices");
  if (u.shape() != v.shape() || u.rows() != x.cols())
    throw DimensionError("apply_low_rank: x " + shape_str(x.shape()) + ", U " + shape_str(u.shape()) + ", V " +
                         shape_str(v.shape()));
  Tensor xv = matmul(x, v);
  Tensor out = x;
  kernels::gemm_nt_acc(xv, u, out);
  return out;
}

inline Tensor gate_blend(const Tensor& x_t, const Tensor& x, double beta) {
  if (x_t.shape() != x.shape()) throw DimensionError("gate_blend: shapes differ");
  const double a = 1.0 / (1.0 + std::exp(-beta));
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = a * x_t[i] + (1.0 - a) * x[i];
  return out;
}

struct FactorSet {
  std::vector<Tensor> u_q, v_q, u_k, v_k;
};

/// Shared two-layer geometry encoder followed by separate linear heads for
/// (U_Q, V_Q, U_K, V_K). The U heads start at zero so T = I at
/// initialization; the V heads start small and random so that the bilinear
/// product U V^T still receives gradient.
class FactorPredictor {
 public:
  FactorPredictor() = default;
  FactorPredictor(ParameterStore& store, const std::string& name, std::size_t d_geo, const GiqtConfig& cfg, Rng& rng)
      : cfg_(cfg), d_geo_(d_geo) {
    cfg.validate();
    const std::size_t h = cfg.predictor_hidden;
    const std::size_t out = cfg.n_heads * cfg.d_k() * cfg.rank;
    trunk1_ = Linear(store, name + ".trunk1", d_geo, h, rng);
    trunk2_ = Linear(store, name + ".trunk2", h, h, rng);
    u_q_ = Linear(store, name + ".u_q", h, out, rng, Init::Zero);
    u_k_ = Linear(store, name + ".u_k", h, out, rng, Init::Zero);
    // V heads: small random weights, zero bias.
    v_q_ = Linear(store, name + ".v_q", h, out, rng);
    v_k_ = Linear(store, name + ".v_k", h, out, rng);
    for (Linear* l : {&v_q_, &v_k_})
      for (auto& w : l->weight().value.values()) w *= 0.1;
  }

  const GiqtConfig& config() const { return cfg_; }
  std::size_t d_geo() const { return d_geo_; }

  /// Closed-form parameter count; linear in the rank.
  static std::size_t parameter_count(std::size_t d_geo, const GiqtConfig& cfg) {
    const std::size_t h = cfg.predictor_hidden;
    const std::size_t out = cfg.n_heads * cfg.d_k() * cfg.rank;
    return (d_geo * h + h) + (h * h + h) + 4 * (h * out + out);
  }

  HeadFactors predict(Graph& g, Var e_geo) const {
    if (e_geo.value().numel() != d_geo_)
      throw ConfigError("factor predictor expects e_geo of length " + std::to_string(d_geo_) + ", got " +
                        std::to_string(e_geo.value().numel()));
    Var e = e_geo.value().rank() == 2 ? e_geo : ag::reshape(e_geo, {1, d_geo_});
    Var hid = ag::gelu(trunk2_(g, ag::gelu(trunk1_(g, e))));
    HeadFactors f;
    split(g, u_q_(g, hid), f.u_q);
    split(g, v_q_(g, hid), f.v_q);
    split(g, u_k_(g, hid), f.u_k);
    split(g, v_k_(g, hid), f.v_k);
    return f;
  }

 private:
  void split(Graph&, Var flat, std::vector<Var>& per_head) const {
    const std::size_t dk = cfg_.d_k(), r = cfg_.rank;
    Var mat = ag::reshape(flat, {cfg_.n_heads * dk, r});
    for (std::size_t h = 0; h < cfg_.n_heads; ++h) per_head.push_back(ag::slice_rows(mat, h * dk, dk));
  }

  GiqtConfig cfg_;
  std::size_t d_geo_ = 0;
  Linear trunk1_, trunk2_, u_q_, v_q_, u_k_, v_k_;
};

inline FactorSet predict_factors(const Tensor& e_geo, const FactorPredictor& pred) {
  Graph g;
  HeadFactors f = pred.predict(g, g.constant(e_geo.reshaped({1, e_geo.numel()})));
  FactorSet out;
  for (std::size_t h = 0; h < f.u_q.size(); ++h) {
    out.u_q.push_back(f.u_q[h].value());
    out.v_q.push_back(f.v_q[h].value());
    out.u_k.push_back(f.u_k[h].value());
    out.v_k.push_back(f.v_k[h].value());
  }
  return out;
}

/// Per-head gate logits beta^(h); the effective gate is sigmoid(beta).
struct GateParams {
  Parameter* beta = nullptr;

  GateParams() = default;
  GateParams(ParameterStore& store, const std::string& name, std::size_t heads)
      : beta(&store.add(name + ".gate_beta", Tensor({1, heads}), false)) {}
};

/// Rectified multi-head attention on the graph. `enabled == false` forces
/// zero factors and no gating (the geometry-agnostic ablation).
inline Var giqt_attention(Graph& g, Var q, Var k, Var v, Var e_geo, const GiqtConfig& cfg, const FactorPredictor& pred,
                          const GateParams& gates, bool enabled = true, std::vector<Tensor>* weights_out = nullptr) {
  cfg.validate();
  if (q.cols() != cfg.d_model) throw ConfigError("giqt_attention: width differs from d_model");
  if (!enabled) return ag::multi_head_attention(q, k, v, cfg.n_heads, nullptr, nullptr, weights_out);
  HeadFactors f = pred.predict(g, e_geo);
  if (cfg.gating && gates.beta) {
    Var beta = g.param(*gates.beta);
    return ag::multi_head_attention(q, k, v, cfg.n_heads, &f, &beta, weights_out);
  }
  return ag::multi_head_attention(q, k, v, cfg.n_heads, &f, nullptr, weights_out);
}

/// Tensor-level entry point: Q [L, d], K [N, d], V [N, d], e_geo [d_geo].
inline Tensor giqt_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& e_geo,
                             const GiqtConfig& cfg, const FactorPredictor& pred, const GateParams& gates,
                             std::vector<Tensor>* weights_out = nullptr) {
  cfg.validate();
  if (q.rank() != 2 || q.cols() % cfg.n_heads != 0)
    throw ConfigError("giqt_attention: d not divisible by the head count");
  Graph g;
  return giqt_attention(g, g.constant(q), g.constant(k), g.constant(v),
                        g.constant(e_geo.reshaped({1, e_geo.numel()})), cfg, pred, gates, true, weights_out)
      .value();
}

/// Cross-attention block whose query/key comparison is rectified by GIQT.
class GiqtCrossAttention {
 public:
  GiqtCrossAttention() = default;
  GiqtCrossAttention(ParameterStore& store, const std::string& name, std::size_t d_geo, const GiqtConfig& cfg,
                     Rng& rng)
      : cfg_(cfg),
        wq_(store, name + ".q", cfg.d_model, cfg.d_model, rng),
        wk_(store, name + ".k", cfg.d_model, cfg.d_model, rng, Init::LeCun, false),
        wv_(store, name + ".v", cfg.d_model, cfg.d_model, rng),
        wo_(store, name + ".o", cfg.d_model, cfg.d_model, rng),
        predictor_(store, name + ".factors", d_geo, cfg, rng),
        gates_(store, name, cfg.n_heads) {}

  Var operator()(Graph& g, Var queries, Var context, Var e_geo, bool giqt_enabled) const {
    Var out = giqt_attention(g, wq_(g, queries), wk_(g, context), wv_(g, context), e_geo, cfg_, predictor_, gates_,
                             giqt_enabled);
    return wo_(g, out);
  }

  const FactorPredictor& predictor() const { return predictor_; }
  const GateParams& gates() const { return gates_; }

 private:
  GiqtConfig cfg_;
  Linear wq_, wk_, wv_, wo_;
  FactorPredictor predictor_;
  GateParams gates_;
};

}  // namespace georect
