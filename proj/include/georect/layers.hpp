// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>

#include "georect/graph.hpp"
#include "georect/rng.hpp"

namespace georect {

enum class Init { LeCun, Zero, Classifier };

/// y = x W + b with W stored as [in, out].
class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
         Init init = Init::LeCun, bool bias = true) {
    Tensor w = init == Init::Zero         ? Tensor({in, out})
               : init == Init::Classifier ? rng.normal_tensor({in, out}, 1e-3)
                                          : rng.normal_tensor({in, out}, 1.0 / std::sqrt(double(in)));
    w_ = &store.add(name + ".weight", std::move(w));
    if (bias) b_ = &store.add(name + ".bias", Tensor({out}), false);
  }

  Var operator()(Graph& g, Var x) const {
    Var y = ag::matmul(x, g.param(*w_));
    return b_ ? ag::add_bias(y, g.param(*b_)) : y;
  }

  std::size_t in() const { return w_->value.rows(); }
  std::size_t out() const { return w_->value.cols(); }
  std::size_t parameter_count() const { return w_->value.numel() + (b_ ? b_->value.numel() : 0); }

  Parameter& weight() { return *w_; }
  Parameter* bias() { return b_; }

 private:
  Parameter* w_ = nullptr;
  Parameter* b_ = nullptr;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterStore& store, const std::string& name, std::size_t width) {
    gain_ = &store.add(name + ".gain", Tensor({width}, 1.0), false);
    shift_ = &store.add(name + ".shift", Tensor({width}), false);
  }

  Var operator()(Graph& g, Var x) const { return ag::layernorm(x, g.param(*gain_), g.param(*shift_)); }

 private:
  Parameter* gain_ = nullptr;
  Parameter* shift_ = nullptr;
};

/// Two linear layers with a GELU in between.
class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(ParameterStore& store, const std::string& name, std::size_t width, std::size_t hidden, Rng& rng)
      : up_(store, name + ".up", width, hidden, rng), down_(store, name + ".down", hidden, width, rng) {}

  Var operator()(Graph& g, Var x) const { return down_(g, ag::gelu(up_(g, x))); }

 private:
  Linear up_, down_;
};

/// Per-head low-rank factors for one attention call. Empty vectors mean the
/// identity transform.
struct HeadFactors {
  std::vector<Var> u_q, v_q, u_k, v_k;
  bool empty() const noexcept { return u_q.empty(); }
};

namespace ag {

/// x + (x V) U^T, i.e. each row x_i mapped to (I + U V^T) x_i.
inline Var low_rank_residual(Var x, Var u, Var v) { return add(x, matmul_nt(matmul(x, v), u)); }

/// sigma(beta) * x_t + (1 - sigma(beta)) * x, with beta a one-element Var.
inline Var gate_blend(Var x_t, Var x, Var beta) {
  Var alpha = sigmoid(beta);
  return add(x, scale_by(sub(x_t, x), alpha));
}

/// Multi-head scaled dot-product attention over already projected q [L, d],
/// k [N, d] and v [N, d]. With factors present, each head's queries and keys
/// pass through I + U V^T (optionally gate-blended) before the logits; values
/// are never transformed.
inline Var multi_head_attention(Var q, Var k, Var v, std::size_t n_heads, const HeadFactors* factors = nullptr,
                                const Var* gate_logits = nullptr, std::vector<Tensor>* weights_out = nullptr) {
  const std::size_t d = q.cols();
  if (n_heads == 0 || d % n_heads != 0)
    throw ConfigError("attention width " + std::to_string(d) + " not divisible by " + std::to_string(n_heads) + " heads");
  if (k.cols() != d || v.cols() != d) throw DimensionError("attention: q/k/v widths differ");
  if (k.rows() != v.rows()) throw DimensionError("attention: key and value counts differ");
  const std::size_t dk = d / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
  const bool transform = factors && !factors->empty();
  if (transform && factors->u_q.size() != n_heads) throw DimensionError("attention: factor count differs from heads");
  std::vector<Var> heads;
  heads.reserve(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    Var qh = n_heads == 1 ? q : slice_cols(q, h * dk, dk);
    Var kh = n_heads == 1 ? k : slice_cols(k, h * dk, dk);
    Var vh = n_heads == 1 ? v : slice_cols(v, h * dk, dk);
    if (transform) {
      Var qt = low_rank_residual(qh, factors->u_q[h], factors->v_q[h]);
      Var kt = low_rank_residual(kh, factors->u_k[h], factors->v_k[h]);
      if (gate_logits) {
        Var beta = slice_cols(*gate_logits, h, 1);
        qt = gate_blend(qt, qh, beta);
        kt = gate_blend(kt, kh, beta);
      }
      qh = qt;
      kh = kt;
    }
    Var attn = softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt));
    if (weights_out) weights_out->push_back(attn.value());
    heads.push_back(matmul(attn, vh));
  }
  return n_heads == 1 ? heads.front() : concat_cols(heads);
}

}  // namespace ag

/// Plain multi-head self-attention with input/output projections.
class SelfAttention {
 public:
  SelfAttention() = default;
  SelfAttention(ParameterStore& store, const std::string& name, std::size_t width, std::size_t heads, Rng& rng)
      : heads_(heads),
        wq_(store, name + ".q", width, width, rng),
        wk_(store, name + ".k", width, width, rng, Init::LeCun, false),
        wv_(store, name + ".v", width, width, rng),
        wo_(store, name + ".o", width, width, rng) {}

  Var operator()(Graph& g, Var x) const {
    return wo_(g, ag::multi_head_attention(wq_(g, x), wk_(g, x), wv_(g, x), heads_));
  }

 private:
  std::size_t heads_ = 1;
  Linear wq_, wk_, wv_, wo_;
};

}  // namespace georect
