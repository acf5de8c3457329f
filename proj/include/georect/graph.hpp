// SPDX-License-Identifier: Apache-2.0
/**
 * @file   graph.hpp
 * @brief  Learnable parameters and a reverse-mode tape over a fixed set of
 *         explicitly coded operators. Every operator records its own adjoint;
 *         there is no general expression tracing.
 */
#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <memory>
#include <numbers>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <vector>

#include "georect/tensor.hpp"

namespace georect {

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  /// Weight decay applies to this parameter. Off for embedding tables, gate
  /// logits and prompt parameters.
  bool decay = true;

  Parameter(std::string n, Tensor v, bool use_decay = true)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()), decay(use_decay) {}

  void zero_grad() { grad.fill(0.0); }
};

using ParameterList = std::vector<Parameter*>;

/// Owns parameters at stable addresses; modules keep raw pointers into it.
class ParameterStore {
 public:
  Parameter& add(std::string name, Tensor value, bool decay = true) {
    for (const auto& p : params_)
      if (p->name == name) throw ConfigError("duplicate parameter name: " + name);
    params_.push_back(std::make_unique<Parameter>(std::move(name), std::move(value), decay));
    return *params_.back();
  }

  ParameterList list() const {
    ParameterList out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p.get());
    return out;
  }

  Parameter* find(const std::string& name) const {
    for (const auto& p : params_)
      if (p->name == name) return p.get();
    return nullptr;
  }

  std::size_t size() const noexcept { return params_.size(); }

  std::size_t scalar_count() const noexcept {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

class Graph;

/// Handle to a node on a Graph tape.
struct Var {
  Graph* g = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double item() const { return value()[0]; }
};

class Graph {
 public:
  using Backward = std::function<void(const Tensor& out_grad)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor t) {
    nodes_.push_back(Node{std::move(t), Tensor{}, nullptr, nullptr, false});
    return Var{this, nodes_.size() - 1};
  }

  /// Leaf bound to a parameter. Repeated calls on one graph share the node.
  Var param(Parameter& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var{this, it->second};
    nodes_.push_back(Node{p.value, Tensor{}, nullptr, &p, true});
    param_nodes_.emplace(&p, nodes_.size() - 1);
    return Var{this, nodes_.size() - 1};
  }

  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  /// Appends an operator result. `make_backward` is only invoked when some
  /// input requires a gradient.
  template <typename MakeBackward>
  Var record(Tensor value, std::initializer_list<Var> inputs, MakeBackward&& make_backward) {
    bool req = false;
    for (const auto& in : inputs) req = req || nodes_[in.id].requires_grad;
    nodes_.push_back(Node{std::move(value), Tensor{}, nullptr, nullptr, req});
    const std::size_t id = nodes_.size() - 1;
    if (req) nodes_[id].backward = make(make_backward, id);
    return Var{this, id};
  }

  template <typename MakeBackward>
  Var record_n(Tensor value, const std::vector<Var>& inputs, MakeBackward&& make_backward) {
    bool req = false;
    for (const auto& in : inputs) req = req || nodes_[in.id].requires_grad;
    nodes_.push_back(Node{std::move(value), Tensor{}, nullptr, nullptr, req});
    const std::size_t id = nodes_.size() - 1;
    if (req) nodes_[id].backward = make(make_backward, id);
    return Var{this, id};
  }

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }

  /// Gradient buffer for accumulation, or nullptr when the node needs none.
  Tensor* grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return &n.grad;
  }

  void accumulate(std::size_t id, const Tensor& g) {
    if (Tensor* buf = grad_buffer(id)) {
      for (std::size_t i = 0; i < g.numel(); ++i) (*buf)[i] += g[i];
    }
  }

  /// Seeds d(root)/d(root) = 1 (root must be a scalar) and runs the tape in
  /// reverse, adding parameter gradients into Parameter::grad.
  void backward(Var root) {
    if (value(root).numel() != 1) throw DimensionError("backward root must be a scalar");
    if (!nodes_[root.id].requires_grad) return;
    nodes_[root.id].grad = Tensor(value(root).shape(), 1.0);
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty()) continue;
      if (n.backward) n.backward(n.grad);
      if (n.param) {
        auto& pg = n.param->grad.values();
        for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += n.grad[k];
      }
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  template <typename MakeBackward>
  static Backward make(MakeBackward& mk, std::size_t self) {
    if constexpr (std::is_invocable_v<MakeBackward&, std::size_t>)
      return mk(self);
    else
      return mk();
  }

  struct Node {
    Tensor value;
    Tensor grad;
    Backward backward;
    Parameter* param;
    bool requires_grad;
  };

  std::deque<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
};

inline const Tensor& Var::value() const { return g->value(*this); }

namespace ag {

namespace detail {

inline void same_graph(Var a, Var b) {
  if (a.g != b.g) throw Error("operands live on different graphs");
}

inline void same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  detail::same_graph(a, b);
  Graph& g = *a.g;
  Tensor out = georect::matmul(a.value(), b.value());
  return g.record(std::move(out), {a, b}, [&g, a, b] {
    return [&g, a, b](const Tensor& go) {
      if (Tensor* ga = g.grad_buffer(a.id)) kernels::gemm_nt_acc(go, g.value(b), *ga);
      if (Tensor* gb = g.grad_buffer(b.id)) kernels::gemm_tn_acc(g.value(a), go, *gb);
    };
  });
}

/// a * b^T
inline Var matmul_nt(Var a, Var b) {
  detail::same_graph(a, b);
  Graph& g = *a.g;
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  kernels::require_matrix(av, "matmul_nt");
  kernels::require_matrix(bv, "matmul_nt");
  if (av.cols() != bv.cols())
    throw DimensionError("matmul_nt inner extents differ: " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  Tensor out = Tensor::matrix(av.rows(), bv.rows());
  kernels::gemm_nt_acc(av, bv, out);
  return g.record(std::move(out), {a, b}, [&g, a, b] {
    return [&g, a, b](const Tensor& go) {
      if (Tensor* ga = g.grad_buffer(a.id)) kernels::gemm_nn_acc(go, g.value(b), *ga);
      if (Tensor* gb = g.grad_buffer(b.id)) kernels::gemm_tn_acc(go, g.value(a), *gb);
    };
  });
}

inline Var add(Var a, Var b) {
  detail::same_graph(a, b);
  detail::same_shape(a.value(), b.value(), "add");
  Graph& g = *a.g;
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  return g.record(std::move(out), {a, b}, [&g, a, b] {
    return [&g, a, b](const Tensor& go) {
      g.accumulate(a.id, go);
      g.accumulate(b.id, go);
    };
  });
}

inline Var sub(Var a, Var b) {
  detail::same_graph(a, b);
  detail::same_shape(a.value(), b.value(), "sub");
  Graph& g = *a.g;
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  return g.record(std::move(out), {a, b}, [&g, a, b] {
    return [&g, a, b](const Tensor& go) {
      g.accumulate(a.id, go);
      if (Tensor* gb = g.grad_buffer(b.id))
        for (std::size_t i = 0; i < go.numel(); ++i) (*gb)[i] -= go[i];
    };
  });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  detail::same_graph(a, b);
  detail::same_shape(a.value(), b.value(), "mul");
  Graph& g = *a.g;
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  return g.record(std::move(out), {a, b}, [&g, a, b] {
    return [&g, a, b](const Tensor& go) {
      if (Tensor* ga = g.grad_buffer(a.id)) {
        const Tensor& bv = g.value(b);
        for (std::size_t i = 0; i < go.numel(); ++i) (*ga)[i] += go[i] * bv[i];
      }
      if (Tensor* gb = g.grad_buffer(b.id)) {
        const Tensor& av = g.value(a);
        for (std::size_t i = 0; i < go.numel(); ++i) (*gb)[i] += go[i] * av[i];
      }
    };
  });
}

inline Var scale(Var a, double c) {
  Graph& g = *a.g;
  Tensor out = a.value();
  for (auto& v : out.values()) v *= c;
  return g.record(std::move(out), {a}, [&g, a, c] {
    return [&g, a, c](const Tensor& go) {
      if (Tensor* ga = g.grad_buffer(a.id))
        for (std::size_t i = 0; i < go.numel(); ++i) (*ga)[i] += c * go[i];
    };
  });
}

/// a * s where s is a one-element Var.
inline Var scale_by(Var a, Var s) {
  detail::same_graph(a, s);
  if (s.value().numel() != 1) throw DimensionError("scale_by expects a scalar factor");
  Graph& g = *a.g;
  const double c = s.value()[0];
  Tensor out = a.value();
  for (auto& v : out.values()) v *= c;
  return g.record(std::move(out), {a, s}, [&g, a, s] {
    return [&g, a, s](const Tensor& go) {
      const Tensor& av = g.value(a);
      if (Tensor* ga = g.grad_buffer(a.id)) {
        const double c = g.value(s)[0];
        for (std::size_t i = 0; i < go.numel(); ++i) (*ga)[i] += c * go[i];
      }
      if (Tensor* gs = g.grad_buffer(s.id)) {
        double acc = 0.0;
        for (std::size_t i = 0; i < go.numel(); ++i) acc += go[i] * av[i];
        (*gs)[0] += acc;
      }
    };
  });
}

/// x[m,n] + b[n] broadcast over rows.
inline Var add_bias(Var x, Var b) {
  detail::same_graph(x, b);
  Graph& g = *x.g;
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  if (bv.numel() != xv.cols())
    throw DimensionError("add_bias: bias length " + std::to_string(bv.numel()) + " vs " + std::to_string(xv.cols()));
  Tensor out = xv;
  const std::size_t n = xv.cols();
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (std::size_t j = 0; j < n; ++j) out.row(r)[j] += bv[j];
  return g.record(std::move(out), {x, b}, [&g, x, b] {
    return [&g, x, b](const Tensor& go) {
      g.accumulate(x.id, go);
      if (Tensor* gb = g.grad_buffer(b.id)) {
        const std::size_t n = go.cols();
        for (std::size_t r = 0; r < go.rows(); ++r)
          for (std::size_t j = 0; j < n; ++j) (*gb)[j] += go.row(r)[j];
      }
    };
  });
}

inline Var sigmoid(Var a) {
  Graph& g = *a.g;
  Tensor out = a.value();
  for (auto& v : out.values()) v = 1.0 / (1.0 + std::exp(-v));
  return g.record(std::move(out), {a}, [&g, a](std::size_t self) {
    return [&g, a, self](const Tensor& go) {
      if (Tensor* ga = g.grad_buffer(a.id)) {
        const Tensor& y = g.value(self);
        for (std::size_t i = 0; i < go.numel(); ++i) (*ga)[i] += go[i] * y[i] * (1.0 - y[i]);
      }
    };
  });
}

namespace detail {

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

}  // namespace detail

/// Exact (erf) GELU.
inline Var gelu(Var a) {
  Graph& g = *a.g;
  Tensor out = a.value();
  for (auto& v : out.values()) v = detail::gelu(v);
  return g.record(std::move(out), {a}, [&g, a] {
    return [&g, a](const Tensor& go) {
      if (Tensor* ga = g.grad_buffer(a.id)) {
        const Tensor& av = g.value(a);
        for (std::size_t i = 0; i < go.numel(); ++i) (*ga)[i] += go[i] * detail::gelu_grad(av[i]);
      }
    };
  });
}

inline Var softmax_rows(Var a) {
  Graph& g = *a.g;
  Tensor out = georect::softmax_rows(a.value());
  return g.record(std::move(out), {a}, [&g, a](std::size_t self) {
    return [&g, a, self](const Tensor& go) {
      if (Tensor* ga = g.grad_buffer(a.id)) {
        const Tensor& y = g.value(self);
        const std::size_t n = y.cols();
        for (std::size_t r = 0; r < y.rows(); ++r) {
          const double* yr = y.row(r);
          const double* gr = go.row(r);
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
          double* out = ga->row(r);
          for (std::size_t j = 0; j < n; ++j) out[j] += yr[j] * (gr[j] - dot);
        }
      }
    };
  });
}

/// Row-wise layer normalization with learnable gain and shift.
inline Var layernorm(Var x, Var gamma, Var beta, double eps = 1e-5) {
  detail::same_graph(x, gamma);
  detail::same_graph(x, beta);
  Graph& g = *x.g;
  const Tensor& xv = x.value();
  const std::size_t m = xv.rows(), n = xv.cols();
  if (gamma.value().numel() != n || beta.value().numel() != n)
    throw DimensionError("layernorm: gain/shift length must equal row width");
  Tensor xhat(xv.shape());
  std::vector<double> inv_std(m);
  for (std::size_t r = 0; r < m; ++r) {
    const double* xr = xv.row(r);
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += xr[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) xhat.row(r)[j] = (xr[j] - mean) * inv_std[r];
  }
  Tensor out = xhat;
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t j = 0; j < n; ++j) out.row(r)[j] = out.row(r)[j] * gv[j] + bv[j];
  return g.record(std::move(out), {x, gamma, beta},
                  [&g, x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)]() mutable {
                    return [&g, x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](const Tensor& go) {
                      const std::size_t m = go.rows(), n = go.cols();
                      const Tensor& gv = g.value(gamma);
                      if (Tensor* gg = g.grad_buffer(gamma.id))
                        for (std::size_t r = 0; r < m; ++r)
                          for (std::size_t j = 0; j < n; ++j) (*gg)[j] += go.row(r)[j] * xhat.row(r)[j];
                      if (Tensor* gb = g.grad_buffer(beta.id))
                        for (std::size_t r = 0; r < m; ++r)
                          for (std::size_t j = 0; j < n; ++j) (*gb)[j] += go.row(r)[j];
                      if (Tensor* gx = g.grad_buffer(x.id)) {
                        std::vector<double> dxhat(n);
                        for (std::size_t r = 0; r < m; ++r) {
                          double mean_d = 0.0, mean_dx = 0.0;
                          for (std::size_t j = 0; j < n; ++j) {
                            dxhat[j] = go.row(r)[j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xhat.row(r)[j];
                          }
                          mean_d /= static_cast<double>(n);
                          mean_dx /= static_cast<double>(n);
                          for (std::size_t j = 0; j < n; ++j)
                            gx->row(r)[j] += inv_std[r] * (dxhat[j] - mean_d - xhat.row(r)[j] * mean_dx);
                        }
                      }
                    };
                  });
}

inline Var slice_rows(Var a, std::size_t start, std::size_t count) {
  Graph& g = *a.g;
  const Tensor& av = a.value();
  if (start + count > av.rows() || count == 0)
    throw DimensionError("slice_rows out of range");
  const std::size_t n = av.cols();
  Tensor out = Tensor::matrix(count, n);
  std::copy(av.row(start), av.row(start) + count * n, out.data());
  return g.record(std::move(out), {a}, [&g, a, start] {
    return [&g, a, start](const Tensor& go) {
      if (Tensor* ga = g.grad_buffer(a.id)) {
        double* dst = ga->row(start);
        for (std::size_t i = 0; i < go.numel(); ++i) dst[i] += go[i];
      }
    };
  });
}

inline Var slice_cols(Var a, std::size_t start, std::size_t count) {
  Graph& g = *a.g;
  const Tensor& av = a.value();
  if (start + count > av.cols() || count == 0)
    throw DimensionError("slice_cols out of range");
  const std::size_t m = av.rows();
  Tensor out = Tensor::matrix(m, count);
  for (std::size_t r = 0; r < m; ++r) std::copy(av.row(r) + start, av.row(r) + start + count, out.row(r));
  return g.record(std::move(out), {a}, [&g, a, start] {
    return [&g, a, start](const Tensor& go) {
      if (Tensor* ga = g.grad_buffer(a.id)) {
        const std::size_t c = go.cols();
        for (std::size_t r = 0; r < go.rows(); ++r)
          for (std::size_t j = 0; j < c; ++j) ga->row(r)[start + j] += go.row(r)[j];
      }
    };
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows of nothing");
  Graph& g = *parts.front().g;
  const std::size_t n = parts.front().value().cols();
  std::size_t m = 0;
  for (const auto& p : parts) {
    detail::same_graph(parts.front(), p);
    if (p.value().cols() != n) throw DimensionError("concat_rows: column counts differ");
    m += p.value().rows();
  }
  Tensor out = Tensor::matrix(m, n);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const Tensor& pv = p.value();
    std::copy(pv.data(), pv.data() + pv.numel(), out.data() + off);
    off += pv.numel();
  }
  return g.record_n(std::move(out), parts, [&g, parts] {
    return [&g, parts](const Tensor& go) {
      std::size_t off = 0;
      for (const auto& p : parts) {
        const std::size_t len = g.value(p).numel();
        if (Tensor* gp = g.grad_buffer(p.id))
          for (std::size_t i = 0; i < len; ++i) (*gp)[i] += go[off + i];
        off += len;
      }
    };
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols of nothing");
  Graph& g = *parts.front().g;
  const std::size_t m = parts.front().value().rows();
  std::size_t n = 0;
  for (const auto& p : parts) {
    detail::same_graph(parts.front(), p);
    if (p.value().rows() != m) throw DimensionError("concat_cols: row counts differ");
    n += p.value().cols();
  }
  Tensor out = Tensor::matrix(m, n);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const Tensor& pv = p.value();
    const std::size_t c = pv.cols();
    for (std::size_t r = 0; r < m; ++r) std::copy(pv.row(r), pv.row(r) + c, out.row(r) + off);
    off += c;
  }
  return g.record_n(std::move(out), parts, [&g, parts] {
    return [&g, parts](const Tensor& go) {
      std::size_t off = 0;
      for (const auto& p : parts) {
        const std::size_t c = g.value(p).cols();
        if (Tensor* gp = g.grad_buffer(p.id))
          for (std::size_t r = 0; r < go.rows(); ++r)
            for (std::size_t j = 0; j < c; ++j) gp->row(r)[j] += go.row(r)[off + j];
        off += c;
      }
    };
  });
}

/// Rows of `table` selected by `index`, in order.
inline Var gather_rows(Var table, std::vector<std::size_t> index) {
  Graph& g = *table.g;
  const Tensor& tv = table.value();
  kernels::require_matrix(tv, "gather_rows");
  const std::size_t n = tv.cols();
  for (auto i : index)
    if (i >= tv.rows())
      throw IndexError("row index " + std::to_string(i) + " out of range for table with " + std::to_string(tv.rows()) +
                       " rows");
  Tensor out = Tensor::matrix(index.size(), n);
  for (std::size_t k = 0; k < index.size(); ++k) std::copy(tv.row(index[k]), tv.row(index[k]) + n, out.row(k));
  return g.record(std::move(out), {table}, [&g, table, index = std::move(index)]() mutable {
    return [&g, table, index = std::move(index)](const Tensor& go) {
      if (Tensor* gt = g.grad_buffer(table.id)) {
        const std::size_t n = go.cols();
        for (std::size_t k = 0; k < index.size(); ++k)
          for (std::size_t j = 0; j < n; ++j) gt->row(index[k])[j] += go.row(k)[j];
      }
    };
  });
}

inline Var reshape(Var a, Shape shape) {
  Graph& g = *a.g;
  Tensor out = a.value().reshaped(std::move(shape));
  return g.record(std::move(out), {a}, [&g, a] {
    return [&g, a](const Tensor& go) { g.accumulate(a.id, go); };
  });
}

/// Sum of squares of all entries, as a one-element Var.
inline Var sum_squares(Var a) {
  Graph& g = *a.g;
  double s = 0.0;
  for (double v : a.value().values()) s += v * v;
  return g.record(Tensor::scalar(s), {a}, [&g, a] {
    return [&g, a](const Tensor& go) {
      if (Tensor* ga = g.grad_buffer(a.id)) {
        const Tensor& av = g.value(a);
        for (std::size_t i = 0; i < av.numel(); ++i) (*ga)[i] += 2.0 * go[0] * av[i];
      }
    };
  });
}

inline Var sum(Var a) {
  Graph& g = *a.g;
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return g.record(Tensor::scalar(s), {a}, [&g, a] {
    return [&g, a](const Tensor& go) {
      if (Tensor* ga = g.grad_buffer(a.id))
        for (std::size_t i = 0; i < ga->numel(); ++i) (*ga)[i] += go[0];
    };
  });
}

/// Weighted sum of one-element Vars.
inline Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights) {
  if (terms.size() != weights.size() || terms.empty()) throw DimensionError("weighted_sum: size mismatch");
  Graph& g = *terms.front().g;
  double s = 0.0;
  for (std::size_t i = 0; i < terms.size(); ++i) s += weights[i] * terms[i].value()[0];
  return g.record_n(Tensor::scalar(s), terms, [&g, terms, weights] {
    return [&g, terms, weights](const Tensor& go) {
      for (std::size_t i = 0; i < terms.size(); ++i)
        if (Tensor* gt = g.grad_buffer(terms[i].id)) (*gt)[0] += weights[i] * go[0];
    };
  });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, double c) { return scale(a, c); }
inline Var operator*(double c, Var a) { return scale(a, c); }

}  // namespace ag
}  // namespace georect
