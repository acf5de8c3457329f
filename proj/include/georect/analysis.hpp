// SPDX-License-Identifier: Apache-2.0
/**
 * @file   analysis.hpp
 * @brief  Spectral diagnostics for cross-view features: covariance of
 *         L2-normalized rows, singular spectrum of the aerial/ground
 *         covariance difference, and principal angles between subspaces.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <ostream>
#include <vector>

#include "georect/tensor.hpp"

namespace georect {

struct SpectrumReport {
  std::vector<double> singular_values;    // descending
  std::vector<double> cumulative_energy;  // in [0, 1]
  std::map<int, double> top_k_energy;
  double total_energy = 0.0;
};

inline Tensor covariance(const Tensor& features) {
  kernels::require_matrix(features, "covariance");
  const std::size_t m = features.rows(), d = features.cols();
  if (m < 2) throw InputError("covariance: need at least 2 rows, got " + std::to_string(m));
  Tensor x = features;
  for (std::size_t i = 0; i < m; ++i) {
    double n = 0.0;
    for (std::size_t k = 0; k < d; ++k) n += x(i, k) * x(i, k);
    n = std::sqrt(n);
    if (n > 0.0)
      for (std::size_t k = 0; k < d; ++k) x(i, k) /= n;
  }
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t k = 0; k < d; ++k) mean[k] += x(i, k);
  for (double& v : mean) v /= static_cast<double>(m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t k = 0; k < d; ++k) x(i, k) -= mean[k];
  Tensor c = Tensor::matrix(d, d);
  kernels::gemm_tn_acc(x, x, c);
  const double inv = 1.0 / static_cast<double>(m - 1);
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = a; b < d; ++b) {
      const double v = 0.5 * (c(a, b) + c(b, a)) * inv;
      c(a, b) = v;
      c(b, a) = v;
    }
  return c;
}

struct EigenResult {
  std::vector<double> values;
  Tensor vectors;  // columns
  int sweeps = 0;
};

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Stops when the
/// off-diagonal Frobenius norm falls below `tol` (scaled by the matrix norm).
inline EigenResult jacobi_eigen(const Tensor& sym, double tol = 1e-10, int max_sweeps = 100) {
  kernels::require_matrix(sym, "jacobi_eigen");
  const std::size_t n = sym.rows();
  if (sym.cols() != n) throw DimensionError("jacobi_eigen: matrix is not square");
  Tensor a = sym;
  Tensor v = Tensor::identity(n);
  double fro = 0.0;
  for (double x : a.values()) fro += x * x;
  fro = std::sqrt(fro);
  EigenResult res;
  auto off = [&] {
    double s = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = 0; q < n; ++q)
        if (p != q) s += a(p, q) * a(p, q);
    return std::sqrt(s);
  };
  while (res.sweeps < max_sweeps && fro > 0.0 && off() > tol * fro) {
    ++res.sweeps;
    for (std::size_t p = 0; p + 1 < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
  }
  res.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) res.values[i] = a(i, i);
  res.vectors = std::move(v);
  return res;
}

inline SpectrumReport spectrum_of(const std::vector<double>& eigenvalues, const std::vector<int>& ks = {8, 16}) {
  SpectrumReport r;
  for (double e : eigenvalues) r.singular_values.push_back(std::abs(e));
  std::sort(r.singular_values.begin(), r.singular_values.end(), std::greater<>());
  for (double s : r.singular_values) r.total_energy += s * s;
  double cum = 0.0;
  for (double s : r.singular_values) {
    cum += s * s;
    r.cumulative_energy.push_back(r.total_energy > 0.0 ? cum / r.total_energy : 0.0);
  }
  if (r.total_energy > 0.0 && !r.cumulative_energy.empty()) r.cumulative_energy.back() = 1.0;
  for (int k : ks) {
    if (k < 1) throw ConfigError("top-k must be >= 1");
    const std::size_t i = std::min<std::size_t>(static_cast<std::size_t>(k), r.cumulative_energy.size());
    r.top_k_energy[k] = i ? r.cumulative_energy[i - 1] : 0.0;
  }
  return r;
}

/// Singular values of sigma_a - sigma_g and their cumulative energy.
inline SpectrumReport spectrum(const Tensor& sigma_a, const Tensor& sigma_g, const std::vector<int>& ks = {8, 16},
                               double sym_tol = 1e-9) {
  if (sigma_a.shape() != sigma_g.shape())
    throw InputError("spectrum: shapes differ " + shape_str(sigma_a.shape()) + " vs " + shape_str(sigma_g.shape()));
  kernels::require_matrix(sigma_a, "spectrum");
  const std::size_t d = sigma_a.rows();
  if (sigma_a.cols() != d) throw InputError("spectrum: covariance must be square");
  for (const Tensor* s : {&sigma_a, &sigma_g})
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = i + 1; j < d; ++j)
        if (std::abs((*s)(i, j) - (*s)(j, i)) > sym_tol)
          throw InputError("spectrum: asymmetric input at (" + std::to_string(i) + ", " + std::to_string(j) + ")");
  Tensor diff = Tensor::matrix(d, d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) diff(i, j) = sigma_a(i, j) - sigma_g(i, j);
  return spectrum_of(jacobi_eigen(diff).values, ks);
}

inline void write_spectrum_csv(std::ostream& os, const SpectrumReport& r) {
  os << "index,sigma,cumulative_energy\n";
  char buf[96];
  for (std::size_t i = 0; i < r.singular_values.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", i + 1, r.singular_values[i], r.cumulative_energy[i]);
    os << buf;
  }
}

/// Orthonormal basis for the column space (modified Gram-Schmidt, twice).
/// Columns with residual norm below `tol` are dropped.
inline Tensor orthonormal_columns(const Tensor& a, double tol = 1e-12) {
  kernels::require_matrix(a, "orthonormal_columns");
  const std::size_t n = a.rows();
  std::vector<std::vector<double>> basis;
  for (std::size_t c = 0; c < a.cols(); ++c) {
    std::vector<double> x(n);
    for (std::size_t r = 0; r < n; ++r) x[r] = a(r, c);
    double orig = 0.0;
    for (double t : x) orig += t * t;
    orig = std::sqrt(orig);
    for (int pass = 0; pass < 2; ++pass)
      for (const auto& q : basis) {
        double dot = 0.0;
        for (std::size_t r = 0; r < n; ++r) dot += q[r] * x[r];
        for (std::size_t r = 0; r < n; ++r) x[r] -= dot * q[r];
      }
    double nrm = 0.0;
    for (double t : x) nrm += t * t;
    nrm = std::sqrt(nrm);
    if (nrm <= tol * std::max(1.0, orig)) continue;
    for (double& t : x) t /= nrm;
    basis.push_back(std::move(x));
  }
  if (basis.empty()) throw NumericError("orthonormal_columns: matrix has rank 0");
  Tensor q = Tensor::matrix(n, basis.size());
  for (std::size_t c = 0; c < basis.size(); ++c)
    for (std::size_t r = 0; r < n; ++r) q(r, c) = basis[c][r];
  return q;
}

/// Principal angles (radians, ascending) between span(a) and span(b).
inline std::vector<double> principal_angles(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows()) throw DimensionError("principal_angles: ambient dims differ");
  const Tensor qa = orthonormal_columns(a), qb = orthonormal_columns(b);
  const Tensor m = matmul(transpose(qa), qb);  // [ka, kb]
  const Tensor mtm = matmul(transpose(m), m);   // cos^2 on the diagonal after diagonalization
  auto eig = jacobi_eigen(mtm, 1e-14);
  std::vector<double> cos2 = eig.values;
  std::sort(cos2.begin(), cos2.end(), std::greater<>());
  cos2.resize(std::min(qa.cols(), qb.cols()));
  std::vector<double> out;
  for (double c2 : cos2) out.push_back(std::acos(std::sqrt(std::clamp(c2, 0.0, 1.0))));
  return out;
}

}  // namespace georect
