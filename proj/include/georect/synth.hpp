// SPDX-License-Identifier: Apache-2.0
/**
 * @file   synth.hpp
 * @brief  Synthetic cross-view benchmark with planted, geometry-dependent
 *         low-rank distortions.
 *
 * Every identity owns a latent z. Ground samples observe z directly; aerial
 * samples observe (I + s U_b V_b^T) z, where (U_b, V_b) is a fixed rank-r*
 * pair for the sample's (altitude bin, angle bin). Each patch adds
 * independent noise. U_b and V_b are assembled from an altitude part and an
 * angle part, U_b = [A_alt | B_angle], V_b = [C_alt | E_angle], so bins
 * that share an axis value share part of their distortion.
 */
#pragma once

#include <map>
#include <optional>
#include <utility>

#include "georect/dataset.hpp"
#include "georect/rng.hpp"

namespace georect {

struct SyntheticConfig {
  std::size_t n_ids = 100;
  std::size_t samples_per_id_per_view = 4;
  std::size_t latent_dim = 8;
  std::size_t patch_count = 4;
  std::size_t distortion_rank = 4;
  double distortion_strength = 2.0;
  double noise_std = 0.1;
  int n_alt_bins = 3;
  int n_angle_bins = 3;
  int n_cams = 4;
  double train_fraction = 0.5;
  /// (alt_bin, angle_bin) withheld from training aerial samples.
  std::optional<std::pair<int, int>> holdout_bin;
  std::uint64_t seed = 0;

  BinningScheme binning() const {
    BinningScheme b;
    b.n_alt_bins = n_alt_bins;
    b.n_angle_bins = n_angle_bins;
    b.alt_min = 0.0;
    b.alt_max = 60.0;
    b.angle_min = 0.0;
    b.angle_max = 90.0;
    return b;
  }

  int n_ground_cams() const { return n_cams / 2; }
  int n_aerial_cams() const { return n_cams - n_ground_cams(); }
  std::size_t n_train_ids() const {
    return static_cast<std::size_t>(std::llround(static_cast<double>(n_ids) * train_fraction));
  }

  void validate() const {
    if (latent_dim == 0 || patch_count == 0 || samples_per_id_per_view == 0)
      throw ConfigError("synthetic dims must be positive");
    if (distortion_rank < 1 || distortion_rank > latent_dim) throw ConfigError("distortion rank must be in [1, latent_dim]");
    if (distortion_strength < 0.0) throw ConfigError("distortion strength must be nonnegative");
    if (noise_std < 0.0) throw ConfigError("noise_std must be nonnegative");
    if (n_cams < 2) throw ConfigError("need at least one ground and one aerial camera");
    binning().validate();
    const std::size_t tr = n_train_ids();
    if (tr < 2 || tr >= n_ids) throw ConfigError("infeasible identity split: " + std::to_string(tr) + " of " +
                                                 std::to_string(n_ids) + " ids for training");
    if (holdout_bin) {
      auto [a, g] = *holdout_bin;
      if (a < 0 || a >= n_alt_bins || g < 0 || g >= n_angle_bins) throw ConfigError("holdout bin outside the grid");
      if (n_alt_bins * n_angle_bins < 2) throw ConfigError("cannot hold out the only geometry bin");
    }
  }
};

using BinKey = std::pair<int, int>;

struct DistortionFactors {
  Tensor u, v;  // [latent_dim, r*]
};

namespace detail {

inline Tensor unit_columns(Rng& rng, std::size_t rows, std::size_t cols) {
  Tensor t = rng.normal_tensor({rows, cols}, 1.0);
  for (std::size_t c = 0; c < cols; ++c) {
    double n = 0.0;
    for (std::size_t r = 0; r < rows; ++r) n += t(r, c) * t(r, c);
    n = std::sqrt(n);
    for (std::size_t r = 0; r < rows; ++r) t(r, c) /= n;
  }
  return t;
}

inline Tensor hstack(const Tensor& a, const Tensor& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  Tensor out = Tensor::matrix(a.rows(), a.cols() + b.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    std::copy(a.row(r), a.row(r) + a.cols(), out.row(r));
    std::copy(b.row(r), b.row(r) + b.cols(), out.row(r) + a.cols());
  }
  return out;
}

}  // namespace detail

/// Ground-truth distortion factors for every (alt_bin, angle_bin).
inline std::map<BinKey, DistortionFactors> distortion_oracle(const SyntheticConfig& cfg) {
  cfg.validate();
  Rng root(cfg.seed, 0xd157u);
  const std::size_t r_alt = (cfg.distortion_rank + 1) / 2;
  const std::size_t r_ang = cfg.distortion_rank - r_alt;
  std::vector<Tensor> a_u, a_v, g_u, g_v;
  for (int a = 0; a < cfg.n_alt_bins; ++a) {
    Rng r = root.split(100 + a);
    a_u.push_back(detail::unit_columns(r, cfg.latent_dim, r_alt));
    a_v.push_back(detail::unit_columns(r, cfg.latent_dim, r_alt));
  }
  for (int g = 0; g < cfg.n_angle_bins; ++g) {
    Rng r = root.split(200 + g);
    if (r_ang > 0) {
      g_u.push_back(detail::unit_columns(r, cfg.latent_dim, r_ang));
      g_v.push_back(detail::unit_columns(r, cfg.latent_dim, r_ang));
    } else {
      g_u.emplace_back();
      g_v.emplace_back();
    }
  }
  std::map<BinKey, DistortionFactors> out;
  for (int a = 0; a < cfg.n_alt_bins; ++a)
    for (int g = 0; g < cfg.n_angle_bins; ++g)
      out[{a, g}] = DistortionFactors{detail::hstack(a_u[a], g_u[g]), detail::hstack(a_v[a], g_v[g])};
  return out;
}

struct SyntheticSplit {
  Dataset train, test;
};

/// Identity-disjoint train/test split. Aerial geometry bins are assigned
/// round-robin over the (alt, angle) grid; ground samples sit in the lowest
/// bins with near-zero altitude.
inline SyntheticSplit generate(const SyntheticConfig& cfg) {
  cfg.validate();
  const auto factors = distortion_oracle(cfg);
  const BinningScheme scheme = cfg.binning();
  const double alt_w = (scheme.alt_max - scheme.alt_min) / scheme.n_alt_bins;
  const double ang_w = (scheme.angle_max - scheme.angle_min) / scheme.n_angle_bins;

  std::vector<BinKey> grid_all, grid_train;
  for (int a = 0; a < cfg.n_alt_bins; ++a)
    for (int g = 0; g < cfg.n_angle_bins; ++g) {
      grid_all.push_back({a, g});
      if (!cfg.holdout_bin || *cfg.holdout_bin != BinKey{a, g}) grid_train.push_back({a, g});
    }

  Rng root(cfg.seed, 0x5e7u);
  SyntheticSplit split;
  const std::size_t n_train = cfg.n_train_ids();
  std::size_t rr_train = 0, rr_test = 0, cam_rr = 0;
  for (std::size_t id = 0; id < cfg.n_ids; ++id) {
    const bool is_train = id < n_train;
    Rng rng = root.split(id);
    Tensor z = rng.normal_tensor({cfg.latent_dim}, 1.0);
    Dataset& ds = is_train ? split.train : split.test;
    const int label = static_cast<int>(id);
    for (std::size_t k = 0; k < cfg.samples_per_id_per_view; ++k) {
      Sample s;
      s.meta.id = label;
      s.meta.view = View::Ground;
      s.meta.geometry.camera_id = static_cast<int>((cam_rr + k) % cfg.n_ground_cams());
      s.meta.geometry.altitude_m = rng.uniform(1.0, 2.0);
      s.meta.geometry.angle_deg = rng.uniform(0.0, std::min(10.0, 0.9 * ang_w));
      s.patches = Tensor({cfg.patch_count, cfg.latent_dim});
      for (std::size_t p = 0; p < cfg.patch_count; ++p)
        for (std::size_t j = 0; j < cfg.latent_dim; ++j) s.patches(p, j) = z[j] + rng.normal(0.0, cfg.noise_std);
      ds.samples.push_back(std::move(s));
    }
    for (std::size_t k = 0; k < cfg.samples_per_id_per_view; ++k) {
      const auto& grid = is_train ? grid_train : grid_all;
      std::size_t& rr = is_train ? rr_train : rr_test;
      const BinKey bin = grid[rr++ % grid.size()];
      Sample s;
      s.meta.id = label;
      s.meta.view = View::Aerial;
      s.meta.geometry.camera_id = cfg.n_ground_cams() + static_cast<int>((cam_rr + k) % cfg.n_aerial_cams());
      const double alt_lo = scheme.alt_min + bin.first * alt_w;
      const double ang_lo = scheme.angle_min + bin.second * ang_w;
      s.meta.geometry.altitude_m = rng.uniform(alt_lo + 0.1 * alt_w, alt_lo + 0.9 * alt_w);
      s.meta.geometry.angle_deg = rng.uniform(ang_lo + 0.1 * ang_w, ang_lo + 0.9 * ang_w);
      const DistortionFactors& f = factors.at(bin);
      // z' = z + s U (V^T z)
      Tensor zt = z;
      for (std::size_t c = 0; c < f.v.cols(); ++c) {
        double proj = 0.0;
        for (std::size_t j = 0; j < cfg.latent_dim; ++j) proj += f.v(j, c) * z[j];
        for (std::size_t j = 0; j < cfg.latent_dim; ++j) zt[j] += cfg.distortion_strength * f.u(j, c) * proj;
      }
      s.patches = Tensor({cfg.patch_count, cfg.latent_dim});
      for (std::size_t p = 0; p < cfg.patch_count; ++p)
        for (std::size_t j = 0; j < cfg.latent_dim; ++j) s.patches(p, j) = zt[j] + rng.normal(0.0, cfg.noise_std);
      ds.samples.push_back(std::move(s));
    }
    ++cam_rr;
  }
  return split;
}

}  // namespace georect
