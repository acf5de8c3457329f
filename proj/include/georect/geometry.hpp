// SPDX-License-Identifier: Apache-2.0
/**
 * @file   geometry.hpp
 * @brief  Camera geometry metadata: discretization into altitude / viewing
 *         angle bins, the learnable geometry embedding, inference-time
 *         corruption operators, and the JSON Lines metadata format.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "georect/graph.hpp"
#include "georect/rng.hpp"

namespace georect {

enum class View { Aerial, Ground, Wearable };

inline char view_char(View v) {
  switch (v) {
    case View::Aerial: return 'A';
    case View::Ground: return 'G';
    case View::Wearable: return 'W';
  }
  return '?';
}

inline View parse_view(const std::string& s) {
  if (s == "A") return View::Aerial;
  if (s == "G") return View::Ground;
  if (s == "W") return View::Wearable;
  throw InputError("unknown view '" + s + "' (expected A, G or W)");
}

struct GeometryRecord {
  int camera_id = 0;
  double altitude_m = 0.0;
  double angle_deg = 0.0;
};

struct BinningScheme {
  int n_alt_bins = 3;
  int n_angle_bins = 3;
  double alt_min = 0.0, alt_max = 60.0;
  double angle_min = 0.0, angle_max = 90.0;

  void validate() const {
    if (n_alt_bins < 1 || n_angle_bins < 1) throw ConfigError("binning requires at least one bin per axis");
    if (!(alt_max > alt_min) || !(angle_max > angle_min)) throw ConfigError("binning ranges must be non-degenerate");
  }
};

struct GeometryBins {
  int camera_id = 0;
  int alt_bin = 0;
  int angle_bin = 0;

  auto tie() const { return std::tie(camera_id, alt_bin, angle_bin); }
  bool operator==(const GeometryBins& o) const { return tie() == o.tie(); }
  bool operator<(const GeometryBins& o) const { return tie() < o.tie(); }
};

namespace detail {

inline int uniform_bin(double v, double lo, double hi, int n) {
  const double t = (v - lo) / (hi - lo) * static_cast<double>(n);
  if (!(t >= 0.0)) return 0;
  const int b = static_cast<int>(std::floor(t));
  return std::min(b, n - 1);
}

}  // namespace detail

/// Uniform-width bins with left-inclusive edges; out-of-range values clamp to
/// the end bins.
inline GeometryBins bin_geometry(const GeometryRecord& rec, const BinningScheme& scheme) {
  if (!std::isfinite(rec.altitude_m) || !std::isfinite(rec.angle_deg))
    throw InputError("bin_geometry: non-finite altitude or angle");
  return GeometryBins{rec.camera_id, detail::uniform_bin(rec.altitude_m, scheme.alt_min, scheme.alt_max, scheme.n_alt_bins),
                      detail::uniform_bin(rec.angle_deg, scheme.angle_min, scheme.angle_max, scheme.n_angle_bins)};
}

struct GeometryDims {
  std::size_t d_cam = 16;
  std::size_t d_alt = 16;
  std::size_t d_angle = 16;

  std::size_t total() const noexcept { return d_cam + d_alt + d_angle; }
};

/// Three learnable tables (camera, altitude bin, angle bin); the embedding is
/// the concatenation of the selected rows in that order.
class GeometryEmbedder {
 public:
  GeometryEmbedder() = default;

  GeometryEmbedder(ParameterStore& store, const std::string& prefix, int n_cams, const BinningScheme& scheme,
                   GeometryDims dims, Rng& rng)
      : dims_(dims) {
    if (n_cams < 1) throw ConfigError("geometry embedder needs at least one camera");
    scheme.validate();
    constexpr double kStd = 0.02;
    cam_ = &store.add(prefix + "table_cam", rng.normal_tensor({static_cast<std::size_t>(n_cams), dims.d_cam}, kStd), false);
    alt_ = &store.add(prefix + "table_alt",
                      rng.normal_tensor({static_cast<std::size_t>(scheme.n_alt_bins), dims.d_alt}, kStd), false);
    angle_ = &store.add(prefix + "table_angle",
                        rng.normal_tensor({static_cast<std::size_t>(scheme.n_angle_bins), dims.d_angle}, kStd), false);
  }

  std::size_t d_geo() const noexcept { return dims_.total(); }
  const GeometryDims& dims() const noexcept { return dims_; }
  int n_cams() const { return static_cast<int>(cam_->value.rows()); }
  int n_alt_bins() const { return static_cast<int>(alt_->value.rows()); }
  int n_angle_bins() const { return static_cast<int>(angle_->value.rows()); }

  void check(const GeometryBins& b) const {
    if (b.camera_id < 0 || b.camera_id >= n_cams())
      throw IndexError("camera id " + std::to_string(b.camera_id) + " outside [0, " + std::to_string(n_cams()) + ")");
    if (b.alt_bin < 0 || b.alt_bin >= n_alt_bins())
      throw IndexError("altitude bin " + std::to_string(b.alt_bin) + " outside table");
    if (b.angle_bin < 0 || b.angle_bin >= n_angle_bins())
      throw IndexError("angle bin " + std::to_string(b.angle_bin) + " outside table");
  }

  /// e_geo as a 1 x d_geo row on the graph.
  Var embed(Graph& g, const GeometryBins& b) const {
    check(b);
    Var cam = ag::gather_rows(g.param(*cam_), {static_cast<std::size_t>(b.camera_id)});
    Var alt = ag::gather_rows(g.param(*alt_), {static_cast<std::size_t>(b.alt_bin)});
    Var ang = ag::gather_rows(g.param(*angle_), {static_cast<std::size_t>(b.angle_bin)});
    return ag::concat_cols({cam, alt, ang});
  }

  Parameter& table_cam() { return *cam_; }
  Parameter& table_alt() { return *alt_; }
  Parameter& table_angle() { return *angle_; }

 private:
  GeometryDims dims_;
  Parameter* cam_ = nullptr;
  Parameter* alt_ = nullptr;
  Parameter* angle_ = nullptr;
};

inline Tensor embed_geometry(const GeometryBins& bins, const GeometryEmbedder& emb) {
  Graph g;
  return emb.embed(g, bins).value().reshaped({emb.d_geo()});
}

// ---------------------------------------------------------------------------
// Corruption operators

enum class CorruptionKind { None, FlipAlt, FlipAngle, JointFlip, BiasedAltShift, Stale, Wrong };

inline const char* corruption_name(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::None: return "none";
    case CorruptionKind::FlipAlt: return "flip_alt";
    case CorruptionKind::FlipAngle: return "flip_angle";
    case CorruptionKind::JointFlip: return "joint_flip";
    case CorruptionKind::BiasedAltShift: return "biased_alt_shift";
    case CorruptionKind::Stale: return "stale";
    case CorruptionKind::Wrong: return "wrong";
  }
  return "?";
}

inline CorruptionKind parse_corruption(const std::string& s) {
  for (auto k : {CorruptionKind::None, CorruptionKind::FlipAlt, CorruptionKind::FlipAngle, CorruptionKind::JointFlip,
                 CorruptionKind::BiasedAltShift, CorruptionKind::Stale, CorruptionKind::Wrong})
    if (s == corruption_name(k)) return k;
  throw ConfigError("unknown corruption kind '" + s + "'");
}

inline std::vector<CorruptionKind> all_corruptions() {
  return {CorruptionKind::None,           CorruptionKind::FlipAlt, CorruptionKind::FlipAngle, CorruptionKind::JointFlip,
          CorruptionKind::BiasedAltShift, CorruptionKind::Stale,   CorruptionKind::Wrong};
}

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::None;
  std::uint64_t seed = 0;
};

/// Inference-time perturbation of geometry bins. Camera ids are never touched.
/// Deterministic in (spec.seed, input order).
inline std::vector<GeometryBins> corrupt(const std::vector<GeometryBins>& bins, const CorruptionSpec& spec,
                                         const BinningScheme& scheme) {
  scheme.validate();
  std::vector<GeometryBins> out = bins;
  for (const auto& b : bins)
    if (b.alt_bin < 0 || b.alt_bin >= scheme.n_alt_bins || b.angle_bin < 0 || b.angle_bin >= scheme.n_angle_bins)
      throw IndexError("corrupt: input bins outside the binning scheme");
  Rng rng(spec.seed, 0xc0991u);
  auto flip = [&](int v, int n) {
    const int step = rng.below(2) == 0 ? -1 : 1;
    return std::clamp(v + step, 0, n - 1);
  };
  switch (spec.kind) {
    case CorruptionKind::None:
      break;
    case CorruptionKind::FlipAlt:
      for (auto& b : out) b.alt_bin = flip(b.alt_bin, scheme.n_alt_bins);
      break;
    case CorruptionKind::FlipAngle:
      for (auto& b : out) b.angle_bin = flip(b.angle_bin, scheme.n_angle_bins);
      break;
    case CorruptionKind::JointFlip:
      for (auto& b : out) {
        b.alt_bin = flip(b.alt_bin, scheme.n_alt_bins);
        b.angle_bin = flip(b.angle_bin, scheme.n_angle_bins);
      }
      break;
    case CorruptionKind::BiasedAltShift:
      for (auto& b : out) b.alt_bin = std::min(b.alt_bin + 1, scheme.n_alt_bins - 1);
      break;
    case CorruptionKind::Stale:
      // Previous item in sequence order, wrapping around.
      for (std::size_t i = 0; i < out.size(); ++i) {
        const auto& src = bins[(i + bins.size() - 1) % bins.size()];
        out[i].alt_bin = src.alt_bin;
        out[i].angle_bin = src.angle_bin;
      }
      break;
    case CorruptionKind::Wrong: {
      // Shuffled among items of the same camera.
      std::map<int, std::vector<std::size_t>> by_cam;
      for (std::size_t i = 0; i < bins.size(); ++i) by_cam[bins[i].camera_id].push_back(i);
      for (auto& [cam, idx] : by_cam) {
        std::vector<std::size_t> perm = idx;
        rng.shuffle(perm);
        for (std::size_t j = 0; j < idx.size(); ++j) {
          out[idx[j]].alt_bin = bins[perm[j]].alt_bin;
          out[idx[j]].angle_bin = bins[perm[j]].angle_bin;
        }
      }
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metadata: one JSON object per line,
// {"id":…, "camera":…, "altitude_m":…, "angle_deg":…, "view":"A"|"G"}

struct SampleMeta {
  int id = 0;
  View view = View::Ground;
  GeometryRecord geometry;
};

inline nlohmann::json meta_to_json(const SampleMeta& m) {
  return nlohmann::json{{"id", m.id},
                        {"camera", m.geometry.camera_id},
                        {"altitude_m", m.geometry.altitude_m},
                        {"angle_deg", m.geometry.angle_deg},
                        {"view", std::string(1, view_char(m.view))}};
}

inline SampleMeta meta_from_json(const nlohmann::json& j) {
  try {
    SampleMeta m;
    m.id = j.at("id").get<int>();
    m.geometry.camera_id = j.at("camera").get<int>();
    m.geometry.altitude_m = j.at("altitude_m").get<double>();
    m.geometry.angle_deg = j.at("angle_deg").get<double>();
    m.view = parse_view(j.at("view").get<std::string>());
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("metadata record: ") + e.what());
  }
}

inline void write_metadata(const std::string& path, const std::vector<SampleMeta>& metas) {
  std::ofstream os(path);
  if (!os) throw InputError("cannot open for writing: " + path);
  for (const auto& m : metas) os << meta_to_json(m).dump() << '\n';
}

inline std::vector<SampleMeta> read_metadata(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot open: " + path);
  std::vector<SampleMeta> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(meta_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      throw InputError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace georect
