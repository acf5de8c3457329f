// SPDX-License-Identifier: Apache-2.0
/**
 * @file   eval.hpp
 * @brief  Retrieval evaluation: distance matrices, CMC / mAP under a
 *         directional query -> gallery protocol, and per-geometry-bin mAP
 *         deltas.
 */
#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "georect/geometry.hpp"
#include "georect/tensor.hpp"

namespace georect {

struct EmbeddingSet {
  Tensor features;  // [M, D]
  std::vector<int> ids;
  std::vector<int> cameras;
  std::vector<View> views;
  std::vector<GeometryBins> bins;

  std::size_t size() const { return ids.size(); }

  void validate() const {
    const std::size_t m = ids.size();
    if (features.rows() != m || cameras.size() != m || views.size() != m || bins.size() != m)
      throw InputError("embedding set: sequence lengths differ from feature rows");
    if (!features.all_finite()) throw NumericError("embedding set: non-finite features");
  }

  EmbeddingSet subset(const std::vector<std::size_t>& idx) const {
    EmbeddingSet s;
    const std::size_t d = features.cols();
    if (idx.empty()) return s;
    s.features = Tensor::matrix(idx.size(), d);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      std::copy(features.row(idx[k]), features.row(idx[k]) + d, s.features.row(k));
      s.ids.push_back(ids[idx[k]]);
      s.cameras.push_back(cameras[idx[k]]);
      s.views.push_back(views[idx[k]]);
      s.bins.push_back(bins[idx[k]]);
    }
    return s;
  }

  std::vector<std::size_t> indices_of(View v) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < views.size(); ++i)
      if (views[i] == v) out.push_back(i);
    return out;
  }
};

/// (alt_bin, angle_bin)
using BinKeyAG = std::pair<int, int>;

enum class Metric { Cosine, Euclidean };

struct ProtocolSpec {
  View query_view = View::Aerial;
  View gallery_view = View::Ground;
  bool exclude_same_camera = true;
  std::vector<int> rank_depths{1, 5, 10};
  Metric metric = Metric::Cosine;
  /// Bins with fewer queries than this are flagged as low-support.
  std::size_t min_bin_count = 5;

  std::string name() const {
    std::string s;
    s += static_cast<char>(std::tolower(view_char(query_view)));
    s += "2";
    s += static_cast<char>(std::tolower(view_char(gallery_view)));
    return s;
  }
};

/// Parses "a2g", "g2a", "a2a", "g2g" (also with w for wearable).
inline ProtocolSpec parse_protocol(const std::string& s) {
  if (s.size() != 3 || s[1] != '2') throw ConfigError("protocol must look like a2g, got '" + s + "'");
  ProtocolSpec p;
  try {
    p.query_view = parse_view(std::string(1, static_cast<char>(std::toupper(s[0]))));
    p.gallery_view = parse_view(std::string(1, static_cast<char>(std::toupper(s[2]))));
  } catch (const InputError& e) {
    throw ConfigError("protocol '" + s + "': " + e.what());
  }
  return p;
}

/// Cosine distance (1 - cosine similarity) on L2-normalized rows, or
/// Euclidean distance.
inline Tensor distance_matrix(const Tensor& q, const Tensor& g, Metric metric = Metric::Cosine) {
  if (q.cols() != g.cols())
    throw DimensionError("distance_matrix: feature dims differ (" + std::to_string(q.cols()) + " vs " +
                         std::to_string(g.cols()) + ")");
  const std::size_t d = q.cols();
  Tensor out = Tensor::matrix(q.rows(), g.rows());
  if (metric == Metric::Euclidean) {
    for (std::size_t i = 0; i < q.rows(); ++i)
      for (std::size_t j = 0; j < g.rows(); ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
          const double t = q(i, k) - g(j, k);
          s += t * t;
        }
        out(i, j) = std::sqrt(s);
      }
    return out;
  }
  auto norms = [d](const Tensor& t, const char* which) {
    std::vector<double> n(t.rows());
    for (std::size_t i = 0; i < t.rows(); ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += t(i, k) * t(i, k);
      n[i] = std::sqrt(s);
      if (!(n[i] > 0.0))
        throw NumericError(std::string("distance_matrix: zero-norm ") + which + " row " + std::to_string(i));
    }
    return n;
  };
  const auto nq = norms(q, "query"), ng = norms(g, "gallery");
  for (std::size_t i = 0; i < q.rows(); ++i)
    for (std::size_t j = 0; j < g.rows(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += q(i, k) * g(j, k);
      out(i, j) = 1.0 - s / (nq[i] * ng[j]);
    }
  return out;
}

inline Tensor distance_matrix(const EmbeddingSet& q, const EmbeddingSet& g, Metric metric = Metric::Cosine) {
  return distance_matrix(q.features, g.features, metric);
}

struct BinStat {
  std::size_t count = 0;
  double map = 0.0;
  double delta = 0.0;
  bool low_support = false;
};

struct RankingReport {
  std::string protocol;
  std::map<int, double> cmc;        // rank -> fraction
  std::vector<double> cmc_curve;    // cmc_curve[k-1] = CMC@k
  double map = 0.0;
  std::size_t valid_queries = 0;
  std::size_t skipped_queries = 0;
  std::vector<double> query_ap;     // -1 for skipped queries
  std::map<BinKeyAG, BinStat> per_bin;
};

struct QueryMeta {
  std::vector<int> ids;
  std::vector<int> cameras;
};

/// CMC and mAP from a query x gallery distance matrix. Per query the gallery
/// is ordered by ascending distance with index tie-break; same-camera entries
/// are dropped when the protocol says so. Queries without a valid positive
/// are skipped and counted.
inline RankingReport cmc_map(const Tensor& dist, const QueryMeta& q, const QueryMeta& g, const ProtocolSpec& proto) {
  const std::size_t nq = q.ids.size(), ng = g.ids.size();
  if (dist.rows() != nq || dist.cols() != ng) throw DimensionError("cmc_map: distance matrix shape differs from metadata");
  if (ng == 0) throw ProtocolError("cmc_map: empty gallery");
  RankingReport rep;
  rep.protocol = proto.name();
  std::vector<std::size_t> hits_at(ng + 1, 0);  // hits_at[k]: queries whose first match is at rank k (1-based)
  std::vector<std::size_t> order(ng);
  double ap_sum = 0.0;
  rep.query_ap.assign(nq, -1.0);
  for (std::size_t i = 0; i < nq; ++i) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    const double* di = dist.row(i);
    std::stable_sort(order.begin(), order.end(), [di](std::size_t a, std::size_t b) { return di[a] < di[b]; });
    std::size_t rank = 0, hits = 0, first = 0;
    double prec_sum = 0.0;
    for (std::size_t j : order) {
      if (proto.exclude_same_camera && g.cameras[j] == q.cameras[i]) continue;
      ++rank;
      if (g.ids[j] == q.ids[i]) {
        ++hits;
        if (!first) first = rank;
        prec_sum += static_cast<double>(hits) / static_cast<double>(rank);
      }
    }
    if (rank == 0) throw ProtocolError("cmc_map: query " + std::to_string(i) + " has an empty filtered gallery");
    if (hits == 0) {
      ++rep.skipped_queries;
      continue;
    }
    ++rep.valid_queries;
    ++hits_at[first];
    rep.query_ap[i] = prec_sum / static_cast<double>(hits);
    ap_sum += rep.query_ap[i];
  }
  rep.cmc_curve.assign(ng, 0.0);
  if (rep.valid_queries > 0) {
    std::size_t cum = 0;
    for (std::size_t k = 1; k <= ng; ++k) {
      cum += hits_at[k];
      rep.cmc_curve[k - 1] = static_cast<double>(cum) / static_cast<double>(rep.valid_queries);
    }
    rep.map = ap_sum / static_cast<double>(rep.valid_queries);
  }
  for (int k : proto.rank_depths) {
    if (k < 1) throw ConfigError("rank depth must be >= 1");
    rep.cmc[k] = rep.cmc_curve[std::min<std::size_t>(static_cast<std::size_t>(k), ng) - 1];
  }
  return rep;
}

/// Groups queries by (alt_bin, angle_bin); delta = mAP(bin) - overall_map.
inline std::map<BinKeyAG, BinStat> binned_delta_map(const std::vector<double>& query_ap,
                                                    const std::vector<GeometryBins>& query_bins, double overall_map,
                                                    std::size_t min_count = 5) {
  if (query_ap.size() != query_bins.size()) throw InputError("binned_delta_map: every query needs geometry bins");
  std::map<BinKeyAG, BinStat> out;
  std::map<BinKeyAG, double> sums;
  for (std::size_t i = 0; i < query_ap.size(); ++i) {
    if (query_ap[i] < 0.0) continue;
    const BinKeyAG key{query_bins[i].alt_bin, query_bins[i].angle_bin};
    ++out[key].count;
    sums[key] += query_ap[i];
  }
  for (auto& [key, st] : out) {
    st.map = sums[key] / static_cast<double>(st.count);
    st.delta = st.map - overall_map;
    st.low_support = st.count < min_count;
  }
  return out;
}

/// Selects queries and gallery by view, computes distances and ranks, and
/// fills the per-bin table.
inline RankingReport evaluate_embeddings(const EmbeddingSet& all, const ProtocolSpec& proto) {
  all.validate();
  const auto qi = all.indices_of(proto.query_view);
  const auto gi = all.indices_of(proto.gallery_view);
  if (qi.empty() || gi.empty()) throw ProtocolError("protocol " + proto.name() + ": empty query or gallery selection");
  const EmbeddingSet q = all.subset(qi), g = all.subset(gi);
  const Tensor dist = distance_matrix(q, g, proto.metric);
  RankingReport rep = cmc_map(dist, QueryMeta{q.ids, q.cameras}, QueryMeta{g.ids, g.cameras}, proto);
  rep.per_bin = binned_delta_map(rep.query_ap, q.bins, rep.map, proto.min_bin_count);
  return rep;
}

inline nlohmann::json to_json(const RankingReport& r) {
  nlohmann::json cmc = nlohmann::json::object();
  for (const auto& [k, v] : r.cmc) cmc["rank" + std::to_string(k)] = v;
  nlohmann::json bins = nlohmann::json::array();
  for (const auto& [key, st] : r.per_bin)
    bins.push_back({{"alt_bin", key.first},
                    {"angle_bin", key.second},
                    {"count", st.count},
                    {"map", st.map},
                    {"delta_map", st.delta},
                    {"low_support", st.low_support}});
  return nlohmann::json{{"protocol", r.protocol},
                        {"cmc", cmc},
                        {"map", r.map},
                        {"valid_queries", r.valid_queries},
                        {"skipped_queries", r.skipped_queries},
                        {"per_bin", bins}};
}

inline void write_cmc_csv(std::ostream& os, const RankingReport& r) {
  os << "rank,cmc\n";
  char buf[64];
  for (std::size_t k = 0; k < r.cmc_curve.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g\n", k + 1, r.cmc_curve[k]);
    os << buf;
  }
}

inline void write_bin_csv(std::ostream& os, const RankingReport& r) {
  os << "alt_bin,angle_bin,count,map,delta_map,low_support\n";
  char buf[128];
  for (const auto& [key, st] : r.per_bin) {
    std::snprintf(buf, sizeof buf, "%d,%d,%zu,%.17g,%.17g,%d\n", key.first, key.second, st.count, st.map, st.delta,
                  st.low_support ? 1 : 0);
    os << buf;
  }
}

}  // namespace georect
