// SPDX-License-Identifier: Apache-2.0
// Brute-force ranking oracle shared by the eval tests and the acceptance binary.
#pragma once

#include <algorithm>
#include <vector>

#include "georect/eval.hpp"

namespace georect::oracles {

struct OracleResult {
  std::vector<double> ap;  // -1 when skipped
  std::vector<std::size_t> first_rank;
};

// Rank of gallery item j = 1 + number of kept items ordered before it, counted
// pair by pair. AP recomputes precision at every relevant rank from scratch.
inline OracleResult oracle(const Tensor& dist, const QueryMeta& q, const QueryMeta& g, bool exclude_same_camera) {
  OracleResult out;
  const std::size_t ng = g.ids.size();
  for (std::size_t i = 0; i < q.ids.size(); ++i) {
    auto kept = [&](std::size_t j) { return !(exclude_same_camera && g.cameras[j] == q.cameras[i]); };
    auto before = [&](std::size_t a, std::size_t b) {
      return dist(i, a) < dist(i, b) || (dist(i, a) == dist(i, b) && a < b);
    };
    std::vector<std::size_t> rel_ranks;
    for (std::size_t j = 0; j < ng; ++j) {
      if (!kept(j) || g.ids[j] != q.ids[i]) continue;
      std::size_t r = 1;
      for (std::size_t k = 0; k < ng; ++k)
        if (k != j && kept(k) && before(k, j)) ++r;
      rel_ranks.push_back(r);
    }
    std::sort(rel_ranks.begin(), rel_ranks.end());
    if (rel_ranks.empty()) {
      out.ap.push_back(-1.0);
      out.first_rank.push_back(0);
      continue;
    }
    double sum = 0.0;
    for (std::size_t m = 0; m < rel_ranks.size(); ++m) {
      std::size_t relevant_at_or_above = 0;
      for (std::size_t r : rel_ranks) relevant_at_or_above += r <= rel_ranks[m];
      sum += static_cast<double>(relevant_at_or_above) / static_cast<double>(rel_ranks[m]);
    }
    out.ap.push_back(sum / static_cast<double>(rel_ranks.size()));
    out.first_rank.push_back(rel_ranks.front());
  }
  return out;
}

}  // namespace georect::oracles
