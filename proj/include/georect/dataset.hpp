// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "georect/geometry.hpp"
#include "georect/tensor.hpp"

namespace georect {

struct Sample {
  Tensor patches;  // [patch_count, d_in]
  SampleMeta meta;
};

struct Dataset {
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }

  std::size_t patch_count() const { return samples.empty() ? 0 : samples.front().patches.rows(); }
  std::size_t d_in() const { return samples.empty() ? 0 : samples.front().patches.cols(); }
};

/// Writes `<dir>/<name>.tns` (samples x patches x d_in) and `<dir>/<name>.jsonl`.
inline void save_dataset(const std::string& dir, const std::string& name, const Dataset& ds) {
  namespace fs = std::filesystem;
  if (ds.empty()) throw InputError("save_dataset: empty dataset");
  fs::create_directories(dir);
  const std::size_t p = ds.patch_count(), d = ds.d_in();
  Tensor all({ds.size(), p, d});
  std::vector<SampleMeta> metas;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Tensor& t = ds.samples[i].patches;
    if (t.rows() != p || t.cols() != d) throw DimensionError("save_dataset: ragged patch tensors");
    std::copy(t.data(), t.data() + t.numel(), all.data() + i * p * d);
    metas.push_back(ds.samples[i].meta);
  }
  save_tns((fs::path(dir) / (name + ".tns")).string(), all);
  write_metadata((fs::path(dir) / (name + ".jsonl")).string(), metas);
}

inline Dataset load_dataset(const std::string& dir, const std::string& name) {
  namespace fs = std::filesystem;
  Tensor all = load_tns((fs::path(dir) / (name + ".tns")).string());
  std::vector<SampleMeta> metas = read_metadata((fs::path(dir) / (name + ".jsonl")).string());
  if (all.rank() != 3) throw InputError("dataset tensor must be 3-D (samples x patches x d_in)");
  if (all.shape()[0] != metas.size())
    throw InputError("dataset tensor has " + std::to_string(all.shape()[0]) + " samples but metadata has " +
                     std::to_string(metas.size()));
  const std::size_t p = all.shape()[1], d = all.shape()[2];
  Dataset ds;
  for (std::size_t i = 0; i < metas.size(); ++i) {
    Tensor t({p, d});
    std::copy(all.data() + i * p * d, all.data() + (i + 1) * p * d, t.data());
    ds.samples.push_back(Sample{std::move(t), metas[i]});
  }
  return ds;
}

}  // namespace georect
