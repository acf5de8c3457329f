// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "georect/analysis.hpp"
#include "georect/harness.hpp"
#include "georect/synth.hpp"

using namespace georect;

namespace {

SyntheticConfig small(std::uint64_t seed = 0) {
  SyntheticConfig c;
  c.n_ids = 20;
  c.samples_per_id_per_view = 3;
  c.latent_dim = 8;
  c.distortion_rank = 3;
  c.seed = seed;
  return c;
}

double raw_a2g(const SyntheticConfig& c, bool map = false) {
  const SyntheticSplit s = generate(c);
  const RankingReport r = evaluate_embeddings(raw_embeddings(s.test, c.binning()), parse_protocol("a2g"));
  return map ? r.map : r.cmc.at(1);
}

}  // namespace

TEST(Synth, BitDeterministic) {
  const SyntheticSplit a = generate(small(3)), b = generate(small(3));
  ASSERT_EQ(a.train.size(), b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    EXPECT_EQ(a.train.samples[i].patches, b.train.samples[i].patches);
    EXPECT_EQ(meta_to_json(a.train.samples[i].meta), meta_to_json(b.train.samples[i].meta));
  }
  const SyntheticSplit c = generate(small(4));
  EXPECT_NE(a.test.samples[0].patches, c.test.samples[0].patches);
}

TEST(Synth, IdentityDisjointSplitAndCounts) {
  const SyntheticConfig c = small();
  const SyntheticSplit s = generate(c);
  std::set<int> tr, te;
  for (const auto& x : s.train.samples) tr.insert(x.meta.id);
  for (const auto& x : s.test.samples) te.insert(x.meta.id);
  for (int id : te) EXPECT_EQ(tr.count(id), 0u);
  EXPECT_EQ(tr.size(), c.n_train_ids());
  EXPECT_EQ(tr.size() + te.size(), c.n_ids);
  EXPECT_EQ(s.train.size() + s.test.size(), c.n_ids * 2 * c.samples_per_id_per_view);
  EXPECT_EQ(s.train.patch_count(), c.patch_count);
  EXPECT_EQ(s.train.d_in(), c.latent_dim);
}

TEST(Synth, ViewsCamerasAndAltitudes) {
  const SyntheticConfig c = small();
  const SyntheticSplit s = generate(c);
  const BinningScheme scheme = c.binning();
  for (const Dataset* ds : {&s.train, &s.test})
    for (const auto& x : ds->samples) {
      const GeometryBins b = bin_geometry(x.meta.geometry, scheme);
      if (x.meta.view == View::Ground) {
        EXPECT_LT(x.meta.geometry.altitude_m, 2.0);
        EXPECT_EQ(b.alt_bin, 0);
        EXPECT_LT(x.meta.geometry.camera_id, c.n_ground_cams());
      } else {
        EXPECT_GT(x.meta.geometry.altitude_m, 0.0);
        EXPECT_GE(x.meta.geometry.camera_id, c.n_ground_cams());
        EXPECT_LT(x.meta.geometry.camera_id, c.n_cams);
      }
    }
}

TEST(Synth, AerialBinsRoundRobinOverGrid) {
  SyntheticConfig c = small();
  c.n_ids = 36;
  const SyntheticSplit s = generate(c);
  std::map<BinKey, int> count;
  for (const auto& x : s.test.samples)
    if (x.meta.view == View::Aerial) {
      const GeometryBins b = bin_geometry(x.meta.geometry, c.binning());
      ++count[{b.alt_bin, b.angle_bin}];
    }
  ASSERT_EQ(count.size(), 9u);
  for (const auto& [k, n] : count) EXPECT_EQ(n, 6) << k.first << "," << k.second;
}

TEST(Synth, HoldoutBinOnlyAtTestTime) {
  SyntheticConfig c = small();
  c.holdout_bin = std::make_pair(2, 1);
  const SyntheticSplit s = generate(c);
  auto in_bin = [&](const Sample& x) {
    const GeometryBins b = bin_geometry(x.meta.geometry, c.binning());
    return x.meta.view == View::Aerial && b.alt_bin == 2 && b.angle_bin == 1;
  };
  for (const auto& x : s.train.samples) EXPECT_FALSE(in_bin(x));
  EXPECT_TRUE(std::any_of(s.test.samples.begin(), s.test.samples.end(), in_bin));
}

TEST(Synth, AerialIsPlantedDistortionOfGround) {
  SyntheticConfig c = small(5);
  c.noise_std = 0.0;
  const SyntheticSplit s = generate(c);
  const auto factors = distortion_oracle(c);
  std::map<int, Tensor> z;
  for (const auto& x : s.test.samples)
    if (x.meta.view == View::Ground) z[x.meta.id] = x.patches;
  for (const auto& x : s.test.samples) {
    if (x.meta.view != View::Aerial) continue;
    const GeometryBins b = bin_geometry(x.meta.geometry, c.binning());
    const DistortionFactors& f = factors.at({b.alt_bin, b.angle_bin});
    Tensor m = Tensor::identity(c.latent_dim);
    const Tensor uvt = matmul(f.u, transpose(f.v));
    for (std::size_t i = 0; i < c.latent_dim; ++i)
      for (std::size_t j = 0; j < c.latent_dim; ++j) m(i, j) += c.distortion_strength * uvt(i, j);
    const Tensor expect = matmul(z.at(x.meta.id), transpose(m));
    EXPECT_LT(max_abs_diff(x.patches, expect), 1e-12);
  }
}

TEST(DistortionOracle, DeterministicFullRankSharedAxes) {
  const SyntheticConfig c = small(6);
  const auto a = distortion_oracle(c), b = distortion_oracle(c);
  ASSERT_EQ(a.size(), 9u);
  for (const auto& [k, f] : a) {
    EXPECT_EQ(f.u, b.at(k).u);
    EXPECT_EQ(f.v, b.at(k).v);
    EXPECT_EQ(f.u.cols(), c.distortion_rank);
    for (const Tensor* t : {&f.u, &f.v}) {
      const EigenResult e = jacobi_eigen(matmul(transpose(*t), *t));
      for (double ev : e.values) EXPECT_GT(ev, 1e-6);
    }
    for (double ang : principal_angles(f.u, Tensor(f.u))) EXPECT_NEAR(ang, 0.0, 1e-6);
  }
  // Alt part is the leading columns and is shared across angle bins.
  for (std::size_t r = 0; r < c.latent_dim; ++r) EXPECT_EQ(a.at({1, 0}).u(r, 0), a.at({1, 2}).u(r, 0));
}

TEST(Synth, NoDistortionNoNoiseGivesExactDuplicates) {
  SyntheticConfig c = small();
  c.distortion_strength = 0.0;
  c.noise_std = 0.0;
  EXPECT_EQ(raw_a2g(c), 1.0);
  EXPECT_EQ(raw_a2g(c, true), 1.0);
}

TEST(Synth, NoDistortionIsNearPerfect) {
  SyntheticConfig c = small();
  c.distortion_strength = 0.0;
  EXPECT_GT(raw_a2g(c), 0.95);
}

TEST(Synth, CalibratedStrengthDefeatsRawCosine) {
  SyntheticConfig c;
  c.distortion_strength = 2.0;
  c.distortion_rank = 4;
  c.noise_std = 0.1;
  double mean = 0.0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    c.seed = seed;
    mean += raw_a2g(c) / 3.0;
  }
  EXPECT_LT(mean, 0.6);
}

TEST(Synth, RawMapNonIncreasingInStrength) {
  double prev = 2.0;
  for (double s : {0.0, 0.5, 1.0, 2.0}) {
    double mean = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      SyntheticConfig c;
      c.distortion_strength = s;
      c.seed = seed;
      mean += raw_a2g(c, true) / 5.0;
    }
    EXPECT_LE(mean, prev) << "s=" << s;
    prev = mean;
  }
}

TEST(Synth, RejectsInfeasibleConfigs) {
  SyntheticConfig c = small();
  c.distortion_rank = 9;
  EXPECT_THROW(generate(c), ConfigError);
  c = small();
  c.train_fraction = 1.0;
  EXPECT_THROW(generate(c), ConfigError);
  c = small();
  c.holdout_bin = std::make_pair(3, 0);
  EXPECT_THROW(generate(c), ConfigError);
  c = small();
  c.distortion_strength = -1.0;
  EXPECT_THROW(generate(c), ConfigError);
}

TEST(Dataset, SaveLoadRoundTrip) {
  const auto dir = (std::filesystem::temp_directory_path() / "georect_ds_test").string();
  const SyntheticSplit s = generate(small(7));
  save_dataset(dir, "test", s.test);
  const Dataset back = load_dataset(dir, "test");
  ASSERT_EQ(back.size(), s.test.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back.samples[i].patches, s.test.samples[i].patches);
    EXPECT_EQ(meta_to_json(back.samples[i].meta), meta_to_json(s.test.samples[i].meta));
  }
  std::filesystem::remove_all(dir);
}
