// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>

#include "georect/gradcheck.hpp"
#include "georect/geometry.hpp"

using namespace georect;

namespace {

BinningScheme scheme33() { return BinningScheme{}; }

std::vector<GeometryBins> random_bins(std::uint64_t seed, std::size_t n, int cams = 4) {
  Rng rng(seed);
  std::vector<GeometryBins> out(n);
  for (auto& b : out) {
    b.camera_id = static_cast<int>(rng.below(cams));
    b.alt_bin = static_cast<int>(rng.below(3));
    b.angle_bin = static_cast<int>(rng.below(3));
  }
  return out;
}

std::vector<std::tuple<int, int, int>> sorted_triples(const std::vector<GeometryBins>& b) {
  std::vector<std::tuple<int, int, int>> t;
  for (const auto& x : b) t.emplace_back(x.camera_id, x.alt_bin, x.angle_bin);
  std::sort(t.begin(), t.end());
  return t;
}

}  // namespace

TEST(Binning, Boundaries) {
  const auto s = scheme33();
  EXPECT_EQ(bin_geometry({0, 0.0, 0.0}, s).alt_bin, 0);
  EXPECT_EQ(bin_geometry({0, 60.0, 90.0}, s).alt_bin, 2);
  EXPECT_EQ(bin_geometry({0, 60.0, 90.0}, s).angle_bin, 2);
  EXPECT_EQ(bin_geometry({0, 20.0, 30.0}, s).alt_bin, 1);
  EXPECT_EQ(bin_geometry({0, 19.999, 29.999}, s).angle_bin, 0);
  EXPECT_EQ(bin_geometry({0, -5.0, 500.0}, s).alt_bin, 0);
  EXPECT_EQ(bin_geometry({0, -5.0, 500.0}, s).angle_bin, 2);
  EXPECT_EQ(bin_geometry({3, 1.0, 1.0}, s).camera_id, 3);
}

TEST(Binning, RejectsNonFinite) {
  EXPECT_THROW(bin_geometry({0, std::nan(""), 0.0}, scheme33()), InputError);
}

TEST(Binning, ValidatesScheme) {
  BinningScheme s;
  s.n_alt_bins = 0;
  EXPECT_THROW(s.validate(), ConfigError);
  s = BinningScheme{};
  s.alt_max = s.alt_min;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Embedder, LengthAndDeterminism) {
  ParameterStore store;
  Rng rng(1);
  GeometryEmbedder emb(store, "g.", 4, scheme33(), GeometryDims{}, rng);
  const GeometryBins b{1, 2, 0};
  Tensor e1 = embed_geometry(b, emb), e2 = embed_geometry(b, emb);
  EXPECT_EQ(e1.numel(), 48u);
  EXPECT_EQ(e1, e2);
  for (std::size_t k = 0; k < 16; ++k) {
    EXPECT_EQ(e1[k], emb.table_cam().value(1, k));
    EXPECT_EQ(e1[16 + k], emb.table_alt().value(2, k));
    EXPECT_EQ(e1[32 + k], emb.table_angle().value(0, k));
  }
}

TEST(Embedder, OutOfRangeIndex) {
  ParameterStore store;
  Rng rng(1);
  GeometryEmbedder emb(store, "g.", 2, scheme33(), GeometryDims{4, 4, 4}, rng);
  EXPECT_THROW(embed_geometry({2, 0, 0}, emb), IndexError);
  EXPECT_THROW(embed_geometry({0, 3, 0}, emb), IndexError);
  EXPECT_THROW(embed_geometry({0, 0, -1}, emb), IndexError);
}

TEST(Embedder, GradientReachesOnlySelectedRows) {
  ParameterStore store;
  Rng rng(2);
  GeometryEmbedder emb(store, "g.", 3, scheme33(), GeometryDims{3, 2, 4}, rng);
  const GeometryBins b{2, 1, 0};
  LossBuilder loss = [&](Graph& g) { return ag::sum_squares(emb.embed(g, b)); };
  EXPECT_LT(grad_check(loss, store.list()), 1e-6);
  {
    Graph g;
    g.backward(loss(g));
  }
  auto check_rows = [](const Parameter& p, int selected) {
    for (std::size_t r = 0; r < p.value.rows(); ++r)
      for (std::size_t c = 0; c < p.value.cols(); ++c) {
        if (static_cast<int>(r) == selected)
          EXPECT_DOUBLE_EQ(p.grad(r, c), 2.0 * p.value(r, c));
        else
          EXPECT_EQ(p.grad(r, c), 0.0) << p.name << " row " << r;
      }
  };
  check_rows(emb.table_cam(), 2);
  check_rows(emb.table_alt(), 1);
  check_rows(emb.table_angle(), 0);
}

TEST(Embedder, TablesAreUndecayed) {
  ParameterStore store;
  Rng rng(3);
  GeometryEmbedder emb(store, "g.", 2, scheme33(), GeometryDims{}, rng);
  for (const Parameter* p : store.list()) EXPECT_FALSE(p->decay) << p->name;
}

TEST(Corruption, NoneIsIdentity) {
  const auto b = random_bins(1, 30);
  EXPECT_EQ(corrupt(b, {CorruptionKind::None, 9}, scheme33()), b);
}

TEST(Corruption, FlipsStayInRangeAndMoveByOne) {
  for (auto kind : {CorruptionKind::FlipAlt, CorruptionKind::FlipAngle, CorruptionKind::JointFlip}) {
    const auto b = random_bins(2, 200);
    const auto c = corrupt(b, {kind, 5}, scheme33());
    ASSERT_EQ(c.size(), b.size());
    for (std::size_t i = 0; i < b.size(); ++i) {
      EXPECT_EQ(c[i].camera_id, b[i].camera_id);
      EXPECT_GE(c[i].alt_bin, 0);
      EXPECT_LT(c[i].alt_bin, 3);
      EXPECT_GE(c[i].angle_bin, 0);
      EXPECT_LT(c[i].angle_bin, 3);
      EXPECT_LE(std::abs(c[i].alt_bin - b[i].alt_bin), 1);
      EXPECT_LE(std::abs(c[i].angle_bin - b[i].angle_bin), 1);
      if (kind == CorruptionKind::FlipAlt) {
        EXPECT_EQ(c[i].angle_bin, b[i].angle_bin);
      }
      if (kind == CorruptionKind::FlipAngle) {
        EXPECT_EQ(c[i].alt_bin, b[i].alt_bin);
      }
    }
  }
}

TEST(Corruption, FlipAtBoundaryClips) {
  std::vector<GeometryBins> b(64, GeometryBins{0, 0, 2});
  const auto c = corrupt(b, {CorruptionKind::JointFlip, 11}, scheme33());
  bool stayed = false, moved = false;
  for (const auto& x : c) {
    EXPECT_TRUE(x.alt_bin == 0 || x.alt_bin == 1);
    EXPECT_TRUE(x.angle_bin == 2 || x.angle_bin == 1);
    stayed |= x.alt_bin == 0;
    moved |= x.alt_bin == 1;
  }
  EXPECT_TRUE(stayed && moved);
}

TEST(Corruption, BiasedShiftSaturates) {
  std::vector<GeometryBins> b{{0, 0, 1}, {1, 1, 1}, {2, 2, 0}};
  const auto c = corrupt(b, {CorruptionKind::BiasedAltShift, 0}, scheme33());
  EXPECT_EQ(c[0].alt_bin, 1);
  EXPECT_EQ(c[1].alt_bin, 2);
  EXPECT_EQ(c[2].alt_bin, 2);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(c[i].angle_bin, b[i].angle_bin);
}

TEST(Corruption, StaleTakesPreviousWithWrap) {
  std::vector<GeometryBins> b{{0, 0, 1}, {1, 1, 2}, {2, 2, 0}};
  const auto c = corrupt(b, {CorruptionKind::Stale, 0}, scheme33());
  EXPECT_EQ(c[0], (GeometryBins{0, 2, 0}));
  EXPECT_EQ(c[1], (GeometryBins{1, 0, 1}));
  EXPECT_EQ(c[2], (GeometryBins{2, 1, 2}));
}

TEST(Corruption, WrongPreservesMultisetOfTriples) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto b = random_bins(seed, 100);
    const auto c = corrupt(b, {CorruptionKind::Wrong, seed}, scheme33());
    EXPECT_EQ(sorted_triples(c), sorted_triples(b)) << seed;
    for (std::size_t i = 0; i < b.size(); ++i) EXPECT_EQ(c[i].camera_id, b[i].camera_id);
  }
}

TEST(Corruption, WrongActuallyPermutes) {
  const auto b = random_bins(4, 100);
  const auto c = corrupt(b, {CorruptionKind::Wrong, 4}, scheme33());
  std::size_t changed = 0;
  for (std::size_t i = 0; i < b.size(); ++i) changed += !(c[i] == b[i]);
  EXPECT_GT(changed, 30u);
}

TEST(Corruption, Deterministic) {
  const auto b = random_bins(5, 50);
  for (auto kind : all_corruptions()) {
    EXPECT_EQ(corrupt(b, {kind, 77}, scheme33()), corrupt(b, {kind, 77}, scheme33())) << corruption_name(kind);
  }
  EXPECT_NE(corrupt(b, {CorruptionKind::FlipAlt, 1}, scheme33()), corrupt(b, {CorruptionKind::FlipAlt, 2}, scheme33()));
}

TEST(Corruption, NamesRoundTripAndUnknownRejected) {
  for (auto kind : all_corruptions()) EXPECT_EQ(parse_corruption(corruption_name(kind)), kind);
  EXPECT_THROW(parse_corruption("sideways"), ConfigError);
}

TEST(Corruption, RejectsBinsOutsideScheme) {
  EXPECT_THROW(corrupt({{0, 3, 0}}, {CorruptionKind::None, 0}, scheme33()), IndexError);
}

TEST(Metadata, JsonlRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "georect_meta_test";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "meta.jsonl").string();
  std::vector<SampleMeta> metas;
  Rng rng(8);
  for (int i = 0; i < 10; ++i) {
    SampleMeta m;
    m.id = i * 3;
    m.view = i % 2 ? View::Aerial : View::Ground;
    m.geometry = {i % 4, rng.uniform(0.0, 60.0), rng.uniform(0.0, 90.0)};
    metas.push_back(m);
  }
  write_metadata(path, metas);
  const auto back = read_metadata(path);
  ASSERT_EQ(back.size(), metas.size());
  for (std::size_t i = 0; i < metas.size(); ++i) {
    EXPECT_EQ(back[i].id, metas[i].id);
    EXPECT_EQ(back[i].view, metas[i].view);
    EXPECT_EQ(back[i].geometry.camera_id, metas[i].geometry.camera_id);
    EXPECT_EQ(back[i].geometry.altitude_m, metas[i].geometry.altitude_m);
    EXPECT_EQ(back[i].geometry.angle_deg, metas[i].geometry.angle_deg);
  }
  std::filesystem::remove_all(dir);
}

TEST(Metadata, RejectsMalformedRecords) {
  EXPECT_THROW(meta_from_json(nlohmann::json{{"id", 1}}), InputError);
  EXPECT_THROW(meta_from_json(nlohmann::json::parse(R"({"id":1,"camera":0,"altitude_m":1,"angle_deg":2,"view":"X"})")),
               InputError);
}
