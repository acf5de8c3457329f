// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "georect/harness.hpp"

using namespace georect;
namespace fs = std::filesystem;

namespace {

RunConfig tiny(std::uint64_t seed = 1) {
  RunConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.rank = 2;
  c.prompt_len = 4;
  c.predictor_hidden = 8;
  c.encoder_blocks = 1;
  c.ffn_mult = 2;
  c.geo_dims = {4, 4, 4};
  c.synth.n_ids = 12;
  c.synth.samples_per_id_per_view = 2;
  c.synth.seed = seed;
  c.ids_per_batch = 2;
  c.instances_per_id = 2;
  c.batch_size = 4;
  c.epochs = 2;
  c.iters_per_epoch = 3;
  c.warmup_iters = 1;
  c.seed = seed;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("georect_harness_" + name);
  fs::remove_all(p);
  return p;
}

std::vector<Tensor> snapshot(Model& m) {
  std::vector<Tensor> out;
  for (const Parameter* p : m.parameters().list()) out.push_back(p->value);
  return out;
}

}  // namespace

TEST(RunConfig, JsonRoundTripAndHash) {
  RunConfig c = tiny();
  c.synth.holdout_bin = std::make_pair(1, 2);
  c.protocols = {"a2g", "g2a"};
  c.corruption = "flip_alt";
  const nlohmann::json j = to_json(c);
  const RunConfig back = run_config_from_json(j);
  EXPECT_EQ(to_json(back), j);
  EXPECT_EQ(config_hash(back), config_hash(c));
  EXPECT_EQ(config_hash(c).size(), 40u);
  RunConfig other = c;
  other.seed = 2;
  EXPECT_NE(config_hash(other), config_hash(c));
}

TEST(RunConfig, ContentHashIsGitBlobHash) {
  EXPECT_EQ(content_hash(""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
  EXPECT_EQ(content_hash("hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
}

TEST(RunConfig, FileLoadKeepsDefaultsForMissingKeys) {
  const fs::path p = scratch("cfg.json");
  std::ofstream(p) << R"({"seed": 7, "model": {"rank": 3}, "sampling": {"ids_per_batch": 3}})";
  const RunConfig c = load_run_config(p.string());
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.rank, 3u);
  EXPECT_EQ(c.d_model, RunConfig{}.d_model);
  EXPECT_EQ(c.batch_size, 3 * c.instances_per_id);
  fs::remove(p);
  EXPECT_THROW(load_run_config(p.string()), ConfigError);
}

TEST(RunConfig, Validation) {
  RunConfig c = tiny();
  c.batch_size = 5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny();
  c.dataset_dir = scratch("missing").string();
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny();
  c.protocols = {"x2y"};
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(run_config_from_json(nlohmann::json{{"model", {{"rank", "eight"}}}}), ConfigError);
}

TEST(PKSampler, BatchesArePIdsTimesKInstances) {
  const PreparedData d = prepare_data(tiny());
  PKSampler a(d.train, 3, 2, Rng(4)), b(d.train, 3, 2, Rng(4));
  std::set<int> seen;
  for (int step = 0; step < 2; ++step) {
    const auto batch = a.next();
    EXPECT_EQ(batch, b.next());
    ASSERT_EQ(batch.size(), 6u);
    for (std::size_t p = 0; p < 3; ++p) {
      const int id = d.train.samples[batch[2 * p]].meta.id;
      EXPECT_EQ(d.train.samples[batch[2 * p + 1]].meta.id, id);
      EXPECT_NE(batch[2 * p], batch[2 * p + 1]);
      seen.insert(id);
    }
  }
  EXPECT_EQ(seen.size(), a.identity_count());
  EXPECT_THROW(PKSampler(d.train, 7, 2, Rng(0)), ConfigError);
}

TEST(Train, ZeroLearningRateLeavesParametersBitIdentical) {
  RunConfig c = tiny();
  c.epochs = 1;
  c.iters_per_epoch = 1;
  c.warmup_iters = 1;
  const PreparedData d = prepare_data(c);
  Model m(model_config(c, d));
  const auto before = snapshot(m);
  const TrainLog log = train_model(m, d, c);
  ASSERT_EQ(log.lrs, std::vector<double>{0.0});
  const auto after = snapshot(m);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before[i], after[i]);
}

TEST(Train, StepZeroLossInAnalyticBand) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const RunConfig c = tiny(seed);
    const PreparedData d = prepare_data(c);
    Model m(model_config(c, d));
    PKSampler s(d.train, c.ids_per_batch, c.instances_per_id, Rng(seed));
    const LossReport r = batch_loss(m, d.train, s.next(), d.label_of, c, false);
    const double ln_c = std::log(static_cast<double>(d.label_of.size()));
    EXPECT_NEAR(r.id_global, ln_c, 0.05) << seed;
    EXPECT_NEAR(r.id_local, ln_c, 0.05) << seed;
    EXPECT_NEAR(r.view, std::log(2.0), 0.05) << seed;
    EXPECT_GE(r.tri_global, 0.0);
    EXPECT_GE(r.tri_local, 0.0);
    EXPECT_GE(r.orth, 0.0);
    EXPECT_EQ(r.geo, 0.0);
    const double expect = c.weights.w_global * (r.id_global + r.tri_global) + c.weights.w_local * (r.id_local + r.tri_local) +
                          c.weights.w_view_orth * (r.view + r.orth);
    EXPECT_NEAR(r.total, expect, 1e-12) << seed;
    EXPECT_GT(r.total, (c.weights.w_global + c.weights.w_local) * ln_c) << seed;
  }
}

TEST(Train, AbortsOnNonFiniteLossAtFirstStep) {
  const RunConfig c = tiny();
  const PreparedData d = prepare_data(c);
  Model m(model_config(c, d));
  m.parameters().list().back()->value.values()[0] = std::nan("");
  try {
    train_model(m, d, c);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("step 0"), std::string::npos) << msg;
    EXPECT_NE(msg.find("id_global"), std::string::npos) << msg;
  }
}

TEST(Train, DeskDefaultUnderTenMinutes) {
  const RunConfig c;
  const PreparedData d = prepare_data(c);
  ASSERT_EQ(d.label_of.size(), 50u);
  ASSERT_EQ(c.epochs, 20u);
  const auto t0 = std::chrono::steady_clock::now();
  const TrainedRun r = run(c);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_LT(secs, 600.0);
  EXPECT_TRUE(std::isfinite(r.report.log.steps.back().total));
}

TEST(Run, ReportsAreByteIdenticalAcrossRuns) {
  RunConfig c = tiny();
  const fs::path a = scratch("a"), b = scratch("b");
  c.out_dir = a.string();
  run(c);
  c.out_dir = b.string();
  run(c);
  for (const char* f : {"report.json", "loss_log.jsonl", "cmc_a2g.csv", "bins_a2g.csv"})
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  const std::string manifest = slurp(a / "manifest.json");
  for (const char* f : {"config.json", "report.json", "timing.json", "checkpoints/epoch_2/manifest.json"})
    EXPECT_NE(manifest.find(f), std::string::npos) << f;
  const auto rep = nlohmann::json::parse(slurp(a / "report.json"));
  EXPECT_EQ(rep.at("loss_curve").size(), 6u);
  EXPECT_FALSE(rep.at("train_id_leak").get<bool>());
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Run, CheckpointRoundTripPreservesEvaluation) {
  RunConfig c = tiny();
  const fs::path out = scratch("ckpt");
  c.out_dir = out.string();
  TrainedRun r = run(c);
  const Model back = Model::load((out / "checkpoints" / "epoch_2").string());
  const ProtocolSpec proto = protocol_of(c, "a2g");
  EXPECT_EQ(to_json(evaluate(back, r.data.test, proto).ranking).dump(),
            to_json(r.report.rankings.at("a2g")).dump());
  const Model first = Model::load((out / "checkpoints" / "epoch_1").string());
  EXPECT_NE(snapshot(const_cast<Model&>(first)), snapshot(const_cast<Model&>(back)));
  fs::remove_all(out);
}

TEST(Evaluate, RepeatableAndFlagsTrainIdentities) {
  const RunConfig c = tiny();
  const PreparedData d = prepare_data(c);
  const Model m(model_config(c, d));
  const ProtocolSpec proto = protocol_of(c, "a2g");
  const EvalResult e1 = evaluate(m, d.test, proto), e2 = evaluate(m, d.test, proto);
  EXPECT_EQ(to_json(e1.ranking).dump(), to_json(e2.ranking).dump());
  EXPECT_TRUE(evaluate(m, d.train, proto, {}, train_identities(d)).train_id_leak);
  EXPECT_FALSE(evaluate(m, d.test, proto, {}, train_identities(d)).train_id_leak);
  for (int k : {1, 5, 10}) EXPECT_EQ(e1.ranking.cmc.count(k), 1u);
}

TEST(Evaluate, DimensionMismatchIsConfigError) {
  const RunConfig c = tiny();
  const PreparedData d = prepare_data(c);
  RunConfig wide = c;
  wide.synth.latent_dim = 6;
  wide.synth.distortion_rank = 2;
  const PreparedData other = prepare_data(wide);
  const Model m(model_config(c, d));
  EXPECT_THROW(evaluate(m, other.test, protocol_of(c, "a2g")), ConfigError);
}

TEST(Sweep, SingleValueEqualsPlainRun) {
  RunConfig c = tiny();
  c.epochs = 1;
  const auto rows = sweep(c, SweepAxis::Rank, {3});
  c.rank = 3;
  const TrainedRun r = run(c);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].label, "3");
  EXPECT_EQ(rows[0].rank1, r.report.rankings.at("a2g").cmc.at(1));
  EXPECT_EQ(rows[0].map, r.report.rankings.at("a2g").map);
  EXPECT_THROW(with_axis(c, SweepAxis::PromptLen, 2.5), ConfigError);
  EXPECT_EQ(with_axis(c, SweepAxis::HiddenDim, 32).d_model, 32u);
  EXPECT_THROW(parse_sweep_axis("depth"), ConfigError);
}

TEST(Ablate, FourRowsAndCsv) {
  RunConfig c = tiny();
  c.epochs = 1;
  c.iters_per_epoch = 1;
  const auto rows = ablate(c);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0].label, "baseline");
  EXPECT_EQ(rows[3].label, "+both");
  std::ostringstream os;
  write_table_csv(os, "variant", {{"x", 0.5, 0.25}});
  EXPECT_EQ(os.str(), "variant,rank1,map\nx,0.5,0.25\n");
}

TEST(Corruption, BaselineIsInsensitiveToGeometry) {
  RunConfig c = tiny();
  c.use_gcpg = false;
  c.use_giqt = false;
  const PreparedData d = prepare_data(c);
  const Model m(model_config(c, d));
  const auto rows = corruption_sweep(m, d.test, protocol_of(c, "a2g"),
                                     {CorruptionKind::None, CorruptionKind::FlipAlt, CorruptionKind::Wrong}, 3);
  ASSERT_EQ(rows.size(), 3u);
  for (const auto& r : rows) {
    EXPECT_EQ(r.rank1, rows[0].rank1);
    EXPECT_EQ(r.map, rows[0].map);
  }
}

TEST(RawEmbeddings, MeanPatchPerSample) {
  const RunConfig c = tiny();
  const PreparedData d = prepare_data(c);
  const EmbeddingSet e = raw_embeddings(d.test, d.binning);
  ASSERT_EQ(e.size(), d.test.size());
  const Tensor& x = d.test.samples[3].patches;
  for (std::size_t k = 0; k < x.cols(); ++k) {
    double m = 0.0;
    for (std::size_t p = 0; p < x.rows(); ++p) m += x(p, k);
    EXPECT_NEAR(e.features(3, k), m / static_cast<double>(x.rows()), 1e-15);
  }
}

TEST(ViewSpectrum, ReportsAllSingularValues) {
  const RunConfig c = tiny();
  const PreparedData d = prepare_data(c);
  const Model m(model_config(c, d));
  const SpectrumReport s = view_spectrum(embed_dataset(m, d.test, true_bins(d.test, d.binning)));
  EXPECT_EQ(s.singular_values.size(), 2 * c.d_model);
  EXPECT_NEAR(s.cumulative_energy.back(), 1.0, 1e-12);
  EXPECT_TRUE(to_json(s).at("top_k_energy").contains("top8"));
}
