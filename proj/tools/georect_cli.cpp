// SPDX-License-Identifier: Apache-2.0
// georect: train, evaluate, sweep, ablate, corrupt, spectrum, synth.
#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "georect/harness.hpp"

using namespace georect;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> rank;
  std::optional<std::string> protocol;
  std::optional<std::string> corruption;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "run configuration (JSON)")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "seed for the run and the synthetic data");
  cmd->add_option("--rank", c.rank, "GIQT rank");
  cmd->add_option("--protocol", c.protocol, "a2g, g2a, a2a, ...");
  cmd->add_option("--corruption", c.corruption, "none, flip_alt, flip_angle, joint_flip, biased_alt_shift, stale, wrong");
  cmd->add_option("--out", c.out, "output directory");
}

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_run_config(c.config);
  if (c.seed) {
    cfg.seed = *c.seed;
    cfg.synth.seed = *c.seed;
  }
  if (c.rank) cfg.rank = *c.rank;
  if (c.protocol) cfg.protocols = {*c.protocol};
  if (c.corruption) cfg.corruption = *c.corruption;
  if (!c.out.empty()) cfg.out_dir = c.out;
  cfg.validate();
  return cfg;
}

void emit(const Common& c, const std::string& file, const std::string& text) {
  if (c.out.empty()) {
    std::cout << text;
    return;
  }
  fs::create_directories(c.out);
  std::ofstream(fs::path(c.out) / file, std::ios::binary) << text;
  std::cout << "wrote " << (fs::path(c.out) / file).string() << '\n';
}

void print_rankings(const RunReport& rep) {
  for (const auto& [name, r] : rep.rankings)
    std::printf("%s  R1 %.4f  R5 %.4f  R10 %.4f  mAP %.4f  (%zu queries)\n", name.c_str(), r.cmc.at(1), r.cmc.at(5),
                r.cmc.at(10), r.map, r.valid_queries);
}

Model model_for(const RunConfig& cfg, const std::string& checkpoint, PreparedData& data) {
  data = prepare_data(cfg);
  if (!checkpoint.empty()) return Model::load(checkpoint);
  RunConfig quiet = cfg;
  quiet.out_dir.clear();
  return std::move(run(quiet).model);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Geometry-conditioned similarity rectification for cross-view re-identification"};
  app.require_subcommand(1);

  Common train_o, eval_o, sweep_o, ablate_o, corrupt_o, spec_o, synth_o;
  std::string checkpoint, axis;
  std::vector<double> values;

  auto* train = app.add_subcommand("train", "train and evaluate one configuration");
  add_common(train, train_o);

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the configured test split");
  add_common(eval, eval_o);
  eval->add_option("--checkpoint", checkpoint, "checkpoint directory")->required()->check(CLI::ExistingDirectory);

  auto* sweep_cmd = app.add_subcommand("sweep", "one run per value along an axis");
  add_common(sweep_cmd, sweep_o);
  sweep_cmd->add_option("--axis", axis, "rank, prompt_len, prompt_alpha, hidden_dim")->required();
  sweep_cmd->add_option("--values", values, "values along the axis")->required()->delimiter(',');

  auto* ablate_cmd = app.add_subcommand("ablate", "baseline, +gcpg, +giqt, +both");
  add_common(ablate_cmd, ablate_o);

  auto* corrupt_cmd = app.add_subcommand("corrupt", "evaluate under every geometry corruption");
  add_common(corrupt_cmd, corrupt_o);
  corrupt_cmd->add_option("--checkpoint", checkpoint, "checkpoint directory (trains when absent)");

  auto* spec_cmd = app.add_subcommand("spectrum", "aerial/ground covariance-difference spectrum");
  add_common(spec_cmd, spec_o);
  spec_cmd->add_option("--checkpoint", checkpoint, "checkpoint directory (trains when absent)");

  auto* synth_cmd = app.add_subcommand("synth", "write the synthetic train/test split");
  add_common(synth_cmd, synth_o);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      const RunConfig cfg = resolve(train_o);
      const TrainedRun r = run(cfg);
      print_rankings(r.report);
      std::printf("config %s, %.1f s\n", r.report.config_hash.c_str(), r.report.wall_seconds);
    } else if (*eval) {
      const RunConfig cfg = resolve(eval_o);
      const Model model = Model::load(checkpoint);
      const PreparedData data = prepare_data(cfg);
      const CorruptionSpec cs{parse_corruption(cfg.corruption), cfg.corruption_seed};
      nlohmann::json j = nlohmann::json::object();
      for (const auto& name : cfg.protocols) {
        const EvalResult e = evaluate(model, data.test, protocol_of(cfg, name), cs, train_identities(data));
        std::printf("%s  R1 %.4f  mAP %.4f\n", name.c_str(), e.ranking.cmc.at(1), e.ranking.map);
        j[name] = to_json(e.ranking);
      }
      emit(eval_o, "eval.json", j.dump(2) + "\n");
    } else if (*sweep_cmd) {
      const RunConfig cfg = resolve(sweep_o);
      std::ostringstream os;
      write_table_csv(os, axis, sweep(cfg, parse_sweep_axis(axis), values));
      emit(sweep_o, "sweep_" + axis + ".csv", os.str());
    } else if (*ablate_cmd) {
      std::ostringstream os;
      write_table_csv(os, "variant", ablate(resolve(ablate_o)));
      emit(ablate_o, "ablation.csv", os.str());
    } else if (*corrupt_cmd) {
      const RunConfig cfg = resolve(corrupt_o);
      PreparedData data;
      const Model model = model_for(cfg, checkpoint, data);
      std::ostringstream os;
      write_table_csv(os, "corruption",
                      corruption_sweep(model, data.test, protocol_of(cfg, cfg.protocols.front()), all_corruptions(),
                                       cfg.corruption_seed));
      emit(corrupt_o, "corruption.csv", os.str());
    } else if (*spec_cmd) {
      const RunConfig cfg = resolve(spec_o);
      PreparedData data;
      const Model model = model_for(cfg, checkpoint, data);
      const SpectrumReport s = view_spectrum(embed_dataset(model, data.test, true_bins(data.test, model.config().binning)));
      std::ostringstream csv;
      write_spectrum_csv(csv, s);
      emit(spec_o, "spectrum.csv", csv.str());
      if (!spec_o.out.empty()) emit(spec_o, "spectrum.json", to_json(s).dump(2) + "\n");
    } else if (*synth_cmd) {
      const RunConfig cfg = resolve(synth_o);
      if (synth_o.out.empty()) throw ConfigError("synth needs --out");
      const SyntheticSplit s = generate(cfg.synth);
      save_dataset(synth_o.out, cfg.train_name, s.train);
      save_dataset(synth_o.out, cfg.test_name, s.test);
      std::printf("wrote %zu train and %zu test samples to %s\n", s.train.size(), s.test.size(), synth_o.out.c_str());
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
