// SPDX-License-Identifier: Apache-2.0
/**
 * @file   harness.hpp
 * @brief  Experiment layer: run configuration, P x K batch sampling, the
 *         training loop, evaluation with optional geometry corruption,
 *         sensitivity sweeps, component ablation, and report emission.
 *
 * Reports are written under an output directory:
 *
 *   config.json      resolved configuration
 *   loss_log.jsonl   one LossReport per step
 *   report.json      metrics and config hash (no wall-clock)
 *   timing.json      wall-clock seconds
 *   checkpoints/epoch_<n>/
 *   manifest.json    list of the files above
 */
#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>
#include <openssl/evp.h>

#include "georect/analysis.hpp"
#include "georect/dataset.hpp"
#include "georect/eval.hpp"
#include "georect/losses.hpp"
#include "georect/model.hpp"
#include "georect/optim.hpp"
#include "georect/synth.hpp"

namespace georect {

struct RunConfig {
  // model
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t rank = 8;
  std::size_t prompt_len = 32;
  double prompt_alpha = 1.0;
  std::size_t predictor_hidden = 64;
  std::size_t encoder_blocks = 2;
  std::size_t ffn_mult = 4;
  bool gating = true;
  bool use_gcpg = true;
  bool use_giqt = true;
  GeometryDims geo_dims;
  // objective
  LossWeights weights;
  double triplet_margin = 0.3;
  double label_smoothing = 0.0;
  bool orth_literal = true;
  // optimizer
  double base_lr = 0.008;
  double min_lr = 1.6e-6;
  std::size_t warmup_iters = 100;
  double weight_decay = 1e-4;
  double clip_norm = 5.0;
  double momentum = 0.0;
  // sampling
  std::size_t ids_per_batch = 4;
  std::size_t instances_per_id = 4;
  std::size_t batch_size = 16;
  std::size_t epochs = 20;
  /// 0 derives the count from the training-set size.
  std::size_t iters_per_epoch = 0;
  std::uint64_t seed = 0;
  // data
  std::string dataset_dir;
  std::string train_name = "train";
  std::string test_name = "test";
  SyntheticConfig synth;
  BinningScheme binning;
  // evaluation
  std::vector<std::string> protocols{"a2g", "g2a"};
  bool exclude_same_camera = true;
  std::string corruption = "none";
  std::uint64_t corruption_seed = 0;
  // output
  std::string out_dir;
  bool save_checkpoints = true;
  bool log_steps = true;

  void validate() const {
    weights.validate();
    if (ids_per_batch * instances_per_id != batch_size)
      throw ConfigError("batch_size " + std::to_string(batch_size) + " != ids_per_batch * instances_per_id (" +
                        std::to_string(ids_per_batch) + " x " + std::to_string(instances_per_id) + ")");
    if (ids_per_batch < 2) throw ConfigError("ids_per_batch must be >= 2 for triplet mining");
    if (instances_per_id < 1) throw ConfigError("instances_per_id must be >= 1");
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (base_lr < 0 || min_lr < 0 || min_lr > base_lr) throw ConfigError("need 0 <= min_lr <= base_lr");
    if (weight_decay < 0 || clip_norm < 0 || triplet_margin < 0) throw ConfigError("negative optimizer setting");
    if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must lie in [0, 1)");
    if (label_smoothing < 0 || label_smoothing >= 1) throw ConfigError("label_smoothing must lie in [0, 1)");
    GiqtConfig{d_model, n_heads, rank, gating, predictor_hidden}.validate();
    if (!dataset_dir.empty()) {
      namespace fs = std::filesystem;
      for (const auto& n : {train_name, test_name})
        for (const char* ext : {".tns", ".jsonl"})
          if (!fs::exists(fs::path(dataset_dir) / (n + ext)))
            throw ConfigError("dataset file missing: " + (fs::path(dataset_dir) / (n + ext)).string());
    } else {
      synth.validate();
    }
    for (const auto& p : protocols) parse_protocol(p);
    parse_corruption(corruption);
  }
};

inline nlohmann::json to_json(const SyntheticConfig& s) {
  nlohmann::json j{{"n_ids", s.n_ids},
                   {"samples_per_id_per_view", s.samples_per_id_per_view},
                   {"latent_dim", s.latent_dim},
                   {"patch_count", s.patch_count},
                   {"distortion_rank", s.distortion_rank},
                   {"distortion_strength", s.distortion_strength},
                   {"noise_std", s.noise_std},
                   {"n_alt_bins", s.n_alt_bins},
                   {"n_angle_bins", s.n_angle_bins},
                   {"n_cams", s.n_cams},
                   {"train_fraction", s.train_fraction},
                   {"seed", s.seed}};
  j["holdout_bin"] = s.holdout_bin ? nlohmann::json{s.holdout_bin->first, s.holdout_bin->second} : nlohmann::json();
  return j;
}

inline nlohmann::json to_json(const RunConfig& c) {
  return nlohmann::json{
      {"model",
       {{"d_model", c.d_model},
        {"n_heads", c.n_heads},
        {"rank", c.rank},
        {"prompt_len", c.prompt_len},
        {"prompt_alpha", c.prompt_alpha},
        {"predictor_hidden", c.predictor_hidden},
        {"encoder_blocks", c.encoder_blocks},
        {"ffn_mult", c.ffn_mult},
        {"gating", c.gating},
        {"use_gcpg", c.use_gcpg},
        {"use_giqt", c.use_giqt},
        {"d_cam", c.geo_dims.d_cam},
        {"d_alt", c.geo_dims.d_alt},
        {"d_angle", c.geo_dims.d_angle}}},
      {"loss",
       {{"w_global", c.weights.w_global},
        {"w_local", c.weights.w_local},
        {"w_view_orth", c.weights.w_view_orth},
        {"w_geo", c.weights.w_geo},
        {"triplet_margin", c.triplet_margin},
        {"label_smoothing", c.label_smoothing},
        {"orth_literal", c.orth_literal}}},
      {"optim",
       {{"base_lr", c.base_lr},
        {"min_lr", c.min_lr},
        {"warmup_iters", c.warmup_iters},
        {"weight_decay", c.weight_decay},
        {"clip_norm", c.clip_norm},
        {"momentum", c.momentum}}},
      {"sampling",
       {{"ids_per_batch", c.ids_per_batch},
        {"instances_per_id", c.instances_per_id},
        {"batch_size", c.batch_size},
        {"epochs", c.epochs},
        {"iters_per_epoch", c.iters_per_epoch}}},
      {"seed", c.seed},
      {"data",
       {{"dataset_dir", c.dataset_dir},
        {"train_name", c.train_name},
        {"test_name", c.test_name},
        {"binning",
         {{"n_alt_bins", c.binning.n_alt_bins},
          {"n_angle_bins", c.binning.n_angle_bins},
          {"alt_range", {c.binning.alt_min, c.binning.alt_max}},
          {"angle_range", {c.binning.angle_min, c.binning.angle_max}}}},
        {"synthetic", to_json(c.synth)}}},
      {"eval",
       {{"protocols", c.protocols},
        {"exclude_same_camera", c.exclude_same_camera},
        {"corruption", c.corruption},
        {"corruption_seed", c.corruption_seed}}},
      {"output", {{"out_dir", c.out_dir}, {"save_checkpoints", c.save_checkpoints}, {"log_steps", c.log_steps}}}};
}

namespace detail {

template <class T>
void read_key(const nlohmann::json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

}  // namespace detail

/// Missing keys keep their defaults. Unknown sections are ignored.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
  using detail::read_key;
  RunConfig c;
  try {
    if (j.contains("model")) {
      const auto& m = j["model"];
      read_key(m, "d_model", c.d_model);
      read_key(m, "n_heads", c.n_heads);
      read_key(m, "rank", c.rank);
      read_key(m, "prompt_len", c.prompt_len);
      read_key(m, "prompt_alpha", c.prompt_alpha);
      read_key(m, "predictor_hidden", c.predictor_hidden);
      read_key(m, "encoder_blocks", c.encoder_blocks);
      read_key(m, "ffn_mult", c.ffn_mult);
      read_key(m, "gating", c.gating);
      read_key(m, "use_gcpg", c.use_gcpg);
      read_key(m, "use_giqt", c.use_giqt);
      read_key(m, "d_cam", c.geo_dims.d_cam);
      read_key(m, "d_alt", c.geo_dims.d_alt);
      read_key(m, "d_angle", c.geo_dims.d_angle);
    }
    if (j.contains("loss")) {
      const auto& l = j["loss"];
      read_key(l, "w_global", c.weights.w_global);
      read_key(l, "w_local", c.weights.w_local);
      read_key(l, "w_view_orth", c.weights.w_view_orth);
      read_key(l, "w_geo", c.weights.w_geo);
      read_key(l, "triplet_margin", c.triplet_margin);
      read_key(l, "label_smoothing", c.label_smoothing);
      read_key(l, "orth_literal", c.orth_literal);
    }
    if (j.contains("optim")) {
      const auto& o = j["optim"];
      read_key(o, "base_lr", c.base_lr);
      read_key(o, "min_lr", c.min_lr);
      read_key(o, "warmup_iters", c.warmup_iters);
      read_key(o, "weight_decay", c.weight_decay);
      read_key(o, "clip_norm", c.clip_norm);
      read_key(o, "momentum", c.momentum);
    }
    if (j.contains("sampling")) {
      const auto& s = j["sampling"];
      read_key(s, "ids_per_batch", c.ids_per_batch);
      read_key(s, "instances_per_id", c.instances_per_id);
      c.batch_size = c.ids_per_batch * c.instances_per_id;
      read_key(s, "batch_size", c.batch_size);
      read_key(s, "epochs", c.epochs);
      read_key(s, "iters_per_epoch", c.iters_per_epoch);
    }
    read_key(j, "seed", c.seed);
    if (j.contains("data")) {
      const auto& d = j["data"];
      read_key(d, "dataset_dir", c.dataset_dir);
      read_key(d, "train_name", c.train_name);
      read_key(d, "test_name", c.test_name);
      if (d.contains("binning")) {
        const auto& b = d["binning"];
        read_key(b, "n_alt_bins", c.binning.n_alt_bins);
        read_key(b, "n_angle_bins", c.binning.n_angle_bins);
        if (b.contains("alt_range")) {
          c.binning.alt_min = b["alt_range"].at(0).get<double>();
          c.binning.alt_max = b["alt_range"].at(1).get<double>();
        }
        if (b.contains("angle_range")) {
          c.binning.angle_min = b["angle_range"].at(0).get<double>();
          c.binning.angle_max = b["angle_range"].at(1).get<double>();
        }
      }
      if (d.contains("synthetic")) {
        const auto& s = d["synthetic"];
        auto& y = c.synth;
        read_key(s, "n_ids", y.n_ids);
        read_key(s, "samples_per_id_per_view", y.samples_per_id_per_view);
        read_key(s, "latent_dim", y.latent_dim);
        read_key(s, "patch_count", y.patch_count);
        read_key(s, "distortion_rank", y.distortion_rank);
        read_key(s, "distortion_strength", y.distortion_strength);
        read_key(s, "noise_std", y.noise_std);
        read_key(s, "n_alt_bins", y.n_alt_bins);
        read_key(s, "n_angle_bins", y.n_angle_bins);
        read_key(s, "n_cams", y.n_cams);
        read_key(s, "train_fraction", y.train_fraction);
        read_key(s, "seed", y.seed);
        if (s.contains("holdout_bin") && !s["holdout_bin"].is_null())
          y.holdout_bin = std::make_pair(s["holdout_bin"].at(0).get<int>(), s["holdout_bin"].at(1).get<int>());
      }
    }
    if (j.contains("eval")) {
      const auto& e = j["eval"];
      read_key(e, "protocols", c.protocols);
      read_key(e, "exclude_same_camera", c.exclude_same_camera);
      read_key(e, "corruption", c.corruption);
      read_key(e, "corruption_seed", c.corruption_seed);
    }
    if (j.contains("output")) {
      const auto& o = j["output"];
      read_key(o, "out_dir", c.out_dir);
      read_key(o, "save_checkpoints", c.save_checkpoints);
      read_key(o, "log_steps", c.log_steps);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path + ": " + e.what());
  }
  return run_config_from_json(j);
}

/// Git-style blob hash: SHA-1 over "blob <size>\0<content>".
inline std::string content_hash(const std::string& content) {
  const std::string blob = "blob " + std::to_string(content.size()) + '\0' + content;
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(blob.data(), blob.size(), md, &len, EVP_sha1(), nullptr) != 1)
    throw Error("content_hash: digest failed");
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", md[i]);
    hex += buf;
  }
  return hex;
}

/// Experiment-defining part of the config: everything except the output section.
inline nlohmann::json experiment_json(const RunConfig& c) {
  nlohmann::json j = to_json(c);
  j.erase("output");
  return j;
}

inline std::string config_hash(const RunConfig& c) { return content_hash(experiment_json(c).dump()); }

// ---------------------------------------------------------------------------
// Data

struct PreparedData {
  Dataset train, test;
  BinningScheme binning;
  int n_cams = 1;
  std::size_t n_views = 2;
  /// Dataset identity -> contiguous classifier index, training ids only.
  std::map<int, int> label_of;
};

inline PreparedData prepare_data(const RunConfig& cfg) {
  PreparedData d;
  if (cfg.dataset_dir.empty()) {
    SyntheticSplit s = generate(cfg.synth);
    d.train = std::move(s.train);
    d.test = std::move(s.test);
    d.binning = cfg.synth.binning();
  } else {
    d.train = load_dataset(cfg.dataset_dir, cfg.train_name);
    d.test = load_dataset(cfg.dataset_dir, cfg.test_name);
    d.binning = cfg.binning;
  }
  if (d.train.empty() || d.test.empty()) throw InputError("empty train or test split");
  if (d.train.d_in() != d.test.d_in()) throw ConfigError("train and test patch widths differ");
  int max_cam = 0;
  bool wearable = false;
  for (const Dataset* ds : {&d.train, &d.test})
    for (const auto& s : ds->samples) {
      max_cam = std::max(max_cam, s.meta.geometry.camera_id);
      wearable = wearable || s.meta.view == View::Wearable;
    }
  d.n_cams = max_cam + 1;
  d.n_views = wearable ? 3 : 2;
  for (const auto& s : d.train.samples) d.label_of.emplace(s.meta.id, 0);
  int next = 0;
  for (auto& [id, label] : d.label_of) label = next++;
  return d;
}

inline ModelConfig model_config(const RunConfig& cfg, const PreparedData& data) {
  ModelConfig m;
  m.d_in = data.train.d_in();
  m.d_model = cfg.d_model;
  m.n_heads = cfg.n_heads;
  m.rank = cfg.rank;
  m.gating = cfg.gating;
  m.predictor_hidden = cfg.predictor_hidden;
  m.prompt_len = cfg.prompt_len;
  m.prompt_alpha_init = cfg.prompt_alpha;
  m.encoder_blocks = cfg.encoder_blocks;
  m.ffn_mult = cfg.ffn_mult;
  m.n_ids = data.label_of.size();
  m.n_views = data.n_views;
  m.n_cams = data.n_cams;
  m.binning = data.binning;
  m.geo_dims = cfg.geo_dims;
  m.use_gcpg = cfg.use_gcpg;
  m.use_giqt = cfg.use_giqt;
  m.init_seed = cfg.seed;
  return m;
}

/// P identities x K instances per batch. Identities are visited in a shuffled
/// order that is redrawn whenever it runs out; instances are drawn without
/// replacement when the identity has at least K samples.
class PKSampler {
 public:
  PKSampler(const Dataset& ds, std::size_t p, std::size_t k, Rng rng) : p_(p), k_(k), rng_(rng) {
    for (std::size_t i = 0; i < ds.size(); ++i) by_id_[ds.samples[i].meta.id].push_back(i);
    for (const auto& [id, idx] : by_id_) ids_.push_back(id);
    if (ids_.size() < p_)
      throw ConfigError("sampler: " + std::to_string(ids_.size()) + " identities but ids_per_batch=" + std::to_string(p_));
    cursor_ = ids_.size();
  }

  std::vector<std::size_t> next() {
    std::vector<std::size_t> batch;
    batch.reserve(p_ * k_);
    for (std::size_t n = 0; n < p_; ++n) {
      if (cursor_ == ids_.size()) {
        order_ = ids_;
        rng_.shuffle(order_);
        cursor_ = 0;
      }
      std::vector<std::size_t> pool = by_id_.at(order_[cursor_++]);
      if (pool.size() >= k_) {
        rng_.shuffle(pool);
        batch.insert(batch.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k_));
      } else {
        for (std::size_t j = 0; j < k_; ++j) batch.push_back(pool[rng_.below(pool.size())]);
      }
    }
    return batch;
  }

  std::size_t identity_count() const { return ids_.size(); }

 private:
  std::size_t p_, k_;
  Rng rng_;
  std::map<int, std::vector<std::size_t>> by_id_;
  std::vector<int> ids_, order_;
  std::size_t cursor_ = 0;
};

inline int view_label(View v) { return static_cast<int>(v); }

// ---------------------------------------------------------------------------
// Training

struct StepOutcome {
  LossReport report;
  double grad_norm = 0.0;
};

/// Builds the batch graph, evaluates every loss component, and backpropagates
/// the weighted total. Does not update parameters.
inline LossReport batch_loss(Model& model, const Dataset& ds, const std::vector<std::size_t>& batch,
                             const std::map<int, int>& label_of, const RunConfig& cfg, bool backward) {
  const BinningScheme& scheme = model.config().binning;
  Graph g;
  std::vector<Var> x_inv, x_ref, view_logits, id_g, id_l, cls_inv, view_tok, offsets;
  std::vector<int> labels, views;
  for (std::size_t i : batch) {
    const Sample& s = ds.samples.at(i);
    ModelVars v = model.forward(g, g.constant(s.patches), bin_geometry(s.meta.geometry, scheme));
    x_inv.push_back(v.x_inv);
    x_ref.push_back(v.x_ref);
    view_logits.push_back(v.view_logits);
    id_g.push_back(v.id_logits_global);
    id_l.push_back(v.id_logits_local);
    view_tok.push_back(v.view);
    offsets.push_back(v.prompt_offset);
    labels.push_back(label_of.at(s.meta.id));
    views.push_back(view_label(s.meta.view));
  }
  Var inv = ag::concat_rows(x_inv), ref = ag::concat_rows(x_ref);
  Var l_idg = ag::cross_entropy(ag::concat_rows(id_g), labels, cfg.label_smoothing);
  Var l_trg = ag::triplet_batch_hard(inv, labels, cfg.triplet_margin);
  Var l_idl = ag::cross_entropy(ag::concat_rows(id_l), labels, cfg.label_smoothing);
  Var l_trl = ag::triplet_batch_hard(ref, labels, cfg.triplet_margin);
  Var l_view = ag::cross_entropy(ag::concat_rows(view_logits), views);
  Var l_orth = ag::orthogonality(inv, ag::concat_rows(view_tok), cfg.orth_literal);
  Var l_geo = ag::scale(ag::sum_squares(ag::concat_rows(offsets)), 1.0 / static_cast<double>(batch.size()));
  const LossWeights& w = cfg.weights;
  Var total = ag::weighted_sum({l_idg, l_trg, l_idl, l_trl, l_view, l_orth, l_geo},
                               {w.w_global, w.w_global, w.w_local, w.w_local, w.w_view_orth, w.w_view_orth, w.w_geo});
  LossReport r{l_idg.item(), l_trg.item(), l_idl.item(), l_trl.item(), l_view.item(), l_orth.item(), l_geo.item(),
               total.item()};
  if (backward) g.backward(total);
  return r;
}

inline bool finite(const LossReport& r) {
  for (double v : {r.id_global, r.tri_global, r.id_local, r.tri_local, r.view, r.orth, r.geo, r.total})
    if (!std::isfinite(v)) return false;
  return true;
}

struct TrainLog {
  std::vector<LossReport> steps;
  std::vector<double> lrs;
  std::size_t total_iters = 0;
};

inline std::size_t iterations_per_epoch(const RunConfig& cfg, const Dataset& train) {
  if (cfg.iters_per_epoch) return cfg.iters_per_epoch;
  return std::max<std::size_t>(1, (train.size() + cfg.batch_size - 1) / cfg.batch_size);
}

/// Trains `model` in place. Step reports go to `step_log` (JSON Lines) when
/// given; checkpoints to `<ckpt_dir>/epoch_<n>` when `ckpt_dir` is non-empty.
inline TrainLog train_model(Model& model, const PreparedData& data, const RunConfig& cfg,
                            std::ostream* step_log = nullptr, const std::string& ckpt_dir = "") {
  const std::size_t ipe = iterations_per_epoch(cfg, data.train);
  TrainLog log;
  log.total_iters = ipe * cfg.epochs;
  LrSchedule sched{cfg.base_lr, cfg.min_lr, std::min(cfg.warmup_iters, log.total_iters), log.total_iters};
  sched.validate();
  PKSampler sampler(data.train, cfg.ids_per_batch, cfg.instances_per_id, Rng(cfg.seed, 0x5a3b1e));
  ParameterList params = model.parameters().list();
  model.parameters().zero_grad();
  MomentumBuffers velocity;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t it = 0; it < ipe; ++it, ++step) {
      const double lr = cosine_lr(sched, step);
      const auto batch = sampler.next();
      LossReport r = batch_loss(model, data.train, batch, data.label_of, cfg, true);
      if (!finite(r)) {
        model.parameters().zero_grad();
        throw NumericError("non-finite loss at step " + std::to_string(step) + ": " + to_json(r).dump());
      }
      const double gn = sgd_step(params, lr, cfg.weight_decay, cfg.clip_norm, &velocity, cfg.momentum);
      if (!std::isfinite(gn)) throw NumericError("non-finite gradient norm at step " + std::to_string(step));
      log.steps.push_back(r);
      log.lrs.push_back(lr);
      if (step_log) {
        nlohmann::json j = to_json(r);
        j["step"] = step;
        j["epoch"] = epoch;
        j["lr"] = lr;
        j["grad_norm"] = gn;
        *step_log << j.dump() << '\n';
      }
    }
    if (!ckpt_dir.empty()) model.save((std::filesystem::path(ckpt_dir) / ("epoch_" + std::to_string(epoch))).string());
  }
  return log;
}

// ---------------------------------------------------------------------------
// Evaluation

/// Embeds every sample conditioned on `bins[i]`.
inline EmbeddingSet embed_dataset(const Model& model, const Dataset& ds, const std::vector<GeometryBins>& bins) {
  if (bins.size() != ds.size()) throw InputError("embed_dataset: one geometry per sample required");
  if (ds.d_in() != model.config().d_in)
    throw ConfigError("checkpoint expects patch width " + std::to_string(model.config().d_in) + ", dataset has " +
                      std::to_string(ds.d_in()));
  EmbeddingSet e;
  const std::size_t dim = 2 * model.config().d_model;
  e.features = Tensor::matrix(ds.size(), dim);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Sample& s = ds.samples[i];
    const Tensor f = model.embed(s.patches, bins[i]);
    std::copy(f.data(), f.data() + dim, e.features.row(i));
    e.ids.push_back(s.meta.id);
    e.cameras.push_back(s.meta.geometry.camera_id);
    e.views.push_back(s.meta.view);
    e.bins.push_back(bin_geometry(s.meta.geometry, model.config().binning));
  }
  return e;
}

inline std::vector<GeometryBins> true_bins(const Dataset& ds, const BinningScheme& scheme) {
  std::vector<GeometryBins> out;
  for (const auto& s : ds.samples) out.push_back(bin_geometry(s.meta.geometry, scheme));
  return out;
}

/// Geometry-agnostic reference: each sample is its mean patch vector.
inline EmbeddingSet raw_embeddings(const Dataset& ds, const BinningScheme& scheme) {
  EmbeddingSet e;
  const std::size_t p = ds.patch_count(), d = ds.d_in();
  e.features = Tensor::matrix(ds.size(), d);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Sample& s = ds.samples[i];
    for (std::size_t r = 0; r < p; ++r)
      for (std::size_t k = 0; k < d; ++k) e.features(i, k) += s.patches(r, k) / static_cast<double>(p);
    e.ids.push_back(s.meta.id);
    e.cameras.push_back(s.meta.geometry.camera_id);
    e.views.push_back(s.meta.view);
    e.bins.push_back(bin_geometry(s.meta.geometry, scheme));
  }
  return e;
}

/// Geometry as seen by the model: the query stream and the gallery stream are
/// each passed through `corrupt` with the same spec. Samples in neither
/// stream keep their bins.
inline std::vector<GeometryBins> protocol_bins(const Dataset& ds, const BinningScheme& scheme, const ProtocolSpec& proto,
                                               const CorruptionSpec& spec) {
  std::vector<GeometryBins> bins = true_bins(ds, scheme);
  if (spec.kind == CorruptionKind::None) return bins;
  auto apply = [&](View v) {
    std::vector<std::size_t> idx;
    std::vector<GeometryBins> stream;
    for (std::size_t i = 0; i < ds.size(); ++i)
      if (ds.samples[i].meta.view == v) {
        idx.push_back(i);
        stream.push_back(bins[i]);
      }
    if (stream.empty()) return;
    auto c = corrupt(stream, spec, scheme);
    for (std::size_t j = 0; j < idx.size(); ++j) bins[idx[j]] = c[j];
  };
  apply(proto.query_view);
  if (proto.gallery_view != proto.query_view) apply(proto.gallery_view);
  return bins;
}

struct EvalResult {
  RankingReport ranking;
  bool train_id_leak = false;
};

/// Embeds `ds` with (possibly corrupted) geometry and ranks under `proto`.
/// Identities seen in training are reported as a leak.
inline EvalResult evaluate(const Model& model, const Dataset& ds, const ProtocolSpec& proto,
                           const CorruptionSpec& corruption = {}, const std::set<int>& train_ids = {}) {
  EvalResult r;
  for (const auto& s : ds.samples)
    if (train_ids.count(s.meta.id)) {
      r.train_id_leak = true;
      break;
    }
  if (r.train_id_leak) std::cerr << "warning: evaluation set contains training identities\n";
  const auto bins = protocol_bins(ds, model.config().binning, proto, corruption);
  r.ranking = evaluate_embeddings(embed_dataset(model, ds, bins), proto);
  return r;
}

inline ProtocolSpec protocol_of(const RunConfig& cfg, const std::string& name) {
  ProtocolSpec p = parse_protocol(name);
  p.exclude_same_camera = cfg.exclude_same_camera;
  return p;
}

inline std::set<int> train_identities(const PreparedData& d) {
  std::set<int> s;
  for (const auto& [id, label] : d.label_of) s.insert(id);
  return s;
}

// ---------------------------------------------------------------------------
// Runs

struct RunReport {
  nlohmann::json config;
  std::string config_hash;
  TrainLog log;
  std::map<std::string, RankingReport> rankings;
  bool train_id_leak = false;
  double wall_seconds = 0.0;
};

/// Deterministic part of the report (no wall-clock).
inline nlohmann::json to_json(const RunReport& r) {
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& s : r.log.steps) curve.push_back(s.total);
  nlohmann::json rankings = nlohmann::json::object();
  for (const auto& [name, rep] : r.rankings) rankings[name] = to_json(rep);
  nlohmann::json j{{"config_hash", r.config_hash},
                   {"config", r.config},
                   {"total_iters", r.log.total_iters},
                   {"loss_curve", curve},
                   {"rankings", rankings},
                   {"train_id_leak", r.train_id_leak}};
  if (!r.log.steps.empty()) j["final_loss"] = to_json(r.log.steps.back());
  return j;
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw InputError("cannot write " + p.string());
  os << text;
}

struct TrainedRun {
  Model model;
  PreparedData data;
  RunReport report;
};

/// Trains and evaluates one configuration. With a non-empty out_dir, every
/// artifact lands there.
inline TrainedRun run(const RunConfig& cfg) {
  namespace fs = std::filesystem;
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  PreparedData data = prepare_data(cfg);
  Model model(model_config(cfg, data));
  RunReport rep;
  rep.config = experiment_json(cfg);
  rep.config_hash = config_hash(cfg);

  const bool write = !cfg.out_dir.empty();
  const fs::path out(cfg.out_dir);
  std::ofstream step_log;
  if (write) {
    fs::create_directories(out);
    write_text(out / "config.json", to_json(cfg).dump(2) + "\n");
    if (cfg.log_steps) step_log.open(out / "loss_log.jsonl", std::ios::binary);
  }
  rep.log = train_model(model, data, cfg, step_log.is_open() ? &step_log : nullptr,
                        write && cfg.save_checkpoints ? (out / "checkpoints").string() : "");
  step_log.close();

  const CorruptionSpec cs{parse_corruption(cfg.corruption), cfg.corruption_seed};
  const std::set<int> seen = train_identities(data);
  for (const auto& name : cfg.protocols) {
    EvalResult e = evaluate(model, data.test, protocol_of(cfg, name), cs, seen);
    rep.train_id_leak = rep.train_id_leak || e.train_id_leak;
    rep.rankings[name] = std::move(e.ranking);
  }
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (write) {
    write_text(out / "report.json", to_json(rep).dump(2) + "\n");
    write_text(out / "timing.json", nlohmann::json{{"wall_seconds", rep.wall_seconds}}.dump(2) + "\n");
    for (const auto& [name, r] : rep.rankings) {
      std::ostringstream cmc, bins;
      write_cmc_csv(cmc, r);
      write_bin_csv(bins, r);
      write_text(out / ("cmc_" + name + ".csv"), cmc.str());
      write_text(out / ("bins_" + name + ".csv"), bins.str());
    }
    nlohmann::json files = nlohmann::json::array();
    for (const auto& entry : fs::recursive_directory_iterator(out))
      if (const std::string rel = fs::relative(entry.path(), out).generic_string();
          entry.is_regular_file() && rel != "manifest.json")
        files.push_back(rel);
    std::sort(files.begin(), files.end());
    write_text(out / "manifest.json", nlohmann::json{{"config_hash", rep.config_hash}, {"files", files}}.dump(2) + "\n");
  }
  return TrainedRun{std::move(model), std::move(data), std::move(rep)};
}

// ---------------------------------------------------------------------------
// Sweeps, ablation, corruption, spectrum

enum class SweepAxis { Rank, PromptLen, PromptAlpha, HiddenDim };

inline SweepAxis parse_sweep_axis(const std::string& s) {
  if (s == "rank") return SweepAxis::Rank;
  if (s == "prompt_len") return SweepAxis::PromptLen;
  if (s == "prompt_alpha") return SweepAxis::PromptAlpha;
  if (s == "hidden_dim") return SweepAxis::HiddenDim;
  throw ConfigError("unknown sweep axis '" + s + "' (rank, prompt_len, prompt_alpha, hidden_dim)");
}

/// hidden_dim maps to the model width d_model.
inline RunConfig with_axis(RunConfig cfg, SweepAxis axis, double value) {
  auto count = [&] {
    if (value < 1 || value != std::floor(value)) throw ConfigError("sweep value must be a positive integer");
    return static_cast<std::size_t>(value);
  };
  switch (axis) {
    case SweepAxis::Rank: cfg.rank = count(); break;
    case SweepAxis::PromptLen: cfg.prompt_len = count(); break;
    case SweepAxis::PromptAlpha: cfg.prompt_alpha = value; break;
    case SweepAxis::HiddenDim: cfg.d_model = count(); break;
  }
  return cfg;
}

struct TableRow {
  std::string label;
  double rank1 = 0.0;
  double map = 0.0;
};

inline void write_table_csv(std::ostream& os, const std::string& key, const std::vector<TableRow>& rows) {
  os << key << ",rank1,map\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g\n", r.label.c_str(), r.rank1, r.map);
    os << buf;
  }
}

inline std::string format_value(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

/// Trains and evaluates one run per value on the first configured protocol.
/// Seeds stay fixed across values.
inline std::vector<TableRow> sweep(const RunConfig& base, SweepAxis axis, const std::vector<double>& values) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  std::vector<TableRow> rows;
  for (double v : values) {
    RunConfig c = with_axis(base, axis, v);
    c.out_dir.clear();
    c.validate();
    TrainedRun r = run(c);
    const RankingReport& rep = r.report.rankings.at(c.protocols.front());
    rows.push_back({format_value(v), rep.cmc.at(1), rep.map});
  }
  return rows;
}

/// Four rows: baseline, +gcpg, +giqt, +both.
inline std::vector<TableRow> ablate(const RunConfig& base) {
  std::vector<TableRow> rows;
  const std::pair<const char*, std::pair<bool, bool>> parts[] = {
      {"baseline", {false, false}}, {"+gcpg", {true, false}}, {"+giqt", {false, true}}, {"+both", {true, true}}};
  for (const auto& [name, flags] : parts) {
    RunConfig c = base;
    c.out_dir.clear();
    c.use_gcpg = flags.first;
    c.use_giqt = flags.second;
    TrainedRun r = run(c);
    const RankingReport& rep = r.report.rankings.at(c.protocols.front());
    rows.push_back({name, rep.cmc.at(1), rep.map});
  }
  return rows;
}

/// Evaluates a trained model under each corruption kind.
inline std::vector<TableRow> corruption_sweep(const Model& model, const Dataset& ds, const ProtocolSpec& proto,
                                              const std::vector<CorruptionKind>& kinds, std::uint64_t seed) {
  std::vector<TableRow> rows;
  for (CorruptionKind k : kinds) {
    EvalResult e = evaluate(model, ds, proto, CorruptionSpec{k, seed});
    rows.push_back({corruption_name(k), e.ranking.cmc.at(1), e.ranking.map});
  }
  return rows;
}

/// Covariance-difference spectrum between aerial and ground rows.
inline SpectrumReport view_spectrum(const EmbeddingSet& e, const std::vector<int>& ks = {8, 16}) {
  e.validate();
  const EmbeddingSet a = e.subset(e.indices_of(View::Aerial));
  const EmbeddingSet g = e.subset(e.indices_of(View::Ground));
  if (a.size() < 2 || g.size() < 2) throw InputError("spectrum: need at least 2 aerial and 2 ground samples");
  return spectrum(covariance(a.features), covariance(g.features), ks);
}

inline nlohmann::json to_json(const SpectrumReport& s) {
  nlohmann::json top = nlohmann::json::object();
  for (const auto& [k, v] : s.top_k_energy) top["top" + std::to_string(k)] = v;
  return nlohmann::json{{"singular_values", s.singular_values},
                        {"cumulative_energy", s.cumulative_energy},
                        {"top_k_energy", top},
                        {"total_energy", s.total_energy}};
}

}  // namespace georect
