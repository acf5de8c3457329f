// SPDX-License-Identifier: Apache-2.0
/**
 * @file   model.hpp
 * @brief  End-to-end retrieval model: view-decoupling encoder stub,
 *         geometry-conditioned prompt generation, and the two-way attention
 *         decoder with GIQT inside every cross-attention.
 *
 * Per sample:
 *   [Cls, View, X_local] = Encoder([cls_token, view_token, tokenize(x)])
 *   X_inv  = Cls - View
 *   e_geo  = [e_cam; e_alt; e_angle]
 *   P_geo  = P_base + prompt_alpha * f_geo([X_inv, e_geo])
 *   F_P, F_I = TwoWay(P_geo, X_local | e_geo)
 *   X_ref  = Fuse([Out_token, F_P], F_I | e_geo)[0]
 *   Out    = [X_inv, X_ref]
 */
#pragma once

#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "georect/geometry.hpp"
#include "georect/giqt.hpp"
#include "georect/layers.hpp"

namespace georect {

struct ModelConfig {
  std::size_t d_in = 16;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t rank = 8;
  bool gating = true;
  std::size_t predictor_hidden = 64;
  std::size_t prompt_len = 32;
  double prompt_alpha_init = 1.0;
  std::size_t encoder_blocks = 2;
  std::size_t ffn_mult = 4;
  std::size_t n_ids = 1;
  std::size_t n_views = 2;
  int n_cams = 4;
  BinningScheme binning;
  GeometryDims geo_dims;
  bool use_gcpg = true;
  bool use_giqt = true;
  std::uint64_t init_seed = 0;

  GiqtConfig giqt() const { return GiqtConfig{d_model, n_heads, rank, gating, predictor_hidden}; }

  void validate() const {
    giqt().validate();
    binning.validate();
    if (d_in == 0 || prompt_len == 0 || n_ids == 0 || n_views == 0 || ffn_mult == 0)
      throw ConfigError("model dimensions must be positive");
    if (n_cams < 1) throw ConfigError("model needs at least one camera");
  }
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return nlohmann::json{{"d_in", c.d_in},
                        {"d_model", c.d_model},
                        {"n_heads", c.n_heads},
                        {"rank", c.rank},
                        {"gating", c.gating},
                        {"predictor_hidden", c.predictor_hidden},
                        {"prompt_len", c.prompt_len},
                        {"prompt_alpha_init", c.prompt_alpha_init},
                        {"encoder_blocks", c.encoder_blocks},
                        {"ffn_mult", c.ffn_mult},
                        {"n_ids", c.n_ids},
                        {"n_views", c.n_views},
                        {"n_cams", c.n_cams},
                        {"n_alt_bins", c.binning.n_alt_bins},
                        {"n_angle_bins", c.binning.n_angle_bins},
                        {"alt_range", {c.binning.alt_min, c.binning.alt_max}},
                        {"angle_range", {c.binning.angle_min, c.binning.angle_max}},
                        {"d_cam", c.geo_dims.d_cam},
                        {"d_alt", c.geo_dims.d_alt},
                        {"d_angle", c.geo_dims.d_angle},
                        {"use_gcpg", c.use_gcpg},
                        {"use_giqt", c.use_giqt},
                        {"init_seed", c.init_seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  try {
    get("d_in", c.d_in);
    get("d_model", c.d_model);
    get("n_heads", c.n_heads);
    get("rank", c.rank);
    get("gating", c.gating);
    get("predictor_hidden", c.predictor_hidden);
    get("prompt_len", c.prompt_len);
    get("prompt_alpha_init", c.prompt_alpha_init);
    get("encoder_blocks", c.encoder_blocks);
    get("ffn_mult", c.ffn_mult);
    get("n_ids", c.n_ids);
    get("n_views", c.n_views);
    get("n_cams", c.n_cams);
    get("n_alt_bins", c.binning.n_alt_bins);
    get("n_angle_bins", c.binning.n_angle_bins);
    if (j.contains("alt_range")) {
      c.binning.alt_min = j["alt_range"].at(0).get<double>();
      c.binning.alt_max = j["alt_range"].at(1).get<double>();
    }
    if (j.contains("angle_range")) {
      c.binning.angle_min = j["angle_range"].at(0).get<double>();
      c.binning.angle_max = j["angle_range"].at(1).get<double>();
    }
    get("d_cam", c.geo_dims.d_cam);
    get("d_alt", c.geo_dims.d_alt);
    get("d_angle", c.geo_dims.d_angle);
    get("use_gcpg", c.use_gcpg);
    get("use_giqt", c.use_giqt);
    get("init_seed", c.init_seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------

struct EncoderVars {
  Var cls, view, x_local, x_inv;
};

struct EncoderOutput {
  Tensor cls, view, x_local, x_inv;
};

/// Tokenizer plus a small stack of pre-norm self-attention/FFN blocks over
/// [cls_token, view_token, patch tokens].
class EncoderStub {
 public:
  EncoderStub() = default;
  EncoderStub(ParameterStore& store, const ModelConfig& c, Rng& rng)
      : tokenizer_(store, "encoder.tokenizer", c.d_in, c.d_model, rng), final_norm_(store, "encoder.final_norm", c.d_model) {
    cls_ = &store.add("encoder.cls_token", rng.normal_tensor({1, c.d_model}, 0.02), false);
    view_ = &store.add("encoder.view_token", rng.normal_tensor({1, c.d_model}, 0.02), false);
    for (std::size_t b = 0; b < c.encoder_blocks; ++b) {
      const std::string p = "encoder.block" + std::to_string(b);
      blocks_.push_back(Block{LayerNorm(store, p + ".norm1", c.d_model),
                              SelfAttention(store, p + ".attn", c.d_model, c.n_heads, rng),
                              LayerNorm(store, p + ".norm2", c.d_model),
                              FeedForward(store, p + ".ffn", c.d_model, c.ffn_mult * c.d_model, rng)});
    }
  }

  EncoderVars operator()(Graph& g, Var patches) const {
    if (patches.value().rank() != 2 || patches.rows() < 1) throw InputError("encode: need at least one patch");
    if (patches.cols() != tokenizer_.in())
      throw DimensionError("encode: patch width " + std::to_string(patches.cols()) + " vs tokenizer input " +
                           std::to_string(tokenizer_.in()));
    const std::size_t n = patches.rows();
    Var x = ag::concat_rows({g.param(*cls_), g.param(*view_), tokenizer_(g, patches)});
    for (const auto& b : blocks_) {
      x = ag::add(x, b.attn(g, b.norm1(g, x)));
      x = ag::add(x, b.ffn(g, b.norm2(g, x)));
    }
    x = final_norm_(g, x);
    EncoderVars out;
    out.cls = ag::slice_rows(x, 0, 1);
    out.view = ag::slice_rows(x, 1, 1);
    out.x_local = ag::slice_rows(x, 2, n);
    out.x_inv = ag::sub(out.cls, out.view);
    return out;
  }

 private:
  struct Block {
    LayerNorm norm1;
    SelfAttention attn;
    LayerNorm norm2;
    FeedForward ffn;
  };
  Linear tokenizer_;
  LayerNorm final_norm_;
  Parameter* cls_ = nullptr;
  Parameter* view_ = nullptr;
  std::vector<Block> blocks_;
};

struct PromptVars {
  Var p_geo, offset;
};

/// Learnable base prompts, scale prompt_alpha, and the conditioning network
/// f_geo([X_inv, e_geo]) -> L x d offsets. The last f_geo layer starts at
/// zero, so P_geo == P_base at initialization.
class PromptSet {
 public:
  PromptSet() = default;
  PromptSet(ParameterStore& store, const ModelConfig& c, Rng& rng) : len_(c.prompt_len), width_(c.d_model) {
    const std::size_t in = c.d_model + c.geo_dims.total();
    p_base_ = &store.add("prompts.base", rng.normal_tensor({c.prompt_len, c.d_model}, 0.02), false);
    alpha_ = &store.add("prompts.alpha", Tensor({1}, c.prompt_alpha_init), false);
    hidden_ = Linear(store, "prompts.f_geo.hidden", in, 2 * in, rng);
    out_ = Linear(store, "prompts.f_geo.out", 2 * in, c.prompt_len * c.d_model, rng, Init::Zero);
  }

  Var offset(Graph& g, Var x_inv, Var e_geo) const {
    Var in = ag::concat_cols({x_inv, e_geo});
    return ag::reshape(out_(g, ag::gelu(hidden_(g, in))), {len_, width_});
  }

  /// P_geo = P_base + prompt_alpha * offset. With `enabled == false` the
  /// offset is forced to zero.
  PromptVars operator()(Graph& g, Var x_inv, Var e_geo, bool enabled) const {
    Var base = g.param(*p_base_);
    if (!enabled) {
      Var zero = g.constant(Tensor({len_, width_}));
      return PromptVars{base, zero};
    }
    Var off = offset(g, x_inv, e_geo);
    return PromptVars{ag::add(base, ag::scale_by(off, g.param(*alpha_))), off};
  }

  Parameter& alpha() { return *alpha_; }
  Parameter& base() { return *p_base_; }

 private:
  std::size_t len_ = 0, width_ = 0;
  Parameter* p_base_ = nullptr;
  Parameter* alpha_ = nullptr;
  Linear hidden_, out_;
};

struct TwoWayVars {
  Var f_p, f_i;
};

/// Two-way attention (prompts <-> image tokens) followed by the fusion block
/// that decodes the output token. Every cross-attention uses GIQT.
class CvftDecoder {
 public:
  CvftDecoder() = default;
  CvftDecoder(ParameterStore& store, const ModelConfig& c, Rng& rng) {
    const std::size_t d = c.d_model, dg = c.geo_dims.total(), hid = c.ffn_mult * c.d_model;
    const GiqtConfig gc = c.giqt();
    p_norm_sa_ = LayerNorm(store, "decoder.two_way.norm_sa", d);
    p_sa_ = SelfAttention(store, "decoder.two_way.sa", d, c.n_heads, rng);
    p_norm_ca_ = LayerNorm(store, "decoder.two_way.norm_ca_p", d);
    x_norm_ctx_ = LayerNorm(store, "decoder.two_way.norm_ctx_x", d);
    p_ca_ = GiqtCrossAttention(store, "decoder.two_way.ca_p2i", dg, gc, rng);
    p_norm_ffn_ = LayerNorm(store, "decoder.two_way.norm_ffn", d);
    p_ffn_ = FeedForward(store, "decoder.two_way.ffn", d, hid, rng);
    i_norm_q_ = LayerNorm(store, "decoder.two_way.norm_ca_i", d);
    i_norm_ctx_ = LayerNorm(store, "decoder.two_way.norm_ctx_p", d);
    i_ca_ = GiqtCrossAttention(store, "decoder.two_way.ca_i2p", dg, gc, rng);

    out_token_ = &store.add("decoder.fusion.out_token", rng.normal_tensor({1, d}, 0.02), false);
    f_norm_ca_ = LayerNorm(store, "decoder.fusion.norm_ca", d);
    f_norm_ctx_ = LayerNorm(store, "decoder.fusion.norm_ctx", d);
    f_ca_ = GiqtCrossAttention(store, "decoder.fusion.ca", dg, gc, rng);
    f_norm_sa_ = LayerNorm(store, "decoder.fusion.norm_sa", d);
    f_sa_ = SelfAttention(store, "decoder.fusion.sa", d, c.n_heads, rng);
    f_norm_ffn_ = LayerNorm(store, "decoder.fusion.norm_ffn", d);
    f_ffn_ = FeedForward(store, "decoder.fusion.ffn", d, hid, rng);
  }

  /// F_P = FFN(CA(SA(P_geo), X_local)) + P_geo and F_I = CA(X_local, F_P) + X_local,
  /// each sublayer pre-normalized with its own residual.
  TwoWayVars two_way(Graph& g, Var p_geo, Var x_local, Var e_geo, bool giqt) const {
    Var p = ag::add(p_geo, p_sa_(g, p_norm_sa_(g, p_geo)));
    p = ag::add(p, p_ca_(g, p_norm_ca_(g, p), x_norm_ctx_(g, x_local), e_geo, giqt));
    Var f_p = ag::add(p, p_ffn_(g, p_norm_ffn_(g, p)));
    Var f_i = ag::add(x_local, i_ca_(g, i_norm_q_(g, x_local), i_norm_ctx_(g, f_p), e_geo, giqt));
    return TwoWayVars{f_p, f_i};
  }

  /// [Out, _] = FFN(SA(CA([Out_token, F_P], F_I))); returns the Out row.
  Var fuse(Graph& g, Var f_p, Var f_i, Var e_geo, bool giqt) const {
    Var t = ag::concat_rows({g.param(*out_token_), f_p});
    t = ag::add(t, f_ca_(g, f_norm_ca_(g, t), f_norm_ctx_(g, f_i), e_geo, giqt));
    t = ag::add(t, f_sa_(g, f_norm_sa_(g, t)));
    t = ag::add(t, f_ffn_(g, f_norm_ffn_(g, t)));
    return ag::slice_rows(t, 0, 1);
  }

  const GiqtCrossAttention& ca_prompt_to_image() const { return p_ca_; }
  const GiqtCrossAttention& ca_image_to_prompt() const { return i_ca_; }
  const GiqtCrossAttention& ca_fusion() const { return f_ca_; }

 private:
  LayerNorm p_norm_sa_, p_norm_ca_, x_norm_ctx_, p_norm_ffn_, i_norm_q_, i_norm_ctx_;
  SelfAttention p_sa_;
  GiqtCrossAttention p_ca_, i_ca_, f_ca_;
  FeedForward p_ffn_, f_ffn_;
  Parameter* out_token_ = nullptr;
  LayerNorm f_norm_ca_, f_norm_ctx_, f_norm_sa_, f_norm_ffn_;
  SelfAttention f_sa_;
};

struct ModelVars {
  Var cls, view, x_inv, x_ref, out, view_logits, id_logits_global, id_logits_local, prompt_offset;
};

struct ModelOutput {
  Tensor x_inv, x_ref, out, view_logits, id_logits_global, id_logits_local, prompt_offset;
};

class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(cfg_.init_seed, 0x6d6f64656cull);
    Rng r_geo = rng.split(1), r_enc = rng.split(2), r_prompt = rng.split(3), r_dec = rng.split(4), r_head = rng.split(5);
    embedder_ = GeometryEmbedder(store_, "geometry.", cfg_.n_cams, cfg_.binning, cfg_.geo_dims, r_geo);
    encoder_ = EncoderStub(store_, cfg_, r_enc);
    prompts_ = PromptSet(store_, cfg_, r_prompt);
    decoder_ = CvftDecoder(store_, cfg_, r_dec);
    view_head_ = Linear(store_, "heads.view", cfg_.d_model, cfg_.n_views, r_head, Init::Classifier);
    id_global_ = Linear(store_, "heads.id_global", cfg_.d_model, cfg_.n_ids, r_head, Init::Classifier, false);
    id_local_ = Linear(store_, "heads.id_local", cfg_.d_model, cfg_.n_ids, r_head, Init::Classifier, false);
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return cfg_; }
  ModelConfig& mutable_config() { return cfg_; }
  ParameterStore& parameters() { return store_; }
  const ParameterStore& parameters() const { return store_; }
  const GeometryEmbedder& embedder() const { return embedder_; }
  GeometryEmbedder& embedder() { return embedder_; }
  const EncoderStub& encoder() const { return encoder_; }
  const PromptSet& prompts() const { return prompts_; }
  PromptSet& prompts() { return prompts_; }
  const CvftDecoder& decoder() const { return decoder_; }

  ModelVars forward(Graph& g, Var patches, const GeometryBins& bins) const {
    Var e_geo = embedder_.embed(g, bins);
    EncoderVars enc = encoder_(g, patches);
    PromptVars pr = prompts_(g, enc.x_inv, e_geo, cfg_.use_gcpg);
    TwoWayVars tw = decoder_.two_way(g, pr.p_geo, enc.x_local, e_geo, cfg_.use_giqt);
    Var x_ref = decoder_.fuse(g, tw.f_p, tw.f_i, e_geo, cfg_.use_giqt);
    ModelVars out;
    out.cls = enc.cls;
    out.view = enc.view;
    out.x_inv = enc.x_inv;
    out.x_ref = x_ref;
    out.out = ag::concat_cols({enc.x_inv, x_ref});
    out.view_logits = view_head_(g, enc.view);
    out.id_logits_global = id_global_(g, enc.x_inv);
    out.id_logits_local = id_local_(g, x_ref);
    out.prompt_offset = pr.offset;
    return out;
  }

  ModelOutput forward(const Tensor& patches, const GeometryBins& bins) const {
    Graph g;
    ModelVars v = forward(g, g.constant(patches), bins);
    return ModelOutput{v.x_inv.value(),     v.x_ref.value(),          v.out.value(),          v.view_logits.value(),
                       v.id_logits_global.value(), v.id_logits_local.value(), v.prompt_offset.value()};
  }

  /// Retrieval descriptor Out = [X_inv, X_ref] as a flat vector.
  Tensor embed(const Tensor& patches, const GeometryBins& bins) const {
    Graph g;
    Var v = forward(g, g.constant(patches), bins).out;
    return v.value().reshaped({v.value().numel()});
  }

  void save(const std::string& dir) const {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json manifest;
    manifest["config"] = to_json(cfg_);
    nlohmann::json names = nlohmann::json::array();
    for (const Parameter* p : store_.list()) {
      save_tns((fs::path(dir) / (p->name + ".tns")).string(), p->value);
      names.push_back(p->name);
    }
    manifest["tensors"] = names;
    std::ofstream os(fs::path(dir) / "manifest.json");
    if (!os) throw InputError("cannot write checkpoint manifest in " + dir);
    os << manifest.dump(2) << '\n';
  }

  static Model load(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream is(fs::path(dir) / "manifest.json");
    if (!is) throw InputError("checkpoint manifest missing in " + dir);
    nlohmann::json manifest;
    try {
      is >> manifest;
    } catch (const nlohmann::json::exception& e) {
      throw InputError(std::string("checkpoint manifest: ") + e.what());
    }
    Model m(model_config_from_json(manifest.at("config")));
    for (Parameter* p : m.store_.list()) {
      Tensor t = load_tns((fs::path(dir) / (p->name + ".tns")).string());
      if (t.shape() != p->value.shape())
        throw ConfigError("checkpoint tensor " + p->name + " has shape " + shape_str(t.shape()) + ", expected " +
                          shape_str(p->value.shape()));
      p->value = std::move(t);
    }
    return m;
  }

 private:
  ModelConfig cfg_;
  ParameterStore store_;
  GeometryEmbedder embedder_;
  EncoderStub encoder_;
  PromptSet prompts_;
  CvftDecoder decoder_;
  Linear view_head_, id_global_, id_local_;
};

/// Tensor-level helpers mirroring the pipeline stages.
inline EncoderOutput encode(const Tensor& patches, const Model& model) {
  Graph g;
  EncoderVars v = model.encoder()(g, g.constant(patches));
  return EncoderOutput{v.cls.value(), v.view.value(), v.x_local.value(), v.x_inv.value()};
}

struct PromptOutput {
  Tensor p_geo, offset;
};

inline PromptOutput generate_prompts(const Tensor& x_inv, const Tensor& e_geo, const Model& model) {
  Graph g;
  PromptVars v = model.prompts()(g, g.constant(x_inv.reshaped({1, x_inv.numel()})),
                                 g.constant(e_geo.reshaped({1, e_geo.numel()})), model.config().use_gcpg);
  return PromptOutput{v.p_geo.value(), v.offset.value()};
}

}  // namespace georect
