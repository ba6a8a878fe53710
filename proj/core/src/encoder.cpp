#include "cliporder/encoder.hpp"

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cliporder/errors.hpp"
#include "cliporder/motion.hpp"
#include "cliporder/rng.hpp"
#include "encoder_internal.hpp"

namespace cliporder {
namespace {

using nlohmann::json;

}  // namespace

const char* posenc_mode_name(PosencMode mode) {
  return mode == PosencMode::kApe ? "ape" : "liere";
}

PosencMode posenc_mode_from_name(const std::string& name) {
  if (name == "ape") return PosencMode::kApe;
  if (name == "liere") return PosencMode::kLiere;
  throw ConfigError("unknown positional encoding '" + name + "' (expected ape or liere)");
}

EncoderConfig EncoderConfig::preset(const std::string& name) {
  EncoderConfig cfg;  // defaults are the toy preset
  if (name == "toy") return cfg;
  if (name == "paper") {
    cfg.embed_dim = 768;
    cfg.heads = 12;
    cfg.spatial_layers = 6;
    cfg.temporal_layers = 6;
    cfg.patch = 16;
    cfg.frames = 32;
    cfg.res = 224;
    cfg.channels = 3;
    return cfg;
  }
  throw ConfigError("unknown preset '" + name + "' (expected toy or paper)");
}

void EncoderConfig::validate() const {
  if (embed_dim <= 0 || heads <= 0 || embed_dim % heads != 0)
    throw ConfigError("embed_dim " + std::to_string(embed_dim) +
                      " must be a positive multiple of heads " + std::to_string(heads));
  if (spatial_layers < 1 || temporal_layers < 1)
    throw ConfigError("need at least one spatial and one temporal layer");
  if (patch <= 0 || res <= 0 || res % patch != 0)
    throw ConfigError("resolution " + std::to_string(res) +
                      " must be a positive multiple of patch " + std::to_string(patch));
  if (frames < 2) throw ConfigError("need at least two frames per clip");
  if (channels < 1) throw ConfigError("need at least one channel");
  if (mlp_ratio < 1) throw ConfigError("mlp_ratio must be >= 1");
  if (!(keep_ratio > 0.0) || keep_ratio > 1.0)
    throw ConfigError("keep_ratio must be in (0, 1]");
  if (flow_radius < 1) throw ConfigError("flow_radius must be >= 1");
  if (posenc == PosencMode::kLiere) {
    if (rot_block < 2) throw ConfigError("rot_block must be >= 2");
    if (head_dim() % rot_block != 0)
      throw ConfigError("head_dim " + std::to_string(head_dim()) +
                        " must be a multiple of rot_block " + std::to_string(rot_block));
  }
}

std::string encoder_config_to_json(const EncoderConfig& cfg) {
  json j;
  j["embed_dim"] = cfg.embed_dim;
  j["heads"] = cfg.heads;
  j["spatial_layers"] = cfg.spatial_layers;
  j["temporal_layers"] = cfg.temporal_layers;
  j["patch"] = cfg.patch;
  j["frames"] = cfg.frames;
  j["res"] = cfg.res;
  j["channels"] = cfg.channels;
  j["mlp_ratio"] = cfg.mlp_ratio;
  j["posenc"] = posenc_mode_name(cfg.posenc);
  j["mgm"] = cfg.mgm;
  j["keep_ratio"] = cfg.keep_ratio;
  j["rot_block"] = cfg.rot_block;
  j["flow_radius"] = cfg.flow_radius;
  return j.dump(2);
}

EncoderConfig encoder_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad encoder config json: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("encoder config must be a json object");

  EncoderConfig cfg;
  if (j.contains("preset")) cfg = EncoderConfig::preset(j.at("preset").get<std::string>());
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "preset") continue;
      if (key == "embed_dim") cfg.embed_dim = value.get<std::int64_t>();
      else if (key == "heads") cfg.heads = value.get<std::int64_t>();
      else if (key == "spatial_layers") cfg.spatial_layers = value.get<std::int64_t>();
      else if (key == "temporal_layers") cfg.temporal_layers = value.get<std::int64_t>();
      else if (key == "patch") cfg.patch = value.get<std::int64_t>();
      else if (key == "frames") cfg.frames = value.get<std::int64_t>();
      else if (key == "res") cfg.res = value.get<std::int64_t>();
      else if (key == "channels") cfg.channels = value.get<std::int64_t>();
      else if (key == "mlp_ratio") cfg.mlp_ratio = value.get<std::int64_t>();
      else if (key == "posenc") cfg.posenc = posenc_mode_from_name(value.get<std::string>());
      else if (key == "mgm") cfg.mgm = value.get<bool>();
      else if (key == "keep_ratio") cfg.keep_ratio = value.get<double>();
      else if (key == "rot_block") cfg.rot_block = value.get<std::int64_t>();
      else if (key == "flow_radius") cfg.flow_radius = value.get<int>();
      else throw ConfigError("unknown encoder config key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad encoder config value: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

namespace enc {

const Tensor& fetch(const ParamMap& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw ContractError("missing parameter '" + name + "'");
  return it->second;
}

AttnParams attn_params(const ParamMap& params, const std::string& prefix) {
  return AttnParams{fetch(params, prefix + ".wq"), fetch(params, prefix + ".bq"),
                    fetch(params, prefix + ".wk"), fetch(params, prefix + ".bk"),
                    fetch(params, prefix + ".wv"), fetch(params, prefix + ".bv"),
                    fetch(params, prefix + ".wo"), fetch(params, prefix + ".bo")};
}

LayerParams layer_params(const ParamMap& params, const std::string& prefix) {
  LayerParams p;
  p.ln1_g = fetch(params, prefix + ".ln1.g");
  p.ln1_b = fetch(params, prefix + ".ln1.b");
  p.attn = attn_params(params, prefix + ".attn");
  p.ln2_g = fetch(params, prefix + ".ln2.g");
  p.ln2_b = fetch(params, prefix + ".ln2.b");
  p.mlp_w1 = fetch(params, prefix + ".mlp.w1");
  p.mlp_b1 = fetch(params, prefix + ".mlp.b1");
  p.mlp_w2 = fetch(params, prefix + ".mlp.w2");
  p.mlp_b2 = fetch(params, prefix + ".mlp.b2");
  return p;
}

Tensor mha(const Tensor& qx, const Tensor& kx, const AttnParams& p,
           std::int64_t heads, const RotCtx& qrot, const RotCtx& krot) {
  const std::int64_t d = qx.extent(1);
  if (d % heads != 0) throw ShapeError("attention width not divisible by head count");
  const std::int64_t dh = d / heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor q = add_row(matmul(qx, p.wq), p.bq);
  Tensor k = add_row(matmul(kx, p.wk), p.bk);
  Tensor v = add_row(matmul(kx, p.wv), p.bv);

  std::vector<Tensor> head_out;
  head_out.reserve(static_cast<std::size_t>(heads));
  for (std::int64_t h = 0; h < heads; ++h) {
    Tensor qh = slice(q, 1, h * dh, dh);
    Tensor kh = slice(k, 1, h * dh, dh);
    if (qrot.rot != nullptr && qrot.rot->active()) qh = rotate_tokens(qh, *qrot.rot, *qrot.index);
    if (krot.rot != nullptr && krot.rot->active()) kh = rotate_tokens(kh, *krot.rot, *krot.index);
    Tensor vh = slice(v, 1, h * dh, dh);
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_scale);
    head_out.push_back(matmul(softmax(scores, 1), vh));
  }
  Tensor merged = heads == 1 ? head_out[0] : concat(head_out, 1);
  return add_row(matmul(merged, p.wo), p.bo);
}

Tensor self_attention_sublayer(const Tensor& tokens, const LayerParams& p,
                               std::int64_t heads, const RotCtx& rot) {
  Tensor x = layernorm(tokens, p.ln1_g, p.ln1_b);
  return add(tokens, mha(x, x, p.attn, heads, rot, rot));
}

Tensor mlp_sublayer(const Tensor& tokens, const LayerParams& p) {
  Tensor x = layernorm(tokens, p.ln2_g, p.ln2_b);
  Tensor hidden = gelu(add_row(matmul(x, p.mlp_w1), p.mlp_b1));
  return add(tokens, add_row(matmul(hidden, p.mlp_w2), p.mlp_b2));
}

Tensor cross_attention_sublayer(const Tensor& tokens, const Tensor& other,
                                const Tensor& ln_g, const Tensor& ln_b,
                                const AttnParams& p, std::int64_t heads,
                                const RotCtx& qrot, const RotCtx& krot) {
  Tensor x = layernorm(tokens, ln_g, ln_b);
  Tensor y = layernorm(other, ln_g, ln_b);
  return add(tokens, mha(x, y, p, heads, qrot, krot));
}

void add_linear(ParamMap& params, const std::string& wname, const std::string& bname,
                std::int64_t in, std::int64_t out, Rng& rng, double std_dev) {
  params.emplace(wname, make_randn({in, out}, rng, 0.0, std_dev, true));
  params.emplace(bname, Tensor::zeros({out}, true));
}

void add_layernorm(ParamMap& params, const std::string& gname, const std::string& bname,
                   std::int64_t dim) {
  params.emplace(gname, Tensor::full({dim}, 1.0, true));
  params.emplace(bname, Tensor::zeros({dim}, true));
}

void add_attn(ParamMap& params, const std::string& prefix, std::int64_t dim,
              Rng& rng, double std_dev) {
  add_linear(params, prefix + ".wq", prefix + ".bq", dim, dim, rng, std_dev);
  add_linear(params, prefix + ".wk", prefix + ".bk", dim, dim, rng, std_dev);
  add_linear(params, prefix + ".wv", prefix + ".bv", dim, dim, rng, std_dev);
  add_linear(params, prefix + ".wo", prefix + ".bo", dim, dim, rng, std_dev);
}

void add_layer(ParamMap& params, const std::string& prefix, std::int64_t dim,
               std::int64_t mlp_ratio, Rng& rng, double std_dev) {
  add_layernorm(params, prefix + ".ln1.g", prefix + ".ln1.b", dim);
  add_attn(params, prefix + ".attn", dim, rng, std_dev);
  add_layernorm(params, prefix + ".ln2.g", prefix + ".ln2.b", dim);
  add_linear(params, prefix + ".mlp.w1", prefix + ".mlp.b1", dim, dim * mlp_ratio, rng, std_dev);
  add_linear(params, prefix + ".mlp.w2", prefix + ".mlp.b2", dim * mlp_ratio, dim, rng, std_dev);
}

}  // namespace enc

ParamMap init_encoder_params(const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  constexpr double kStd = 0.02;
  const std::int64_t d = cfg.embed_dim;
  ParamMap params;

  enc::add_linear(params, "patch.w", "patch.b", cfg.patch * cfg.patch * cfg.channels, d, rng, kStd);
  params.emplace("cls.spatial", make_randn({1, d}, rng, 0.0, kStd, true));
  params.emplace("cls.temporal", make_randn({1, d}, rng, 0.0, kStd, true));

  if (cfg.posenc == PosencMode::kApe) {
    params.emplace("ape.spatial",
                   make_randn({cfg.tokens_per_frame(), d}, rng, 0.0, kStd, true));
    params.emplace("ape.temporal", make_randn({cfg.frames + 1, d}, rng, 0.0, kStd, true));
  } else {
    LiereGens gens = make_liere_gens(cfg.head_dim(), cfg.rot_block, rng);
    params.emplace("liere.ux", gens.ux);
    params.emplace("liere.uy", gens.uy);
    params.emplace("liere.ut", gens.ut);
  }

  for (std::int64_t i = 0; i < cfg.spatial_layers; ++i)
    enc::add_layer(params, "spatial." + std::to_string(i), d, cfg.mlp_ratio, rng, kStd);
  for (std::int64_t i = 0; i < cfg.temporal_layers; ++i)
    enc::add_layer(params, "temporal." + std::to_string(i), d, cfg.mlp_ratio, rng, kStd);
  enc::add_layernorm(params, "final.ln.g", "final.ln.b", d);
  return params;
}

ModelContext make_context(const EncoderConfig& cfg, const ParamMap& params) {
  cfg.validate();
  ModelContext ctx;
  ctx.cfg = cfg;
  ctx.params = &params;
  if (cfg.posenc != PosencMode::kLiere) return ctx;

  LiereGens gens;
  gens.ux = enc::fetch(params, "liere.ux");
  gens.uy = enc::fetch(params, "liere.uy");
  gens.ut = enc::fetch(params, "liere.ut");
  gens.nb = gens.ux.extent(0);
  gens.b = gens.ux.extent(1);

  const std::int64_t g = cfg.grid();
  const std::int64_t np = cfg.patches_per_frame();
  const std::int64_t t = cfg.frames;

  std::vector<Coord3> spatial_coords;
  spatial_coords.reserve(static_cast<std::size_t>(t * np));
  std::vector<Coord3> temporal_coords;
  temporal_coords.reserve(static_cast<std::size_t>(t));
  for (std::int64_t f = 0; f < t; ++f) {
    const double tf = (static_cast<double>(f) + 0.5) / static_cast<double>(t);
    for (std::int64_t gy = 0; gy < g; ++gy)
      for (std::int64_t gx = 0; gx < g; ++gx)
        spatial_coords.push_back({(static_cast<double>(gx) + 0.5) / static_cast<double>(g),
                                  (static_cast<double>(gy) + 0.5) / static_cast<double>(g), tf});
    temporal_coords.push_back({0.5, 0.5, tf});
  }
  ctx.spatial_rot = build_rotation_set(gens, spatial_coords);
  ctx.temporal_rot = build_rotation_set(gens, temporal_coords);

  ctx.spatial_rot_index.resize(static_cast<std::size_t>(t));
  for (std::int64_t f = 0; f < t; ++f) {
    auto& idx = ctx.spatial_rot_index[static_cast<std::size_t>(f)];
    idx.reserve(static_cast<std::size_t>(np + 1));
    idx.push_back(-1);  // CLS passes through unrotated
    for (std::int64_t p = 0; p < np; ++p) idx.push_back(f * np + p);
  }
  ctx.temporal_rot_index.reserve(static_cast<std::size_t>(t + 1));
  ctx.temporal_rot_index.push_back(-1);
  for (std::int64_t f = 0; f < t; ++f) ctx.temporal_rot_index.push_back(f);
  return ctx;
}

namespace {

void check_clip_shape(const Clip& clip, const EncoderConfig& cfg) {
  if (static_cast<std::int64_t>(clip.t) != cfg.frames ||
      static_cast<std::int64_t>(clip.h) != cfg.res ||
      static_cast<std::int64_t>(clip.w) != cfg.res ||
      static_cast<std::int64_t>(clip.c) != cfg.channels)
    throw ShapeError("clip " + std::to_string(clip.t) + "x" + std::to_string(clip.h) + "x" +
                     std::to_string(clip.w) + "x" + std::to_string(clip.c) +
                     " does not match encoder config " + std::to_string(cfg.frames) + "x" +
                     std::to_string(cfg.res) + "x" + std::to_string(cfg.res) + "x" +
                     std::to_string(cfg.channels));
}

// Flattened P*P*C patch rows for every frame, stacked into [T*Np, P*P*C].
Tensor patch_rows(const Clip& clip, const EncoderConfig& cfg) {
  const std::int64_t p = cfg.patch;
  const std::int64_t g = cfg.grid();
  const std::int64_t np = cfg.patches_per_frame();
  const std::int64_t row_len = p * p * cfg.channels;
  Tensor rows = Tensor::zeros({cfg.frames * np, row_len});
  double* out = rows.mutable_values().data();
  for (std::int64_t f = 0; f < cfg.frames; ++f) {
    for (std::int64_t gy = 0; gy < g; ++gy) {
      for (std::int64_t gx = 0; gx < g; ++gx) {
        double* row = out + ((f * np + gy * g + gx) * row_len);
        std::int64_t i = 0;
        for (std::int64_t py = 0; py < p; ++py)
          for (std::int64_t px = 0; px < p; ++px)
            for (std::int64_t ch = 0; ch < cfg.channels; ++ch)
              row[i++] = clip.at(static_cast<std::uint32_t>(f),
                                 static_cast<std::uint32_t>(gy * p + py),
                                 static_cast<std::uint32_t>(gx * p + px),
                                 static_cast<std::uint32_t>(ch));
      }
    }
  }
  return rows;
}

}  // namespace

std::vector<Tensor> patchify(const Clip& clip, const ModelContext& ctx) {
  const EncoderConfig& cfg = ctx.cfg;
  check_clip_shape(clip, cfg);
  const std::int64_t np = cfg.patches_per_frame();

  Tensor projected = add_row(matmul(patch_rows(clip, cfg), enc::fetch(*ctx.params, "patch.w")),
                             enc::fetch(*ctx.params, "patch.b"));
  const Tensor& cls = enc::fetch(*ctx.params, "cls.spatial");

  std::vector<Tensor> frames;
  frames.reserve(static_cast<std::size_t>(cfg.frames));
  for (std::int64_t f = 0; f < cfg.frames; ++f)
    frames.push_back(concat({cls, slice(projected, 0, f * np, np)}, 0));
  return frames;
}

Tensor encode_clip(const Clip& clip, const ModelContext& ctx) {
  const EncoderConfig& cfg = ctx.cfg;
  check_clip_shape(clip, cfg);
  const bool liere = cfg.posenc == PosencMode::kLiere;
  const std::int64_t t = cfg.frames;
  const std::int64_t n = cfg.tokens_per_frame();

  std::vector<Tensor> frames;
  if (cfg.mgm) {
    Clip masked = motion_guided_mask(clip, static_cast<int>(cfg.patch), cfg.flow_radius,
                                     cfg.keep_ratio);
    frames = patchify(masked, ctx);
  } else {
    frames = patchify(clip, ctx);
  }

  if (!liere) {
    const Tensor& table = enc::fetch(*ctx.params, "ape.spatial");
    for (auto& tokens : frames) tokens = add(tokens, table);
  }

  for (std::int64_t l = 0; l < cfg.spatial_layers; ++l) {
    enc::LayerParams lp = enc::layer_params(*ctx.params, "spatial." + std::to_string(l));
    for (std::int64_t f = 0; f < t; ++f) {
      enc::RotCtx rot;
      if (liere) {
        rot.rot = &ctx.spatial_rot;
        rot.index = &ctx.spatial_rot_index[static_cast<std::size_t>(f)];
      }
      auto& tokens = frames[static_cast<std::size_t>(f)];
      tokens = enc::self_attention_sublayer(tokens, lp, cfg.heads, rot);
    }
    // The MLP acts row-wise, so all frames share one batched pass.
    Tensor all = enc::mlp_sublayer(concat(frames, 0), lp);
    for (std::int64_t f = 0; f < t; ++f)
      frames[static_cast<std::size_t>(f)] = slice(all, 0, f * n, n);
  }

  std::vector<Tensor> summary;
  summary.reserve(static_cast<std::size_t>(t + 1));
  summary.push_back(enc::fetch(*ctx.params, "cls.temporal"));
  for (const auto& tokens : frames) summary.push_back(slice(tokens, 0, 0, 1));
  Tensor seq = concat(summary, 0);
  if (!liere) seq = add(seq, enc::fetch(*ctx.params, "ape.temporal"));

  enc::RotCtx trot;
  if (liere) {
    trot.rot = &ctx.temporal_rot;
    trot.index = &ctx.temporal_rot_index;
  }
  for (std::int64_t l = 0; l < cfg.temporal_layers; ++l) {
    enc::LayerParams lp = enc::layer_params(*ctx.params, "temporal." + std::to_string(l));
    seq = enc::self_attention_sublayer(seq, lp, cfg.heads, trot);
    seq = enc::mlp_sublayer(seq, lp);
  }

  Tensor cls = slice(seq, 0, 0, 1);
  Tensor out = layernorm(cls, enc::fetch(*ctx.params, "final.ln.g"),
                         enc::fetch(*ctx.params, "final.ln.b"));
  return reshape(out, {cfg.embed_dim});
}

Tensor encode_clip(const Clip& clip, const EncoderConfig& cfg, const ParamMap& params) {
  ModelContext ctx = make_context(cfg, params);
  return encode_clip(clip, ctx);
}

}  // namespace cliporder
