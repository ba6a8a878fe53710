#include "cliporder/heads.hpp"

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cliporder/errors.hpp"
#include "cliporder/motion.hpp"
#include "cliporder/rng.hpp"
#include "encoder_internal.hpp"

namespace cliporder {
namespace {

struct XParams {
  Tensor ln_g, ln_b;
  enc::AttnParams attn;
};

XParams x_params(const ParamMap& params, const std::string& prefix) {
  return XParams{enc::fetch(params, prefix + ".ln.g"), enc::fetch(params, prefix + ".ln.b"),
                 enc::attn_params(params, prefix + ".attn")};
}

void check_vector(const Tensor& v, const char* what) {
  if (!v.defined() || v.rank() != 1 || v.size() == 0)
    throw ShapeError(std::string(what) + " must be a non-empty 1-d vector");
}

Tensor vector_norm(const Tensor& v) { return sqrt(dot(v, v)); }

}  // namespace

const char* method_name(Method method) {
  switch (method) {
    case Method::kEmbedding: return "embedding";
    case Method::kTtFull: return "tt_full";
    case Method::kTtCls: return "tt_cls";
  }
  throw ContractError("unreachable method");
}

Method method_from_name(const std::string& name) {
  if (name == "embedding") return Method::kEmbedding;
  if (name == "tt_full") return Method::kTtFull;
  if (name == "tt_cls") return Method::kTtCls;
  throw ConfigError("unknown method '" + name + "' (expected embedding, tt_full or tt_cls)");
}

Tensor cosine_similarity(const Tensor& u, const Tensor& v) {
  check_vector(u, "cosine input u");
  check_vector(v, "cosine input v");
  if (u.size() != v.size()) throw ShapeError("cosine inputs differ in length");
  Tensor nu = vector_norm(u);
  Tensor nv = vector_norm(v);
  if (nu.value() == 0.0 || nv.value() == 0.0)
    throw NumericError("zero-norm vector in cosine similarity");
  return div(dot(u, v), mul(nu, nv));
}

Tensor cosine_distance(const Tensor& u, const Tensor& v) {
  return sub(Tensor::scalar(1.0), cosine_similarity(u, v));
}

Tensor prototype_loss(const Tensor& embedding, WeakLabel label, const Tensor& c_sob,
                      const Tensor& c_nosob, double repulsion) {
  if (label == WeakLabel::kExcluded)
    throw ContractError("excluded clips must be filtered before the loss");
  const Tensor& target = label == WeakLabel::kSob ? c_sob : c_nosob;
  Tensor pull = cosine_distance(embedding, target);
  if (repulsion == 0.0) return pull;
  Tensor hinge = relu(cosine_similarity(c_sob, c_nosob));
  return add(pull, scale(hinge, repulsion));
}

Tensor sob_score(const Tensor& embedding, const Tensor& c_sob, const Tensor& c_nosob) {
  return sub(cosine_distance(embedding, c_nosob), cosine_distance(embedding, c_sob));
}

PairPrediction order_pair_embedding(const Tensor& emb_a, const Tensor& emb_b,
                                    const Tensor& c_sob, const Tensor& c_nosob) {
  Tape::NoGrad guard;
  const double sa = sob_score(emb_a, c_sob, c_nosob).value();
  const double sb = sob_score(emb_b, c_sob, c_nosob).value();
  PairPrediction pred;
  pred.first_earlier = sa >= sb;
  pred.margin = std::abs(sa - sb);
  pred.method = Method::kEmbedding;
  return pred;
}

PairPrediction order_pair_logit(double logit, Method method) {
  PairPrediction pred;
  pred.first_earlier = logit >= 0.0;
  pred.margin = std::abs(logit);
  pred.method = method;
  return pred;
}

ParamMap init_head_params(const EncoderConfig& cfg, Method method, Rng& rng) {
  cfg.validate();
  constexpr double kStd = 0.02;
  const std::int64_t d = cfg.embed_dim;
  ParamMap params;

  if (method == Method::kEmbedding) {
    // Two orthogonal unit vectors via one Gram-Schmidt step.
    std::vector<double> a(static_cast<std::size_t>(d)), b(static_cast<std::size_t>(d));
    for (auto& x : a) x = rng.normal();
    for (auto& x : b) x = rng.normal();
    double na = 0.0;
    for (double x : a) na += x * x;
    na = std::sqrt(na);
    if (na == 0.0) throw NumericError("degenerate prototype draw");
    for (auto& x : a) x /= na;
    double proj = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) proj += a[i] * b[i];
    double nb = 0.0;
    for (std::size_t i = 0; i < b.size(); ++i) {
      b[i] -= proj * a[i];
      nb += b[i] * b[i];
    }
    nb = std::sqrt(nb);
    if (nb == 0.0) throw NumericError("degenerate prototype draw");
    for (auto& x : b) x /= nb;
    params.emplace("proto.sob", Tensor(std::move(a), {d}, true));
    params.emplace("proto.nosob", Tensor(std::move(b), {d}, true));
    return params;
  }

  if (method == Method::kTtFull) {
    for (std::int64_t i = 0; i < cfg.spatial_layers; ++i) {
      const std::string prefix = "xspatial." + std::to_string(i);
      enc::add_layernorm(params, prefix + ".ln.g", prefix + ".ln.b", d);
      enc::add_attn(params, prefix + ".attn", d, rng, kStd);
    }
    for (std::int64_t i = 0; i < cfg.temporal_layers; ++i) {
      const std::string prefix = "xtemporal." + std::to_string(i);
      enc::add_layernorm(params, prefix + ".ln.g", prefix + ".ln.b", d);
      enc::add_attn(params, prefix + ".attn", d, rng, kStd);
    }
  } else {
    enc::add_layernorm(params, "clsx.ln.g", "clsx.ln.b", d);
    enc::add_attn(params, "clsx.attn", d, rng, kStd);
  }
  params.emplace("readout.w", Tensor::zeros({d}, true));
  return params;
}

namespace {

struct Tower {
  std::vector<Tensor> frames;  // spatial stage, [tokens_per_frame, d] each
  Tensor seq;                  // temporal stage, [frames + 1, d]
};

Tower start_tower(const Clip& clip, const ModelContext& ctx) {
  Tower tower;
  if (ctx.cfg.mgm) {
    Clip masked = motion_guided_mask(clip, ctx.cfg.patch, ctx.cfg.flow_radius,
                                     ctx.cfg.keep_ratio);
    tower.frames = patchify(masked, ctx);
  } else {
    tower.frames = patchify(clip, ctx);
  }
  if (ctx.cfg.posenc == PosencMode::kApe) {
    const Tensor& table = enc::fetch(*ctx.params, "ape.spatial");
    for (auto& tokens : tower.frames) tokens = add(tokens, table);
  }
  return tower;
}

void build_summary(Tower& tower, const ModelContext& ctx) {
  std::vector<Tensor> rows;
  rows.reserve(tower.frames.size() + 1);
  rows.push_back(enc::fetch(*ctx.params, "cls.temporal"));
  for (const auto& tokens : tower.frames) rows.push_back(slice(tokens, 0, 0, 1));
  tower.seq = concat(rows, 0);
  if (ctx.cfg.posenc == PosencMode::kApe)
    tower.seq = add(tower.seq, enc::fetch(*ctx.params, "ape.temporal"));
}

Tensor final_cls(const Tower& tower, const ModelContext& ctx) {
  Tensor cls = slice(tower.seq, 0, 0, 1);
  Tensor out = layernorm(cls, enc::fetch(*ctx.params, "final.ln.g"),
                         enc::fetch(*ctx.params, "final.ln.b"));
  return reshape(out, {ctx.cfg.embed_dim});
}

Tensor readout_logit(const Tensor& u_a, const Tensor& u_b, const ModelContext& ctx) {
  return dot(enc::fetch(*ctx.params, "readout.w"), sub(u_a, u_b));
}

// Cross-attention pattern (1): every block of both stages. Both towers move
// through each phase together — self-attention, then cross-attention against
// the other tower's post-self tokens, then the MLP — with phase parameters
// shared between towers, so swapping the inputs swaps the outputs exactly.
Tensor full_cross_logit(const Clip& a, const Clip& b, const ModelContext& ctx) {
  const EncoderConfig& cfg = ctx.cfg;
  const bool liere = cfg.posenc == PosencMode::kLiere;
  const std::int64_t t = cfg.frames;
  const std::int64_t n = cfg.tokens_per_frame();

  Tower ta = start_tower(a, ctx);
  Tower tb = start_tower(b, ctx);

  std::vector<std::int64_t> all_spatial_index;
  if (liere)
    for (const auto& idx : ctx.spatial_rot_index)
      all_spatial_index.insert(all_spatial_index.end(), idx.begin(), idx.end());

  for (std::int64_t l = 0; l < cfg.spatial_layers; ++l) {
    enc::LayerParams lp = enc::layer_params(*ctx.params, "spatial." + std::to_string(l));
    XParams xp = x_params(*ctx.params, "xspatial." + std::to_string(l));
    for (Tower* tower : {&ta, &tb}) {
      for (std::int64_t f = 0; f < t; ++f) {
        enc::RotCtx rot;
        if (liere) {
          rot.rot = &ctx.spatial_rot;
          rot.index = &ctx.spatial_rot_index[static_cast<std::size_t>(f)];
        }
        auto& tokens = tower->frames[static_cast<std::size_t>(f)];
        tokens = enc::self_attention_sublayer(tokens, lp, cfg.heads, rot);
      }
    }
    Tensor a_all = concat(ta.frames, 0);
    Tensor b_all = concat(tb.frames, 0);
    enc::RotCtx krot;
    if (liere) {
      krot.rot = &ctx.spatial_rot;
      krot.index = &all_spatial_index;
    }
    for (auto [tower, other] : {std::pair{&ta, &b_all}, std::pair{&tb, &a_all}}) {
      for (std::int64_t f = 0; f < t; ++f) {
        enc::RotCtx qrot;
        if (liere) {
          qrot.rot = &ctx.spatial_rot;
          qrot.index = &ctx.spatial_rot_index[static_cast<std::size_t>(f)];
        }
        auto& tokens = tower->frames[static_cast<std::size_t>(f)];
        tokens = enc::cross_attention_sublayer(tokens, *other, xp.ln_g, xp.ln_b, xp.attn,
                                               cfg.heads, qrot, krot);
      }
    }
    for (Tower* tower : {&ta, &tb}) {
      Tensor all = enc::mlp_sublayer(concat(tower->frames, 0), lp);
      for (std::int64_t f = 0; f < t; ++f)
        tower->frames[static_cast<std::size_t>(f)] = slice(all, 0, f * n, n);
    }
  }

  build_summary(ta, ctx);
  build_summary(tb, ctx);
  enc::RotCtx trot;
  if (liere) {
    trot.rot = &ctx.temporal_rot;
    trot.index = &ctx.temporal_rot_index;
  }
  for (std::int64_t l = 0; l < cfg.temporal_layers; ++l) {
    enc::LayerParams lp = enc::layer_params(*ctx.params, "temporal." + std::to_string(l));
    XParams xp = x_params(*ctx.params, "xtemporal." + std::to_string(l));
    ta.seq = enc::self_attention_sublayer(ta.seq, lp, cfg.heads, trot);
    tb.seq = enc::self_attention_sublayer(tb.seq, lp, cfg.heads, trot);
    Tensor a_snap = ta.seq;
    Tensor b_snap = tb.seq;
    ta.seq = enc::cross_attention_sublayer(ta.seq, b_snap, xp.ln_g, xp.ln_b, xp.attn,
                                           cfg.heads, trot, trot);
    tb.seq = enc::cross_attention_sublayer(tb.seq, a_snap, xp.ln_g, xp.ln_b, xp.attn,
                                           cfg.heads, trot, trot);
    ta.seq = enc::mlp_sublayer(ta.seq, lp);
    tb.seq = enc::mlp_sublayer(tb.seq, lp);
  }

  return readout_logit(final_cls(ta, ctx), final_cls(tb, ctx), ctx);
}

// Cross-attention pattern (2): independent towers, then one bidirectional
// exchange where each tower's temporal CLS attends over the pair of CLS
// vectors, with shared parameters.
Tensor cls_cross_logit(const Clip& a, const Clip& b, const ModelContext& ctx) {
  Tensor cls_a;
  Tensor cls_b;
  {
    Tower ta = start_tower(a, ctx);
    Tower tb = start_tower(b, ctx);
    const EncoderConfig& cfg = ctx.cfg;
    const bool liere = cfg.posenc == PosencMode::kLiere;
    const std::int64_t t = cfg.frames;
    const std::int64_t n = cfg.tokens_per_frame();

    for (Tower* tower : {&ta, &tb}) {
      for (std::int64_t l = 0; l < cfg.spatial_layers; ++l) {
        enc::LayerParams lp = enc::layer_params(*ctx.params, "spatial." + std::to_string(l));
        for (std::int64_t f = 0; f < t; ++f) {
          enc::RotCtx rot;
          if (liere) {
            rot.rot = &ctx.spatial_rot;
            rot.index = &ctx.spatial_rot_index[static_cast<std::size_t>(f)];
          }
          auto& tokens = tower->frames[static_cast<std::size_t>(f)];
          tokens = enc::self_attention_sublayer(tokens, lp, cfg.heads, rot);
        }
        Tensor all = enc::mlp_sublayer(concat(tower->frames, 0), lp);
        for (std::int64_t f = 0; f < t; ++f)
          tower->frames[static_cast<std::size_t>(f)] = slice(all, 0, f * n, n);
      }
      build_summary(*tower, ctx);
      enc::RotCtx trot;
      if (liere) {
        trot.rot = &ctx.temporal_rot;
        trot.index = &ctx.temporal_rot_index;
      }
      for (std::int64_t l = 0; l < cfg.temporal_layers; ++l) {
        enc::LayerParams lp = enc::layer_params(*ctx.params, "temporal." + std::to_string(l));
        tower->seq = enc::self_attention_sublayer(tower->seq, lp, cfg.heads, trot);
        tower->seq = enc::mlp_sublayer(tower->seq, lp);
      }
    }
    cls_a = slice(ta.seq, 0, 0, 1);
    cls_b = slice(tb.seq, 0, 0, 1);
  }

  XParams xp = x_params(*ctx.params, "clsx");
  Tensor pair_a = concat({cls_a, cls_b}, 0);
  Tensor pair_b = concat({cls_b, cls_a}, 0);
  enc::RotCtx none;
  Tensor out_a = enc::cross_attention_sublayer(cls_a, pair_a, xp.ln_g, xp.ln_b, xp.attn,
                                               ctx.cfg.heads, none, none);
  Tensor out_b = enc::cross_attention_sublayer(cls_b, pair_b, xp.ln_g, xp.ln_b, xp.attn,
                                               ctx.cfg.heads, none, none);

  auto finish = [&](const Tensor& cls) {
    Tensor normed = layernorm(cls, enc::fetch(*ctx.params, "final.ln.g"),
                              enc::fetch(*ctx.params, "final.ln.b"));
    return reshape(normed, {ctx.cfg.embed_dim});
  };
  return readout_logit(finish(out_a), finish(out_b), ctx);
}

}  // namespace

Tensor two_tower_logit(const Clip& a, const Clip& b, Method method, const ModelContext& ctx) {
  switch (method) {
    case Method::kTtFull: return full_cross_logit(a, b, ctx);
    case Method::kTtCls: return cls_cross_logit(a, b, ctx);
    case Method::kEmbedding:
      throw ContractError("two_tower_logit called with the embedding method");
  }
  throw ContractError("unreachable method");
}

}  // namespace cliporder
