#include "cliporder/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "cliporder/clip.hpp"
#include "cliporder/encoder.hpp"
#include "cliporder/heads.hpp"
#include "cliporder/motion.hpp"
#include "cliporder/posenc.hpp"
#include "cliporder/rng.hpp"
#include "cliporder/tensor.hpp"
#include "encoder_internal.hpp"

namespace cliporder {

namespace {

// Deep compositions get a wider step: central differences at 1e-5 bottom out
// on f64 roundoff through dozens of chained matmuls before they bottom out
// on truncation error. The antisymmetrized two-tower logit sits in between:
// tower cancellation shrinks first derivatives without shrinking curvature,
// so both very small and very large steps lose accuracy.
constexpr double kOpStep = 1e-5;
constexpr double kDeepStep = 1e-4;
constexpr double kTwoTowerStep = 3e-5;

using Objective = std::function<Tensor(const Tensor&)>;

struct Suite {
  Rng rng;
  std::vector<GradCheckRow> rows;

  explicit Suite(std::uint64_t seed) : rng(seed) {}

  void row(const std::string& name, double err, double tol = 1e-4) {
    rows.push_back({name, err, tol, err < tol});
  }

  Tensor randn(Shape shape, double std_dev = 1.0) {
    return make_randn(std::move(shape), rng, 0.0, std_dev);
  }

  // Uniform values in [lo, hi) with an optional random sign, keeping inputs
  // away from kinks and poles.
  Tensor randr(Shape shape, double lo, double hi, bool signed_values) {
    const auto n = static_cast<std::size_t>(shape_numel(shape));
    std::vector<double> v(n);
    for (auto& x : v) {
      x = rng.uniform(lo, hi);
      if (signed_values && rng.coin()) x = -x;
    }
    return Tensor(std::move(v), std::move(shape));
  }

  // sum(op(x) * w) with a fixed random weight makes every output coordinate
  // matter without favoring any.
  double weighted(const std::function<Tensor(const Tensor&)>& op, const Tensor& x,
                  Shape out_shape, double step = kOpStep) {
    Tensor w = randn(std::move(out_shape));
    return grad_check([&](const Tensor& leaf) { return sum(mul(op(leaf), w)); }, x, step);
  }
};

Clip random_clip(const EncoderConfig& cfg, Rng& rng) {
  Clip clip;
  clip.video_id = "gradcheck";
  clip.clip_index = 0;
  clip.fps = 4.0;
  clip.t = cfg.frames;
  clip.h = cfg.res;
  clip.w = cfg.res;
  clip.c = cfg.channels;
  clip.pixels.resize(static_cast<std::size_t>(clip.t * clip.h * clip.w * clip.c));
  for (auto& p : clip.pixels) p = static_cast<float>(rng.uniform());
  return clip;
}

EncoderConfig mini_config(PosencMode mode) {
  EncoderConfig cfg;
  cfg.embed_dim = 16;
  cfg.heads = 2;
  cfg.spatial_layers = 1;
  cfg.temporal_layers = 1;
  cfg.patch = 8;
  cfg.frames = 2;
  cfg.res = 16;
  cfg.channels = 1;
  cfg.rot_block = 4;
  cfg.posenc = mode;
  return cfg;
}

void check_tensor_ops(Suite& s) {
  const Shape m34{3, 4};
  Tensor a = s.randn(m34);
  Tensor b = s.randn(m34);

  s.row("add", s.weighted([&](const Tensor& x) { return add(x, b); }, a, m34));
  s.row("sub", s.weighted([&](const Tensor& x) { return sub(b, x); }, a, m34));
  s.row("mul", s.weighted([&](const Tensor& x) { return mul(x, b); }, a, m34));

  Tensor denom = s.randr(m34, 0.6, 1.8, true);
  double err = s.weighted([&](const Tensor& x) { return div(x, denom); }, a, m34);
  err = std::max(err, s.weighted([&](const Tensor& x) { return div(a, x); }, denom, m34));
  s.row("div", err);

  s.row("scale", s.weighted([&](const Tensor& x) { return scale(x, -0.37); }, a, m34));

  Tensor rowvec = s.randn({4});
  err = s.weighted([&](const Tensor& x) { return add_row(x, rowvec); }, a, m34);
  err = std::max(err, s.weighted([&](const Tensor& x) { return add_row(a, x); }, rowvec, m34));
  s.row("add_row", err);

  Tensor lhs = s.randn({3, 5});
  Tensor rhs = s.randn({5, 4});
  err = s.weighted([&](const Tensor& x) { return matmul(x, rhs); }, lhs, m34);
  err = std::max(err, s.weighted([&](const Tensor& x) { return matmul(lhs, x); }, rhs, m34));
  s.row("matmul", err);

  s.row("transpose", s.weighted([](const Tensor& x) { return transpose(x); }, a, {4, 3}));
  s.row("reshape", s.weighted([](const Tensor& x) { return reshape(x, {2, 6}); }, a, {2, 6}));

  err = s.weighted([&](const Tensor& x) { return concat({x, b}, 0); }, a, {6, 4});
  err = std::max(err, s.weighted([&](const Tensor& x) { return concat({a, x}, 1); }, b, {3, 8}));
  s.row("concat", err);

  err = s.weighted([](const Tensor& x) { return slice(x, 0, 1, 2); }, a, {2, 4});
  err = std::max(err, s.weighted([](const Tensor& x) { return slice(x, 1, 0, 3); }, a, {3, 3}));
  s.row("slice", err);

  s.row("sum", grad_check([](const Tensor& x) { return sum(x); }, a, kOpStep));
  s.row("mean", grad_check([](const Tensor& x) { return mean(x); }, a, kOpStep));

  Tensor u = s.randn({6});
  Tensor v = s.randn({6});
  err = grad_check([&](const Tensor& x) { return dot(x, v); }, u, kOpStep);
  err = std::max(err, grad_check([&](const Tensor& x) { return dot(u, x); }, v, kOpStep));
  s.row("dot", err);

  Tensor positive = s.randr(m34, 0.3, 2.0, false);
  s.row("sqrt", s.weighted([](const Tensor& x) { return cliporder::sqrt(x); }, positive, m34));

  Tensor off_kink = s.randr(m34, 0.2, 1.5, true);
  s.row("relu", s.weighted([](const Tensor& x) { return relu(x); }, off_kink, m34));
  s.row("gelu", s.weighted([](const Tensor& x) { return gelu(x); }, a, m34));

  err = s.weighted([](const Tensor& x) { return softmax(x, 1); }, a, m34);
  err = std::max(err, s.weighted([](const Tensor& x) { return softmax(x, 0); }, a, m34));
  s.row("softmax", err);

  Tensor gain = s.randr({4}, 0.5, 1.5, false);
  Tensor bias = s.randn({4}, 0.3);
  err = s.weighted([&](const Tensor& x) { return layernorm(x, gain, bias); }, a, m34);
  err = std::max(err,
                 s.weighted([&](const Tensor& x) { return layernorm(a, x, bias); }, gain, m34));
  err = std::max(err,
                 s.weighted([&](const Tensor& x) { return layernorm(a, gain, x); }, bias, m34));
  s.row("layernorm", err);

  Tensor table = s.randn({5, 4});
  const std::vector<std::int64_t> idx{3, 0, 2, 0};
  s.row("gather_rows",
        s.weighted([&](const Tensor& x) { return gather_rows(x, idx); }, table, {4, 4}));

  Tensor logit = s.randn({1});
  err = grad_check([](const Tensor& x) { return bce_with_logit(x, 1.0); }, logit, kOpStep);
  err = std::max(err,
                 grad_check([](const Tensor& x) { return bce_with_logit(x, 0.0); }, logit, kOpStep));
  s.row("bce_with_logit", err);
}

void check_rotations(Suite& s) {
  Tensor raw = s.randn({6, 6}, 0.4);
  s.row("expm_skew",
        s.weighted([](const Tensor& x) { return expm_skew(skew(x)); }, raw, {6, 6}));

  LiereGens gens = make_liere_gens(8, 4, s.rng);
  const std::vector<Coord3> coords{{0.1, 0.9, 0.2}, {0.5, 0.5, 0.5}, {0.8, 0.3, 0.7}};
  Tensor tokens = s.randn({4, 8});
  const std::vector<std::int64_t> index{-1, 0, 1, 2};

  // Weight tensor shared across the axis checks so the objective is fixed.
  Tensor w = s.randn({4, 8});
  double err = 0.0;
  for (Tensor LiereGens::*axis : {&LiereGens::ux, &LiereGens::uy, &LiereGens::ut}) {
    auto f = [&](const Tensor& leaf) {
      LiereGens probe = gens;
      probe.*axis = leaf;
      RotationSet rset = build_rotation_set(probe, coords);
      return sum(mul(rotate_tokens(tokens, rset, index), w));
    };
    err = std::max(err, grad_check(f, gens.*axis, kOpStep));
  }
  s.row("build_rotation_set", err);

  RotationSet rset = build_rotation_set(gens, coords);
  s.row("rotate_tokens",
        s.weighted([&](const Tensor& x) { return rotate_tokens(x, rset, index); }, tokens,
                   {4, 8}));
}

void check_transformer_block(Suite& s) {
  const std::int64_t d = 16, heads = 2;
  ParamMap params;
  enc::add_layer(params, "blk", d, 4, s.rng, 0.2);
  Tensor tokens = s.randn({5, d}, 0.7);
  Tensor w = s.randn({5, d});

  auto block = [&](const ParamMap& p, const Tensor& x) {
    enc::LayerParams lp = enc::layer_params(p, "blk");
    return enc::mlp_sublayer(enc::self_attention_sublayer(x, lp, heads, enc::RotCtx{}), lp);
  };

  double err = grad_check(
      [&](const Tensor& leaf) { return sum(mul(block(params, leaf), w)); }, tokens, kDeepStep);
  // No blk.attn.bk here: a shared key bias shifts every score in a softmax
  // row equally, so the block is exactly invariant to it and its true
  // gradient is zero — the relative-error quotient is meaningless there.
  for (const char* name : {"blk.attn.wq", "blk.attn.wv", "blk.attn.wo", "blk.mlp.w1",
                           "blk.ln1.g", "blk.ln2.b"}) {
    auto f = [&](const Tensor& leaf) {
      ParamMap probe = params;
      probe.at(name) = leaf;
      return sum(mul(block(probe, tokens), w));
    };
    err = std::max(err, grad_check(f, params.at(name), kDeepStep));
  }
  s.row("transformer_block", err);
}

double check_encode(Suite& s, const EncoderConfig& cfg, const std::vector<std::string>& names) {
  Rng prng(s.rng.next_u64());
  ParamMap params = init_encoder_params(cfg, prng);
  Clip clip = random_clip(cfg, s.rng);
  Tensor readout = s.randn({cfg.embed_dim});
  double err = 0.0;
  for (const std::string& name : names) {
    auto f = [&](const Tensor& leaf) {
      ParamMap probe = params;
      probe.at(name) = leaf;
      return dot(encode_clip(clip, cfg, probe), readout);
    };
    err = std::max(err, grad_check(f, params.at(name), kDeepStep));
  }
  return err;
}

void check_encoders(Suite& s) {
  EncoderConfig toy = EncoderConfig::preset("toy");
  s.row("encode_clip[toy,ape]",
        check_encode(s, toy,
                     {"cls.spatial", "spatial.0.attn.bq", "temporal.1.mlp.b2", "final.ln.g",
                      "ape.temporal"}));

  EncoderConfig masked = toy;
  masked.mgm = true;
  s.row("encode_clip[toy,ape,mgm]", check_encode(s, masked, {"cls.spatial"}));

  EncoderConfig liere = toy;
  liere.posenc = PosencMode::kLiere;
  s.row("encode_clip[toy,liere]",
        check_encode(s, liere, {"cls.temporal", "spatial.1.attn.bo", "liere.ux", "liere.ut"}));
}

void check_heads(Suite& s) {
  const std::int64_t d = 16;

  // Prototypes with cosine similarity pinned at 0.3: the repulsion hinge is
  // active but far from its kink, for every seed.
  Tensor a = s.randn({d});
  Tensor b = s.randn({d});
  std::vector<double> ahat = a.data();
  double an = 0.0;
  for (double x : ahat) an += x * x;
  an = std::sqrt(an);
  for (double& x : ahat) x /= an;
  std::vector<double> bperp = b.data();
  double proj = 0.0;
  for (std::size_t i = 0; i < bperp.size(); ++i) proj += bperp[i] * ahat[i];
  for (std::size_t i = 0; i < bperp.size(); ++i) bperp[i] -= proj * ahat[i];
  double bn = 0.0;
  for (double x : bperp) bn += x * x;
  bn = std::sqrt(bn);
  std::vector<double> sob(static_cast<std::size_t>(d));
  for (std::size_t i = 0; i < sob.size(); ++i)
    sob[i] = 0.3 * ahat[i] + std::sqrt(1.0 - 0.09) * bperp[i] / bn;
  Tensor c_nosob(std::move(ahat), {d});
  Tensor c_sob(std::move(sob), {d});
  Tensor embedding = s.randn({d});

  double err = 0.0;
  for (WeakLabel label : {WeakLabel::kSob, WeakLabel::kNoSob}) {
    err = std::max(err, grad_check(
                            [&](const Tensor& x) {
                              return prototype_loss(x, label, c_sob, c_nosob, 0.1);
                            },
                            embedding, kOpStep));
    err = std::max(err, grad_check(
                            [&](const Tensor& x) {
                              return prototype_loss(embedding, label, x, c_nosob, 0.1);
                            },
                            c_sob, kOpStep));
    err = std::max(err, grad_check(
                            [&](const Tensor& x) {
                              return prototype_loss(embedding, label, c_sob, x, 0.1);
                            },
                            c_nosob, kOpStep));
  }
  s.row("prototype_loss", err);

  s.row("sob_score", grad_check([&](const Tensor& x) { return sob_score(x, c_sob, c_nosob); },
                                embedding, kOpStep));

  struct TwoTowerCase {
    Method method;
    PosencMode mode;
    std::vector<std::string> names;
  };
  // Value-projection weights stay out of these lists: under tower weight
  // sharing their per-coordinate logit gradients nearly cancel, which makes
  // the finite-difference quotient ill-conditioned at every step size. Their
  // backward rule is validated in the single-tower transformer_block row.
  const std::vector<TwoTowerCase> cases{
      {Method::kTtFull, PosencMode::kLiere,
       {"readout.w", "xspatial.0.attn.bv", "xtemporal.0.ln.g", "patch.b"}},
      {Method::kTtCls, PosencMode::kApe,
       {"readout.w", "clsx.attn.bv", "clsx.ln.g", "temporal.0.attn.wo"}},
  };
  for (const TwoTowerCase& tc : cases) {
    EncoderConfig cfg = mini_config(tc.mode);
    Rng prng(s.rng.next_u64());
    ParamMap params = init_encoder_params(cfg, prng);
    ParamMap head = init_head_params(cfg, tc.method, prng);
    params.insert(head.begin(), head.end());
    // The readout initializes to zero, which would zero most upstream
    // gradients; randomize it so every path carries signal.
    params.at("readout.w") = make_randn({cfg.embed_dim}, prng);
    Clip clip_a = random_clip(cfg, s.rng);
    Clip clip_b = random_clip(cfg, s.rng);

    double terr = 0.0;
    for (const std::string& name : tc.names) {
      auto f = [&](const Tensor& leaf) {
        ParamMap probe = params;
        probe.at(name) = leaf;
        ModelContext ctx = make_context(cfg, probe);
        return two_tower_logit(clip_a, clip_b, tc.method, ctx);
      };
      terr = std::max(terr, grad_check(f, params.at(name), kTwoTowerStep));
    }
    s.row(std::string("two_tower_logit[") + method_name(tc.method) + "]", terr);
  }
}

}  // namespace

std::vector<GradCheckRow> gradient_check_suite(std::uint64_t seed) {
  Suite s(child_seed(seed, "gradcheck"));
  check_tensor_ops(s);
  check_rotations(s);
  check_transformer_block(s);
  check_encoders(s);
  check_heads(s);
  return s.rows;
}

}  // namespace cliporder
