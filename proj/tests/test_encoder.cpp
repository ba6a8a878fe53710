#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <doctest.h>

#include "cliporder/clip.hpp"
#include "cliporder/encoder.hpp"
#include "cliporder/errors.hpp"
#include "cliporder/motion.hpp"
#include "cliporder/rng.hpp"
#include "cliporder/synth.hpp"
#include "cliporder/tensor.hpp"

using namespace cliporder;

namespace {

Clip toy_clip(std::uint64_t seed) {
  SynthParams sp;
  sp.seed = seed;
  RecoverySequence seq = synth_sequence(sp, "enc_" + std::to_string(seed));
  return seq.clips.front();
}

Clip constant_clip(const EncoderConfig& cfg, float value) {
  Clip clip;
  clip.video_id = "const";
  clip.clip_index = 0;
  clip.fps = 1.0;
  clip.t = static_cast<std::uint32_t>(cfg.frames);
  clip.h = static_cast<std::uint32_t>(cfg.res);
  clip.w = static_cast<std::uint32_t>(cfg.res);
  clip.c = static_cast<std::uint32_t>(cfg.channels);
  clip.pixels.assign(clip.pixel_count(), value);
  return clip;
}

// Tiny config so finite-difference sweeps stay fast.
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
  cfg.posenc = mode;
  cfg.rot_block = 4;
  return cfg;
}

Clip mini_clip(const EncoderConfig& cfg, std::uint64_t seed) {
  Clip clip = constant_clip(cfg, 0.0f);
  Rng rng(seed);
  for (auto& px : clip.pixels) px = static_cast<float>(rng.uniform());
  return clip;
}

}  // namespace

TEST_CASE("encoder config presets and arithmetic") {
  EncoderConfig paper = EncoderConfig::preset("paper");
  paper.validate();
  CHECK(paper.embed_dim == 768);
  CHECK(paper.heads == 12);
  CHECK(paper.grid() == 14);
  CHECK(paper.patches_per_frame() == 196);
  CHECK(paper.tokens_per_frame() == 197);
  CHECK(paper.head_dim() == 64);
  CHECK(paper.frames == 32);

  EncoderConfig toy = EncoderConfig::preset("toy");
  toy.validate();
  CHECK(toy.embed_dim == 64);
  CHECK(toy.grid() == 4);
  CHECK(toy.tokens_per_frame() == 17);
  CHECK(toy.head_dim() == 16);

  CHECK_THROWS_AS(EncoderConfig::preset("huge"), ConfigError);
}

TEST_CASE("encoder config validation rejects bad combinations") {
  EncoderConfig cfg = EncoderConfig::preset("toy");
  cfg.heads = 5;  // 64 % 5 != 0
  CHECK_THROWS_AS(cfg.validate(), ConfigError);

  cfg = EncoderConfig::preset("toy");
  cfg.patch = 7;  // 32 % 7 != 0
  CHECK_THROWS_AS(cfg.validate(), ConfigError);

  cfg = EncoderConfig::preset("toy");
  cfg.keep_ratio = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.keep_ratio = 1.2;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);

  cfg = EncoderConfig::preset("toy");
  cfg.posenc = PosencMode::kLiere;
  cfg.rot_block = 12;  // head_dim 16 % 12 != 0
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.rot_block = 8;
  cfg.validate();

  cfg = EncoderConfig::preset("toy");
  cfg.frames = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("encoder config json round trip") {
  EncoderConfig cfg = EncoderConfig::preset("toy");
  cfg.posenc = PosencMode::kLiere;
  cfg.mgm = true;
  cfg.keep_ratio = 0.35;

  EncoderConfig back = encoder_config_from_json(encoder_config_to_json(cfg));
  CHECK(back.embed_dim == cfg.embed_dim);
  CHECK(back.heads == cfg.heads);
  CHECK(back.spatial_layers == cfg.spatial_layers);
  CHECK(back.temporal_layers == cfg.temporal_layers);
  CHECK(back.patch == cfg.patch);
  CHECK(back.frames == cfg.frames);
  CHECK(back.res == cfg.res);
  CHECK(back.posenc == cfg.posenc);
  CHECK(back.mgm == cfg.mgm);
  CHECK(back.keep_ratio == cfg.keep_ratio);

  // Presets expand, explicit keys override, typos are rejected.
  EncoderConfig paper = encoder_config_from_json(R"({"preset": "paper", "frames": 16})");
  CHECK(paper.embed_dim == 768);
  CHECK(paper.frames == 16);
  CHECK_THROWS_AS(encoder_config_from_json(R"({"embd_dim": 64})"), ConfigError);
  CHECK_THROWS_AS(encoder_config_from_json("not json"), ConfigError);
  CHECK_THROWS_AS(encoder_config_from_json(R"({"posenc": "fourier"})"), ConfigError);
  CHECK_THROWS_AS(encoder_config_from_json(R"({"heads": 5})"), ConfigError);
}

TEST_CASE("parameter init is deterministic and shaped correctly") {
  EncoderConfig cfg = EncoderConfig::preset("toy");
  Rng r1(7), r2(7), r3(8);
  ParamMap a = init_encoder_params(cfg, r1);
  ParamMap b = init_encoder_params(cfg, r2);
  ParamMap c = init_encoder_params(cfg, r3);

  CHECK(a.size() == b.size());
  for (const auto& [name, tensor] : a) {
    const Tensor& other = b.at(name);
    REQUIRE(tensor.size() == other.size());
    for (std::int64_t i = 0; i < tensor.size(); ++i)
      CHECK(tensor.data()[i] == other.data()[i]);
    CHECK(tensor.requires_grad());
  }
  // A different seed must actually change the weights.
  bool any_diff = false;
  for (std::int64_t i = 0; i < a.at("patch.w").size(); ++i)
    if (a.at("patch.w").data()[i] != c.at("patch.w").data()[i]) any_diff = true;
  CHECK(any_diff);

  CHECK(a.at("patch.w").shape() == Shape{64, 64});
  CHECK(a.at("patch.b").shape() == Shape{64});
  CHECK(a.at("cls.spatial").shape() == Shape{1, 64});
  CHECK(a.at("ape.spatial").shape() == Shape{17, 64});
  CHECK(a.at("ape.temporal").shape() == Shape{9, 64});
  CHECK(a.at("spatial.0.attn.wq").shape() == Shape{64, 64});
  CHECK(a.at("spatial.1.mlp.w1").shape() == Shape{64, 256});
  CHECK(a.at("temporal.1.mlp.w2").shape() == Shape{256, 64});
  CHECK(a.count("liere.ux") == 0);

  // Biases zero, gains one.
  for (std::int64_t i = 0; i < 64; ++i) {
    CHECK(a.at("patch.b").data()[i] == 0.0);
    CHECK(a.at("spatial.0.ln1.g").data()[i] == 1.0);
    CHECK(a.at("spatial.0.ln1.b").data()[i] == 0.0);
  }

  cfg.posenc = PosencMode::kLiere;
  Rng r4(7);
  ParamMap lp = init_encoder_params(cfg, r4);
  CHECK(lp.count("ape.spatial") == 0);
  CHECK(lp.at("liere.ux").shape() == Shape{2, 8, 8});
  CHECK(lp.at("liere.uy").shape() == Shape{2, 8, 8});
  CHECK(lp.at("liere.ut").shape() == Shape{2, 8, 8});
}

TEST_CASE("patchify emits one CLS plus one token per patch") {
  EncoderConfig cfg = EncoderConfig::preset("toy");
  Rng rng(11);
  ParamMap params = init_encoder_params(cfg, rng);
  ModelContext ctx = make_context(cfg, params);

  Clip clip = toy_clip(11);
  std::vector<Tensor> frames = patchify(clip, ctx);
  REQUIRE(frames.size() == 8);
  for (const auto& tokens : frames) CHECK(tokens.shape() == Shape{17, 64});

  // Every patch of an all-black frame projects to the same token (the bias),
  // and that token differs from nothing only after position info is added.
  Clip black = constant_clip(cfg, 0.0f);
  std::vector<Tensor> bframes = patchify(black, ctx);
  const Tensor& tok = bframes[0];
  for (std::int64_t r = 2; r <= 16; ++r)
    for (std::int64_t j = 0; j < 64; ++j)
      CHECK(tok.at(r * 64 + j) == tok.at(64 + j));
  for (std::int64_t j = 0; j < 64; ++j) CHECK(tok.at(64 + j) == params.at("patch.b").data()[j]);
}

TEST_CASE("encode_clip emits a d-length embedding and is bit-deterministic") {
  for (PosencMode mode : {PosencMode::kApe, PosencMode::kLiere}) {
    CAPTURE(posenc_mode_name(mode));
    EncoderConfig cfg = EncoderConfig::preset("toy");
    cfg.posenc = mode;
    Rng rng(21);
    ParamMap params = init_encoder_params(cfg, rng);
    Clip clip = toy_clip(21);

    Tensor e1 = encode_clip(clip, cfg, params);
    Tensor e2 = encode_clip(clip, cfg, params);
    REQUIRE(e1.shape() == Shape{64});
    CHECK(e1.all_finite());
    for (std::int64_t i = 0; i < 64; ++i) CHECK(e1.data()[i] == e2.data()[i]);

    // Threading must not change a single bit.
    set_num_threads(4);
    Tensor e4 = encode_clip(clip, cfg, params);
    set_num_threads(1);
    for (std::int64_t i = 0; i < 64; ++i) CHECK(e1.data()[i] == e4.data()[i]);

    // And the embedding must not be trivially constant across inputs.
    Tensor other = encode_clip(toy_clip(22), cfg, params);
    bool differs = false;
    for (std::int64_t i = 0; i < 64; ++i)
      if (e1.data()[i] != other.data()[i]) differs = true;
    CHECK(differs);
  }
}

TEST_CASE("zeroed output projections make every block an identity") {
  EncoderConfig cfg = EncoderConfig::preset("toy");
  Rng rng(31);
  ParamMap params = init_encoder_params(cfg, rng);
  for (auto& [name, tensor] : params) {
    const bool is_residual_out = name.ends_with("attn.wo") || name.ends_with("mlp.w2");
    if (is_residual_out)
      for (auto& v : tensor.mutable_values()) v = 0.0;
  }

  // With all residual branches silenced the temporal CLS reaches the final
  // layernorm carrying only its init value plus its absolute-position row.
  Clip clip = toy_clip(31);
  Tensor got = encode_clip(clip, cfg, params);

  Tensor cls_in = add(params.at("cls.temporal"), slice(params.at("ape.temporal"), 0, 0, 1));
  Tensor expected = layernorm(cls_in, params.at("final.ln.g"), params.at("final.ln.b"));
  for (std::int64_t i = 0; i < 64; ++i) CHECK(got.data()[i] == expected.data()[i]);
}

TEST_CASE("mgm toggle matches masking the clip up front") {
  EncoderConfig cfg = EncoderConfig::preset("toy");
  cfg.mgm = true;
  cfg.keep_ratio = 0.25;
  Rng rng(41);
  ParamMap params = init_encoder_params(cfg, rng);
  Clip clip = toy_clip(41);

  Tensor via_toggle = encode_clip(clip, cfg, params);

  EncoderConfig plain = cfg;
  plain.mgm = false;
  Clip pre_masked = motion_guided_mask(clip, cfg.patch, cfg.flow_radius, cfg.keep_ratio);
  Tensor via_premask = encode_clip(pre_masked, plain, params);

  bool mask_changed = false;
  Tensor unmasked = encode_clip(clip, plain, params);
  for (std::int64_t i = 0; i < 64; ++i) {
    CHECK(via_toggle.data()[i] == via_premask.data()[i]);
    if (via_toggle.data()[i] != unmasked.data()[i]) mask_changed = true;
  }
  CHECK(mask_changed);
}

TEST_CASE("encoder rejects clips that do not match the config") {
  EncoderConfig cfg = EncoderConfig::preset("toy");
  Rng rng(51);
  ParamMap params = init_encoder_params(cfg, rng);
  Clip clip = toy_clip(51);
  clip.pixels.resize(static_cast<std::size_t>(4) * 32 * 32, 0.0f);
  clip.t = 4;
  CHECK_THROWS_AS(encode_clip(clip, cfg, params), ShapeError);
}

TEST_CASE("finite differences validate encoder gradients end to end") {
  for (PosencMode mode : {PosencMode::kApe, PosencMode::kLiere}) {
    CAPTURE(posenc_mode_name(mode));
    EncoderConfig cfg = mini_config(mode);
    Rng rng(61);
    ParamMap params = init_encoder_params(cfg, rng);
    Clip clip = mini_clip(cfg, 62);
    // Project the embedding onto a fixed random direction: summing it raw
    // would cancel to ~0 through the final layernorm and drown the check in
    // finite-difference noise.
    Tensor readout = make_randn({cfg.embed_dim}, rng);

    std::vector<std::string> names = {"patch.w", "cls.spatial", "cls.temporal",
                                      "spatial.0.attn.wq", "spatial.0.mlp.b1",
                                      "temporal.0.attn.wv", "temporal.0.ln1.g",
                                      "final.ln.b"};
    if (mode == PosencMode::kApe) {
      names.push_back("ape.spatial");
      names.push_back("ape.temporal");
    } else {
      names.push_back("liere.ut");
      names.push_back("liere.ux");
    }

    for (const auto& name : names) {
      CAPTURE(name);
      auto f = [&](const Tensor& leaf) {
        ParamMap probe = params;
        probe.at(name) = leaf;
        return dot(encode_clip(clip, cfg, probe), readout);
      };
      double err = grad_check(f, params.at(name), 1e-5);
      CHECK(err < 1e-4);
    }
  }
}
