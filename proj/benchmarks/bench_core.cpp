// Microbenchmarks for the numeric hot paths: dense tensor ops, the rotation
// matrix exponential, block-matching flow, and the full clip encoder.

#include <benchmark/benchmark.h>

#include <cstdint>
#include <vector>

#include "cliporder/encoder.hpp"
#include "cliporder/motion.hpp"
#include "cliporder/posenc.hpp"
#include "cliporder/rng.hpp"
#include "cliporder/synth.hpp"
#include "cliporder/tensor.hpp"

using namespace cliporder;

namespace {

Clip toy_clip() {
  SynthParams params;
  params.seed = 9;
  return synth_sequence(params, "bench").clips.front();
}

void bm_matmul(benchmark::State& state) {
  Tape::NoGrad guard;
  const auto n = state.range(0);
  Rng rng(1);
  const Tensor a = make_randn({n, n}, rng);
  const Tensor b = make_randn({n, n}, rng);
  for (auto _ : state) {
    const Tensor c = matmul(a, b);
    benchmark::DoNotOptimize(c.data().data());
  }
  state.SetItemsProcessed(state.iterations() * n * n * n);
}

void bm_softmax_rows(benchmark::State& state) {
  Tape::NoGrad guard;
  Rng rng(2);
  const Tensor a = make_randn({state.range(0), 64}, rng);
  for (auto _ : state) {
    const Tensor s = softmax(a, 1);
    benchmark::DoNotOptimize(s.data().data());
  }
}

void bm_layernorm_rows(benchmark::State& state) {
  Tape::NoGrad guard;
  Rng rng(3);
  const Tensor a = make_randn({state.range(0), 64}, rng);
  const Tensor g = Tensor::full({64}, 1.0);
  const Tensor b = Tensor::zeros({64});
  for (auto _ : state) {
    const Tensor y = layernorm(a, g, b);
    benchmark::DoNotOptimize(y.data().data());
  }
}

void bm_expm_skew(benchmark::State& state) {
  Tape::NoGrad guard;
  Rng rng(4);
  const Tensor a = skew(make_randn({state.range(0), state.range(0)}, rng, 0.0, 0.4));
  for (auto _ : state) {
    const Tensor r = expm_skew(a);
    benchmark::DoNotOptimize(r.data().data());
  }
}

void bm_rotation_set(benchmark::State& state) {
  Tape::NoGrad guard;
  Rng rng(5);
  const LiereGens gens = make_liere_gens(16, 8, rng, 0.2, false);
  std::vector<Coord3> coords;
  for (int i = 0; i < 17; ++i)
    coords.push_back({0.05 * i, 1.0 - 0.05 * i, 0.5});
  for (auto _ : state) {
    const RotationSet rset = build_rotation_set(gens, coords);
    benchmark::DoNotOptimize(rset.blocks.data().data());
  }
}

void bm_tile_flow(benchmark::State& state) {
  const auto side = state.range(0);
  Rng rng(6);
  std::vector<float> prev(static_cast<std::size_t>(side * side));
  std::vector<float> cur(prev.size());
  for (auto& v : prev) v = static_cast<float>(rng.uniform());
  for (auto& v : cur) v = static_cast<float>(rng.uniform());
  const std::int64_t tile = side >= 224 ? 16 : 8;
  for (auto _ : state) {
    const FlowGrid flow = tile_flow(prev.data(), cur.data(), side, side, 1, tile, 4);
    benchmark::DoNotOptimize(flow.d.data());
  }
}

void bm_motion_guided_mask(benchmark::State& state) {
  const Clip clip = toy_clip();
  for (auto _ : state) {
    const Clip masked = motion_guided_mask(clip, 8, 4, 0.2);
    benchmark::DoNotOptimize(masked.pixels.data());
  }
}

void bm_encode_clip(benchmark::State& state) {
  Tape::NoGrad guard;
  EncoderConfig cfg;  // toy preset
  cfg.posenc = state.range(0) == 0 ? PosencMode::kApe : PosencMode::kLiere;
  Rng rng(7);
  const ParamMap params = init_encoder_params(cfg, rng);
  const ModelContext ctx = make_context(cfg, params);
  const Clip clip = toy_clip();
  for (auto _ : state) {
    const Tensor e = encode_clip(clip, ctx);
    benchmark::DoNotOptimize(e.data().data());
  }
}

void bm_encode_clip_backward(benchmark::State& state) {
  EncoderConfig cfg;  // toy preset
  Rng rng(8);
  const ParamMap params = init_encoder_params(cfg, rng);
  const Clip clip = toy_clip();
  for (auto _ : state) {
    Tape tape;
    Tape::Scope scope(tape);
    const ModelContext ctx = make_context(cfg, params);
    const Tensor loss = sum(encode_clip(clip, ctx));
    tape.backward(loss);
    benchmark::DoNotOptimize(loss.value());
  }
}

BENCHMARK(bm_matmul)->Arg(64)->Arg(136)->Arg(256);
BENCHMARK(bm_softmax_rows)->Arg(17)->Arg(136);
BENCHMARK(bm_layernorm_rows)->Arg(17)->Arg(136);
BENCHMARK(bm_expm_skew)->Arg(8)->Arg(16);
BENCHMARK(bm_rotation_set);
BENCHMARK(bm_tile_flow)->Arg(32)->Arg(224);
BENCHMARK(bm_motion_guided_mask);
BENCHMARK(bm_encode_clip)->Arg(0)->Arg(1);  // 0 = table lookup, 1 = rotations
BENCHMARK(bm_encode_clip_backward);

}  // namespace

BENCHMARK_MAIN();
