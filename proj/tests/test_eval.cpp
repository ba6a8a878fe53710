#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <doctest.h>
#include <nlohmann/json.hpp>

#include "cliporder/errors.hpp"
#include "cliporder/eval.hpp"
#include "cliporder/rng.hpp"
#include "cliporder/synth.hpp"
#include "temp_dir.hpp"

using namespace cliporder;

namespace {

// Every ordered pair of distinct positions in a 12-clip sequence with
// separation in [1, 11]; balanced because both presentation orders appear.
std::vector<EvalPair> all_pairs(std::int64_t m = 12) {
  std::vector<EvalPair> pairs;
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < m; ++j)
      if (i != j) pairs.push_back({"v0", PairSample{i, j}});
  return pairs;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int count_lines(const std::string& s) {
  int n = 0;
  for (char c : s)
    if (c == '\n') ++n;
  return n;
}

int count_occurrences(const std::string& hay, const std::string& needle) {
  int n = 0;
  for (std::size_t pos = hay.find(needle); pos != std::string::npos;
       pos = hay.find(needle, pos + needle.size()))
    ++n;
  return n;
}

}  // namespace

TEST_CASE("oracle, constant, and inverted predictors hit their closed forms") {
  const std::vector<EvalPair> pairs = all_pairs();
  const auto n = static_cast<std::int64_t>(pairs.size());

  std::vector<PairOutcome> oracle =
      run_predictor(pairs, [](const EvalPair& p) { return p.pair.first_earlier(); });
  EvalReport r = evaluate_outcomes("oracle", oracle);
  CHECK(r.n_pairs == n);
  CHECK(r.accuracy == 1.0);
  CHECK(r.precision == 1.0);
  CHECK(r.recall == 1.0);
  CHECK(r.f1 == 1.0);
  CHECK(r.tp == n / 2);
  CHECK(r.tn == n / 2);
  CHECK(r.fp == 0);
  CHECK(r.fn == 0);
  std::int64_t bucket_total = 0;
  for (const DeltaAccuracy& d : r.per_delta) {
    CHECK(d.accuracy == 1.0);
    CHECK(d.delta >= 1);
    bucket_total += d.n;
  }
  CHECK(bucket_total == n);

  std::vector<PairOutcome> constant = run_predictor(pairs, [](const EvalPair&) { return true; });
  EvalReport c = evaluate_outcomes("constant", constant);
  CHECK(c.accuracy == 0.5);
  CHECK(c.recall == 1.0);
  CHECK(c.precision == 0.5);
  CHECK(c.f1 == 2.0 / 3.0);
  CHECK(c.fn == 0);
  CHECK(c.tn == 0);

  std::vector<PairOutcome> inverted =
      run_predictor(pairs, [](const EvalPair& p) { return !p.pair.first_earlier(); });
  EvalReport inv = evaluate_outcomes("inverted", inverted);
  CHECK(inv.accuracy == 0.0);
  CHECK(inv.precision == 0.0);
  CHECK(inv.recall == 0.0);
  CHECK(inv.f1 == 0.0);

  CHECK_THROWS_AS(evaluate_outcomes("empty", {}), DataError);
  CHECK_THROWS_AS(curve_from_outcomes({}), DataError);
}

TEST_CASE("metric identities and the prediction-flip law hold") {
  const std::vector<EvalPair> pairs = all_pairs();
  Rng rng(2024);
  std::vector<PairOutcome> outcomes =
      run_predictor(pairs, [&](const EvalPair&) { return rng.coin(); });

  EvalReport r = evaluate_outcomes("noise", outcomes);
  CHECK(r.tp + r.fp + r.tn + r.fn == r.n_pairs);
  const double acc = static_cast<double>(r.tp + r.tn) / static_cast<double>(r.n_pairs);
  const double prec = static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fp);
  const double rec = static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fn);
  const double f1 = 2.0 * prec * rec / (prec + rec);
  CHECK(std::abs(r.accuracy - acc) < 1e-12);
  CHECK(std::abs(r.precision - prec) < 1e-12);
  CHECK(std::abs(r.recall - rec) < 1e-12);
  CHECK(std::abs(r.f1 - f1) < 1e-12);

  // Flipping every prediction maps accuracy to its exact complement, both
  // overall and inside every separation bucket.
  std::vector<PairOutcome> flipped = outcomes;
  for (PairOutcome& o : flipped) o.predicted_first_earlier = !o.predicted_first_earlier;
  EvalReport rf = evaluate_outcomes("noise-flipped", flipped);
  CHECK(rf.accuracy == 1.0 - r.accuracy);
  CHECK(rf.tp == r.fn);
  CHECK(rf.fp == r.tn);
  REQUIRE(rf.per_delta.size() == r.per_delta.size());
  for (std::size_t i = 0; i < r.per_delta.size(); ++i) {
    CHECK(rf.per_delta[i].delta == r.per_delta[i].delta);
    CHECK(rf.per_delta[i].n == r.per_delta[i].n);
    CHECK(rf.per_delta[i].accuracy == 1.0 - r.per_delta[i].accuracy);
  }

  // Double-flip restores the original report exactly.
  for (PairOutcome& o : flipped) o.predicted_first_earlier = !o.predicted_first_earlier;
  EvalReport rff = evaluate_outcomes("noise", flipped);
  CHECK(rff.accuracy == r.accuracy);
  CHECK(rff.f1 == r.f1);
}

TEST_CASE("separation curve buckets by exact delta and flags thin buckets") {
  std::vector<PairOutcome> outcomes;
  auto add = [&](std::int64_t delta, int n, int correct) {
    for (int i = 0; i < n; ++i) {
      PairOutcome o;
      o.delta = delta;
      o.truth_first_earlier = true;
      o.predicted_first_earlier = i < correct;
      outcomes.push_back(o);
    }
  };
  add(5, 10, 3);
  add(1, 12, 8);
  add(2, 9, 9);

  SeparationCurve curve = curve_from_outcomes(outcomes);
  REQUIRE(curve.points.size() == 3);
  CHECK(curve.points[0].delta == 1);
  CHECK(curve.points[1].delta == 2);
  CHECK(curve.points[2].delta == 5);
  CHECK(curve.points[0].n == 12);
  CHECK(curve.points[1].n == 9);
  CHECK(curve.points[2].n == 10);
  CHECK(std::abs(curve.points[0].accuracy - 8.0 / 12.0) < 1e-12);
  CHECK(curve.points[1].accuracy == 1.0);
  CHECK(std::abs(curve.points[2].accuracy - 0.3) < 1e-12);
  CHECK(!curve.points[0].low_confidence);
  CHECK(curve.points[1].low_confidence);  // 9 < 10
  CHECK(!curve.points[2].low_confidence);

  std::int64_t total = 0;
  for (const DeltaAccuracy& p : curve.points) total += p.n;
  CHECK(total == static_cast<std::int64_t>(outcomes.size()));
}

TEST_CASE("spearman uses average ranks and rejects degenerate input") {
  std::vector<double> x{1, 2, 3, 4, 5, 6, 7, 8};
  std::vector<double> y;
  for (double v : x) y.push_back(2.0 * v + 3.0);
  CHECK(spearman(x, y) == 1.0);

  std::vector<double> yr(y.rbegin(), y.rend());
  CHECK(spearman(x, yr) == -1.0);

  CHECK(spearman(x, x) == 1.0);

  // Hand-computed tie case: ranks of y are {1.5, 1.5, 3.5, 3.5}.
  std::vector<double> xt{1, 2, 3, 4};
  std::vector<double> yt{7, 7, 9, 9};
  CHECK(std::abs(spearman(xt, yt) - 4.0 / std::sqrt(20.0)) < 1e-12);

  // Rank correlation ignores any monotone rescaling.
  std::vector<double> xs, ys;
  Rng rng(5);
  for (int i = 0; i < 50; ++i) {
    const double v = rng.uniform(-3.0, 3.0);
    xs.push_back(v);
    ys.push_back(std::exp(v));
  }
  CHECK(spearman(xs, ys) == 1.0);

  std::vector<double> flat(x.size(), 2.5);
  CHECK_THROWS_AS(spearman(x, flat), NumericError);
  std::vector<double> shorter{1.0, 2.0};
  CHECK_THROWS_AS(spearman(x, shorter), ShapeError);
  std::vector<double> one{1.0};
  CHECK_THROWS_AS(spearman(one, one), ContractError);
}

TEST_CASE("model evaluation is deterministic and read-only") {
  TempDir tmp("evalds");
  SynthParams sp;
  sp.clips_per_sequence = 6;
  DatasetIndex data = synth_dataset(tmp.str(), 6, sp, 99);
  std::vector<std::string> videos;
  for (const SequenceRef& s : data.sequences) videos.push_back(s.video_id);

  TrainConfig cfg;
  cfg.method = Method::kEmbedding;
  cfg.encoder.embed_dim = 16;
  cfg.encoder.heads = 2;
  cfg.encoder.spatial_layers = 1;
  cfg.encoder.temporal_layers = 1;
  cfg.encoder.rot_block = 4;

  Rng rng(child_seed(3, "init"));
  ParamMap params = init_encoder_params(cfg.encoder, rng);
  ParamMap head = init_head_params(cfg.encoder, Method::kEmbedding, rng);
  params.insert(head.begin(), head.end());
  TrainedModel model{cfg, std::move(params)};

  std::vector<EvalPair> pairs = draw_eval_pairs(data, videos, 1, 5, 4, 17);
  REQUIRE(!pairs.empty());
  CHECK(pairs.size() % 2 == 0);
  std::int64_t earlier_first = 0;
  for (const EvalPair& p : pairs) earlier_first += p.pair.first_earlier() ? 1 : 0;
  CHECK(earlier_first * 2 == static_cast<std::int64_t>(pairs.size()));

  // The per-video draw only depends on (seed, video id), not list order.
  std::vector<std::string> reversed(videos.rbegin(), videos.rend());
  std::vector<EvalPair> again = draw_eval_pairs(data, reversed, 1, 5, 4, 17);
  REQUIRE(again.size() == pairs.size());
  std::int64_t matched = 0;
  for (const EvalPair& p : pairs)
    for (const EvalPair& q : again)
      matched += (p.video_id == q.video_id && p.pair.first_index == q.pair.first_index &&
                  p.pair.second_index == q.pair.second_index)
                     ? 1
                     : 0;
  CHECK(matched >= static_cast<std::int64_t>(pairs.size()));

  CHECK_THROWS_AS(draw_eval_pairs(data, {"nope"}, 1, 5, 4, 17), DataError);

  // Model params are byte-stable across an evaluation, and a fixed clip
  // embeds identically before and after.
  const std::vector<double> proto_before = model.params.at("proto.sob").data();
  Clip probe = load_clip(data, data.sequences[0].clips[0]);
  Tensor before = [&] {
    Tape::NoGrad guard;
    return encode_clip(probe, cfg.encoder, model.params);
  }();

  EvalReport r1 = evaluate(model, data, pairs);
  EvalReport r2 = evaluate(model, data, pairs);
  CHECK(r1.accuracy == r2.accuracy);
  CHECK(r1.f1 == r2.f1);
  CHECK(r1.method == "embedding");
  CHECK(r1.posenc == "ape");
  CHECK(!r1.mgm);
  CHECK(r1.n_pairs == static_cast<std::int64_t>(pairs.size()));

  SeparationCurve curve = separation_curve(model, data, pairs);
  std::int64_t total = 0;
  for (const DeltaAccuracy& p : curve.points) total += p.n;
  CHECK(total == r1.n_pairs);

  Tensor after = [&] {
    Tape::NoGrad guard;
    return encode_clip(probe, cfg.encoder, model.params);
  }();
  for (std::int64_t i = 0; i < before.size(); ++i) CHECK(before.data()[i] == after.data()[i]);
  for (std::size_t i = 0; i < proto_before.size(); ++i)
    CHECK(model.params.at("proto.sob").data()[i] == proto_before[i]);

  // A freshly initialized two-tower readout is all zeros, so the model
  // degenerates to the constant "first is earlier" predictor: the balanced
  // closed forms apply end to end.
  TrainConfig tcfg = cfg;
  tcfg.method = Method::kTtCls;
  Rng trng(child_seed(4, "init"));
  ParamMap tparams = init_encoder_params(tcfg.encoder, trng);
  ParamMap thead = init_head_params(tcfg.encoder, Method::kTtCls, trng);
  tparams.insert(thead.begin(), thead.end());
  TrainedModel tt{tcfg, std::move(tparams)};
  EvalReport rt = evaluate(tt, data, pairs);
  CHECK(rt.method == "tt_cls");
  CHECK(rt.accuracy == 0.5);
  CHECK(rt.recall == 1.0);
  CHECK(rt.precision == 0.5);
  CHECK(rt.f1 == 2.0 / 3.0);
}

TEST_CASE("report rendering is bit-stable and complete") {
  EvalReport a;
  a.method = "embedding";
  a.posenc = "ape";
  a.mgm = false;
  a.n_pairs = 100;
  a.accuracy = 0.8125;
  a.f1 = 0.75;
  EvalReport b;
  b.method = "tt_cls";
  b.posenc = "liere";
  b.mgm = true;
  b.n_pairs = 100;
  b.accuracy = 0.5;
  b.f1 = 2.0 / 3.0;

  SeparationCurve curve;
  for (std::int64_t d = 1; d <= 10; ++d) {
    DeltaAccuracy p;
    p.delta = d;
    p.n = d == 3 ? 4 : 40;
    p.accuracy = 0.5 + 0.04 * static_cast<double>(d);
    p.low_confidence = d == 3;
    curve.points.push_back(p);
  }

  const std::string config = R"({"seed": 7, "method": "embedding"})";
  TempDir out1("render1");
  render_reports({a, b}, curve, out1.str() + "/run", config, 7);

  const std::string results = slurp(out1.str() + "/run/results.csv");
  CHECK(count_lines(results) == 3);
  CHECK(results.find("method,posenc,mgm,accuracy,f1\n") == 0);
  CHECK(results.find("embedding,ape,off,0.8125,0.75\n") != std::string::npos);
  CHECK(results.find("tt_cls,liere,on,0.5,0.66666666666666663\n") != std::string::npos);

  const std::string curve_csv = slurp(out1.str() + "/run/curve.csv");
  CHECK(count_lines(curve_csv) == 11);  // header + ten separations
  CHECK(curve_csv.find("delta,n,accuracy\n") == 0);
  CHECK(curve_csv.find("3,4,0.62\n") != std::string::npos);

  const std::string svg = slurp(out1.str() + "/run/curve.svg");
  CHECK(svg.find("<svg") == 0);
  CHECK(svg.find("<polyline") != std::string::npos);
  CHECK(count_occurrences(svg, "<circle") == 10);
  CHECK(count_occurrences(svg, "r=\"4\" fill=\"white\"") == 1);  // only the thin bucket is hollow
  CHECK(svg.find("accuracy") != std::string::npos);
  CHECK(svg.find("clip separation") != std::string::npos);
  CHECK(svg.rfind("</svg>\n") == svg.size() - 7);

  nlohmann::json meta = nlohmann::json::parse(slurp(out1.str() + "/run/run_meta.json"));
  CHECK(meta.at("seed").get<std::uint64_t>() == 7);
  CHECK(!meta.at("version").get<std::string>().empty());
  CHECK(meta.at("config").at("method").get<std::string>() == "embedding");

  TempDir out2("render2");
  render_reports({a, b}, curve, out2.str() + "/run", config, 7);
  for (const char* name : {"results.csv", "curve.csv", "curve.svg", "run_meta.json"})
    CHECK(slurp(out1.str() + "/run/" + name) == slurp(out2.str() + "/run/" + name));

  CHECK_THROWS_AS(render_reports({a}, curve, out1.str() + "/run", "not json", 7), ConfigError);

  // A path blocked by a regular file surfaces as a data error with context.
  std::ofstream(out1.str() + "/block").put('x');
  CHECK_THROWS_AS(render_reports({a}, curve, out1.str() + "/block/run", config, 7), DataError);
}
