#include "cliporder/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <utility>

#include <nlohmann/json.hpp>

#include "cliporder/errors.hpp"
#include "cliporder/heads.hpp"
#include "cliporder/rng.hpp"
#include "cliporder/version.hpp"
#include "encoder_internal.hpp"

namespace cliporder {

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt_coord(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

void write_text(const std::string& path, const std::string& body) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << body;
  out.flush();
  if (!out) throw DataError("failed while writing '" + path + "'");
}

// correct/n snapped to the nearest multiple of 2^-53, rounded in exact
// integer arithmetic. Plain division is off by at most one part in 2^53 from
// this, but on the grid both a and 1-a are representable and their integer
// numerators sum to 2^53, so flipping every prediction maps accuracy to
// 1 - accuracy bit-for-bit (an exact tie j + 1/2 would need n >= 2^54 and
// cannot occur here).
double exact_ratio(std::int64_t correct, std::int64_t n) {
  const __int128 num = (static_cast<__int128>(correct) << 54) + n;
  const __int128 den = static_cast<__int128>(n) << 1;
  const auto grid = static_cast<std::int64_t>(num / den);
  return std::ldexp(static_cast<double>(grid), -53);
}

std::vector<DeltaAccuracy> delta_table(const std::vector<PairOutcome>& outcomes) {
  std::map<std::int64_t, std::pair<std::int64_t, std::int64_t>> buckets;  // delta -> (n, correct)
  for (const PairOutcome& o : outcomes) {
    auto& b = buckets[o.delta];
    ++b.first;
    if (o.correct()) ++b.second;
  }
  std::vector<DeltaAccuracy> table;
  table.reserve(buckets.size());
  for (const auto& [delta, b] : buckets) {
    DeltaAccuracy row;
    row.delta = delta;
    row.n = b.first;
    row.accuracy = exact_ratio(b.second, b.first);
    row.low_confidence = b.first < 10;
    table.push_back(row);
  }
  return table;
}

// Average ranks (1-based); ties share the mean of the ranks they span.
std::vector<double> average_ranks(const std::vector<double>& v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n, 0.0);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    const double shared = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = shared;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

std::vector<EvalPair> draw_eval_pairs(const DatasetIndex& data,
                                      const std::vector<std::string>& videos,
                                      std::int64_t min_sep, std::int64_t max_sep,
                                      std::int64_t pairs_per_video, std::uint64_t seed) {
  std::vector<EvalPair> out;
  for (const std::string& id : videos) {
    const SequenceRef* seq = data.find(id);
    if (seq == nullptr) throw DataError("video '" + id + "' is not in the dataset manifest");
    Rng rng(child_seed(seed, "evalpairs", id));
    const auto m = static_cast<std::int64_t>(seq->clips.size());
    for (const PairSample& p : make_pairs(m, min_sep, max_sep, rng, pairs_per_video))
      out.push_back({id, p});
  }
  return out;
}

std::vector<PairOutcome> run_predictor(const std::vector<EvalPair>& pairs,
                                       const PairPredictor& predict) {
  std::vector<PairOutcome> outcomes;
  outcomes.reserve(pairs.size());
  for (const EvalPair& p : pairs) {
    PairOutcome o;
    o.delta = p.pair.delta();
    o.truth_first_earlier = p.pair.first_earlier();
    o.predicted_first_earlier = predict(p);
    outcomes.push_back(o);
  }
  return outcomes;
}

PairPredictor model_predictor(const TrainedModel& model, const DatasetIndex& data) {
  struct State {
    const TrainedModel* model = nullptr;
    const DatasetIndex* data = nullptr;
    ModelContext ctx;
    std::map<std::pair<std::string, std::int64_t>, Clip> clips;
    std::map<std::pair<std::string, std::int64_t>, Tensor> embeddings;

    const Clip& clip(const std::string& video_id, std::int64_t index) {
      const auto key = std::make_pair(video_id, index);
      auto it = clips.find(key);
      if (it != clips.end()) return it->second;
      const SequenceRef* seq = data->find(video_id);
      if (seq == nullptr)
        throw DataError("video '" + video_id + "' is not in the dataset manifest");
      if (index < 0 || index >= static_cast<std::int64_t>(seq->clips.size()))
        throw DataError("clip index " + std::to_string(index) + " out of range for video '" +
                        video_id + "'");
      return clips.emplace(key, load_clip(*data, seq->clips[index])).first->second;
    }

    const Tensor& embedding(const std::string& video_id, std::int64_t index) {
      const auto key = std::make_pair(video_id, index);
      auto it = embeddings.find(key);
      if (it != embeddings.end()) return it->second;
      Tape::NoGrad guard;
      Tensor e = encode_clip(clip(video_id, index), ctx);
      return embeddings.emplace(key, std::move(e)).first->second;
    }
  };

  auto state = std::make_shared<State>();
  state->model = &model;
  state->data = &data;
  state->ctx = make_context(model.config.encoder, model.params);

  const Method method = model.config.method;
  if (method == Method::kEmbedding) {
    const Tensor* c_sob = &enc::fetch(model.params, "proto.sob");
    const Tensor* c_nosob = &enc::fetch(model.params, "proto.nosob");
    return [state, c_sob, c_nosob](const EvalPair& p) {
      const Tensor& ea = state->embedding(p.video_id, p.pair.first_index);
      const Tensor& eb = state->embedding(p.video_id, p.pair.second_index);
      return order_pair_embedding(ea, eb, *c_sob, *c_nosob).first_earlier;
    };
  }
  return [state, method](const EvalPair& p) {
    const Clip& a = state->clip(p.video_id, p.pair.first_index);
    const Clip& b = state->clip(p.video_id, p.pair.second_index);
    Tape::NoGrad guard;
    const double logit = two_tower_logit(a, b, method, state->ctx).value();
    return order_pair_logit(logit, method).first_earlier;
  };
}

EvalReport evaluate_outcomes(const std::string& method, const std::vector<PairOutcome>& outcomes) {
  if (outcomes.empty()) throw DataError("evaluation requires at least one pair");
  EvalReport r;
  r.method = method;
  r.n_pairs = static_cast<std::int64_t>(outcomes.size());
  for (const PairOutcome& o : outcomes) {
    if (o.truth_first_earlier)
      ++(o.predicted_first_earlier ? r.tp : r.fn);
    else
      ++(o.predicted_first_earlier ? r.fp : r.tn);
  }
  r.accuracy = exact_ratio(r.tp + r.tn, r.n_pairs);
  r.precision = r.tp + r.fp > 0 ? static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fp) : 0.0;
  r.recall = r.tp + r.fn > 0 ? static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fn) : 0.0;
  r.f1 = r.precision + r.recall > 0.0 ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
                                      : 0.0;
  r.per_delta = delta_table(outcomes);
  return r;
}

SeparationCurve curve_from_outcomes(const std::vector<PairOutcome>& outcomes) {
  if (outcomes.empty()) throw DataError("separation curve requires at least one pair");
  SeparationCurve curve;
  curve.points = delta_table(outcomes);
  return curve;
}

EvalReport evaluate(const TrainedModel& model, const DatasetIndex& data,
                    const std::vector<EvalPair>& pairs) {
  EvalReport r = evaluate_outcomes(method_name(model.config.method),
                                   run_predictor(pairs, model_predictor(model, data)));
  r.posenc = posenc_mode_name(model.config.encoder.posenc);
  r.mgm = model.config.encoder.mgm;
  return r;
}

SeparationCurve separation_curve(const TrainedModel& model, const DatasetIndex& data,
                                 const std::vector<EvalPair>& pairs) {
  return curve_from_outcomes(run_predictor(pairs, model_predictor(model, data)));
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ShapeError("spearman inputs differ in length");
  if (x.size() < 2) throw ContractError("spearman needs at least two observations");
  const std::vector<double> rx = average_ranks(x);
  const std::vector<double> ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mean = (n + 1.0) / 2.0;  // ranks always average to (n+1)/2
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = rx[i] - mean;
    const double dy = ry[i] - mean;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0)
    throw NumericError("spearman is undefined for a constant sequence");
  return sxy / std::sqrt(sxx * syy);
}

namespace {

std::string render_results_csv(const std::vector<EvalReport>& reports) {
  std::string csv = "method,posenc,mgm,accuracy,f1\n";
  for (const EvalReport& r : reports) {
    csv += r.method;
    csv += ',';
    csv += r.posenc;
    csv += ',';
    csv += r.mgm ? "on" : "off";
    csv += ',';
    csv += fmt_double(r.accuracy);
    csv += ',';
    csv += fmt_double(r.f1);
    csv += '\n';
  }
  return csv;
}

std::string render_curve_csv(const SeparationCurve& curve) {
  std::string csv = "delta,n,accuracy\n";
  for (const DeltaAccuracy& p : curve.points) {
    csv += std::to_string(p.delta);
    csv += ',';
    csv += std::to_string(p.n);
    csv += ',';
    csv += fmt_double(p.accuracy);
    csv += '\n';
  }
  return csv;
}

std::string render_curve_svg(const SeparationCurve& curve) {
  constexpr double kLeft = 64.0, kRight = 620.0, kTop = 24.0, kBottom = 344.0;

  std::int64_t dmin = 1, dmax = 2;
  if (!curve.points.empty()) {
    dmin = curve.points.front().delta;
    dmax = curve.points.back().delta;
    if (dmin == dmax) ++dmax;
  }
  const auto sx = [&](double delta) {
    return kLeft + (delta - static_cast<double>(dmin)) /
                       static_cast<double>(dmax - dmin) * (kRight - kLeft);
  };
  const auto sy = [&](double accuracy) { return kBottom - accuracy * (kBottom - kTop); };

  std::string svg;
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"400\" "
         "viewBox=\"0 0 640 400\">\n";
  svg += "  <rect x=\"0\" y=\"0\" width=\"640\" height=\"400\" fill=\"white\"/>\n";
  svg += "  <text x=\"320\" y=\"16\" font-family=\"monospace\" font-size=\"13\" "
         "text-anchor=\"middle\">ordering accuracy vs clip separation</text>\n";

  // Axes.
  svg += "  <line x1=\"" + fmt_coord(kLeft) + "\" y1=\"" + fmt_coord(kBottom) + "\" x2=\"" +
         fmt_coord(kRight) + "\" y2=\"" + fmt_coord(kBottom) + "\" stroke=\"black\"/>\n";
  svg += "  <line x1=\"" + fmt_coord(kLeft) + "\" y1=\"" + fmt_coord(kTop) + "\" x2=\"" +
         fmt_coord(kLeft) + "\" y2=\"" + fmt_coord(kBottom) + "\" stroke=\"black\"/>\n";

  // Y ticks every 0.25.
  for (int i = 0; i <= 4; ++i) {
    const double a = 0.25 * i;
    const double y = sy(a);
    svg += "  <line x1=\"" + fmt_coord(kLeft - 5.0) + "\" y1=\"" + fmt_coord(y) + "\" x2=\"" +
           fmt_coord(kLeft) + "\" y2=\"" + fmt_coord(y) + "\" stroke=\"black\"/>\n";
    svg += "  <text x=\"" + fmt_coord(kLeft - 9.0) + "\" y=\"" + fmt_coord(y + 4.0) +
           "\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"end\">" + fmt_coord(a) +
           "</text>\n";
  }

  // X ticks on integer separations (strided so at most ~16 labels appear).
  const std::int64_t span = dmax - dmin;
  const std::int64_t stride = span / 16 + 1;
  for (std::int64_t d = dmin; d <= dmax; d += stride) {
    const double x = sx(static_cast<double>(d));
    svg += "  <line x1=\"" + fmt_coord(x) + "\" y1=\"" + fmt_coord(kBottom) + "\" x2=\"" +
           fmt_coord(x) + "\" y2=\"" + fmt_coord(kBottom + 5.0) + "\" stroke=\"black\"/>\n";
    svg += "  <text x=\"" + fmt_coord(x) + "\" y=\"" + fmt_coord(kBottom + 18.0) +
           "\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"middle\">" +
           std::to_string(d) + "</text>\n";
  }

  // Axis labels.
  svg += "  <text x=\"" + fmt_coord(0.5 * (kLeft + kRight)) + "\" y=\"" +
         fmt_coord(kBottom + 40.0) +
         "\" font-family=\"monospace\" font-size=\"12\" text-anchor=\"middle\">clip separation "
         "(positions)</text>\n";
  svg += "  <text x=\"18\" y=\"" + fmt_coord(0.5 * (kTop + kBottom)) +
         "\" font-family=\"monospace\" font-size=\"12\" text-anchor=\"middle\" "
         "transform=\"rotate(-90 18 " +
         fmt_coord(0.5 * (kTop + kBottom)) + ")\">accuracy</text>\n";

  if (!curve.points.empty()) {
    std::string poly;
    for (const DeltaAccuracy& p : curve.points) {
      if (!poly.empty()) poly += ' ';
      poly += fmt_coord(sx(static_cast<double>(p.delta))) + "," + fmt_coord(sy(p.accuracy));
    }
    svg += "  <polyline points=\"" + poly + "\" fill=\"none\" stroke=\"#1f6feb\" "
           "stroke-width=\"1.5\"/>\n";
    for (const DeltaAccuracy& p : curve.points) {
      const std::string cx = fmt_coord(sx(static_cast<double>(p.delta)));
      const std::string cy = fmt_coord(sy(p.accuracy));
      // Hollow markers flag buckets with fewer than 10 pairs.
      const char* fill = p.low_confidence ? "white" : "#1f6feb";
      svg += "  <circle cx=\"" + cx + "\" cy=\"" + cy + "\" r=\"4\" fill=\"" + fill +
             "\" stroke=\"#1f6feb\" stroke-width=\"1.5\"/>\n";
    }
  }

  svg += "</svg>\n";
  return svg;
}

}  // namespace

void render_reports(const std::vector<EvalReport>& reports, const SeparationCurve& curve,
                    const std::string& out_dir, const std::string& config_json,
                    std::uint64_t seed) {
  nlohmann::json config;
  try {
    config = nlohmann::json::parse(config_json);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("run config is not valid JSON: ") + e.what());
  }

  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw DataError("cannot create output directory '" + out_dir + "': " + ec.message());

  nlohmann::json meta;
  meta["version"] = CLIPORDER_VERSION;
  meta["seed"] = seed;
  meta["config"] = config;

  write_text(out_dir + "/results.csv", render_results_csv(reports));
  write_text(out_dir + "/curve.csv", render_curve_csv(curve));
  write_text(out_dir + "/curve.svg", render_curve_svg(curve));
  write_text(out_dir + "/run_meta.json", meta.dump(2) + "\n");
}

}  // namespace cliporder
