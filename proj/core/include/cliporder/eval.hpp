#pragma once

// Pairwise temporal-ordering evaluation. A trained model predicts, for each
// presented pair, whether the first clip is earlier in recovery; this module
// aggregates those calls into accuracy/precision/recall/F1 (positive class:
// "first presented clip is earlier"), buckets accuracy by exact clip
// separation, and renders deterministic CSV/SVG/JSON artifacts.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cliporder/clip.hpp"
#include "cliporder/pairs.hpp"
#include "cliporder/trainer.hpp"

namespace cliporder {

// One ordering pair drawn from a specific video.
struct EvalPair {
  std::string video_id;
  PairSample pair;
};

// One evaluated pair: what the model said vs. the ground truth.
struct PairOutcome {
  std::int64_t delta = 0;
  bool truth_first_earlier = false;
  bool predicted_first_earlier = false;

  bool correct() const { return truth_first_earlier == predicted_first_earlier; }
};

// Accuracy at one exact clip-position separation.
struct DeltaAccuracy {
  std::int64_t delta = 0;
  std::int64_t n = 0;
  double accuracy = 0.0;
  bool low_confidence = false;  // fewer than 10 pairs in the bucket
};

struct SeparationCurve {
  std::vector<DeltaAccuracy> points;  // ascending delta; n sums to the pair count
};

struct EvalReport {
  std::string method;
  std::string posenc = "ape";
  bool mgm = false;
  std::int64_t n_pairs = 0;
  std::int64_t tp = 0;  // truth earlier, predicted earlier
  std::int64_t fp = 0;
  std::int64_t tn = 0;
  std::int64_t fn = 0;
  double accuracy = 0.0;
  double precision = 0.0;  // 0 when tp + fp == 0
  double recall = 0.0;     // 0 when tp + fn == 0
  double f1 = 0.0;         // 0 when precision + recall == 0
  std::vector<DeltaAccuracy> per_delta;  // bucket counts sum to n_pairs
};

// Returns true when the first-presented clip is predicted earlier.
using PairPredictor = std::function<bool(const EvalPair&)>;

// Draws balanced pairs for every listed video. Per-video randomness is keyed
// by (seed, video id), so the draw is independent of list order.
// pairs_per_video < 0 keeps every admissible pair.
std::vector<EvalPair> draw_eval_pairs(const DatasetIndex& data,
                                      const std::vector<std::string>& videos,
                                      std::int64_t min_sep, std::int64_t max_sep,
                                      std::int64_t pairs_per_video, std::uint64_t seed);

// Runs the predictor over every pair in order.
std::vector<PairOutcome> run_predictor(const std::vector<EvalPair>& pairs,
                                       const PairPredictor& predict);

// Model-backed predictor. Clips — and, for the embedding method, their
// embeddings — are cached, so each clip is loaded and encoded once. Runs
// with gradient recording disabled and never mutates the model; `model` and
// `data` must outlive the returned callable.
PairPredictor model_predictor(const TrainedModel& model, const DatasetIndex& data);

// Aggregates outcomes into a report; throws DataError on an empty set.
EvalReport evaluate_outcomes(const std::string& method, const std::vector<PairOutcome>& outcomes);
SeparationCurve curve_from_outcomes(const std::vector<PairOutcome>& outcomes);

// Convenience wrappers around model_predictor + the aggregators.
EvalReport evaluate(const TrainedModel& model, const DatasetIndex& data,
                    const std::vector<EvalPair>& pairs);
SeparationCurve separation_curve(const TrainedModel& model, const DatasetIndex& data,
                                 const std::vector<EvalPair>& pairs);

// Spearman rank correlation with average ranks on ties. Throws NumericError
// when either side is constant (the correlation is undefined there).
double spearman(const std::vector<double>& x, const std::vector<double>& y);

// Writes results.csv (method,posenc,mgm,accuracy,f1 — one row per report),
// curve.csv (delta,n,accuracy), curve.svg (single-polyline text chart;
// low-confidence points drawn hollow), and run_meta.json (config + version +
// seed) into out_dir. Bit-identical on re-render. config_json must parse.
void render_reports(const std::vector<EvalReport>& reports, const SeparationCurve& curve,
                    const std::string& out_dir, const std::string& config_json,
                    std::uint64_t seed);

}  // namespace cliporder
