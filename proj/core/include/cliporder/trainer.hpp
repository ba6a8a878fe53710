#pragma once

// Training loops for the three comparison methods: prototype-embedding
// training on weakly labeled clips, and pairwise binary training on the
// antisymmetric two-tower logit. Everything is bit-reproducible from
// (config, dataset, seed): batches are shuffled with seeded generators and
// gradients accumulate in fixed order.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cliporder/clip.hpp"
#include "cliporder/encoder.hpp"
#include "cliporder/heads.hpp"
#include "cliporder/serialize.hpp"

namespace cliporder {

struct TrainConfig {
  Method method = Method::kEmbedding;
  int epochs = 3;  // hard-capped at 5
  int batch_size = 16;
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double repulsion = 0.1;  // prototype hinge weight; 0 = pull-only objective
  std::uint64_t seed = 0;
  // Pair sampling for two-tower training and validation metrics.
  int min_sep = 1;
  int max_sep = 11;
  int pairs_per_video = 30;
  int val_pairs_per_video = 6;
  EncoderConfig encoder;

  void validate() const;
};

std::string train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const std::string& text);

struct StepRecord {
  std::int64_t step = 0;  // global, monotone across epochs
  int epoch = 0;          // 1-based
  double loss = 0.0;
  double lr = 0.0;
  double wall_ms = 0.0;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;  // mean of step losses in the epoch
  double val_loss = 0.0;    // NaN when there is no validation split
  double val_accuracy = 0.0;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  std::string config_json;
};

// CSV columns: step, epoch, loss, lr, wall_ms.
void save_train_log_csv(const TrainLog& log, const std::string& path);
// CSV columns: epoch, train_loss, val_loss, val_accuracy.
void save_epochs_csv(const TrainLog& log, const std::string& path);

// ---- optimizer ----

using GradMap = std::map<std::string, std::vector<double>>;

struct AdamState {
  std::int64_t t = 0;
  std::map<std::string, std::vector<double>> m, v;
};

// Standard Adam with bias correction. Throws NumericError naming the
// parameter on a non-finite gradient; missing entries in `grads` are
// treated as zero gradients.
void adam_step(ParamMap& params, const GradMap& grads, AdamState& state, double lr,
               double beta1, double beta2, double eps);

// ---- training ----

struct TrainedModel {
  TrainConfig config;
  ParamMap params;  // encoder + head parameters (prototypes included)
};

struct TrainResult {
  TrainedModel model;
  TrainLog log;
};

// Dispatches on cfg.method. When out_dir is non-empty, writes one
// checkpoint per epoch (epoch_<k>.bock) plus train_log.csv and epochs.csv
// into it. split lists video ids; train/val/test must be pairwise disjoint
// and must not share participants.
TrainResult train_model(const DatasetIndex& data, const DatasetSplit& split,
                        const TrainConfig& cfg, const std::string& out_dir = "");

TrainResult train_embedding(const DatasetIndex& data, const DatasetSplit& split,
                            const TrainConfig& cfg, const std::string& out_dir = "");
TrainResult train_two_tower(const DatasetIndex& data, const DatasetSplit& split,
                            const TrainConfig& cfg, const std::string& out_dir = "");

}  // namespace cliporder
