#pragma once

// Experiment commands shared by the `cliporder` binary and the acceptance
// harness. Each command resolves one RunConfig, derives every random draw
// from run.seed, and serializes the resolved config into its output
// directory, so identical configs reproduce identical output trees.

#include <cstdint>
#include <iosfwd>
#include <string>

#include "cliporder/eval.hpp"
#include "cliporder/synth.hpp"
#include "cliporder/trainer.hpp"

namespace cliporder {

struct RunConfig {
  std::uint64_t seed = 0;
  int threads = 1;
  std::string out;         // output directory
  std::string data;        // dataset directory holding manifest.json
  std::string checkpoint;  // model.bock path (eval/curve)
  std::int64_t sequences = 20;             // synth: sequences to generate
  std::int64_t eval_min_sep = 1;           // eval/curve pair drawing
  std::int64_t eval_max_sep = 11;
  std::int64_t eval_pairs_per_video = -1;  // -1 keeps every admissible pair
  TrainConfig train;
  SynthParams synth;

  void validate() const;  // ConfigError on any out-of-range field
};

std::string run_config_to_json(const RunConfig& run);
RunConfig run_config_from_json(const std::string& text);  // rejects unknown keys
RunConfig load_run_config(const std::string& path);       // DataError if unreadable

// Commands print human-readable progress to `log` and throw the shared error
// taxonomy on failure (ConfigError / DataError / NumericError).
void cmd_synth(const RunConfig& run, std::ostream& log);
void cmd_mask(const RunConfig& run, std::ostream& log);
TrainedModel cmd_train(const RunConfig& run, std::ostream& log);
EvalReport cmd_eval(const RunConfig& run, std::ostream& log);
SeparationCurve cmd_curve(const RunConfig& run, std::ostream& log);
// Prints one row per checked operation; NumericError if any row fails.
void cmd_gradcheck(std::uint64_t seed, std::ostream& log);
// Prints a summary of a dataset directory, manifest, clip, or checkpoint.
void cmd_inspect(const std::string& path, std::ostream& log);

// Reads a model back from a checkpoint written by cmd_train (model.bock plus
// a sibling model.json holding the training config).
TrainedModel load_model(const std::string& checkpoint_path);

const char* version_string();

}  // namespace cliporder
