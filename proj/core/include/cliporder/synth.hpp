#pragma once

// Procedural recovery-sequence generator: a textured torso ellipse whose
// boundary oscillates like breathing, with the oscillation amplitude and
// rate decaying across clips. Clip order is therefore recoverable from
// motion strength alone, which gives every downstream component a known
// oracle. Nuisance factors (pixel noise, slow drift, lighting jitter) keep
// the task from degenerating into trivial pixel matching.

#include <cstdint>
#include <string>

#include "cliporder/clip.hpp"

namespace cliporder {

struct SynthParams {
  std::int64_t clips_per_sequence = 12;
  std::int64_t frames = 8;  // per clip
  std::int64_t height = 32;
  std::int64_t width = 32;
  std::int64_t channels = 1;
  double clip_seconds = 6.0;
  double amplitude_start = 4.0;  // px of radial oscillation at clip 0
  double amplitude_end = 0.5;    // px at the final clip
  double rate_start = 0.20;      // breaths per second at clip 0
  double rate_end = 0.10;
  double noise_std = 0.005;
  double drift_px = 1.0;      // total center drift across one clip
  double gain_jitter = 0.05;  // lighting multiplier half-range
  std::uint64_t seed = 0;

  double fps() const { return static_cast<double>(frames) / clip_seconds; }

  // Enforces decaying amplitude (start > end >= 0 and start >= 1 so block
  // matching can see it) and rate_start >= rate_end > 0. The fully static
  // scene (both amplitudes zero) is admitted as a degenerate test case.
  void validate() const;
};

// Deterministic given (params.seed, video_id): every clip derives its own
// child seed, so generation may be parallelized across clips.
RecoverySequence synth_sequence(const SynthParams& params, const std::string& video_id);

// Generates n sequences (one participant each), writes their clips under
// root/clips/ and a manifest at root/manifest.json, and returns the index.
// Per-sequence seeds derive from `seed`; params.seed is ignored. Weak labels
// follow the thirds rule.
DatasetIndex synth_dataset(const std::string& root, int n_sequences, const SynthParams& params,
                           std::uint64_t seed);

}  // namespace cliporder
