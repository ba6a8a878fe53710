#pragma once

// Block-matching optical flow at tile resolution and motion-guided masking:
// keep the top fraction of tiles by motion magnitude, black out the rest.

#include <cstdint>
#include <utility>
#include <vector>

#include "cliporder/clip.hpp"

namespace cliporder {

// Per-tile integer displacements (dy, dx) of the current frame relative to
// the previous one, row-major over the tile grid.
struct FlowGrid {
  std::int64_t gh = 0, gw = 0;
  std::vector<std::pair<int, int>> d;
};

// Per-tile nonnegative motion magnitudes, row-major.
struct MotionGrid {
  std::int64_t gh = 0, gw = 0;
  std::vector<double> mag;
};

// Per-tile keep decision for one frame.
struct TileMask {
  std::int64_t gh = 0, gw = 0;
  std::vector<std::uint8_t> keep;

  std::int64_t kept() const;
};

enum class FlowScorer {
  kSad,      // block matching: argmin of sum of absolute differences
  kAbsDiff,  // ablation: mean absolute frame difference, no displacement
};

// For each tile of `cur`, the displacement within +-radius minimizing the
// SAD against `prev` sampled at the displaced location (edge-clamped).
// Ties break toward smaller |d|, then smaller dy, then smaller dx.
// Grayscale = channel mean. Frames are h*w*c row-major.
FlowGrid tile_flow(const float* prev, const float* cur, std::int64_t h, std::int64_t w,
                   std::int64_t c, std::int64_t tile, int radius);

// Euclidean norm per tile.
MotionGrid motion_magnitude(const FlowGrid& flow);

// Magnitudes for one frame step under either scorer.
MotionGrid frame_motion(const float* prev, const float* cur, std::int64_t h, std::int64_t w,
                        std::int64_t c, std::int64_t tile, int radius, FlowScorer scorer);

// Keeps the k = ceil(keep_ratio * gh * gw) highest-magnitude tiles; ties
// resolved by row-major order (lower index wins).
TileMask select_tiles(const MotionGrid& motion, double keep_ratio);

// One mask per frame. Frame 0 has no predecessor and borrows the 0->1
// motion field. Requires at least two frames.
std::vector<TileMask> compute_masks(const Clip& clip, std::int64_t tile, int radius,
                                    double keep_ratio, FlowScorer scorer = FlowScorer::kSad);

// Zeroes every pixel of non-kept tiles; kept tiles pass through bit-exactly.
Clip apply_mask(const Clip& clip, const std::vector<TileMask>& masks, std::int64_t tile);

// Convenience: compute_masks + apply_mask.
Clip motion_guided_mask(const Clip& clip, std::int64_t tile, int radius, double keep_ratio,
                        FlowScorer scorer = FlowScorer::kSad);

// Mean motion magnitude across all frame steps of a clip (the synthetic
// generator's monotonicity oracle).
double mean_clip_motion(const Clip& clip, std::int64_t tile, int radius,
                        FlowScorer scorer = FlowScorer::kSad);

}  // namespace cliporder
