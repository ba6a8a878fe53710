#include "cliporder/motion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cliporder/errors.hpp"

namespace cliporder {

namespace {

void check_tiling(std::int64_t h, std::int64_t w, std::int64_t tile) {
  if (tile <= 0 || h % tile != 0 || w % tile != 0) {
    throw ContractError("frame " + std::to_string(h) + "x" + std::to_string(w) +
                        " does not tile evenly by " + std::to_string(tile));
  }
}

inline double gray_at(const float* frame, std::int64_t h, std::int64_t w, std::int64_t c,
                      std::int64_t y, std::int64_t x) {
  // Edge clamping keeps out-of-bounds probes valid.
  y = std::clamp<std::int64_t>(y, 0, h - 1);
  x = std::clamp<std::int64_t>(x, 0, w - 1);
  const float* px = frame + (y * w + x) * c;
  double s = 0.0;
  for (std::int64_t ch = 0; ch < c; ++ch) s += px[ch];
  return s / static_cast<double>(c);
}

}  // namespace

std::int64_t TileMask::kept() const {
  return std::count(keep.begin(), keep.end(), std::uint8_t{1});
}

FlowGrid tile_flow(const float* prev, const float* cur, std::int64_t h, std::int64_t w,
                   std::int64_t c, std::int64_t tile, int radius) {
  check_tiling(h, w, tile);
  if (radius < 1) throw ContractError("search radius must be >= 1");
  FlowGrid flow;
  flow.gh = h / tile;
  flow.gw = w / tile;
  flow.d.resize(static_cast<std::size_t>(flow.gh * flow.gw));

  // Grayscale of the current frame once; prev is probed with clamping.
  std::vector<double> cur_gray(static_cast<std::size_t>(h * w));
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      cur_gray[static_cast<std::size_t>(y * w + x)] = gray_at(cur, h, w, c, y, x);
    }
  }

  for (std::int64_t ty = 0; ty < flow.gh; ++ty) {
    for (std::int64_t tx = 0; tx < flow.gw; ++tx) {
      double best = std::numeric_limits<double>::infinity();
      int best_dy = 0, best_dx = 0;
      int best_norm2 = 0;
      for (int dy = -radius; dy <= radius; ++dy) {
        for (int dx = -radius; dx <= radius; ++dx) {
          double sad = 0.0;
          for (std::int64_t py = 0; py < tile; ++py) {
            const std::int64_t y = ty * tile + py;
            for (std::int64_t px = 0; px < tile; ++px) {
              const std::int64_t x = tx * tile + px;
              sad += std::abs(cur_gray[static_cast<std::size_t>(y * w + x)] -
                              gray_at(prev, h, w, c, y - dy, x - dx));
            }
          }
          const int norm2 = dy * dy + dx * dx;
          const bool better =
              sad < best ||
              (sad == best && (norm2 < best_norm2 ||
                               (norm2 == best_norm2 &&
                                (dy < best_dy || (dy == best_dy && dx < best_dx)))));
          if (better) {
            best = sad;
            best_dy = dy;
            best_dx = dx;
            best_norm2 = norm2;
          }
        }
      }
      flow.d[static_cast<std::size_t>(ty * flow.gw + tx)] = {best_dy, best_dx};
    }
  }
  return flow;
}

MotionGrid motion_magnitude(const FlowGrid& flow) {
  MotionGrid grid;
  grid.gh = flow.gh;
  grid.gw = flow.gw;
  grid.mag.resize(flow.d.size());
  for (std::size_t i = 0; i < flow.d.size(); ++i) {
    const auto [dy, dx] = flow.d[i];
    grid.mag[i] = std::sqrt(static_cast<double>(dy) * dy + static_cast<double>(dx) * dx);
  }
  return grid;
}

MotionGrid frame_motion(const float* prev, const float* cur, std::int64_t h, std::int64_t w,
                        std::int64_t c, std::int64_t tile, int radius, FlowScorer scorer) {
  if (scorer == FlowScorer::kSad) {
    return motion_magnitude(tile_flow(prev, cur, h, w, c, tile, radius));
  }
  check_tiling(h, w, tile);
  MotionGrid grid;
  grid.gh = h / tile;
  grid.gw = w / tile;
  grid.mag.assign(static_cast<std::size_t>(grid.gh * grid.gw), 0.0);
  for (std::int64_t ty = 0; ty < grid.gh; ++ty) {
    for (std::int64_t tx = 0; tx < grid.gw; ++tx) {
      double acc = 0.0;
      for (std::int64_t py = 0; py < tile; ++py) {
        for (std::int64_t px = 0; px < tile; ++px) {
          const std::int64_t y = ty * tile + py, x = tx * tile + px;
          acc += std::abs(gray_at(cur, h, w, c, y, x) - gray_at(prev, h, w, c, y, x));
        }
      }
      grid.mag[static_cast<std::size_t>(ty * grid.gw + tx)] =
          acc / static_cast<double>(tile * tile);
    }
  }
  return grid;
}

TileMask select_tiles(const MotionGrid& motion, double keep_ratio) {
  if (!(keep_ratio > 0.0 && keep_ratio <= 1.0)) {
    throw ContractError("keep_ratio must lie in (0, 1], got " + std::to_string(keep_ratio));
  }
  const std::int64_t n = motion.gh * motion.gw;
  const auto k = static_cast<std::int64_t>(std::ceil(keep_ratio * static_cast<double>(n)));
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
    const double ma = motion.mag[static_cast<std::size_t>(a)];
    const double mb = motion.mag[static_cast<std::size_t>(b)];
    return ma > mb || (ma == mb && a < b);
  });
  TileMask mask;
  mask.gh = motion.gh;
  mask.gw = motion.gw;
  mask.keep.assign(static_cast<std::size_t>(n), 0);
  for (std::int64_t i = 0; i < k; ++i) mask.keep[static_cast<std::size_t>(order[i])] = 1;
  return mask;
}

std::vector<TileMask> compute_masks(const Clip& clip, std::int64_t tile, int radius,
                                    double keep_ratio, FlowScorer scorer) {
  if (clip.t < 2) throw ContractError("masking needs at least two frames");
  check_tiling(clip.h, clip.w, tile);
  std::vector<TileMask> masks(clip.t);
  for (std::uint32_t f = 1; f < clip.t; ++f) {
    const MotionGrid grid =
        frame_motion(clip.frame(f - 1), clip.frame(f), clip.h, clip.w, clip.c, tile, radius, scorer);
    masks[f] = select_tiles(grid, keep_ratio);
  }
  // No predecessor for frame 0: reuse the 0->1 field.
  masks[0] = masks[1];
  return masks;
}

Clip apply_mask(const Clip& clip, const std::vector<TileMask>& masks, std::int64_t tile) {
  check_tiling(clip.h, clip.w, tile);
  if (masks.size() != clip.t) {
    throw ContractError("mask count " + std::to_string(masks.size()) + " does not match " +
                        std::to_string(clip.t) + " frames");
  }
  const std::int64_t gh = clip.h / tile, gw = clip.w / tile;
  Clip out = clip;
  for (std::uint32_t f = 0; f < clip.t; ++f) {
    const TileMask& mask = masks[f];
    if (mask.gh != gh || mask.gw != gw) {
      throw ContractError("mask grid does not align with the clip tiling");
    }
    float* frame = out.frame(f);
    for (std::int64_t ty = 0; ty < gh; ++ty) {
      for (std::int64_t tx = 0; tx < gw; ++tx) {
        if (mask.keep[static_cast<std::size_t>(ty * gw + tx)]) continue;
        for (std::int64_t py = 0; py < tile; ++py) {
          float* row = frame + ((ty * tile + py) * clip.w + tx * tile) * clip.c;
          std::fill_n(row, tile * clip.c, 0.0f);
        }
      }
    }
  }
  return out;
}

Clip motion_guided_mask(const Clip& clip, std::int64_t tile, int radius, double keep_ratio,
                        FlowScorer scorer) {
  return apply_mask(clip, compute_masks(clip, tile, radius, keep_ratio, scorer), tile);
}

double mean_clip_motion(const Clip& clip, std::int64_t tile, int radius, FlowScorer scorer) {
  if (clip.t < 2) throw ContractError("clip motion needs at least two frames");
  double acc = 0.0;
  std::int64_t count = 0;
  for (std::uint32_t f = 1; f < clip.t; ++f) {
    const MotionGrid grid =
        frame_motion(clip.frame(f - 1), clip.frame(f), clip.h, clip.w, clip.c, tile, radius, scorer);
    for (double m : grid.mag) acc += m;
    count += grid.gh * grid.gw;
  }
  return acc / static_cast<double>(count);
}

}  // namespace cliporder
