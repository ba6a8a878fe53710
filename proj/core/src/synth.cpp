#include "cliporder/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "cliporder/errors.hpp"
#include "cliporder/rng.hpp"

namespace cliporder {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Value noise: a coarse grid of uniforms sampled with bilinear interpolation.
struct Texture {
  int n = 0;
  std::vector<double> grid;

  static Texture make(Rng& rng, int n, double lo, double hi) {
    Texture t;
    t.n = n;
    t.grid.resize(static_cast<std::size_t>(n) * n);
    for (auto& v : t.grid) v = rng.uniform(lo, hi);
    return t;
  }

  // u, v in [0,1]; clamped outside.
  double sample(double u, double v) const {
    const double fu = std::clamp(u, 0.0, 1.0) * (n - 1);
    const double fv = std::clamp(v, 0.0, 1.0) * (n - 1);
    const int iu = std::min(n - 2, static_cast<int>(fu));
    const int iv = std::min(n - 2, static_cast<int>(fv));
    const double du = fu - iu, dv = fv - iv;
    const double a = grid[static_cast<std::size_t>(iv) * n + iu];
    const double b = grid[static_cast<std::size_t>(iv) * n + iu + 1];
    const double c = grid[static_cast<std::size_t>(iv + 1) * n + iu];
    const double d = grid[static_cast<std::size_t>(iv + 1) * n + iu + 1];
    return (a * (1 - du) + b * du) * (1 - dv) + (c * (1 - du) + d * du) * dv;
  }
};

double lerp(double a, double b, double t) { return a + (b - a) * t; }

}  // namespace

void SynthParams::validate() const {
  if (clips_per_sequence < 1) throw ConfigError("synth: clips_per_sequence must be >= 1");
  if (frames < 1) throw ConfigError("synth: frames must be >= 1");
  if (height < 8 || width < 8) throw ConfigError("synth: resolution must be at least 8x8");
  if (channels < 1 || channels > 4) throw ConfigError("synth: channels must be 1..4");
  if (clip_seconds <= 0.0) throw ConfigError("synth: clip_seconds must be positive");
  const bool static_scene = amplitude_start == 0.0 && amplitude_end == 0.0;
  if (!static_scene) {
    if (!(amplitude_start > amplitude_end && amplitude_end >= 0.0)) {
      throw ConfigError("synth: need amplitude_start > amplitude_end >= 0");
    }
    if (amplitude_start < 1.0) {
      throw ConfigError("synth: amplitude_start below 1 px is invisible to block matching");
    }
  }
  if (!(rate_start >= rate_end && rate_end > 0.0)) {
    throw ConfigError("synth: need rate_start >= rate_end > 0");
  }
  if (noise_std < 0.0 || drift_px < 0.0) throw ConfigError("synth: negative noise or drift");
  if (gain_jitter < 0.0 || gain_jitter > 0.5) throw ConfigError("synth: gain_jitter must be in [0, 0.5]");
}

RecoverySequence synth_sequence(const SynthParams& params, const std::string& video_id) {
  params.validate();
  const std::int64_t m = params.clips_per_sequence;
  const std::int64_t t = params.frames, h = params.height, w = params.width, c = params.channels;

  // Scene constants for this video: textures and torso placement.
  Rng bg_rng(child_seed(params.seed, "bg", video_id));
  const Texture bg = Texture::make(bg_rng, 9, 0.15, 0.50);
  Rng torso_rng(child_seed(params.seed, "torso", video_id));
  const Texture torso = Texture::make(torso_rng, 7, 0.55, 0.95);
  Rng scene_rng(child_seed(params.seed, "scene", video_id));
  const double cx0 = 0.5 * w + scene_rng.uniform(-1.0, 1.0);
  const double cy0 = 0.5 * h + scene_rng.uniform(-1.0, 1.0);
  const double rx0 = 0.30 * w;
  const double ry0 = 0.32 * h;

  RecoverySequence seq;
  seq.video_id = video_id;
  seq.clips.reserve(static_cast<std::size_t>(m));

  for (std::int64_t i = 0; i < m; ++i) {
    const double progress = m > 1 ? static_cast<double>(i) / static_cast<double>(m - 1) : 0.0;
    const double amp = lerp(params.amplitude_start, params.amplitude_end, progress);
    const double rate = lerp(params.rate_start, params.rate_end, progress);

    Rng rng(child_seed(params.seed, "clip", video_id, static_cast<std::uint64_t>(i)));
    const double phase = rng.uniform(0.0, 2.0 * kPi);
    const double drift_dir = rng.uniform(0.0, 2.0 * kPi);
    const double gain = 1.0 + params.gain_jitter * rng.uniform(-1.0, 1.0);

    Clip clip;
    clip.video_id = video_id;
    clip.clip_index = static_cast<std::uint32_t>(i);
    clip.fps = params.fps();
    clip.t = static_cast<std::uint32_t>(t);
    clip.h = static_cast<std::uint32_t>(h);
    clip.w = static_cast<std::uint32_t>(w);
    clip.c = static_cast<std::uint32_t>(c);
    clip.pixels.resize(clip.pixel_count());

    std::size_t px = 0;
    for (std::int64_t k = 0; k < t; ++k) {
      const double tau = static_cast<double>(k) / params.fps();
      const double breath = std::sin(2.0 * kPi * rate * tau + phase);
      const double ry = ry0 + amp * breath;
      const double rx = rx0 + 0.6 * amp * breath;
      const double frac = params.clip_seconds > 0 ? tau / params.clip_seconds : 0.0;
      const double cx = cx0 + params.drift_px * frac * std::cos(drift_dir);
      const double cy = cy0 + params.drift_px * frac * std::sin(drift_dir);

      for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
          const double nx = (x - cx) / rx;
          const double ny = (y - cy) / ry;
          const double q = std::sqrt(nx * nx + ny * ny);
          // Signed distance approximation to the ellipse boundary, in px.
          const double sd = (q - 1.0) * std::min(rx, ry);
          const double alpha = std::clamp(0.5 - sd / 1.2, 0.0, 1.0);
          double value = bg.sample(static_cast<double>(x) / (w - 1),
                                   static_cast<double>(y) / (h - 1));
          if (alpha > 0.0) {
            // Torso texture in ellipse-relative coordinates, so the pattern
            // stretches with the breathing motion instead of staying put.
            const double tv = torso.sample((nx + 1.0) * 0.5, (ny + 1.0) * 0.5);
            value += alpha * (tv - value);
          }
          value *= gain;
          if (params.noise_std > 0.0) value += rng.normal(0.0, params.noise_std);
          const double clamped = std::clamp(value, 0.0, 1.0);
          for (std::int64_t ch = 0; ch < c; ++ch) {
            clip.pixels[px++] = static_cast<float>(clamped);
          }
        }
      }
    }
    seq.clips.push_back(std::move(clip));
  }
  return seq;
}

DatasetIndex synth_dataset(const std::string& root, int n_sequences, const SynthParams& params,
                           std::uint64_t seed) {
  params.validate();
  if (n_sequences < 1) throw ConfigError("need at least one sequence");
  std::filesystem::create_directories(root + "/clips");

  DatasetIndex index;
  index.root = root;
  index.fps = params.fps();
  index.clip_seconds = params.clip_seconds;
  index.sequences.reserve(static_cast<std::size_t>(n_sequences));

  for (int i = 0; i < n_sequences; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "synth_%04d", i);
    SynthParams p = params;
    p.seed = child_seed(seed, "dataset", "", static_cast<std::uint64_t>(i));
    RecoverySequence seq = synth_sequence(p, id);

    SequenceRef ref;
    ref.video_id = id;
    ref.participant = id;  // synthetic: one video per participant
    ref.clips.reserve(seq.clips.size());
    for (std::size_t k = 0; k < seq.clips.size(); ++k) {
      const std::string rel = std::string("clips/") + id + "_" + std::to_string(k) + ".vclp";
      write_clip(seq.clips[k], root + "/" + rel);
      ClipRef cref;
      cref.path = rel;
      cref.clip_index = static_cast<std::uint32_t>(k);
      cref.label = weak_label(static_cast<std::int64_t>(k), params.clips_per_sequence);
      ref.clips.push_back(std::move(cref));
    }
    index.sequences.push_back(std::move(ref));
  }
  save_manifest(index);
  return index;
}

}  // namespace cliporder
