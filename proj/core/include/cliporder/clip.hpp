#pragma once

// Raw clip container, recovery sequences, video segmentation, the weak
// thirds-labeling rule, and dataset manifests.

#include <cstdint>
#include <string>
#include <vector>

namespace cliporder {

// Fixed-length video tensor with its position inside a recovery sequence.
// Pixels are stored as f32 in [0,1], row-major (frame, row, col, channel),
// exactly as they appear on disk, so a write/read round trip is bit-exact.
struct Clip {
  std::string video_id;
  std::uint32_t clip_index = 0;
  double fps = 0.0;
  std::uint32_t t = 0, h = 0, w = 0, c = 0;
  std::vector<float> pixels;

  std::size_t pixel_count() const {
    return static_cast<std::size_t>(t) * h * w * c;
  }
  std::size_t frame_stride() const { return static_cast<std::size_t>(h) * w * c; }
  const float* frame(std::uint32_t ti) const { return pixels.data() + ti * frame_stride(); }
  float* frame(std::uint32_t ti) { return pixels.data() + ti * frame_stride(); }
  float at(std::uint32_t ti, std::uint32_t y, std::uint32_t x, std::uint32_t ch) const {
    return pixels[((static_cast<std::size_t>(ti) * h + y) * w + x) * c + ch];
  }
  float& at(std::uint32_t ti, std::uint32_t y, std::uint32_t x, std::uint32_t ch) {
    return pixels[((static_cast<std::size_t>(ti) * h + y) * w + x) * c + ch];
  }

  // Throws if extents are zero, sizes disagree, or pixels leave [0,1].
  void validate() const;
};

enum class WeakLabel { kSob, kNoSob, kExcluded };

const char* weak_label_name(WeakLabel label);
WeakLabel weak_label_from_name(const std::string& name);

// Thirds rule: with k = floor(m/3), indices [0,k) are SOB, [m-k,m) are
// NoSOB, the middle is Excluded. Requires m >= 3.
WeakLabel weak_label(std::int64_t clip_index, std::int64_t m);

// Ordered clips of one video; clip_index runs 0..M-1 and lower index means
// earlier in recovery (more shortness of breath).
struct RecoverySequence {
  std::string video_id;
  std::vector<Clip> clips;

  void validate() const;
};

void write_clip(const Clip& clip, const std::string& path);
Clip read_clip(const std::string& path);

// Cuts a raw frame stack into consecutive non-overlapping windows of
// clip_seconds, sampling clip_frames frames per window at uniform stride.
// A trailing partial window is dropped; a video shorter than one window is
// an error.
RecoverySequence segment_video(const std::vector<float>& frames, std::int64_t n, std::int64_t h,
                               std::int64_t w, std::int64_t c, double fps, double clip_seconds,
                               std::int64_t clip_frames, const std::string& video_id);

// ---- dataset manifests ----

struct ClipRef {
  std::string path;  // relative to the manifest directory
  std::uint32_t clip_index = 0;
  WeakLabel label = WeakLabel::kExcluded;
};

struct SequenceRef {
  std::string video_id;
  std::string participant;  // defaults to video_id for synthetic data
  std::vector<ClipRef> clips;
};

struct DatasetIndex {
  std::string root;  // directory holding manifest.json
  double fps = 0.0;
  double clip_seconds = 0.0;
  std::vector<SequenceRef> sequences;

  const SequenceRef* find(const std::string& video_id) const;
};

void save_manifest(const DatasetIndex& index);
DatasetIndex load_manifest(const std::string& dir);

Clip load_clip(const DatasetIndex& index, const ClipRef& ref);

// Participant-level split: 20% of participants to test, then 20% of the
// remaining to validation, shuffled deterministically from the seed.
struct DatasetSplit {
  std::vector<std::string> train, val, test;  // video ids
};

DatasetSplit split_dataset(const DatasetIndex& index, std::uint64_t seed, double test_frac = 0.2,
                           double val_frac = 0.2);

}  // namespace cliporder
