#include "cliporder/clip.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "cliporder/errors.hpp"
#include "cliporder/rng.hpp"
#include "json.hpp"
#include "wire.hpp"

namespace cliporder {

void Clip::validate() const {
  if (t == 0 || h == 0 || w == 0 || c == 0) {
    throw ContractError("clip '" + video_id + "' has a zero extent");
  }
  if (pixels.size() != pixel_count()) {
    throw ContractError("clip '" + video_id + "' pixel buffer size " +
                        std::to_string(pixels.size()) + " does not match extents");
  }
  for (float v : pixels) {
    if (!(v >= 0.0f && v <= 1.0f)) {
      throw ContractError("clip '" + video_id + "' has pixel value outside [0,1]");
    }
  }
}

const char* weak_label_name(WeakLabel label) {
  switch (label) {
    case WeakLabel::kSob: return "sob";
    case WeakLabel::kNoSob: return "nosob";
    case WeakLabel::kExcluded: return "excluded";
  }
  throw ContractError("unknown weak label");
}

WeakLabel weak_label_from_name(const std::string& name) {
  if (name == "sob") return WeakLabel::kSob;
  if (name == "nosob") return WeakLabel::kNoSob;
  if (name == "excluded") return WeakLabel::kExcluded;
  throw FormatError("unknown weak label '" + name + "'");
}

WeakLabel weak_label(std::int64_t clip_index, std::int64_t m) {
  if (m < 3) {
    throw DataError("sequence of " + std::to_string(m) +
                    " clips is too short for thirds labeling (need at least 3)");
  }
  if (clip_index < 0 || clip_index >= m) {
    throw ContractError("clip index " + std::to_string(clip_index) + " outside sequence of " +
                        std::to_string(m));
  }
  const std::int64_t k = m / 3;
  if (clip_index < k) return WeakLabel::kSob;
  if (clip_index >= m - k) return WeakLabel::kNoSob;
  return WeakLabel::kExcluded;
}

void RecoverySequence::validate() const {
  for (std::size_t i = 0; i < clips.size(); ++i) {
    if (clips[i].clip_index != i) {
      throw ContractError("sequence '" + video_id + "' clip " + std::to_string(i) +
                          " carries index " + std::to_string(clips[i].clip_index));
    }
    if (clips[i].video_id != video_id) {
      throw ContractError("sequence '" + video_id + "' contains clip of '" + clips[i].video_id +
                          "'");
    }
  }
}

// ---- clip container ----

namespace {
constexpr char kClipMagic[4] = {'V', 'C', 'L', 'P'};
constexpr std::uint32_t kClipVersion = 1;
constexpr std::uint64_t kMaxPixels = 1ull << 32;
}  // namespace

void write_clip(const Clip& clip, const std::string& path) {
  clip.validate();
  if (clip.video_id.size() > 0xffff) {
    throw ContractError("video id too long for container: " + std::to_string(clip.video_id.size()));
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open clip for writing: " + path);
  os.write(kClipMagic, 4);
  wire::put_u32(os, kClipVersion);
  wire::put_u16(os, static_cast<std::uint16_t>(clip.video_id.size()));
  os.write(clip.video_id.data(), static_cast<std::streamsize>(clip.video_id.size()));
  wire::put_u32(os, clip.clip_index);
  wire::put_f64(os, clip.fps);
  wire::put_u32(os, clip.t);
  wire::put_u32(os, clip.h);
  wire::put_u32(os, clip.w);
  wire::put_u32(os, clip.c);
  for (float v : clip.pixels) wire::put_f32(os, v);
  if (!os) throw DataError("write failed for clip: " + path);
}

Clip read_clip(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open clip: " + path);
  char magic[4];
  is.read(magic, 4);
  if (is.gcount() != 4 || std::string(magic, 4) != std::string(kClipMagic, 4)) {
    throw FormatError("'" + path + "': bad magic, not a clip file");
  }
  const auto version = wire::get_u32(is, "version");
  if (version != kClipVersion) {
    throw FormatError("'" + path + "': unsupported clip version " + std::to_string(version));
  }
  Clip clip;
  const auto id_len = wire::get_u16(is, "video id length");
  clip.video_id = wire::get_string(is, id_len, "video id");
  clip.clip_index = wire::get_u32(is, "clip index");
  clip.fps = wire::get_f64(is, "fps");
  clip.t = wire::get_u32(is, "frame count");
  clip.h = wire::get_u32(is, "height");
  clip.w = wire::get_u32(is, "width");
  clip.c = wire::get_u32(is, "channel count");
  if (clip.t == 0 || clip.h == 0 || clip.w == 0 || clip.c == 0) {
    throw FormatError("'" + path + "': zero extent in header");
  }
  const std::uint64_t n = static_cast<std::uint64_t>(clip.t) * clip.h * clip.w * clip.c;
  if (n > kMaxPixels) throw FormatError("'" + path + "': extent overflow in header");
  clip.pixels.resize(n);
  for (auto& v : clip.pixels) v = wire::get_f32(is, "pixels");
  return clip;
}

// ---- segmentation ----

RecoverySequence segment_video(const std::vector<float>& frames, std::int64_t n, std::int64_t h,
                               std::int64_t w, std::int64_t c, double fps, double clip_seconds,
                               std::int64_t clip_frames, const std::string& video_id) {
  if (n <= 0 || h <= 0 || w <= 0 || c <= 0) throw ContractError("segment_video: empty frame stack");
  if (frames.size() != static_cast<std::size_t>(n * h * w * c)) {
    throw ContractError("segment_video: frame buffer does not match extents");
  }
  if (fps <= 0.0 || clip_seconds <= 0.0) throw ContractError("segment_video: fps and clip_seconds must be positive");
  const std::int64_t window = static_cast<std::int64_t>(std::floor(clip_seconds * fps + 0.5));
  if (window <= 0) throw ContractError("segment_video: window shorter than one frame");
  if (clip_frames <= 0 || clip_frames > window) {
    throw ContractError("segment_video: clip_frames " + std::to_string(clip_frames) +
                        " exceeds the " + std::to_string(window) + "-frame window");
  }
  if (n < window) {
    throw DataError("video '" + video_id + "' is shorter than one clip (" + std::to_string(n) +
                    " < " + std::to_string(window) + " frames)");
  }
  const std::int64_t m = n / window;
  const std::size_t frame_px = static_cast<std::size_t>(h) * w * c;

  RecoverySequence seq;
  seq.video_id = video_id;
  seq.clips.reserve(static_cast<std::size_t>(m));
  for (std::int64_t i = 0; i < m; ++i) {
    Clip clip;
    clip.video_id = video_id;
    clip.clip_index = static_cast<std::uint32_t>(i);
    clip.fps = static_cast<double>(clip_frames) / clip_seconds;
    clip.t = static_cast<std::uint32_t>(clip_frames);
    clip.h = static_cast<std::uint32_t>(h);
    clip.w = static_cast<std::uint32_t>(w);
    clip.c = static_cast<std::uint32_t>(c);
    clip.pixels.reserve(static_cast<std::size_t>(clip_frames) * frame_px);
    for (std::int64_t k = 0; k < clip_frames; ++k) {
      const std::int64_t src = i * window + (k * window) / clip_frames;
      const float* p = frames.data() + static_cast<std::size_t>(src) * frame_px;
      clip.pixels.insert(clip.pixels.end(), p, p + frame_px);
    }
    seq.clips.push_back(std::move(clip));
  }
  return seq;
}

// ---- manifests ----

const SequenceRef* DatasetIndex::find(const std::string& video_id) const {
  for (const auto& s : sequences) {
    if (s.video_id == video_id) return &s;
  }
  return nullptr;
}

void save_manifest(const DatasetIndex& index) {
  nlohmann::json doc;
  doc["version"] = 1;
  doc["fps"] = index.fps;
  doc["clip_seconds"] = index.clip_seconds;
  auto& seqs = doc["sequences"] = nlohmann::json::array();
  for (const auto& s : index.sequences) {
    nlohmann::json js;
    js["video_id"] = s.video_id;
    js["participant"] = s.participant.empty() ? s.video_id : s.participant;
    auto& clips = js["clips"] = nlohmann::json::array();
    for (const auto& c : s.clips) {
      clips.push_back({{"path", c.path},
                       {"clip_index", c.clip_index},
                       {"label", weak_label_name(c.label)}});
    }
    seqs.push_back(std::move(js));
  }
  const std::string path = index.root + "/manifest.json";
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot open manifest for writing: " + path);
  os << doc.dump(2) << "\n";
  if (!os) throw DataError("write failed for manifest: " + path);
}

DatasetIndex load_manifest(const std::string& dir) {
  const std::string path = dir + "/manifest.json";
  std::ifstream is(path);
  if (!is) throw DataError("missing dataset manifest: " + path);
  nlohmann::json doc;
  try {
    is >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("'" + path + "': " + e.what());
  }
  DatasetIndex index;
  index.root = dir;
  try {
    if (doc.at("version").get<int>() != 1) {
      throw FormatError("'" + path + "': unsupported manifest version");
    }
    index.fps = doc.at("fps").get<double>();
    index.clip_seconds = doc.at("clip_seconds").get<double>();
    for (const auto& js : doc.at("sequences")) {
      SequenceRef s;
      s.video_id = js.at("video_id").get<std::string>();
      s.participant = js.value("participant", s.video_id);
      for (const auto& jc : js.at("clips")) {
        ClipRef c;
        c.path = jc.at("path").get<std::string>();
        c.clip_index = jc.at("clip_index").get<std::uint32_t>();
        c.label = weak_label_from_name(jc.at("label").get<std::string>());
        s.clips.push_back(std::move(c));
      }
      index.sequences.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("'" + path + "': " + e.what());
  }
  return index;
}

Clip load_clip(const DatasetIndex& index, const ClipRef& ref) {
  Clip clip = read_clip(index.root + "/" + ref.path);
  if (clip.clip_index != ref.clip_index) {
    throw FormatError("clip file '" + ref.path + "' carries index " +
                      std::to_string(clip.clip_index) + " but the manifest says " +
                      std::to_string(ref.clip_index));
  }
  return clip;
}

DatasetSplit split_dataset(const DatasetIndex& index, std::uint64_t seed, double test_frac,
                           double val_frac) {
  if (test_frac < 0.0 || val_frac < 0.0 || test_frac >= 1.0 || val_frac >= 1.0) {
    throw ConfigError("split fractions must lie in [0,1)");
  }
  // Group videos under their participant so no participant straddles splits.
  std::map<std::string, std::vector<std::string>> by_participant;
  for (const auto& s : index.sequences) {
    const std::string& p = s.participant.empty() ? s.video_id : s.participant;
    by_participant[p].push_back(s.video_id);
  }
  std::vector<std::string> participants;
  participants.reserve(by_participant.size());
  for (const auto& [p, _] : by_participant) participants.push_back(p);

  Rng rng(child_seed(seed, "split"));
  rng.shuffle(participants);

  const auto n = static_cast<std::int64_t>(participants.size());
  const auto n_test = static_cast<std::int64_t>(std::llround(static_cast<double>(n) * test_frac));
  const auto n_val =
      static_cast<std::int64_t>(std::llround(static_cast<double>(n - n_test) * val_frac));

  DatasetSplit split;
  for (std::int64_t i = 0; i < n; ++i) {
    auto& bucket = i < n_test          ? split.test
                   : i < n_test + n_val ? split.val
                                        : split.train;
    for (const auto& vid : by_participant[participants[static_cast<std::size_t>(i)]]) {
      bucket.push_back(vid);
    }
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.val.begin(), split.val.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

}  // namespace cliporder
