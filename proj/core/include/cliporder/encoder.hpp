#pragma once

// Factorized clip encoder: patch tokenization, spatial self-attention per
// frame, temporal self-attention over per-frame summaries, one embedding
// per clip. Positional information is either a learned absolute table added
// to tokens or learned query/key rotations (see posenc.hpp), selected per
// config. Motion-guided masking is a preprocessing toggle inside the
// encoder so masked and unmasked inputs share one code path.

#include <cstdint>
#include <string>
#include <vector>

#include "cliporder/clip.hpp"
#include "cliporder/posenc.hpp"
#include "cliporder/serialize.hpp"
#include "cliporder/tensor.hpp"

namespace cliporder {

class Rng;

enum class PosencMode { kApe, kLiere };

const char* posenc_mode_name(PosencMode mode);
PosencMode posenc_mode_from_name(const std::string& name);

struct EncoderConfig {
  std::int64_t embed_dim = 64;
  std::int64_t heads = 4;
  std::int64_t spatial_layers = 2;
  std::int64_t temporal_layers = 2;
  std::int64_t patch = 8;
  std::int64_t frames = 8;
  std::int64_t res = 32;  // height = width
  std::int64_t channels = 1;
  std::int64_t mlp_ratio = 4;
  PosencMode posenc = PosencMode::kApe;
  bool mgm = false;
  double keep_ratio = 0.2;
  std::int64_t rot_block = 8;
  int flow_radius = 4;

  // "toy" (the default above) or "paper" (768-dim, 12 heads, 6+6 layers,
  // 16 px patches, 32 frames at 224x224).
  static EncoderConfig preset(const std::string& name);

  void validate() const;

  std::int64_t grid() const { return res / patch; }
  std::int64_t patches_per_frame() const { return grid() * grid(); }
  std::int64_t tokens_per_frame() const { return patches_per_frame() + 1; }
  std::int64_t head_dim() const { return embed_dim / heads; }
};

std::string encoder_config_to_json(const EncoderConfig& cfg);
EncoderConfig encoder_config_from_json(const std::string& text);

// Fresh encoder parameters: projections ~ N(0, 0.02), biases zero,
// layernorm gains one, rotation generators ~ N(0, 0.2). Consumes the rng in
// a fixed order, so equal seeds give equal parameters.
ParamMap init_encoder_params(const EncoderConfig& cfg, Rng& rng);

// Pre-built evaluation state for one forward pass or training step: the
// rotation sets depend only on parameters and the fixed position grid, so
// they are computed once and shared by every clip in a batch.
struct ModelContext {
  EncoderConfig cfg;
  const ParamMap* params = nullptr;
  RotationSet spatial_rot, temporal_rot;
  std::vector<std::vector<std::int64_t>> spatial_rot_index;  // per frame, CLS first
  std::vector<std::int64_t> temporal_rot_index;
};

ModelContext make_context(const EncoderConfig& cfg, const ParamMap& params);

// Per-frame token matrices [tokens_per_frame, d]: flattened patches behind
// a shared linear projection, spatial CLS prepended. Position information
// is NOT applied here.
std::vector<Tensor> patchify(const Clip& clip, const ModelContext& ctx);

// Full factorized encoder; returns the final temporal CLS state, length d.
Tensor encode_clip(const Clip& clip, const ModelContext& ctx);

// Convenience for one-off encodes; builds the context internally.
Tensor encode_clip(const Clip& clip, const EncoderConfig& cfg, const ParamMap& params);

}  // namespace cliporder
