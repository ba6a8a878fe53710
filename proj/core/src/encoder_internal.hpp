#pragma once

// Building blocks shared by the encoder and the two-tower comparison heads:
// parameter lookup by name, multi-head attention, and the MLP sublayer.
// Everything here operates on [n, d] token matrices and records onto the
// current tape like any other op.

#include <cstdint>
#include <string>
#include <vector>

#include "cliporder/encoder.hpp"
#include "cliporder/posenc.hpp"
#include "cliporder/tensor.hpp"

namespace cliporder::enc {

// Lookup with a readable error instead of operator[] default-construction.
const Tensor& fetch(const ParamMap& params, const std::string& name);

struct AttnParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct LayerParams {
  Tensor ln1_g, ln1_b;
  AttnParams attn;
  Tensor ln2_g, ln2_b;
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

AttnParams attn_params(const ParamMap& params, const std::string& prefix);
LayerParams layer_params(const ParamMap& params, const std::string& prefix);

// Rotation context for one attention call; null set means no rotations.
struct RotCtx {
  const RotationSet* rot = nullptr;
  const std::vector<std::int64_t>* index = nullptr;
};

// Multi-head attention: queries from `qx` [nq, d], keys/values from `kx`
// [nk, d], both already normalized by the caller. Rotations (when active)
// are applied per head to queries and keys after projection.
Tensor mha(const Tensor& qx, const Tensor& kx, const AttnParams& p,
           std::int64_t heads, const RotCtx& qrot, const RotCtx& krot);

// Pre-norm residual sublayers.
Tensor self_attention_sublayer(const Tensor& tokens, const LayerParams& p,
                               std::int64_t heads, const RotCtx& rot);
Tensor mlp_sublayer(const Tensor& tokens, const LayerParams& p);

// x + XAttn(LN(x) -> LN(other)); `ln` is the cross-attention pre-norm,
// applied to both sides with the same parameters.
Tensor cross_attention_sublayer(const Tensor& tokens, const Tensor& other,
                                const Tensor& ln_g, const Tensor& ln_b,
                                const AttnParams& p, std::int64_t heads,
                                const RotCtx& qrot, const RotCtx& krot);

// Appends normal(0, std) weights / zero biases / unit gains to `params`.
void add_linear(ParamMap& params, const std::string& wname, const std::string& bname,
                std::int64_t in, std::int64_t out, Rng& rng, double std_dev);
void add_layernorm(ParamMap& params, const std::string& gname, const std::string& bname,
                   std::int64_t dim);
void add_attn(ParamMap& params, const std::string& prefix, std::int64_t dim,
              Rng& rng, double std_dev);
void add_layer(ParamMap& params, const std::string& prefix, std::int64_t dim,
               std::int64_t mlp_ratio, Rng& rng, double std_dev);

}  // namespace cliporder::enc
