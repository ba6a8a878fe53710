#pragma once

// The three clip-comparison mechanisms. The embedding head scores clips by
// cosine distance to two learned class prototypes; the two-tower heads run
// both clips through weight-shared encoders that exchange information via
// cross-attention (at every block, or only between the final CLS vectors)
// and emit a logit for "first clip is earlier". The readout is
// antisymmetrized — logit = w . (u_a - u_b) — so swapping the inputs negates
// the logit by construction.

#include <string>

#include "cliporder/clip.hpp"
#include "cliporder/encoder.hpp"
#include "cliporder/tensor.hpp"

namespace cliporder {

enum class Method { kEmbedding, kTtFull, kTtCls };

const char* method_name(Method method);
Method method_from_name(const std::string& name);

// cos_sim(u, v) = u.v / (|u||v|); throws NumericError on a zero vector.
Tensor cosine_similarity(const Tensor& u, const Tensor& v);

// 1 - cos_sim, in [0, 2], scale invariant.
Tensor cosine_distance(const Tensor& u, const Tensor& v);

// Pull toward the labeled prototype plus a hinge that repels the prototypes
// from each other once their cosine similarity turns positive. repulsion 0
// recovers the plain pull-only objective.
Tensor prototype_loss(const Tensor& embedding, WeakLabel label, const Tensor& c_sob,
                      const Tensor& c_nosob, double repulsion = 0.1);

// Higher score = more short-of-breath = earlier in recovery.
Tensor sob_score(const Tensor& embedding, const Tensor& c_sob, const Tensor& c_nosob);

struct PairPrediction {
  bool first_earlier = true;  // ties predict the first-presented clip
  double margin = 0.0;
  Method method = Method::kEmbedding;
};

PairPrediction order_pair_embedding(const Tensor& emb_a, const Tensor& emb_b,
                                    const Tensor& c_sob, const Tensor& c_nosob);
PairPrediction order_pair_logit(double logit, Method method);

// Head parameters to merge into the encoder's ParamMap: unit prototypes for
// the embedding head; cross-attention stacks plus a zero readout vector for
// the two-tower heads (zero readout makes the initial logit exactly 0).
ParamMap init_head_params(const EncoderConfig& cfg, Method method, Rng& rng);

// Raw logit for "a is earlier"; method selects the cross-attention pattern.
// ctx.params must hold encoder and head parameters together.
Tensor two_tower_logit(const Clip& a, const Clip& b, Method method, const ModelContext& ctx);

}  // namespace cliporder
