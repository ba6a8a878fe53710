#pragma once

// Positional information for attention tokens: learned rotations of query
// and key vectors built from matrix exponentials of skew-symmetric
// generators, one generator per coordinate axis (x, y, t). The learned
// absolute-position-table alternative lives in the encoder, which simply
// adds gathered table rows to tokens.

#include <cstdint>
#include <vector>

#include "cliporder/tensor.hpp"

namespace cliporder {

class Rng;

// Normalized token coordinates in [0,1]; axes a stage does not use sit at
// a fixed 0.5.
struct Coord3 {
  double x = 0.5, y = 0.5, t = 0.5;
};

// Learnable per-axis generator parameters. Each tensor holds nb blocks of
// raw b x b entries covering the head dimension; the math only ever uses
// their skew-symmetric part U - U^T, so rotations stay orthogonal no matter
// where the optimizer drives the raw entries.
struct LiereGens {
  Tensor ux, uy, ut;  // each [nb, b, b]
  std::int64_t nb = 0, b = 0;
};

LiereGens make_liere_gens(std::int64_t head_dim, std::int64_t block, Rng& rng,
                          double init_std = 0.2, bool requires_grad = true);

// u - u^T per square matrix; exactly skew-symmetric.
Tensor skew(const Tensor& u);

// Matrix exponential of a skew-symmetric block by scaling and squaring:
// halve until the 1-norm is at most 0.5, run a num_terms Taylor series in
// Horner form, then square back up. Orthogonal to well below 1e-8 and
// differentiable end to end (every step is a recorded tensor op).
Tensor expm_skew(const Tensor& a, int num_terms = 12);

// Every block rotation for a set of token coordinates, packed row-wise as
// [n_rot * nb, b * b] so a single tensor owns all blocks. Built on the
// current tape: gradients flow back into the generators. Rotations depend
// only on parameters and coordinates, so one set per training step serves
// every clip in the batch.
struct RotationSet {
  Tensor blocks;
  std::int64_t n_rot = 0, nb = 0, b = 0;

  bool active() const { return blocks.defined(); }
};

RotationSet build_rotation_set(const LiereGens& gens, const std::vector<Coord3>& coords,
                               int num_terms = 12);

// Dense block-diagonal R(p) for one coordinate; diagnostic/test path, not
// recorded on the tape.
Tensor rotation_for_position(const LiereGens& gens, const Coord3& p, int num_terms = 12);

// Applies the per-row rotation in one fused autograd node: row i of x
// (laid out as nb blocks of b) is multiplied block-wise by rotation
// index[i]; index -1 bypasses the row unchanged (the CLS token).
Tensor rotate_tokens(const Tensor& x, const RotationSet& rset,
                     const std::vector<std::int64_t>& index);

}  // namespace cliporder
