#pragma once

// Ordering-pair construction within one recovery sequence.

#include <cstdint>
#include <cstdlib>
#include <vector>

namespace cliporder {

class Rng;

// Two clips of one video in presentation order. Ground truth for the
// ordering task is first_earlier(): whether the clip shown first has the
// lower clip_index (i.e. is earlier in recovery).
struct PairSample {
  std::int64_t first_index = 0;
  std::int64_t second_index = 0;

  bool first_earlier() const { return first_index < second_index; }
  std::int64_t delta() const { return std::abs(first_index - second_index); }
};

// Draws unordered pairs (i, j), i < j, with min_sep <= j - i <= max_sep from
// a sequence of m clips and emits each draw twice, once per presentation
// order, so the result is exactly balanced. max_pairs (if >= 0) caps the
// number of unordered draws; the admissible set is subsampled without
// replacement. No admissible pair yields an empty result.
std::vector<PairSample> make_pairs(std::int64_t m, std::int64_t min_sep, std::int64_t max_sep,
                                   Rng& rng, std::int64_t max_pairs = -1);

}  // namespace cliporder
