#pragma once

// Central finite-difference sweep over every differentiable operation, from
// single tensor ops through rotation construction up to full toy-size clip
// encodes and all pair heads. Backing for the `gradcheck` subcommand; a
// healthy build passes every row.

#include <cstdint>
#include <string>
#include <vector>

namespace cliporder {

struct GradCheckRow {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 1e-4;
  bool pass = false;
};

// Runs the whole suite once; deterministic per seed.
std::vector<GradCheckRow> gradient_check_suite(std::uint64_t seed);

}  // namespace cliporder
