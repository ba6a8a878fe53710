#include "cliporder/pairs.hpp"

#include "cliporder/errors.hpp"
#include "cliporder/rng.hpp"

namespace cliporder {

std::vector<PairSample> make_pairs(std::int64_t m, std::int64_t min_sep, std::int64_t max_sep,
                                   Rng& rng, std::int64_t max_pairs) {
  if (m < 1) throw ContractError("make_pairs: empty sequence");
  if (min_sep < 1 || max_sep < min_sep) {
    throw ContractError("make_pairs: need 1 <= min_sep <= max_sep, got " +
                        std::to_string(min_sep) + ".." + std::to_string(max_sep));
  }
  std::vector<std::pair<std::int64_t, std::int64_t>> unordered;
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = i + min_sep; j < m && j - i <= max_sep; ++j) {
      unordered.emplace_back(i, j);
    }
  }
  if (max_pairs >= 0 && static_cast<std::int64_t>(unordered.size()) > max_pairs) {
    rng.shuffle(unordered);
    unordered.resize(static_cast<std::size_t>(max_pairs));
  }
  std::vector<PairSample> out;
  out.reserve(unordered.size() * 2);
  for (const auto& [i, j] : unordered) {
    // Both presentation orders of every draw; the coin only decides which
    // twin comes first so neither order is systematically ahead.
    if (rng.coin()) {
      out.push_back({i, j});
      out.push_back({j, i});
    } else {
      out.push_back({j, i});
      out.push_back({i, j});
    }
  }
  return out;
}

}  // namespace cliporder
