#include <cmath>

#include "cliporder/errors.hpp"
#include "cliporder/posenc.hpp"
#include "cliporder/rng.hpp"
#include "cliporder/tensor.hpp"
#include "doctest.h"

using namespace cliporder;

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  }
  return m;
}

double orthogonality_defect(const Tensor& r) {
  const Tensor gram = matmul(transpose(r), r);
  return max_abs_diff(gram, Tensor::identity(r.extent(0)));
}

}  // namespace

TEST_CASE("skew produces exactly skew-symmetric matrices") {
  CHECK(skew(Tensor::zeros({3, 3})).data() == std::vector<double>(9, 0.0));

  const Tensor u({0, 1, 0, 0}, {2, 2});
  CHECK(skew(u).data() == std::vector<double>{0, 1, -1, 0});

  Rng rng(3);
  const Tensor a = skew(make_randn({8, 8}, rng));
  for (int i = 0; i < 8; ++i) {
    for (int j = 0; j < 8; ++j) {
      CHECK(a.at(i * 8 + j) + a.at(j * 8 + i) == 0.0);
    }
  }
  CHECK_THROWS_AS((void)skew(Tensor::zeros({2, 3})), ContractError);
}

TEST_CASE("expm_skew matches closed forms") {
  // exp(0) = I bit-exactly.
  CHECK(expm_skew(Tensor::zeros({4, 4})).data() == Tensor::identity(4).data());

  // Planar rotation: exp([[0, t], [-t, 0]]) = [[cos t, sin t], [-sin t, cos t]].
  const double theta = 3.14159265358979323846 / 2.0;
  const Tensor r = expm_skew(Tensor({0, theta, -theta, 0}, {2, 2}));
  CHECK(std::abs(r.at(0) - 0.0) < 1e-10);
  CHECK(std::abs(r.at(1) - 1.0) < 1e-10);
  CHECK(std::abs(r.at(2) + 1.0) < 1e-10);
  CHECK(std::abs(r.at(3) - 0.0) < 1e-10);

  // Large-angle block exercises the squaring path.
  const double big = 11.0;
  const Tensor rb = expm_skew(Tensor({0, big, -big, 0}, {2, 2}));
  CHECK(std::abs(rb.at(0) - std::cos(big)) < 1e-10);
  CHECK(std::abs(rb.at(1) - std::sin(big)) < 1e-10);

  // Random skew blocks exponentiate to orthogonal matrices.
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor a = skew(make_randn({8, 8}, rng, 0.0, 0.5));
    CHECK(orthogonality_defect(expm_skew(a)) < 1e-8);
  }

  CHECK_THROWS_AS((void)expm_skew(make_randn({3, 3}, rng)), ContractError);  // not skew
}

TEST_CASE("expm_skew is differentiable through the series") {
  for (std::uint64_t seed : {21, 22, 23}) {
    Rng rng(seed);
    const Tensor w = make_randn({8, 8}, rng);
    const Tensor u = make_randn({8, 8}, rng, 0.0, 0.4);
    auto f = [&](const Tensor& raw) { return sum(mul(expm_skew(skew(raw)), w)); };
    CHECK(grad_check(f, u) < 1e-4);
  }
}

TEST_CASE("rotations are orthogonal and reduce to identity at the origin") {
  Rng rng(7);
  const LiereGens gens = make_liere_gens(16, 8, rng);

  CHECK(max_abs_diff(rotation_for_position(gens, {0.0, 0.0, 0.0}), Tensor::identity(16)) < 1e-12);

  for (int draw = 0; draw < 1000; ++draw) {
    Rng draw_rng(child_seed(99, "draw", "", static_cast<std::uint64_t>(draw)));
    const LiereGens g = make_liere_gens(16, 8, draw_rng);
    const Coord3 p{draw_rng.uniform(), draw_rng.uniform(), draw_rng.uniform()};
    CHECK(orthogonality_defect(rotation_for_position(g, p)) < 1e-8);
  }
}

TEST_CASE("single-axis rotations compose relatively") {
  Rng rng(31);
  LiereGens gens = make_liere_gens(16, 8, rng);
  gens.ux = Tensor::zeros({2, 8, 8});
  gens.uy = Tensor::zeros({2, 8, 8});

  const Coord3 p{0.5, 0.5, 0.31};
  const Coord3 q{0.5, 0.5, 0.74};
  const Tensor rp = rotation_for_position(gens, p);
  const Tensor rq = rotation_for_position(gens, q);
  const Tensor rel = rotation_for_position(gens, {0.5 - 0.5, 0.5 - 0.5, q.t - p.t});
  CHECK(max_abs_diff(matmul(transpose(rp), rq), rel) < 1e-8);
}

TEST_CASE("attention logits are shift-invariant along a single axis") {
  Rng rng(41);
  LiereGens gens = make_liere_gens(16, 8, rng);
  gens.ux = Tensor::zeros({2, 8, 8});
  gens.uy = Tensor::zeros({2, 8, 8});

  const Tensor q = make_randn({1, 16}, rng);
  const Tensor k = make_randn({1, 16}, rng);

  auto logit = [&](double t1, double t2) {
    const RotationSet rset = build_rotation_set(gens, {{0.5, 0.5, t1}, {0.5, 0.5, t2}});
    const Tensor qr = rotate_tokens(q, rset, {0});
    const Tensor kr = rotate_tokens(k, rset, {1});
    return dot(qr, kr).value();
  };

  const double base = logit(0.20, 0.55);
  for (double delta : {0.1, 0.25, 0.4}) {
    CHECK(std::abs(logit(0.20 + delta, 0.55 + delta) - base) < 1e-6);
  }
}

TEST_CASE("rotate_tokens preserves norms and bypasses the CLS row") {
  Rng rng(55);
  const LiereGens gens = make_liere_gens(16, 8, rng);
  const std::vector<Coord3> coords{{0.1, 0.9, 0.3}, {0.7, 0.2, 0.8}, {0.5, 0.5, 0.5}};
  const RotationSet rset = build_rotation_set(gens, coords);

  const Tensor x = make_randn({4, 16}, rng);
  const Tensor y = rotate_tokens(x, rset, {-1, 0, 1, 2});

  // Row 0 is the bypass: bit-identical.
  for (int j = 0; j < 16; ++j) CHECK(y.at(j) == x.at(j));

  for (int i = 0; i < 4; ++i) {
    double nx = 0.0, ny = 0.0;
    for (int j = 0; j < 16; ++j) {
      nx += x.at(i * 16 + j) * x.at(i * 16 + j);
      ny += y.at(i * 16 + j) * y.at(i * 16 + j);
    }
    CHECK(std::abs(std::sqrt(nx) - std::sqrt(ny)) < 1e-8);
  }

  // Zero generators rotate by exact identity.
  Rng zrng(1);
  LiereGens zero = make_liere_gens(16, 8, zrng);
  zero.ux = Tensor::zeros({2, 8, 8});
  zero.uy = Tensor::zeros({2, 8, 8});
  zero.ut = Tensor::zeros({2, 8, 8});
  const RotationSet zset = build_rotation_set(zero, coords);
  const Tensor yz = rotate_tokens(x, zset, {0, 1, 2, 0});
  CHECK(yz.data() == x.data());

  CHECK_THROWS_AS((void)rotate_tokens(x, rset, {0, 1}), ContractError);
  CHECK_THROWS_AS((void)rotate_tokens(x, rset, {0, 1, 2, 5}), ContractError);
}

TEST_CASE("gradients flow through rotations into tokens and generators") {
  for (std::uint64_t seed : {61, 62, 63}) {
    Rng rng(seed);
    const Tensor w = make_randn({3, 16}, rng);
    const Tensor x = make_randn({3, 16}, rng);
    const std::vector<Coord3> coords{{0.2, 0.4, 0.6}, {0.9, 0.1, 0.5}};
    const std::vector<std::int64_t> index{0, 1, -1};
    const LiereGens gens = make_liere_gens(16, 8, rng);

    auto through_tokens = [&](const Tensor& t) {
      const RotationSet rset = build_rotation_set(gens, coords);
      return dot(rotate_tokens(t, rset, index), w);
    };
    CHECK(grad_check(through_tokens, x) < 1e-4);

    auto through_gens = [&](const Tensor& raw) {
      LiereGens g = gens;
      g.ut = raw;
      const RotationSet rset = build_rotation_set(g, coords);
      return dot(rotate_tokens(x, rset, index), w);
    };
    CHECK(grad_check(through_gens, gens.ut) < 1e-4);
  }
}
