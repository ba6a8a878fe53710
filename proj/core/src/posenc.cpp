#include "cliporder/posenc.hpp"

#include <cmath>

#include "cliporder/errors.hpp"
#include "cliporder/rng.hpp"

namespace cliporder {

LiereGens make_liere_gens(std::int64_t head_dim, std::int64_t block, Rng& rng, double init_std,
                          bool requires_grad) {
  if (block < 2) throw ConfigError("rotation block size must be at least 2");
  if (head_dim % block != 0) {
    throw ConfigError("head dimension " + std::to_string(head_dim) +
                      " is not divisible by rotation block size " + std::to_string(block));
  }
  LiereGens gens;
  gens.b = block;
  gens.nb = head_dim / block;
  gens.ux = make_randn({gens.nb, block, block}, rng, 0.0, init_std, requires_grad);
  gens.uy = make_randn({gens.nb, block, block}, rng, 0.0, init_std, requires_grad);
  gens.ut = make_randn({gens.nb, block, block}, rng, 0.0, init_std, requires_grad);
  return gens;
}

Tensor skew(const Tensor& u) {
  if (u.rank() != 2 || u.extent(0) != u.extent(1)) {
    throw ContractError("skew needs a square matrix, got " + shape_str(u.shape()));
  }
  return sub(u, transpose(u));
}

namespace {

double norm1(const Tensor& a) {
  const std::int64_t n = a.extent(0);
  double best = 0.0;
  for (std::int64_t j = 0; j < n; ++j) {
    double col = 0.0;
    for (std::int64_t i = 0; i < n; ++i) col += std::abs(a.at(i * n + j));
    best = std::max(best, col);
  }
  return best;
}

void check_skew(const Tensor& a) {
  const std::int64_t n = a.extent(0);
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      if (std::abs(a.at(i * n + j) + a.at(j * n + i)) > 1e-9) {
        throw ContractError("expm_skew input is not skew-symmetric");
      }
    }
  }
}

}  // namespace

Tensor expm_skew(const Tensor& a, int num_terms) {
  if (a.rank() != 2 || a.extent(0) != a.extent(1)) {
    throw ContractError("expm_skew needs a square matrix, got " + shape_str(a.shape()));
  }
  if (num_terms < 4) throw ContractError("expm_skew needs at least 4 series terms");
  assert_finite(a, "expm_skew input");
  check_skew(a);

  int squarings = 0;
  double scaled = norm1(a);
  while (scaled > 0.5 && squarings < 60) {
    scaled *= 0.5;
    ++squarings;
  }
  const Tensor eye = Tensor::identity(a.extent(0));
  const Tensor x = scale(a, std::ldexp(1.0, -squarings));

  // Horner form of the truncated series: p <- I + (x/k) p, k = K..1.
  Tensor p = eye;
  for (int k = num_terms; k >= 1; --k) {
    p = add(eye, scale(matmul(x, p), 1.0 / static_cast<double>(k)));
  }
  for (int s = 0; s < squarings; ++s) p = matmul(p, p);
  return p;
}

RotationSet build_rotation_set(const LiereGens& gens, const std::vector<Coord3>& coords,
                               int num_terms) {
  if (coords.empty()) throw ContractError("build_rotation_set: no coordinates");
  const std::int64_t nb = gens.nb, b = gens.b;

  // Skew parts once per axis/block; shared across all coordinates.
  std::vector<Tensor> ax, ay, at;
  ax.reserve(static_cast<std::size_t>(nb));
  ay.reserve(static_cast<std::size_t>(nb));
  at.reserve(static_cast<std::size_t>(nb));
  for (std::int64_t j = 0; j < nb; ++j) {
    ax.push_back(skew(reshape(slice(gens.ux, 0, j, 1), {b, b})));
    ay.push_back(skew(reshape(slice(gens.uy, 0, j, 1), {b, b})));
    at.push_back(skew(reshape(slice(gens.ut, 0, j, 1), {b, b})));
  }

  std::vector<Tensor> rows;
  rows.reserve(coords.size() * static_cast<std::size_t>(nb));
  for (const auto& p : coords) {
    for (std::int64_t j = 0; j < nb; ++j) {
      const auto ju = static_cast<std::size_t>(j);
      Tensor gen = add(add(scale(ax[ju], p.x), scale(ay[ju], p.y)), scale(at[ju], p.t));
      rows.push_back(reshape(expm_skew(gen, num_terms), {1, b * b}));
    }
  }

  RotationSet rset;
  rset.blocks = concat(rows, 0);
  rset.n_rot = static_cast<std::int64_t>(coords.size());
  rset.nb = nb;
  rset.b = b;
  return rset;
}

Tensor rotation_for_position(const LiereGens& gens, const Coord3& p, int num_terms) {
  Tape::NoGrad off;
  const RotationSet rset = build_rotation_set(gens, {p}, num_terms);
  const std::int64_t nb = gens.nb, b = gens.b, d = nb * b;
  Tensor dense = Tensor::zeros({d, d});
  auto& out = dense.mutable_values();
  for (std::int64_t j = 0; j < nb; ++j) {
    const double* block = rset.blocks.data().data() + j * b * b;
    for (std::int64_t r = 0; r < b; ++r) {
      for (std::int64_t c = 0; c < b; ++c) {
        out[static_cast<std::size_t>((j * b + r) * d + j * b + c)] = block[r * b + c];
      }
    }
  }
  return dense;
}

Tensor rotate_tokens(const Tensor& x, const RotationSet& rset,
                     const std::vector<std::int64_t>& index) {
  if (!rset.active()) throw ContractError("rotate_tokens: empty rotation set");
  if (x.rank() != 2 || x.extent(1) != rset.nb * rset.b) {
    throw ShapeError("rotate_tokens: " + shape_str(x.shape()) + " does not match " +
                     std::to_string(rset.nb * rset.b) + " rotated dimensions");
  }
  const std::int64_t n = x.extent(0), nb = rset.nb, b = rset.b;
  if (static_cast<std::int64_t>(index.size()) != n) {
    throw ContractError("rotate_tokens: got " + std::to_string(index.size()) +
                        " rotation indices for " + std::to_string(n) + " rows");
  }
  for (auto idx : index) {
    if (idx < -1 || idx >= rset.n_rot) {
      throw ContractError("rotate_tokens: rotation index " + std::to_string(idx) +
                          " out of range");
    }
  }

  const bool rec = Tape::current() != nullptr && (x.requires_grad() || rset.blocks.requires_grad());
  const Tensor blocks = rset.blocks;
  std::vector<double> out(x.data().size());
  const double* xv = x.data().data();
  const double* rv = blocks.data().data();
  for (std::int64_t i = 0; i < n; ++i) {
    const std::int64_t idx = index[static_cast<std::size_t>(i)];
    if (idx < 0) {
      std::copy_n(xv + i * nb * b, nb * b, out.data() + i * nb * b);
      continue;
    }
    for (std::int64_t j = 0; j < nb; ++j) {
      const double* r = rv + (idx * nb + j) * b * b;
      const double* xi = xv + i * nb * b + j * b;
      double* yi = out.data() + i * nb * b + j * b;
      for (std::int64_t row = 0; row < b; ++row) {
        double s = 0.0;
        for (std::int64_t col = 0; col < b; ++col) s += r[row * b + col] * xi[col];
        yi[row] = s;
      }
    }
  }
  Tensor y(std::move(out), x.shape(), rec);
  if (rec) {
    Tape::current()->record([x, blocks, y, index, n, nb, b](Tape& t) {
      const auto* go = t.find_grad(y);
      if (!go) return;
      const double* gy = go->data();
      const double* xv = x.data().data();
      const double* rv = blocks.data().data();
      std::vector<double>* gx = x.requires_grad() ? &t.grad(x) : nullptr;
      std::vector<double>* gr = blocks.requires_grad() ? &t.grad(blocks) : nullptr;
      for (std::int64_t i = 0; i < n; ++i) {
        const std::int64_t idx = index[static_cast<std::size_t>(i)];
        if (idx < 0) {
          if (gx) {
            for (std::int64_t k = 0; k < nb * b; ++k) {
              (*gx)[static_cast<std::size_t>(i * nb * b + k)] +=
                  gy[static_cast<std::size_t>(i * nb * b + k)];
            }
          }
          continue;
        }
        for (std::int64_t j = 0; j < nb; ++j) {
          const double* r = rv + (idx * nb + j) * b * b;
          const double* gyi = gy + i * nb * b + j * b;
          const double* xi = xv + i * nb * b + j * b;
          if (gx) {
            double* gxi = gx->data() + i * nb * b + j * b;
            for (std::int64_t col = 0; col < b; ++col) {
              double s = 0.0;
              for (std::int64_t row = 0; row < b; ++row) s += r[row * b + col] * gyi[row];
              gxi[col] += s;
            }
          }
          if (gr) {
            double* gri = gr->data() + (idx * nb + j) * b * b;
            for (std::int64_t row = 0; row < b; ++row) {
              for (std::int64_t col = 0; col < b; ++col) {
                gri[row * b + col] += gyi[row] * xi[col];
              }
            }
          }
        }
      }
    });
  }
  return y;
}

}  // namespace cliporder
