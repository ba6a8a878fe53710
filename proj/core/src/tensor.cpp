#include "cliporder/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <thread>

#include "cliporder/errors.hpp"
#include "cliporder/rng.hpp"

namespace cliporder {

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto e : s) {
    if (e <= 0) throw ContractError("tensor extent must be positive, got " + shape_str(s));
    n *= e;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ']';
  return os.str();
}

// ---- Tensor ----

Tensor::Tensor(std::vector<double> values, Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  if (static_cast<std::int64_t>(values.size()) != n) {
    throw ShapeError("tensor data length " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(shape));
  }
  node_ = std::make_shared<detail::TensorNode>();
  node_->shape = std::move(shape);
  node_->values = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(std::vector<double>(static_cast<std::size_t>(n), 0.0), std::move(shape),
                requires_grad);
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(std::vector<double>(static_cast<std::size_t>(n), v), std::move(shape),
                requires_grad);
}

Tensor Tensor::scalar(double v) { return Tensor({v}, {1}); }

Tensor Tensor::identity(std::int64_t n) {
  Tensor t = zeros({n, n});
  auto& v = t.mutable_values();
  for (std::int64_t i = 0; i < n; ++i) v[static_cast<std::size_t>(i * n + i)] = 1.0;
  return t;
}

double Tensor::value() const {
  if (size() != 1) throw ContractError("value() requires a scalar tensor, got " + shape_str(shape()));
  return node_->values[0];
}

Tensor Tensor::clone(bool requires_grad) const {
  return Tensor(node_->values, node_->shape, requires_grad);
}

bool Tensor::all_finite() const {
  for (double v : node_->values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void assert_finite(const Tensor& t, const std::string& context) {
  if (!t.all_finite()) throw NumericError("non-finite values in " + context);
}

// ---- Tape ----

namespace {
thread_local Tape* g_tape = nullptr;
}

Tape* Tape::current() { return g_tape; }

Tape::Scope::Scope(Tape& tape) : prev_(g_tape) { g_tape = &tape; }
Tape::Scope::~Scope() { g_tape = prev_; }

Tape::NoGrad::NoGrad() : prev_(g_tape) { g_tape = nullptr; }
Tape::NoGrad::~NoGrad() { g_tape = prev_; }

void Tape::record(std::function<void(Tape&)> backward_rule) {
  records_.push_back(std::move(backward_rule));
}

std::vector<double>& Tape::grad(const Tensor& t) {
  auto [it, inserted] = grads_.try_emplace(t.node());
  if (inserted) it->second.assign(static_cast<std::size_t>(t.size()), 0.0);
  return it->second;
}

const std::vector<double>* Tape::find_grad(const Tensor& t) const {
  auto it = grads_.find(t.node());
  return it == grads_.end() ? nullptr : &it->second;
}

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw ContractError("backward() requires a scalar loss, got " + shape_str(loss.shape()));
  }
  grad(loss)[0] += 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)(*this);
}

// ---- threading ----

namespace {
int g_threads = 1;

// Contiguous row partition: each index is handled by exactly one thread with
// a fixed iteration order, so results do not depend on the thread count.
template <typename Fn>
void parallel_for(std::int64_t n, std::int64_t grain, Fn&& fn) {
  if (g_threads <= 1 || n < grain * 2) {
    fn(0, n);
    return;
  }
  const int workers = static_cast<int>(std::min<std::int64_t>(g_threads, (n + grain - 1) / grain));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  const std::int64_t chunk = (n + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    const std::int64_t lo = w * chunk;
    const std::int64_t hi = std::min<std::int64_t>(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
  }
  for (auto& t : pool) t.join();
}

bool should_record(const Tensor& a) { return g_tape != nullptr && a.requires_grad(); }
bool should_record(const Tensor& a, const Tensor& b) {
  return g_tape != nullptr && (a.requires_grad() || b.requires_grad());
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

std::int64_t outer_extent(const Shape& s, std::size_t axis) {
  std::int64_t n = 1;
  for (std::size_t i = 0; i < axis; ++i) n *= s[i];
  return n;
}

std::int64_t inner_extent(const Shape& s, std::size_t axis) {
  std::int64_t n = 1;
  for (std::size_t i = axis + 1; i < s.size(); ++i) n *= s[i];
  return n;
}
}  // namespace

void set_num_threads(int n) { g_threads = std::max(1, n); }
int num_threads() { return g_threads; }

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const bool rec = should_record(a, b);
  const std::size_t n = a.data().size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] + b.data()[i];
  Tensor y(std::move(out), a.shape(), rec);
  if (rec) {
    g_tape->record([a, b, y](Tape& t) {
      const auto* go = t.find_grad(y);
      if (!go) return;
      if (a.requires_grad()) {
        auto& ga = t.grad(a);
        for (std::size_t i = 0; i < go->size(); ++i) ga[i] += (*go)[i];
      }
      if (b.requires_grad()) {
        auto& gb = t.grad(b);
        for (std::size_t i = 0; i < go->size(); ++i) gb[i] += (*go)[i];
      }
    });
  }
  return y;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const bool rec = should_record(a, b);
  const std::size_t n = a.data().size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] - b.data()[i];
  Tensor y(std::move(out), a.shape(), rec);
  if (rec) {
    g_tape->record([a, b, y](Tape& t) {
      const auto* go = t.find_grad(y);
      if (!go) return;
      if (a.requires_grad()) {
        auto& ga = t.grad(a);
        for (std::size_t i = 0; i < go->size(); ++i) ga[i] += (*go)[i];
      }
      if (b.requires_grad()) {
        auto& gb = t.grad(b);
        for (std::size_t i = 0; i < go->size(); ++i) gb[i] -= (*go)[i];
      }
    });
  }
  return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const bool rec = should_record(a, b);
  const std::size_t n = a.data().size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] * b.data()[i];
  Tensor y(std::move(out), a.shape(), rec);
  if (rec) {
    g_tape->record([a, b, y](Tape& t) {
      const auto* go = t.find_grad(y);
      if (!go) return;
      if (a.requires_grad()) {
        auto& ga = t.grad(a);
        for (std::size_t i = 0; i < go->size(); ++i) ga[i] += (*go)[i] * b.data()[i];
      }
      if (b.requires_grad()) {
        auto& gb = t.grad(b);
        for (std::size_t i = 0; i < go->size(); ++i) gb[i] += (*go)[i] * a.data()[i];
      }
    });
  }
  return y;
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "div");
  const bool rec = should_record(a, b);
  const std::size_t n = a.data().size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] / b.data()[i];
  Tensor y(std::move(out), a.shape(), rec);
  if (rec) {
    g_tape->record([a, b, y](Tape& t) {
      const auto* go = t.find_grad(y);
      if (!go) return;
      if (a.requires_grad()) {
        auto& ga = t.grad(a);
        for (std::size_t i = 0; i < go->size(); ++i) ga[i] += (*go)[i] / b.data()[i];
      }
      if (b.requires_grad()) {
        auto& gb = t.grad(b);
        for (std::size_t i = 0; i < go->size(); ++i) {
          gb[i] -= (*go)[i] * a.data()[i] / (b.data()[i] * b.data()[i]);
        }
      }
    });
  }
  return y;
}

Tensor scale(const Tensor& a, double c) {
  const bool rec = should_record(a);
  const std::size_t n = a.data().size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] * c;
  Tensor y(std::move(out), a.shape(), rec);
  if (rec) {
    g_tape->record([a, y, c](Tape& t) {
      const auto* go = t.find_grad(y);
      if (!go) return;
      auto& ga = t.grad(a);
      for (std::size_t i = 0; i < go->size(); ++i) ga[i] += (*go)[i] * c;
    });
  }
  return y;
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  if (a.rank() != 2) throw ShapeError("add_row: expected rank-2 input, got " + shape_str(a.shape()));
  const std::int64_t n = a.extent(0), d = a.extent(1);
  if (row.size() != d) {
    throw ShapeError("add_row: row length " + shape_str(row.shape()) + " does not match " +
                     shape_str(a.shape()));
  }
  const bool rec = should_record(a, row);
  std::vector<double> out(a.data().size());
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < d; ++j) {
      out[static_cast<std::size_t>(i * d + j)] =
          a.data()[static_cast<std::size_t>(i * d + j)] + row.data()[static_cast<std::size_t>(j)];
    }
  }
  Tensor y(std::move(out), a.shape(), rec);
  if (rec) {
    g_tape->record([a, row, y, n, d](Tape& t) {
      const auto* go = t.find_grad(y);
      if (!go) return;
      if (a.requires_grad()) {
        auto& ga = t.grad(a);
        for (std::size_t i = 0; i < go->size(); ++i) ga[i] += (*go)[i];
      }
      if (row.requires_grad()) {
        auto& gr = t.grad(row);
        for (std::int64_t i = 0; i < n; ++i) {
          for (std::int64_t j = 0; j < d; ++j) {
            gr[static_cast<std::size_t>(j)] += (*go)[static_cast<std::size_t>(i * d + j)];
          }
        }
      }
    });
  }
  return y;
}

// ---- matmul / transpose / reshape ----

namespace {
void matmul_kernel(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
                   std::int64_t n) {
  parallel_for(m, 32, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t i = lo; i < hi; ++i) {
      double* ci = c + i * n;
      const double* ai = a + i * k;
      for (std::int64_t l = 0; l < k; ++l) {
        const double av = ai[l];
        const double* bl = b + l * n;
        for (std::int64_t j = 0; j < n; ++j) ci[j] += av * bl[j];
      }
    }
  });
}
}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const std::int64_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  const bool rec = should_record(a, b);
  std::vector<double> out(static_cast<std::size_t>(m * n), 0.0);
  matmul_kernel(a.data().data(), b.data().data(), out.data(), m, k, n);
  Tensor y(std::move(out), {m, n}, rec);
  if (rec) {
    g_tape->record([a, b, y, m, k, n](Tape& t) {
      const auto* go = t.find_grad(y);
      if (!go) return;
      const double* gc = go->data();
      if (a.requires_grad()) {
        auto& ga = t.grad(a);
        double* gap = ga.data();
        const double* bp = b.data().data();
        // dA = dC . B^T
        parallel_for(m, 32, [&](std::int64_t lo, std::int64_t hi) {
          for (std::int64_t i = lo; i < hi; ++i) {
            for (std::int64_t l = 0; l < k; ++l) {
              const double* bl = bp + l * n;
              const double* gci = gc + i * n;
              double s = 0.0;
              for (std::int64_t j = 0; j < n; ++j) s += gci[j] * bl[j];
              gap[i * k + l] += s;
            }
          }
        });
      }
      if (b.requires_grad()) {
        auto& gb = t.grad(b);
        double* gbp = gb.data();
        const double* ap = a.data().data();
        // dB = A^T . dC, partitioned over rows of dB
        parallel_for(k, 32, [&](std::int64_t lo, std::int64_t hi) {
          for (std::int64_t l = lo; l < hi; ++l) {
            double* gbl = gbp + l * n;
            for (std::int64_t i = 0; i < m; ++i) {
              const double av = ap[i * k + l];
              const double* gci = gc + i * n;
              for (std::int64_t j = 0; j < n; ++j) gbl[j] += av * gci[j];
            }
          }
        });
      }
    });
  }
  return y;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: expected rank-2 input, got " + shape_str(a.shape()));
  const std::int64_t m = a.extent(0), n = a.extent(1);
  const bool rec = should_record(a);
  std::vector<double> out(a.data().size());
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      out[static_cast<std::size_t>(j * m + i)] = a.data()[static_cast<std::size_t>(i * n + j)];
    }
  }
  Tensor y(std::move(out), {n, m}, rec);
  if (rec) {
    g_tape->record([a, y, m, n](Tape& t) {
      const auto* go = t.find_grad(y);
      if (!go) return;
      auto& ga = t.grad(a);
      for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
          ga[static_cast<std::size_t>(i * n + j)] += (*go)[static_cast<std::size_t>(j * m + i)];
        }
      }
    });
  }
  return y;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  const bool rec = should_record(a);
  Tensor y(a.data(), std::move(shape), rec);
  if (rec) {
    g_tape->record([a, y](Tape& t) {
      const auto* go = t.find_grad(y);
      if (!go) return;
      auto& ga = t.grad(a);
      for (std::size_t i = 0; i < go->size(); ++i) ga[i] += (*go)[i];
    });
  }
  return y;
}

// ---- concat / slice ----

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const auto& first = parts.front().shape();
  if (axis >= first.size()) throw ContractError("concat: axis out of range");
  Shape out_shape = first;
  std::int64_t total_axis = 0;
  bool rec_any = false;
  for (const auto& p : parts) {
    if (p.rank() != first.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < first.size(); ++i) {
      if (i != axis && p.shape()[i] != first[i]) {
        throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(first));
      }
    }
    total_axis += p.shape()[axis];
    rec_any = rec_any || p.requires_grad();
  }
  out_shape[axis] = total_axis;
  const bool rec = g_tape != nullptr && rec_any;

  const std::int64_t outer = outer_extent(out_shape, axis);
  const std::int64_t inner = inner_extent(out_shape, axis);
  std::vector<double> out(static_cast<std::size_t>(shape_numel(out_shape)));
  const std::int64_t out_stride = total_axis * inner;
  std::int64_t axis_off = 0;
  for (const auto& p : parts) {
    const std::int64_t pa = p.shape()[axis];
    const std::int64_t chunk = pa * inner;
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy_n(p.data().data() + o * chunk, chunk,
                  out.data() + o * out_stride + axis_off * inner);
    }
    axis_off += pa;
  }
  Tensor y(std::move(out), out_shape, rec);
  if (rec) {
    auto parts_copy = parts;
    g_tape->record([parts_copy, y, axis, outer, inner, out_stride](Tape& t) {
      const auto* go = t.find_grad(y);
      if (!go) return;
      std::int64_t axis_off = 0;
      for (const auto& p : parts_copy) {
        const std::int64_t pa = p.shape()[axis];
        const std::int64_t chunk = pa * inner;
        if (p.requires_grad()) {
          auto& gp = t.grad(p);
          for (std::int64_t o = 0; o < outer; ++o) {
            const double* src = go->data() + o * out_stride + axis_off * inner;
            double* dst = gp.data() + o * chunk;
            for (std::int64_t i = 0; i < chunk; ++i) dst[i] += src[i];
          }
        }
        axis_off += pa;
      }
    });
  }
  return y;
}

Tensor slice(const Tensor& a, std::size_t axis, std::int64_t start, std::int64_t len) {
  if (axis >= a.rank()) throw ContractError("slice: axis out of range");
  if (start < 0 || len <= 0 || start + len > a.shape()[axis]) {
    throw ContractError("slice: range [" + std::to_string(start) + ", " +
                        std::to_string(start + len) + ") out of bounds for " + shape_str(a.shape()));
  }
  Shape out_shape = a.shape();
  out_shape[axis] = len;
  const bool rec = should_record(a);
  const std::int64_t outer = outer_extent(a.shape(), axis);
  const std::int64_t inner = inner_extent(a.shape(), axis);
  const std::int64_t in_stride = a.shape()[axis] * inner;
  const std::int64_t out_stride = len * inner;
  std::vector<double> out(static_cast<std::size_t>(outer * out_stride));
  for (std::int64_t o = 0; o < outer; ++o) {
    std::copy_n(a.data().data() + o * in_stride + start * inner, out_stride,
                out.data() + o * out_stride);
  }
  Tensor y(std::move(out), out_shape, rec);
  if (rec) {
    g_tape->record([a, y, outer, inner, in_stride, out_stride, start](Tape& t) {
      const auto* go = t.find_grad(y);
      if (!go) return;
      auto& ga = t.grad(a);
      for (std::int64_t o = 0; o < outer; ++o) {
        const double* src = go->data() + o * out_stride;
        double* dst = ga.data() + o * in_stride + start * inner;
        for (std::int64_t i = 0; i < out_stride; ++i) dst[i] += src[i];
      }
    });
  }
  return y;
}

// ---- reductions ----

Tensor sum(const Tensor& a) {
  const bool rec = should_record(a);
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor y({s}, {1}, rec);
  if (rec) {
    g_tape->record([a, y](Tape& t) {
      const auto* go = t.find_grad(y);
      if (!go) return;
      auto& ga = t.grad(a);
      for (auto& g : ga) g += (*go)[0];
    });
  }
  return y;
}

Tensor mean(const Tensor& a) {
  const bool rec = should_record(a);
  double s = 0.0;
  for (double v : a.data()) s += v;
  const double inv = 1.0 / static_cast<double>(a.size());
  Tensor y({s * inv}, {1}, rec);
  if (rec) {
    g_tape->record([a, y, inv](Tape& t) {
      const auto* go = t.find_grad(y);
      if (!go) return;
      auto& ga = t.grad(a);
      for (auto& g : ga) g += (*go)[0] * inv;
    });
  }
  return y;
}

Tensor dot(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "dot");
  const bool rec = should_record(a, b);
  double s = 0.0;
  for (std::size_t i = 0; i < a.data().size(); ++i) s += a.data()[i] * b.data()[i];
  Tensor y({s}, {1}, rec);
  if (rec) {
    g_tape->record([a, b, y](Tape& t) {
      const auto* go = t.find_grad(y);
      if (!go) return;
      const double g = (*go)[0];
      if (a.requires_grad()) {
        auto& ga = t.grad(a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * b.data()[i];
      }
      if (b.requires_grad()) {
        auto& gb = t.grad(b);
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g * a.data()[i];
      }
    });
  }
  return y;
}

// ---- nonlinearities ----

Tensor sqrt(const Tensor& a) {
  const bool rec = should_record(a);
  std::vector<double> out(a.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (a.data()[i] < 0.0) throw NumericError("sqrt of negative value");
    out[i] = std::sqrt(a.data()[i]);
  }
  Tensor y(std::move(out), a.shape(), rec);
  if (rec) {
    g_tape->record([a, y](Tape& t) {
      const auto* go = t.find_grad(y);
      if (!go) return;
      auto& ga = t.grad(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += (*go)[i] * 0.5 / y.data()[i];
    });
  }
  return y;
}

Tensor relu(const Tensor& a) {
  const bool rec = should_record(a);
  std::vector<double> out(a.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
  Tensor y(std::move(out), a.shape(), rec);
  if (rec) {
    g_tape->record([a, y](Tape& t) {
      const auto* go = t.find_grad(y);
      if (!go) return;
      auto& ga = t.grad(a);
      for (std::size_t i = 0; i < ga.size(); ++i) {
        if (a.data()[i] > 0.0) ga[i] += (*go)[i];
      }
    });
  }
  return y;
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Tensor gelu(const Tensor& a) {
  const bool rec = should_record(a);
  std::vector<double> out(a.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a.data()[i];
    out[i] = 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
  }
  Tensor y(std::move(out), a.shape(), rec);
  if (rec) {
    g_tape->record([a, y](Tape& t) {
      const auto* go = t.find_grad(y);
      if (!go) return;
      auto& ga = t.grad(a);
      for (std::size_t i = 0; i < ga.size(); ++i) {
        const double x = a.data()[i];
        const double th = std::tanh(kGeluC * (x + kGeluA * x * x * x));
        const double d = 0.5 * (1.0 + th) +
                         0.5 * x * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
        ga[i] += (*go)[i] * d;
      }
    });
  }
  return y;
}

Tensor softmax(const Tensor& a, std::size_t axis) {
  if (axis >= a.rank()) throw ContractError("softmax: axis out of range");
  const bool rec = should_record(a);
  const std::int64_t outer = outer_extent(a.shape(), axis);
  const std::int64_t len = a.shape()[axis];
  const std::int64_t inner = inner_extent(a.shape(), axis);
  std::vector<double> out(a.data().size());
  const double* src = a.data().data();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * len * inner + in;
      double mx = src[base];
      for (std::int64_t l = 1; l < len; ++l) mx = std::max(mx, src[base + l * inner]);
      double z = 0.0;
      for (std::int64_t l = 0; l < len; ++l) {
        const double e = std::exp(src[base + l * inner] - mx);
        out[static_cast<std::size_t>(base + l * inner)] = e;
        z += e;
      }
      const double invz = 1.0 / z;
      for (std::int64_t l = 0; l < len; ++l) out[static_cast<std::size_t>(base + l * inner)] *= invz;
    }
  }
  Tensor y(std::move(out), a.shape(), rec);
  if (rec) {
    g_tape->record([a, y, outer, len, inner](Tape& t) {
      const auto* go = t.find_grad(y);
      if (!go) return;
      auto& ga = t.grad(a);
      const double* yv = y.data().data();
      for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
          const std::int64_t base = o * len * inner + in;
          double acc = 0.0;
          for (std::int64_t l = 0; l < len; ++l) {
            const std::int64_t k = base + l * inner;
            acc += (*go)[static_cast<std::size_t>(k)] * yv[k];
          }
          for (std::int64_t l = 0; l < len; ++l) {
            const std::int64_t k = base + l * inner;
            ga[static_cast<std::size_t>(k)] += yv[k] * ((*go)[static_cast<std::size_t>(k)] - acc);
          }
        }
      }
    });
  }
  return y;
}

Tensor layernorm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps) {
  if (a.rank() == 0) throw ContractError("layernorm: scalar input");
  const std::int64_t d = a.shape().back();
  if (gain.size() != d || bias.size() != d) {
    throw ShapeError("layernorm: gain/bias length must match last extent " + std::to_string(d));
  }
  if (eps <= 0.0) throw ContractError("layernorm: eps must be positive");
  const bool rec = g_tape != nullptr &&
                   (a.requires_grad() || gain.requires_grad() || bias.requires_grad());
  const std::int64_t rows = a.size() / d;
  std::vector<double> out(a.data().size());
  const double* src = a.data().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* x = src + r * d;
    double mu = 0.0;
    for (std::int64_t j = 0; j < d; ++j) mu += x[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::int64_t j = 0; j < d; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::int64_t j = 0; j < d; ++j) {
      out[static_cast<std::size_t>(r * d + j)] =
          (x[j] - mu) * inv * gain.data()[static_cast<std::size_t>(j)] +
          bias.data()[static_cast<std::size_t>(j)];
    }
  }
  Tensor y(std::move(out), a.shape(), rec);
  if (rec) {
    g_tape->record([a, gain, bias, y, rows, d, eps](Tape& t) {
      const auto* go = t.find_grad(y);
      if (!go) return;
      const double* src = a.data().data();
      std::vector<double> xhat(static_cast<std::size_t>(d));
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* x = src + r * d;
        const double* gy = go->data() + r * d;
        double mu = 0.0;
        for (std::int64_t j = 0; j < d; ++j) mu += x[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::int64_t j = 0; j < d; ++j) var += (x[j] - mu) * (x[j] - mu);
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (std::int64_t j = 0; j < d; ++j) xhat[static_cast<std::size_t>(j)] = (x[j] - mu) * inv;
        if (gain.requires_grad()) {
          auto& gg = t.grad(gain);
          for (std::int64_t j = 0; j < d; ++j) gg[static_cast<std::size_t>(j)] += gy[j] * xhat[static_cast<std::size_t>(j)];
        }
        if (bias.requires_grad()) {
          auto& gb = t.grad(bias);
          for (std::int64_t j = 0; j < d; ++j) gb[static_cast<std::size_t>(j)] += gy[j];
        }
        if (a.requires_grad()) {
          auto& ga = t.grad(a);
          double m1 = 0.0, m2 = 0.0;  // mean(g*gy), mean(g*gy*xhat)
          for (std::int64_t j = 0; j < d; ++j) {
            const double gg = gy[j] * gain.data()[static_cast<std::size_t>(j)];
            m1 += gg;
            m2 += gg * xhat[static_cast<std::size_t>(j)];
          }
          m1 /= static_cast<double>(d);
          m2 /= static_cast<double>(d);
          for (std::int64_t j = 0; j < d; ++j) {
            const double gg = gy[j] * gain.data()[static_cast<std::size_t>(j)];
            ga[static_cast<std::size_t>(r * d + j)] +=
                (gg - m1 - xhat[static_cast<std::size_t>(j)] * m2) * inv;
          }
        }
      }
    });
  }
  return y;
}

Tensor gather_rows(const Tensor& table, const std::vector<std::int64_t>& indices) {
  if (table.rank() != 2) throw ShapeError("gather_rows: table must be rank-2");
  const std::int64_t rows = table.extent(0), d = table.extent(1);
  for (auto i : indices) {
    if (i < 0 || i >= rows) {
      throw ContractError("gather_rows: slot " + std::to_string(i) + " out of range [0, " +
                          std::to_string(rows) + ")");
    }
  }
  const bool rec = should_record(table);
  const std::int64_t n = static_cast<std::int64_t>(indices.size());
  std::vector<double> out(static_cast<std::size_t>(n * d));
  for (std::int64_t i = 0; i < n; ++i) {
    std::copy_n(table.data().data() + indices[static_cast<std::size_t>(i)] * d, d, out.data() + i * d);
  }
  Tensor y(std::move(out), {n, d}, rec);
  if (rec) {
    g_tape->record([table, y, indices, d](Tape& t) {
      const auto* go = t.find_grad(y);
      if (!go) return;
      auto& gt = t.grad(table);
      for (std::size_t i = 0; i < indices.size(); ++i) {
        const double* src = go->data() + static_cast<std::int64_t>(i) * d;
        double* dst = gt.data() + indices[i] * d;
        for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return y;
}

Tensor bce_with_logit(const Tensor& logit, double target) {
  if (logit.size() != 1) throw ContractError("bce_with_logit: logit must be scalar");
  if (target != 0.0 && target != 1.0) throw ContractError("bce_with_logit: target must be 0 or 1");
  const double z = logit.data()[0];
  const bool rec = should_record(logit);
  const double loss = std::max(z, 0.0) - z * target + std::log1p(std::exp(-std::abs(z)));
  Tensor y({loss}, {1}, rec);
  if (rec) {
    g_tape->record([logit, y, z, target](Tape& t) {
      const auto* go = t.find_grad(y);
      if (!go) return;
      const double sig = 1.0 / (1.0 + std::exp(-z));
      t.grad(logit)[0] += (*go)[0] * (sig - target);
    });
  }
  return y;
}

Tensor make_randn(Shape shape, Rng& rng, double mean, double std, bool requires_grad) {
  const auto n = shape_numel(shape);
  std::vector<double> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = rng.normal(mean, std);
  return Tensor(std::move(v), std::move(shape), requires_grad);
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double step) {
  if (step <= 0.0) throw ContractError("grad_check: step must be positive");
  Tensor leaf = x.clone(/*requires_grad=*/true);
  std::vector<double> analytic(static_cast<std::size_t>(leaf.size()), 0.0);
  {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor y = f(leaf);
    if (y.size() != 1) {
      throw ContractError("grad_check: f must be scalar-valued, got " + shape_str(y.shape()));
    }
    tape.backward(y);
    if (const auto* g = tape.find_grad(leaf)) analytic = *g;
  }
  Tape::NoGrad off;
  Tensor probe = x.clone(false);
  auto& v = probe.mutable_values();
  double max_err = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double orig = v[i];
    v[i] = orig + step;
    const double fp = f(probe).value();
    v[i] = orig - step;
    const double fm = f(probe).value();
    v[i] = orig;
    const double numeric = (fp - fm) / (2.0 * step);
    const double err =
        std::abs(analytic[i] - numeric) / std::max(1e-8, std::abs(analytic[i]) + std::abs(numeric));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace cliporder
