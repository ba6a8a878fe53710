#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

namespace cliporder {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {
struct TensorNode {
  Shape shape;
  std::vector<double> values;
  bool requires_grad = false;
};
}  // namespace detail

// Dense row-major f64 tensor. A Tensor is a cheap handle; the payload is
// immutable once built except through mutable_values() (optimizer steps,
// parameter init). Gradients live on the Tape, not on the tensor, so
// separate tapes can differentiate through shared parameters independently.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<double> values, Shape shape, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor scalar(double v);
  static Tensor identity(std::int64_t n);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t size() const { return static_cast<std::int64_t>(node_->values.size()); }
  std::int64_t extent(std::size_t axis) const { return node_->shape[axis]; }
  std::size_t rank() const { return node_->shape.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  const std::vector<double>& data() const { return node_->values; }
  /// In-place mutation; only for parameter init and optimizer updates.
  std::vector<double>& mutable_values() { return node_->values; }

  double value() const;  // scalar tensors only
  double at(std::int64_t flat) const { return node_->values[static_cast<std::size_t>(flat)]; }

  Tensor clone(bool requires_grad = false) const;
  bool all_finite() const;

  const detail::TensorNode* node() const { return node_.get(); }

 private:
  std::shared_ptr<detail::TensorNode> node_;
  friend class Tape;
};

// Records the backward rule of every differentiable operation in creation
// order (which is a topological order by construction) and owns all gradient
// buffers for one forward/backward pass.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// The tape ops record onto, or nullptr when gradients are off.
  static Tape* current();

  /// Activates a tape on this thread for the scope's lifetime.
  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;

   private:
    Tape* prev_;
  };

  /// Deactivates any tape (forward-only region inside a taped scope).
  class NoGrad {
   public:
    NoGrad();
    ~NoGrad();
    NoGrad(const NoGrad&) = delete;

   private:
    Tape* prev_;
  };

  void record(std::function<void(Tape&)> backward_rule);

  /// Gradient buffer of `t`, created zeroed on first use.
  std::vector<double>& grad(const Tensor& t);
  /// Gradient of `t` if it received one, else nullptr.
  const std::vector<double>* find_grad(const Tensor& t) const;

  /// Seeds d(loss)/d(loss) = 1 and replays every record once, newest first.
  /// `loss` must be scalar. Call once per tape: a second call replays the
  /// whole tape again and double-counts. Sum losses before calling instead.
  void backward(const Tensor& loss);

  std::size_t num_records() const { return records_.size(); }

 private:
  std::vector<std::function<void(Tape&)>> records_;
  std::unordered_map<const detail::TensorNode*, std::vector<double>> grads_;
};

/// Bounds intra-op row parallelism (1 = fully serial). Work is partitioned by
/// output row, so results are bit-identical for every thread count.
void set_num_threads(int n);
int num_threads();

// ---- operations (forward + recorded backward rule) ----

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
/// a: [n, d], row: [1, d] or [d]; adds row to every row of a.
Tensor add_row(const Tensor& a, const Tensor& row);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::int64_t start, std::int64_t len);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor dot(const Tensor& a, const Tensor& b);
Tensor sqrt(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);  // tanh approximation
Tensor softmax(const Tensor& a, std::size_t axis);
Tensor layernorm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
/// out[i, :] = table[indices[i], :]; gradient reaches only the looked-up rows.
Tensor gather_rows(const Tensor& table, const std::vector<std::int64_t>& indices);
/// Numerically stable binary cross-entropy on a scalar logit, target in {0,1}.
Tensor bce_with_logit(const Tensor& logit, double target);

class Rng;
/// Normal(mean, std) tensor drawn from `rng`; a leaf, never on the tape.
Tensor make_randn(Shape shape, Rng& rng, double mean = 0.0, double std = 1.0,
                  bool requires_grad = false);

void assert_finite(const Tensor& t, const std::string& context);

/// Max over coordinates of |analytic - central difference| /
/// max(1e-8, |analytic| + |numeric|) for scalar-valued f at x.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double step = 1e-5);

}  // namespace cliporder
