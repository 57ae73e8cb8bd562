#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace seqpar {

using Shape = std::vector<int64_t>;

int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct StateError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class Tape;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until gradient first flows into it
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

// Dense row-major f64 tensor with shared storage. Copies are shallow;
// ops produce fresh tensors and register their backward on the active tape.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }
  int64_t extent(int axis) const { return impl_->shape.at(static_cast<size_t>(axis)); }
  bool is_scalar() const { return numel() == 1; }

  std::span<const double> values() const { return impl_->data; }
  std::vector<double>& raw_data() { return impl_->data; }
  double value_at(int64_t i) const { return impl_->data[static_cast<size_t>(i)]; }
  double scalar_value() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const;
  void zero_grad() { impl_->grad.clear(); }

  std::shared_ptr<TensorImpl> impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Ordered record of op backward closures for one reverse sweep.
// Ops append while a tape is active (see TapeScope); backward replays the
// record once, in reverse, and marks the tape consumed.
class Tape {
 public:
  void record(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }
  size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }
  void reset() {
    nodes_.clear();
    consumed_ = false;
  }

  // loss must be a recorded scalar; throws StateError on a consumed tape.
  void backward(const Tensor& loss);

  static Tape* active();

 private:
  friend class TapeScope;
  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
};

class TapeScope {
 public:
  explicit TapeScope(Tape* tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

// Disables recording within a scope (reference-model forward, oracles).
class NoGradScope : public TapeScope {
 public:
  NoGradScope() : TapeScope(nullptr) {}
};

// ---- elementwise / linear algebra ops ----

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor softplus(const Tensor& a);

// Batched matrix product: [*, m, k] x [*, k, n]. Leading batch dims must
// match exactly, or either side may be rank-2 (broadcast over the other's
// batch dims).
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor reshape(const Tensor& a, Shape new_shape);
Tensor slice_axis(const Tensor& a, int axis, int64_t start, int64_t len);
Tensor pad_axis_zeros(const Tensor& a, int axis, int64_t pad_after);
// Repeats along axis 2 (head axis): out head h reads input head h / rep.
Tensor repeat_heads(const Tensor& a, int64_t rep);

// Softmax over the last dim with row-max subtraction. mask, when given, is
// additive (-inf masks an entry) and broadcast against x by right-aligned
// dims of extent 1. A fully masked row yields zeros; *any_fully_masked is
// set when that happens.
Tensor stable_softmax_lastdim(const Tensor& x, const Tensor* mask = nullptr,
                              bool* any_fully_masked = nullptr);

// Rotary embedding on [bs, L, heads, dim] with half-dim pairing and
// theta_j = base^(-2j/dim), base 10000. position_ids.size() must equal L.
Tensor rope_apply(const Tensor& x, std::span<const int64_t> position_ids);
constexpr double kRopeBase = 10000.0;

// table [V, H], ids in [0, V) -> [ids.size(), H].
Tensor embedding(const Tensor& table, std::span<const int64_t> ids);

// RMS norm over the last dim: y = x / sqrt(mean(x^2) + eps) * w.
Tensor rms_norm(const Tensor& x, const Tensor& weight, double eps);

Tensor silu(const Tensor& x);

Tensor sum_all(const Tensor& x);  // -> scalar

// Entry point mirroring loss.backward(): requires scalar, consumes the tape.
void backward(const Tensor& loss);

// Deterministic normal(0, std) from a named stream; used for weight init
// and test data so runs are reproducible bit-for-bit.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {}
  uint64_t next_u64();
  double uniform();                      // [0, 1)
  double uniform_range(double lo, double hi);
  double normal(double stddev);          // Box-Muller, fixed consumption order
  int64_t uniform_int(int64_t lo, int64_t hi);  // [lo, hi]

 private:
  uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace seqpar
