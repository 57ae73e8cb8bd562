#include "seqpar/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

namespace seqpar {

int64_t numel_of(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(Shape shape, double fill, bool requires_grad) {
  for (int64_t d : shape) {
    if (d < 0) throw ShapeError("negative extent in shape " + shape_str(shape));
  }
  impl_ = std::make_shared<TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data.assign(static_cast<size_t>(numel_of(impl_->shape)), fill);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  if (numel_of(shape) != static_cast<int64_t>(data.size())) {
    throw ShapeError("data size " + std::to_string(data.size()) + " does not match shape " +
                     shape_str(shape));
  }
  Tensor t;
  t.impl_ = std::make_shared<TensorImpl>();
  t.impl_->shape = std::move(shape);
  t.impl_->data = std::move(data);
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from({}, {v}, requires_grad);
}

double Tensor::scalar_value() const {
  if (!is_scalar()) throw ShapeError("scalar_value on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

std::span<const double> Tensor::grad() const {
  if (impl_->grad.empty()) throw StateError("gradient not populated; run backward first");
  return impl_->grad;
}

namespace {

thread_local Tape* g_active_tape = nullptr;

// True when the op should record a backward node for these inputs.
bool tracked(std::initializer_list<const Tensor*> inputs) {
  if (!g_active_tape) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

std::vector<int64_t> strides_of(const Shape& shape) {
  std::vector<int64_t> st(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
    st[static_cast<size_t>(i)] = st[static_cast<size_t>(i) + 1] * shape[static_cast<size_t>(i) + 1];
  }
  return st;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

}  // namespace

Tape* Tape::active() { return g_active_tape; }

TapeScope::TapeScope(Tape* tape) : prev_(g_active_tape) { g_active_tape = tape; }
TapeScope::~TapeScope() { g_active_tape = prev_; }

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || !loss.is_scalar()) {
    throw ShapeError("backward requires a scalar loss");
  }
  if (consumed_) throw StateError("tape already consumed; reset before reusing");
  if (!loss.requires_grad()) {
    throw StateError("loss is not connected to the tape");
  }
  auto impl = loss.impl();
  impl->ensure_grad();
  impl->grad[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  consumed_ = true;
}

void backward(const Tensor& loss) {
  Tape* t = Tape::active();
  if (!t) throw StateError("backward called with no active tape");
  t->backward(loss);
}

// ---- ops ----

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<double> out(a.values().begin(), a.values().end());
  for (size_t i = 0; i < out.size(); ++i) out[i] += b.value_at(static_cast<int64_t>(i));
  Tensor y = Tensor::from(a.shape(), std::move(out), tracked({&a, &b}));
  if (y.requires_grad()) {
    g_active_tape->record([ai = a.impl(), bi = b.impl(), yi = y.impl()] {
      if (yi->grad.empty()) return;
      if (ai->requires_grad) {
        ai->ensure_grad();
        for (size_t i = 0; i < yi->grad.size(); ++i) ai->grad[i] += yi->grad[i];
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (size_t i = 0; i < yi->grad.size(); ++i) bi->grad[i] += yi->grad[i];
      }
    });
  }
  return y;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<double> out(a.values().begin(), a.values().end());
  for (size_t i = 0; i < out.size(); ++i) out[i] -= b.value_at(static_cast<int64_t>(i));
  Tensor y = Tensor::from(a.shape(), std::move(out), tracked({&a, &b}));
  if (y.requires_grad()) {
    g_active_tape->record([ai = a.impl(), bi = b.impl(), yi = y.impl()] {
      if (yi->grad.empty()) return;
      if (ai->requires_grad) {
        ai->ensure_grad();
        for (size_t i = 0; i < yi->grad.size(); ++i) ai->grad[i] += yi->grad[i];
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (size_t i = 0; i < yi->grad.size(); ++i) bi->grad[i] -= yi->grad[i];
      }
    });
  }
  return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<double> out(a.values().begin(), a.values().end());
  for (size_t i = 0; i < out.size(); ++i) out[i] *= b.value_at(static_cast<int64_t>(i));
  Tensor y = Tensor::from(a.shape(), std::move(out), tracked({&a, &b}));
  if (y.requires_grad()) {
    g_active_tape->record([ai = a.impl(), bi = b.impl(), yi = y.impl()] {
      if (yi->grad.empty()) return;
      if (ai->requires_grad) {
        ai->ensure_grad();
        for (size_t i = 0; i < yi->grad.size(); ++i) ai->grad[i] += yi->grad[i] * bi->data[i];
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (size_t i = 0; i < yi->grad.size(); ++i) bi->grad[i] += yi->grad[i] * ai->data[i];
      }
    });
  }
  return y;
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (double& v : out) v *= c;
  Tensor y = Tensor::from(a.shape(), std::move(out), tracked({&a}));
  if (y.requires_grad()) {
    g_active_tape->record([ai = a.impl(), yi = y.impl(), c] {
      if (yi->grad.empty() || !ai->requires_grad) return;
      ai->ensure_grad();
      for (size_t i = 0; i < yi->grad.size(); ++i) ai->grad[i] += yi->grad[i] * c;
    });
  }
  return y;
}

Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (double& v : out) v += c;
  Tensor y = Tensor::from(a.shape(), std::move(out), tracked({&a}));
  if (y.requires_grad()) {
    g_active_tape->record([ai = a.impl(), yi = y.impl()] {
      if (yi->grad.empty() || !ai->requires_grad) return;
      ai->ensure_grad();
      for (size_t i = 0; i < yi->grad.size(); ++i) ai->grad[i] += yi->grad[i];
    });
  }
  return y;
}

Tensor softplus(const Tensor& a) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (double& v : out) v = std::log1p(std::exp(-std::fabs(v))) + std::max(v, 0.0);
  Tensor y = Tensor::from(a.shape(), std::move(out), tracked({&a}));
  if (y.requires_grad()) {
    g_active_tape->record([ai = a.impl(), yi = y.impl()] {
      if (yi->grad.empty() || !ai->requires_grad) return;
      ai->ensure_grad();
      for (size_t i = 0; i < yi->grad.size(); ++i) {
        double x = ai->data[i];
        double sig = 1.0 / (1.0 + std::exp(-x));
        ai->grad[i] += yi->grad[i] * sig;
      }
    });
  }
  return y;
}

namespace {

struct MatDims {
  int64_t batch, m, k, n;
  bool a_broadcast, b_broadcast;
};

MatDims matmul_dims(const Shape& as, const Shape& bs) {
  if (as.size() < 2 || bs.size() < 2) {
    throw ShapeError("matmul needs rank >= 2, got " + shape_str(as) + " and " + shape_str(bs));
  }
  int64_t m = as[as.size() - 2], ka = as[as.size() - 1];
  int64_t kb = bs[bs.size() - 2], n = bs[bs.size() - 1];
  if (ka != kb) {
    throw ShapeError("matmul inner dim mismatch: " + shape_str(as) + " x " + shape_str(bs));
  }
  Shape abatch(as.begin(), as.end() - 2), bbatch(bs.begin(), bs.end() - 2);
  if (!abatch.empty() && !bbatch.empty() && abatch != bbatch) {
    throw ShapeError("matmul batch dims mismatch: " + shape_str(as) + " x " + shape_str(bs));
  }
  int64_t batch = std::max(numel_of(abatch), numel_of(bbatch));
  return {batch, m, ka, n, abatch.empty() && !bbatch.empty(), bbatch.empty() && !abatch.empty()};
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  MatDims d = matmul_dims(a.shape(), b.shape());
  Shape out_shape = d.b_broadcast || a.shape().size() >= b.shape().size()
                        ? Shape(a.shape().begin(), a.shape().end() - 2)
                        : Shape(b.shape().begin(), b.shape().end() - 2);
  out_shape.push_back(d.m);
  out_shape.push_back(d.n);

  std::vector<double> out(static_cast<size_t>(d.batch * d.m * d.n), 0.0);
  const double* ap = a.values().data();
  const double* bp = b.values().data();
  for (int64_t t = 0; t < d.batch; ++t) {
    const double* at = ap + (d.a_broadcast ? 0 : t * d.m * d.k);
    const double* bt = bp + (d.b_broadcast ? 0 : t * d.k * d.n);
    double* ot = out.data() + t * d.m * d.n;
    for (int64_t i = 0; i < d.m; ++i) {
      for (int64_t kk = 0; kk < d.k; ++kk) {
        double av = at[i * d.k + kk];
        if (av == 0.0) continue;
        const double* brow = bt + kk * d.n;
        double* orow = ot + i * d.n;
        for (int64_t j = 0; j < d.n; ++j) orow[j] += av * brow[j];
      }
    }
  }
  Tensor y = Tensor::from(std::move(out_shape), std::move(out), tracked({&a, &b}));
  if (y.requires_grad()) {
    g_active_tape->record([ai = a.impl(), bi = b.impl(), yi = y.impl(), d] {
      if (yi->grad.empty()) return;
      const double* gy = yi->grad.data();
      if (ai->requires_grad) {
        ai->ensure_grad();
        for (int64_t t = 0; t < d.batch; ++t) {
          const double* gt = gy + t * d.m * d.n;
          const double* bt = bi->data.data() + (d.b_broadcast ? 0 : t * d.k * d.n);
          double* gat = ai->grad.data() + (d.a_broadcast ? 0 : t * d.m * d.k);
          for (int64_t i = 0; i < d.m; ++i) {
            for (int64_t j = 0; j < d.n; ++j) {
              double g = gt[i * d.n + j];
              if (g == 0.0) continue;
              for (int64_t kk = 0; kk < d.k; ++kk) {
                gat[i * d.k + kk] += g * bt[kk * d.n + j];
              }
            }
          }
        }
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (int64_t t = 0; t < d.batch; ++t) {
          const double* gt = gy + t * d.m * d.n;
          const double* at = ai->data.data() + (d.a_broadcast ? 0 : t * d.m * d.k);
          double* gbt = bi->grad.data() + (d.b_broadcast ? 0 : t * d.k * d.n);
          for (int64_t i = 0; i < d.m; ++i) {
            for (int64_t kk = 0; kk < d.k; ++kk) {
              double av = at[i * d.k + kk];
              if (av == 0.0) continue;
              const double* grow = gt + i * d.n;
              double* gbrow = gbt + kk * d.n;
              for (int64_t j = 0; j < d.n; ++j) gbrow[j] += av * grow[j];
            }
          }
        }
      }
    });
  }
  return y;
}

Tensor reshape(const Tensor& a, Shape new_shape) {
  if (numel_of(new_shape) != a.numel()) {
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(new_shape) +
                     " changes element count");
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  Tensor y = Tensor::from(std::move(new_shape), std::move(out), tracked({&a}));
  if (y.requires_grad()) {
    g_active_tape->record([ai = a.impl(), yi = y.impl()] {
      if (yi->grad.empty() || !ai->requires_grad) return;
      ai->ensure_grad();
      for (size_t i = 0; i < yi->grad.size(); ++i) ai->grad[i] += yi->grad[i];
    });
  }
  return y;
}

namespace {

// Iterates blocks for axis ops: outer x axis x inner layout.
struct AxisSplit {
  int64_t outer, axis_len, inner;
};

AxisSplit axis_split(const Shape& shape, int axis) {
  if (axis < 0 || static_cast<size_t>(axis) >= shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  }
  AxisSplit s{1, shape[static_cast<size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

Tensor slice_axis(const Tensor& a, int axis, int64_t start, int64_t len) {
  AxisSplit s = axis_split(a.shape(), axis);
  if (start < 0 || len < 0 || start + len > s.axis_len) {
    throw ShapeError("slice [" + std::to_string(start) + "," + std::to_string(start + len) +
                     ") out of range for axis " + std::to_string(axis) + " of " +
                     shape_str(a.shape()));
  }
  Shape out_shape = a.shape();
  out_shape[static_cast<size_t>(axis)] = len;
  std::vector<double> out(static_cast<size_t>(s.outer * len * s.inner));
  const double* ap = a.values().data();
  for (int64_t o = 0; o < s.outer; ++o) {
    const double* src = ap + (o * s.axis_len + start) * s.inner;
    std::copy(src, src + len * s.inner, out.data() + o * len * s.inner);
  }
  Tensor y = Tensor::from(std::move(out_shape), std::move(out), tracked({&a}));
  if (y.requires_grad()) {
    g_active_tape->record([ai = a.impl(), yi = y.impl(), s, start, len] {
      if (yi->grad.empty() || !ai->requires_grad) return;
      ai->ensure_grad();
      for (int64_t o = 0; o < s.outer; ++o) {
        double* dst = ai->grad.data() + (o * s.axis_len + start) * s.inner;
        const double* src = yi->grad.data() + o * len * s.inner;
        for (int64_t i = 0; i < len * s.inner; ++i) dst[i] += src[i];
      }
    });
  }
  return y;
}

Tensor pad_axis_zeros(const Tensor& a, int axis, int64_t pad_after) {
  if (pad_after < 0) throw ShapeError("negative pad");
  if (pad_after == 0) return a;
  AxisSplit s = axis_split(a.shape(), axis);
  Shape out_shape = a.shape();
  int64_t new_len = s.axis_len + pad_after;
  out_shape[static_cast<size_t>(axis)] = new_len;
  std::vector<double> out(static_cast<size_t>(s.outer * new_len * s.inner), 0.0);
  const double* ap = a.values().data();
  for (int64_t o = 0; o < s.outer; ++o) {
    std::copy(ap + o * s.axis_len * s.inner, ap + (o + 1) * s.axis_len * s.inner,
              out.data() + o * new_len * s.inner);
  }
  Tensor y = Tensor::from(std::move(out_shape), std::move(out), tracked({&a}));
  if (y.requires_grad()) {
    g_active_tape->record([ai = a.impl(), yi = y.impl(), s, new_len] {
      if (yi->grad.empty() || !ai->requires_grad) return;
      ai->ensure_grad();
      for (int64_t o = 0; o < s.outer; ++o) {
        const double* src = yi->grad.data() + o * new_len * s.inner;
        double* dst = ai->grad.data() + o * s.axis_len * s.inner;
        for (int64_t i = 0; i < s.axis_len * s.inner; ++i) dst[i] += src[i];
      }
    });
  }
  return y;
}

Tensor repeat_heads(const Tensor& a, int64_t rep) {
  if (a.shape().size() != 4) {
    throw ShapeError("repeat_heads expects [bs, L, heads, dim], got " + shape_str(a.shape()));
  }
  if (rep <= 0) throw ShapeError("repeat factor must be positive");
  if (rep == 1) return a;
  AxisSplit s = axis_split(a.shape(), 2);
  Shape out_shape = a.shape();
  out_shape[2] = s.axis_len * rep;
  std::vector<double> out(static_cast<size_t>(s.outer * s.axis_len * rep * s.inner));
  const double* ap = a.values().data();
  for (int64_t o = 0; o < s.outer; ++o) {
    for (int64_t h = 0; h < s.axis_len * rep; ++h) {
      const double* src = ap + (o * s.axis_len + h / rep) * s.inner;
      std::copy(src, src + s.inner, out.data() + (o * s.axis_len * rep + h) * s.inner);
    }
  }
  Tensor y = Tensor::from(std::move(out_shape), std::move(out), tracked({&a}));
  if (y.requires_grad()) {
    g_active_tape->record([ai = a.impl(), yi = y.impl(), s, rep] {
      if (yi->grad.empty() || !ai->requires_grad) return;
      ai->ensure_grad();
      for (int64_t o = 0; o < s.outer; ++o) {
        for (int64_t h = 0; h < s.axis_len * rep; ++h) {
          const double* src = yi->grad.data() + (o * s.axis_len * rep + h) * s.inner;
          double* dst = ai->grad.data() + (o * s.axis_len + h / rep) * s.inner;
          for (int64_t i = 0; i < s.inner; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return y;
}

namespace {

// Maps a flat index of `shape` to the flat index of a right-aligned
// broadcast `mask_shape` (each dim equal or 1).
int64_t broadcast_index(int64_t flat, const Shape& shape, const std::vector<int64_t>& strides,
                        const Shape& mask_shape, const std::vector<int64_t>& mask_strides) {
  int64_t idx = 0;
  size_t off = shape.size() - mask_shape.size();
  for (size_t i = 0; i < shape.size(); ++i) {
    int64_t coord = (flat / strides[i]) % shape[i];
    if (i >= off) {
      size_t mi = i - off;
      if (mask_shape[mi] != 1) idx += coord * mask_strides[mi];
    }
  }
  return idx;
}

void check_mask_broadcastable(const Shape& xs, const Shape& ms) {
  if (ms.size() > xs.size()) {
    throw ShapeError("mask rank exceeds input: " + shape_str(ms) + " vs " + shape_str(xs));
  }
  size_t off = xs.size() - ms.size();
  for (size_t i = 0; i < ms.size(); ++i) {
    if (ms[i] != 1 && ms[i] != xs[off + i]) {
      throw ShapeError("mask " + shape_str(ms) + " not broadcastable to " + shape_str(xs));
    }
  }
}

}  // namespace

Tensor stable_softmax_lastdim(const Tensor& x, const Tensor* mask, bool* any_fully_masked) {
  if (x.shape().empty()) throw ShapeError("softmax needs rank >= 1");
  const Shape& xs = x.shape();
  int64_t cols = xs.back();
  int64_t rows = x.numel() / cols;
  if (any_fully_masked) *any_fully_masked = false;

  std::vector<int64_t> xstr = strides_of(xs);
  Shape ms;
  std::vector<int64_t> mstr;
  const double* mp = nullptr;
  if (mask) {
    check_mask_broadcastable(xs, mask->shape());
    ms = mask->shape();
    mstr = strides_of(ms);
    mp = mask->values().data();
  }

  std::vector<double> out(static_cast<size_t>(x.numel()));
  const double* xp = x.values().data();
  auto masked_val = [&](int64_t flat) {
    double v = xp[flat];
    if (mp) v += mp[broadcast_index(flat, xs, xstr, ms, mstr)];
    return v;
  };
  for (int64_t r = 0; r < rows; ++r) {
    int64_t base = r * cols;
    double m = -std::numeric_limits<double>::infinity();
    for (int64_t c = 0; c < cols; ++c) m = std::max(m, masked_val(base + c));
    if (m == -std::numeric_limits<double>::infinity()) {
      // fully masked row: all-zero output, flagged to the caller
      for (int64_t c = 0; c < cols; ++c) out[static_cast<size_t>(base + c)] = 0.0;
      if (any_fully_masked) *any_fully_masked = true;
      continue;
    }
    double denom = 0.0;
    for (int64_t c = 0; c < cols; ++c) {
      double e = std::exp(masked_val(base + c) - m);
      out[static_cast<size_t>(base + c)] = e;
      denom += e;
    }
    for (int64_t c = 0; c < cols; ++c) out[static_cast<size_t>(base + c)] /= denom;
  }
  Tensor y = Tensor::from(xs, std::move(out), tracked({&x}));
  if (y.requires_grad()) {
    g_active_tape->record([xi = x.impl(), yi = y.impl(), rows, cols] {
      if (yi->grad.empty() || !xi->requires_grad) return;
      xi->ensure_grad();
      for (int64_t r = 0; r < rows; ++r) {
        int64_t base = r * cols;
        double dot = 0.0;
        for (int64_t c = 0; c < cols; ++c) {
          dot += yi->grad[static_cast<size_t>(base + c)] * yi->data[static_cast<size_t>(base + c)];
        }
        for (int64_t c = 0; c < cols; ++c) {
          size_t i = static_cast<size_t>(base + c);
          xi->grad[i] += yi->data[i] * (yi->grad[i] - dot);
        }
      }
    });
  }
  return y;
}

Tensor rope_apply(const Tensor& x, std::span<const int64_t> position_ids) {
  if (x.shape().size() != 4) {
    throw ShapeError("rope_apply expects [bs, L, heads, dim], got " + shape_str(x.shape()));
  }
  int64_t bs = x.extent(0), L = x.extent(1), hs = x.extent(2), dim = x.extent(3);
  if (dim % 2 != 0) throw ShapeError("rope head dim must be even, got " + std::to_string(dim));
  if (static_cast<int64_t>(position_ids.size()) != L) {
    throw ShapeError("position_ids length " + std::to_string(position_ids.size()) +
                     " does not match sequence extent " + std::to_string(L));
  }
  int64_t half = dim / 2;
  std::vector<double> theta(static_cast<size_t>(half));
  for (int64_t j = 0; j < half; ++j) {
    theta[static_cast<size_t>(j)] =
        std::pow(kRopeBase, -2.0 * static_cast<double>(j) / static_cast<double>(dim));
  }
  std::vector<double> out(static_cast<size_t>(x.numel()));
  const double* xp = x.values().data();
  for (int64_t b = 0; b < bs; ++b) {
    for (int64_t t = 0; t < L; ++t) {
      double p = static_cast<double>(position_ids[static_cast<size_t>(t)]);
      for (int64_t h = 0; h < hs; ++h) {
        int64_t base = ((b * L + t) * hs + h) * dim;
        for (int64_t j = 0; j < half; ++j) {
          double c = std::cos(p * theta[static_cast<size_t>(j)]);
          double s = std::sin(p * theta[static_cast<size_t>(j)]);
          double lo = xp[base + j], hi = xp[base + half + j];
          out[static_cast<size_t>(base + j)] = lo * c - hi * s;
          out[static_cast<size_t>(base + half + j)] = lo * s + hi * c;
        }
      }
    }
  }
  Tensor y = Tensor::from(x.shape(), std::move(out), tracked({&x}));
  if (y.requires_grad()) {
    std::vector<int64_t> pos(position_ids.begin(), position_ids.end());
    g_active_tape->record([xi = x.impl(), yi = y.impl(), pos = std::move(pos), theta, bs, L, hs,
                           dim, half] {
      if (yi->grad.empty() || !xi->requires_grad) return;
      xi->ensure_grad();
      for (int64_t b = 0; b < bs; ++b) {
        for (int64_t t = 0; t < L; ++t) {
          double p = static_cast<double>(pos[static_cast<size_t>(t)]);
          for (int64_t h = 0; h < hs; ++h) {
            int64_t base = ((b * L + t) * hs + h) * dim;
            for (int64_t j = 0; j < half; ++j) {
              double c = std::cos(p * theta[static_cast<size_t>(j)]);
              double s = std::sin(p * theta[static_cast<size_t>(j)]);
              double glo = yi->grad[static_cast<size_t>(base + j)];
              double ghi = yi->grad[static_cast<size_t>(base + half + j)];
              xi->grad[static_cast<size_t>(base + j)] += glo * c + ghi * s;
              xi->grad[static_cast<size_t>(base + half + j)] += -glo * s + ghi * c;
            }
          }
        }
      }
    });
  }
  return y;
}

Tensor embedding(const Tensor& table, std::span<const int64_t> ids) {
  if (table.shape().size() != 2) {
    throw ShapeError("embedding table must be [V, H], got " + shape_str(table.shape()));
  }
  int64_t V = table.extent(0), H = table.extent(1);
  int64_t T = static_cast<int64_t>(ids.size());
  std::vector<double> out(static_cast<size_t>(T * H));
  const double* tp = table.values().data();
  for (int64_t t = 0; t < T; ++t) {
    int64_t id = ids[static_cast<size_t>(t)];
    if (id < 0 || id >= V) {
      throw ShapeError("token id " + std::to_string(id) + " outside vocab of " + std::to_string(V));
    }
    std::copy(tp + id * H, tp + (id + 1) * H, out.data() + t * H);
  }
  Tensor y = Tensor::from({T, H}, std::move(out), tracked({&table}));
  if (y.requires_grad()) {
    std::vector<int64_t> ids_copy(ids.begin(), ids.end());
    g_active_tape->record([ti = table.impl(), yi = y.impl(), ids = std::move(ids_copy), H] {
      if (yi->grad.empty() || !ti->requires_grad) return;
      ti->ensure_grad();
      for (size_t t = 0; t < ids.size(); ++t) {
        const double* src = yi->grad.data() + static_cast<int64_t>(t) * H;
        double* dst = ti->grad.data() + ids[t] * H;
        for (int64_t i = 0; i < H; ++i) dst[i] += src[i];
      }
    });
  }
  return y;
}

Tensor rms_norm(const Tensor& x, const Tensor& weight, double eps) {
  if (x.shape().empty() || weight.shape().size() != 1 || weight.extent(0) != x.shape().back()) {
    throw ShapeError("rms_norm: weight " + shape_str(weight.shape()) + " incompatible with " +
                     shape_str(x.shape()));
  }
  int64_t H = x.shape().back();
  int64_t rows = x.numel() / H;
  std::vector<double> out(static_cast<size_t>(x.numel()));
  std::vector<double> inv_rms(static_cast<size_t>(rows));
  const double* xp = x.values().data();
  const double* wp = weight.values().data();
  for (int64_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (int64_t i = 0; i < H; ++i) ss += xp[r * H + i] * xp[r * H + i];
    double inv = 1.0 / std::sqrt(ss / static_cast<double>(H) + eps);
    inv_rms[static_cast<size_t>(r)] = inv;
    for (int64_t i = 0; i < H; ++i) {
      out[static_cast<size_t>(r * H + i)] = xp[r * H + i] * inv * wp[i];
    }
  }
  Tensor y = Tensor::from(x.shape(), std::move(out), tracked({&x, &weight}));
  if (y.requires_grad()) {
    g_active_tape->record(
        [xi = x.impl(), wi = weight.impl(), yi = y.impl(), inv_rms = std::move(inv_rms), rows, H] {
          if (yi->grad.empty()) return;
          for (int64_t r = 0; r < rows; ++r) {
            double inv = inv_rms[static_cast<size_t>(r)];
            const double* g = yi->grad.data() + r * H;
            const double* xr = xi->data.data() + r * H;
            if (xi->requires_grad) {
              xi->ensure_grad();
              double dot = 0.0;
              for (int64_t i = 0; i < H; ++i) dot += g[i] * wi->data[i] * xr[i];
              double coef = dot * inv * inv * inv / static_cast<double>(H);
              double* gx = xi->grad.data() + r * H;
              for (int64_t i = 0; i < H; ++i) {
                gx[i] += g[i] * wi->data[i] * inv - coef * xr[i];
              }
            }
            if (wi->requires_grad) {
              wi->ensure_grad();
              for (int64_t i = 0; i < H; ++i) wi->grad[i] += g[i] * xr[i] * inv;
            }
          }
        });
  }
  return y;
}

Tensor silu(const Tensor& x) {
  std::vector<double> out(x.values().begin(), x.values().end());
  for (double& v : out) v = v / (1.0 + std::exp(-v));
  Tensor y = Tensor::from(x.shape(), std::move(out), tracked({&x}));
  if (y.requires_grad()) {
    g_active_tape->record([xi = x.impl(), yi = y.impl()] {
      if (yi->grad.empty() || !xi->requires_grad) return;
      xi->ensure_grad();
      for (size_t i = 0; i < yi->grad.size(); ++i) {
        double v = xi->data[i];
        double sig = 1.0 / (1.0 + std::exp(-v));
        xi->grad[i] += yi->grad[i] * sig * (1.0 + v * (1.0 - sig));
      }
    });
  }
  return y;
}

Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  Tensor y = Tensor::from({}, {s}, tracked({&x}));
  if (y.requires_grad()) {
    g_active_tape->record([xi = x.impl(), yi = y.impl()] {
      if (yi->grad.empty() || !xi->requires_grad) return;
      xi->ensure_grad();
      double g = yi->grad[0];
      for (size_t i = 0; i < xi->grad.size(); ++i) xi->grad[i] += g;
    });
  }
  return y;
}

// ---- rng ----

uint64_t Rng::next_u64() {
  // splitmix64; fixed algorithm so streams are identical across platforms
  state_ += 0x9e3779b97f4a7c15ull;
  uint64_t z = state_;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform_range(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal(double stddev) {
  // Box-Muller rather than std::normal_distribution, whose consumption
  // pattern is implementation-defined.
  if (have_spare_) {
    have_spare_ = false;
    return spare_ * stddev;
  }
  double u1 = 0.0;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 6.283185307179586476925286766559 * u2;
  spare_ = r * std::sin(a);
  have_spare_ = true;
  return r * std::cos(a) * stddev;
}

int64_t Rng::uniform_int(int64_t lo, int64_t hi) {
  if (hi < lo) throw ConfigError("uniform_int with empty range");
  uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
  return lo + static_cast<int64_t>(next_u64() % span);
}

}  // namespace seqpar
