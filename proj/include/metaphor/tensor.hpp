#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "metaphor/detail/kernels.hpp"
#include "metaphor/error.hpp"

namespace metaphor {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "×" : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major array with an optional gradient buffer.
///
/// Copies are shallow handles onto the same storage, so a parameter held by a
/// layer and the tensor recorded in a graph are the same object. Use clone()
/// for an independent copy.
template <std::floating_point Real>
class Tensor {
 public:
  using value_type = Real;

  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : s_(std::make_shared<Storage>()) {
    check_shape(shape);
    s_->data.assign(shape_size(shape), Real(0));
    s_->shape = std::move(shape);
    s_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<Real> values, bool requires_grad = false)
      : s_(std::make_shared<Storage>()) {
    check_shape(shape);
    if (shape_size(shape) != values.size()) {
      throw DimensionError("tensor shape " + shape_str(shape) + " holds " +
                           std::to_string(shape_size(shape)) + " values, got " +
                           std::to_string(values.size()));
    }
    s_->shape = std::move(shape);
    s_->data = std::move(values);
    s_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor scalar(Real v) { return Tensor(Shape{}, std::vector<Real>{v}); }

  static Tensor vector(std::initializer_list<Real> values) {
    return Tensor(Shape{values.size()}, std::vector<Real>(values));
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<Real>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<Real> flat;
    flat.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged matrix literal");
      flat.insert(flat.end(), row.begin(), row.end());
    }
    return Tensor(Shape{r, c}, std::move(flat));
  }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return s_->shape.at(axis); }
  std::size_t size() const { return s_->data.size(); }

  std::span<Real> values() { return s_->data; }
  std::span<const Real> values() const { return s_->data; }
  Real* data() { return s_->data.data(); }
  const Real* data() const { return s_->data.data(); }

  Real& operator[](std::size_t i) { return s_->data[i]; }
  const Real& operator[](std::size_t i) const { return s_->data[i]; }

  Real& at(std::size_t r, std::size_t c) { return s_->data[r * s_->shape[1] + c]; }
  const Real& at(std::size_t r, std::size_t c) const { return s_->data[r * s_->shape[1] + c]; }

  Real item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return s_->data[0];
  }

  bool requires_grad() const { return s_ && s_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    s_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !s_->grad.empty(); }
  std::span<Real> grad() { return s_->grad; }
  std::span<const Real> grad() const { return s_->grad; }

  /// Gradient buffer, allocated as zeros on first use. Handles share storage,
  /// so this is available on const handles too.
  std::span<Real> ensure_grad() const {
    if (s_->grad.empty()) s_->grad.assign(s_->data.size(), Real(0));
    return s_->grad;
  }

  void zero_grad() { std::fill(s_->grad.begin(), s_->grad.end(), Real(0)); }
  void clear_grad() { s_->grad.clear(); }

  Tensor clone() const {
    Tensor t;
    t.s_ = std::make_shared<Storage>();
    t.s_->shape = s_->shape;
    t.s_->data = s_->data;
    t.s_->requires_grad = s_->requires_grad;
    return t;
  }

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }
  const void* identity() const { return s_.get(); }

 private:
  struct Storage {
    Shape shape;
    std::vector<Real> data;
    std::vector<Real> grad;
    bool requires_grad = false;
  };

  static void check_shape(const Shape& shape) {
    for (std::size_t d : shape) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
    }
  }

  std::shared_ptr<Storage> s_;
};

/// Reverse-mode tape for one forward pass.
///
/// Nodes are appended in execution order, which is a topological order by
/// construction. backward() re-zeroes intermediate gradients before each
/// sweep; leaf gradients accumulate across calls.
template <std::floating_point Real>
class Graph {
 public:
  using TensorT = Tensor<Real>;

  Graph() = default;

  /// A graph that records nothing; ops return detached results.
  static Graph inference() {
    Graph g;
    g.recording_ = false;
    return g;
  }

  bool recording() const { return recording_; }

  bool wants_grad(std::initializer_list<const TensorT*> inputs) const {
    if (!recording_) return false;
    for (const TensorT* t : inputs) {
      if (t->requires_grad()) return true;
    }
    return false;
  }

  void record(std::vector<TensorT> inputs, std::vector<TensorT> outputs,
              std::function<void()> backward) {
    for (auto& out : outputs) out.set_requires_grad(true);
    nodes_.push_back(Node{std::move(inputs), std::move(outputs), std::move(backward)});
  }

  std::size_t size() const { return nodes_.size(); }
  std::size_t last_visit_count() const { return visits_; }

  /// True when every node's inputs are leaves or outputs of earlier nodes.
  bool topologically_ordered() const {
    std::unordered_map<const void*, std::size_t> producer;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      for (const auto& out : nodes_[i].outputs) producer.emplace(out.identity(), i);
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      for (const auto& in : nodes_[i].inputs) {
        auto it = producer.find(in.identity());
        if (it != producer.end() && it->second >= i) return false;
      }
    }
    return true;
  }

  void backward(const TensorT& loss) {
    if (!loss.defined() || loss.size() != 1) {
      throw ContractError("backward() needs a scalar loss, got shape " +
                          (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    for (auto& node : nodes_) {
      for (auto& out : node.outputs) {
        out.ensure_grad();
        out.zero_grad();
      }
    }
    TensorT seed = loss;
    if (!seed.requires_grad()) {
      visits_ = 0;
      return;
    }
    seed.ensure_grad()[0] += Real(1);
    visits_ = 0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      it->backward();
      ++visits_;
    }
  }

  // Branch signatures let the gradient checker skip coordinates whose
  // finite-difference stencil crosses a kink (ReLU sign flip, argmax change).
  void track_branches(bool on) { track_branches_ = on; }
  bool tracking_branches() const { return track_branches_; }
  void note_branch(std::uint64_t v) {
    branch_hash_ ^= v + 0x9e3779b97f4a7c15ULL + (branch_hash_ << 6) + (branch_hash_ >> 2);
  }
  std::uint64_t branch_signature() const { return branch_hash_; }

 private:
  struct Node {
    std::vector<TensorT> inputs;
    std::vector<TensorT> outputs;
    std::function<void()> backward;
  };

  std::vector<Node> nodes_;
  bool recording_ = true;
  bool track_branches_ = false;
  std::uint64_t branch_hash_ = 0;
  std::size_t visits_ = 0;
};

template <std::floating_point Real>
void backward(const Tensor<Real>& loss, Graph<Real>& graph) {
  graph.backward(loss);
}

/// Logistic function evaluated without overflow and kept strictly inside (0, 1).
template <std::floating_point Real>
inline Real stable_sigmoid(Real x) {
  Real s;
  if (x >= 0) {
    s = Real(1) / (Real(1) + std::exp(-x));
  } else {
    const Real e = std::exp(x);
    s = e / (Real(1) + e);
  }
  constexpr Real lo = std::numeric_limits<Real>::min();
  const Real hi = std::nextafter(Real(1), Real(0));
  return std::clamp(s, lo, hi);
}

// ---------------------------------------------------------------------------
// matmul

template <std::floating_point Real>
Tensor<Real> matmul(Graph<Real>& g, const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<Real> out({m, n});
  detail::gemm_nn(a.data(), b.data(), out.data(), m, k, n, false);
  if (g.wants_grad({&a, &b})) {
    g.record({a, b}, {out}, [a, b, out, m, k, n]() mutable {
      const Real* dc = out.grad().data();
      if (a.requires_grad()) detail::gemm_nt(dc, b.data(), a.ensure_grad().data(), m, n, k, true);
      if (b.requires_grad()) detail::gemm_tn_acc(a.data(), dc, b.ensure_grad().data(), m, k, n);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// elementwise

enum class BinaryOp { add, sub, mul };

template <std::floating_point Real>
Tensor<Real> elementwise(Graph<Real>& g, BinaryOp op, const Tensor<Real>& a,
                         const Tensor<Real>& b) {
  const bool same = a.shape() == b.shape();
  if (!same && b.size() != 1) {
    throw DimensionError("elementwise: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  const std::size_t n = a.size();
  Tensor<Real> out(a.shape());
  const Real* pa = a.data();
  const Real* pb = b.data();
  Real* po = out.data();
  const std::size_t sb = same ? 1 : 0;
  switch (op) {
    case BinaryOp::add:
      for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i * sb];
      break;
    case BinaryOp::sub:
      for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i * sb];
      break;
    case BinaryOp::mul:
      for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i * sb];
      break;
  }
  if (g.wants_grad({&a, &b})) {
    g.record({a, b}, {out}, [a, b, out, op, n, sb]() mutable {
      const Real* d = out.grad().data();
      if (a.requires_grad()) {
        Real* da = a.ensure_grad().data();
        if (op == BinaryOp::mul) {
          const Real* pb = b.data();
          for (std::size_t i = 0; i < n; ++i) da[i] += d[i] * pb[i * sb];
        } else {
          for (std::size_t i = 0; i < n; ++i) da[i] += d[i];
        }
      }
      if (b.requires_grad()) {
        Real* db = b.ensure_grad().data();
        const Real* pa = a.data();
        for (std::size_t i = 0; i < n; ++i) {
          const Real v = op == BinaryOp::add ? d[i] : op == BinaryOp::sub ? -d[i] : d[i] * pa[i];
          db[i * sb] += v;
        }
      }
    });
  }
  return out;
}

template <std::floating_point Real>
Tensor<Real> add(Graph<Real>& g, const Tensor<Real>& a, const Tensor<Real>& b) {
  return elementwise(g, BinaryOp::add, a, b);
}

template <std::floating_point Real>
Tensor<Real> sub(Graph<Real>& g, const Tensor<Real>& a, const Tensor<Real>& b) {
  return elementwise(g, BinaryOp::sub, a, b);
}

template <std::floating_point Real>
Tensor<Real> mul(Graph<Real>& g, const Tensor<Real>& a, const Tensor<Real>& b) {
  return elementwise(g, BinaryOp::mul, a, b);
}

/// a · c for a constant c (no gradient with respect to c).
template <std::floating_point Real>
Tensor<Real> scale(Graph<Real>& g, const Tensor<Real>& a, Real c) {
  return elementwise(g, BinaryOp::mul, a, Tensor<Real>::scalar(c));
}

// ---------------------------------------------------------------------------
// activations

enum class Activation { tanh, sigmoid, relu };

template <std::floating_point Real>
Tensor<Real> activation(Graph<Real>& g, Activation op, const Tensor<Real>& a) {
  const std::size_t n = a.size();
  Tensor<Real> out(a.shape());
  const Real* x = a.data();
  Real* y = out.data();
  switch (op) {
    case Activation::tanh:
      for (std::size_t i = 0; i < n; ++i) y[i] = std::tanh(x[i]);
      break;
    case Activation::sigmoid:
      for (std::size_t i = 0; i < n; ++i) y[i] = stable_sigmoid(x[i]);
      break;
    case Activation::relu:
      for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > Real(0) ? x[i] : Real(0);
      if (g.tracking_branches()) {
        for (std::size_t i = 0; i < n; ++i) g.note_branch((i << 1) | (x[i] > Real(0) ? 1U : 0U));
      }
      break;
  }
  if (g.wants_grad({&a})) {
    g.record({a}, {out}, [a, out, op, n]() mutable {
      const Real* d = out.grad().data();
      const Real* x = a.data();
      const Real* y = out.data();
      Real* dx = a.ensure_grad().data();
      switch (op) {
        case Activation::tanh:
          for (std::size_t i = 0; i < n; ++i) dx[i] += d[i] * (Real(1) - y[i] * y[i]);
          break;
        case Activation::sigmoid:
          for (std::size_t i = 0; i < n; ++i) dx[i] += d[i] * y[i] * (Real(1) - y[i]);
          break;
        case Activation::relu:
          for (std::size_t i = 0; i < n; ++i) dx[i] += x[i] > Real(0) ? d[i] : Real(0);
          break;
      }
    });
  }
  return out;
}

template <std::floating_point Real>
Tensor<Real> tanh(Graph<Real>& g, const Tensor<Real>& a) {
  return activation(g, Activation::tanh, a);
}

template <std::floating_point Real>
Tensor<Real> sigmoid(Graph<Real>& g, const Tensor<Real>& a) {
  return activation(g, Activation::sigmoid, a);
}

template <std::floating_point Real>
Tensor<Real> relu(Graph<Real>& g, const Tensor<Real>& a) {
  return activation(g, Activation::relu, a);
}

// ---------------------------------------------------------------------------
// reductions and layout

template <std::floating_point Real>
Tensor<Real> sum(Graph<Real>& g, const Tensor<Real>& a) {
  Real s = 0;
  for (Real v : a.values()) s += v;
  Tensor<Real> out = Tensor<Real>::scalar(s);
  if (g.wants_grad({&a})) {
    g.record({a}, {out}, [a, out]() mutable {
      const Real d = out.grad()[0];
      for (Real& v : a.ensure_grad()) v += d;
    });
  }
  return out;
}

template <std::floating_point Real>
Tensor<Real> reshape(Graph<Real>& g, const Tensor<Real>& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  Tensor<Real> out(std::move(shape), std::vector<Real>(a.values().begin(), a.values().end()));
  if (g.wants_grad({&a})) {
    g.record({a}, {out}, [a, out]() mutable {
      auto d = out.grad();
      auto da = a.ensure_grad();
      for (std::size_t i = 0; i < d.size(); ++i) da[i] += d[i];
    });
  }
  return out;
}

namespace detail {

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t inner = 1;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace detail

template <std::floating_point Real>
Tensor<Real> concat(Graph<Real>& g, const std::vector<Tensor<Real>>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no tensors given");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) {
    throw DimensionError("concat: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(ref));
  }
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == ref[i];
    if (!ok) {
      throw DimensionError("concat: incompatible shapes " + shape_str(ref) + " and " + shape_str(s) +
                           " on axis " + std::to_string(axis));
    }
    out_shape[axis] += s[axis];
  }
  const auto split = detail::split_at(ref, axis);
  Tensor<Real> out(out_shape);
  const std::size_t out_row = out_shape[axis] * split.inner;
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    const std::size_t block = p.dim(axis) * split.inner;
    offsets.push_back(offset);
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(p.data() + o * block, block, out.data() + o * out_row + offset);
    }
    offset += block;
  }
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (g.recording() && any) {
    g.record(parts, {out}, [parts, out, offsets, split, out_row, axis]() mutable {
      const Real* d = out.grad().data();
      for (std::size_t i = 0; i < parts.size(); ++i) {
        auto& p = parts[i];
        if (!p.requires_grad()) continue;
        const std::size_t block = p.dim(axis) * split.inner;
        Real* dp = p.ensure_grad().data();
        for (std::size_t o = 0; o < split.outer; ++o) {
          const Real* src = d + o * out_row + offsets[i];
          for (std::size_t j = 0; j < block; ++j) dp[o * block + j] += src[j];
        }
      }
    });
  }
  return out;
}

/// Elements [begin, end) along axis.
template <std::floating_point Real>
Tensor<Real> slice(Graph<Real>& g, const Tensor<Real>& a, std::size_t axis, std::size_t begin,
                   std::size_t end) {
  if (axis >= a.rank() || begin >= end || end > a.dim(axis)) {
    throw DimensionError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") invalid for axis " + std::to_string(axis) + " of " +
                         shape_str(a.shape()));
  }
  Shape out_shape = a.shape();
  out_shape[axis] = end - begin;
  const auto split = detail::split_at(a.shape(), axis);
  const std::size_t in_row = a.dim(axis) * split.inner;
  const std::size_t block = (end - begin) * split.inner;
  const std::size_t skip = begin * split.inner;
  Tensor<Real> out(out_shape);
  for (std::size_t o = 0; o < split.outer; ++o) {
    std::copy_n(a.data() + o * in_row + skip, block, out.data() + o * block);
  }
  if (g.wants_grad({&a})) {
    g.record({a}, {out}, [a, out, split, in_row, block, skip]() mutable {
      const Real* d = out.grad().data();
      Real* da = a.ensure_grad().data();
      for (std::size_t o = 0; o < split.outer; ++o) {
        for (std::size_t j = 0; j < block; ++j) da[o * in_row + skip + j] += d[o * block + j];
      }
    });
  }
  return out;
}

/// Row i of the result is row i - offset of the input; rows shifted in are zero.
template <std::floating_point Real>
Tensor<Real> shift_rows(Graph<Real>& g, const Tensor<Real>& a, std::ptrdiff_t offset) {
  if (a.rank() != 2) throw DimensionError("shift_rows: expected a matrix, got " + shape_str(a.shape()));
  const auto rows = static_cast<std::ptrdiff_t>(a.dim(0));
  const std::size_t cols = a.dim(1);
  Tensor<Real> out(a.shape());
  for (std::ptrdiff_t i = 0; i < rows; ++i) {
    const std::ptrdiff_t src = i - offset;
    if (src >= 0 && src < rows) std::copy_n(a.data() + src * cols, cols, out.data() + i * cols);
  }
  if (g.wants_grad({&a})) {
    g.record({a}, {out}, [a, out, offset, rows, cols]() mutable {
      const Real* d = out.grad().data();
      Real* da = a.ensure_grad().data();
      for (std::ptrdiff_t i = 0; i < rows; ++i) {
        const std::ptrdiff_t src = i - offset;
        if (src < 0 || src >= rows) continue;
        for (std::size_t j = 0; j < cols; ++j) da[src * cols + j] += d[i * cols + j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// finite-difference gradient checking

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t skipped = 0;  // stencil crossed a kink
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

/// Compares reverse-mode gradients of f against central differences for every
/// coordinate of every tensor in `inputs`. f builds its computation on the
/// graph it is handed and returns a scalar.
template <typename F>
GradCheckResult grad_check(F&& f, std::vector<Tensor<double>> inputs, double eps = 1e-3) {
  if (!(eps > 0.0)) throw ParameterError("grad_check: eps must be positive");
  auto evaluate = [&](Graph<double>& g) {
    Tensor<double> y = f(g);
    if (!y.defined() || y.size() != 1) throw ContractError("grad_check: f must return a scalar");
    const double v = y.item();
    if (!std::isfinite(v)) throw EvaluationError("grad_check: f(x) is not finite");
    return std::pair{y, v};
  };

  std::vector<bool> saved_flags;
  for (auto& x : inputs) {
    saved_flags.push_back(x.requires_grad());
    x.set_requires_grad(true);
    x.ensure_grad();
    x.zero_grad();
  }
  Graph<double> g;
  g.track_branches(true);
  auto [loss, value] = evaluate(g);
  (void)value;
  g.backward(loss);
  const std::uint64_t reference = g.branch_signature();

  GradCheckResult result;
  for (auto& x : inputs) {
    std::vector<double> analytic(x.grad().begin(), x.grad().end());
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double orig = x[i];
      x[i] = orig + eps;
      Graph<double> gp = Graph<double>::inference();
      gp.track_branches(true);
      const double fp = evaluate(gp).second;
      x[i] = orig - eps;
      Graph<double> gm = Graph<double>::inference();
      gm.track_branches(true);
      const double fm = evaluate(gm).second;
      x[i] = orig;
      ++result.coordinates;
      if (gp.branch_signature() != reference || gm.branch_signature() != reference) {
        ++result.skipped;
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * eps);
      const double err = relative_error(analytic[i], numeric);
      if (err >= result.max_relative_error) {
        result.max_relative_error = err;
        result.worst_analytic = analytic[i];
        result.worst_numeric = numeric;
      }
    }
  }
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    inputs[i].clear_grad();
    inputs[i].set_requires_grad(saved_flags[i]);
  }
  return result;
}

/// Single-input form: f(graph, x) -> scalar.
template <typename F>
GradCheckResult grad_check(F&& f, Tensor<double> x, double eps = 1e-3) {
  return grad_check([&](Graph<double>& g) { return f(g, x); }, std::vector<Tensor<double>>{x}, eps);
}

}  // namespace metaphor
