#pragma once

// Dense row-major float64 tensors with reverse-mode automatic differentiation.
//
// A Tensor is a shared handle to a graph node. Operations on tensors that
// require gradients record their inputs and a backward rule on the result;
// `backward(loss)` builds the tape (a topological order of the recorded
// nodes) and replays it in reverse, accumulating into every leaf that
// requires a gradient.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "eagle/errors.hpp"
#include "eagle/rng.hpp"

namespace eagle {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node;
using BackwardFn = std::function<void(Node&)>;

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct AxisSplit {
  std::size_t outer, dim, inner;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

inline std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> st(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) st[i - 1] = st[i] * shape[i];
  return st;
}

}  // namespace detail

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (numel(shape) != values.size())
      throw DimensionError("tensor data length " + std::to_string(values.size()) +
                           " does not match shape " + shape_str(shape));
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = numel(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const std::size_t n = numel(shape);
    return from(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return from({}, {value}, requires_grad);
  }

  static Tensor uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad = false) {
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return from(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor normal(Shape shape, double mean, double stddev, Rng& rng,
                       bool requires_grad = false) {
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = rng.normal(mean, stddev);
    return from(std::move(shape), std::move(v), requires_grad);
  }

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  std::span<double> mutable_data() { return node_->data; }
  std::vector<double> to_vector() const { return node_->data; }
  double operator[](std::size_t i) const { return node_->data[i]; }

  double item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// Copy of the values with no graph attached.
  Tensor detach() const { return from(shape(), node_->data, false); }

  const char* op() const { return node_->op; }
  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                          const char* op, BackwardFn backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->op = op;
  bool track = false;
  if (grad_mode())
    for (const auto& in : inputs) track = track || in.requires_grad();
  if (track) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.node_ptr());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;
  bool same = false;
};

inline Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast p;
  if (a == b) {
    p.out = a;
    p.same = true;
    return p;
  }
  const std::size_t r = std::max(a.size(), b.size());
  p.out.assign(r, 1);
  std::vector<std::size_t> da(r, 1), db(r, 1);
  for (std::size_t i = 0; i < a.size(); ++i) da[r - a.size() + i] = a[i];
  for (std::size_t i = 0; i < b.size(); ++i) db[r - b.size() + i] = b[i];
  for (std::size_t i = 0; i < r; ++i) {
    if (da[i] != db[i] && da[i] != 1 && db[i] != 1)
      throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                           shape_str(b) + " are not broadcastable");
    p.out[i] = std::max(da[i], db[i]);
  }
  const auto sa = strides_of(da);
  const auto sb = strides_of(db);
  p.stride_a.resize(r);
  p.stride_b.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    p.stride_a[i] = da[i] == 1 ? 0 : sa[i];
    p.stride_b[i] = db[i] == 1 ? 0 : sb[i];
  }
  return p;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <class F>
void for_each_broadcast(const Broadcast& p, F&& f) {
  const std::size_t n = numel(p.out);
  if (p.same) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  const std::size_t r = p.out.size();
  if (n == 0) return;
  // Tight loop over the last axis, odometer over the rest.
  const std::size_t last = p.out[r - 1], la = p.stride_a[r - 1], lb = p.stride_b[r - 1];
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; i += last) {
    for (std::size_t j = 0; j < last; ++j) f(i + j, ia + j * la, ib + j * lb);
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      ia += p.stride_a[d];
      ib += p.stride_b[d];
      if (idx[d] < p.out[d]) break;
      ia -= p.stride_a[d] * p.out[d];
      ib -= p.stride_b[d] * p.out[d];
      idx[d] = 0;
    }
  }
}

// Elementwise binary op with broadcasting. `da`/`db` return the partial
// derivative of the output with respect to each operand at (x, y).
template <class Fwd, class DA, class DB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, DA da, DB db) {
  auto plan = plan_broadcast(a.shape(), b.shape(), name);
  std::vector<double> out(numel(plan.out));
  const auto x = a.data();
  const auto y = b.data();
  for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
    out[i] = fwd(x[ia], y[ib]);
  });
  Shape shape = plan.out;
  return make_result(std::move(shape), std::move(out), {a, b}, name,
                     [plan = std::move(plan), da, db](Node& self) {
                       Node& na = *self.inputs[0];
                       Node& nb = *self.inputs[1];
                       const auto& g = self.grad;
                       if (na.requires_grad) {
                         auto& ga = na.grad_buffer();
                         for_each_broadcast(plan, [&](std::size_t i, std::size_t ia,
                                                      std::size_t ib) {
                           ga[ia] += g[i] * da(na.data[ia], nb.data[ib]);
                         });
                       }
                       if (nb.requires_grad) {
                         auto& gb = nb.grad_buffer();
                         for_each_broadcast(plan, [&](std::size_t i, std::size_t ia,
                                                      std::size_t ib) {
                           gb[ib] += g[i] * db(na.data[ia], nb.data[ib]);
                         });
                       }
                     });
}

// Elementwise unary op; `deriv(x, y)` gets the input and output value.
template <class Fwd, class Deriv>
Tensor unary_op(const Tensor& a, const char* name, Fwd fwd, Deriv deriv) {
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fwd(x[i]);
  return make_result(a.shape(), std::move(out), {a}, name, [deriv](Node& self) {
    Node& in = *self.inputs[0];
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] += self.grad[i] * deriv(in.data[i], self.data[i]);
  });
}

inline void check_axis(const Tensor& x, std::size_t axis, const char* op) {
  if (axis >= x.rank())
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for shape " + shape_str(x.shape()));
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using MatrixMap = Eigen::Map<RowMatrix>;

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// [m x k] . [k x n] -> [m x n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                         shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  using namespace detail;
  MatrixMap(out.data(), m, n).noalias() =
      ConstMatrixMap(a.data().data(), m, k) * ConstMatrixMap(b.data().data(), k, n);
  return make_result({m, n}, std::move(out), {a, b}, "matmul", [m, k, n](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    ConstMatrixMap g(self.grad.data(), m, n);
    if (na.requires_grad)
      MatrixMap(na.grad_buffer().data(), m, k).noalias() +=
          g * ConstMatrixMap(nb.data.data(), k, n).transpose();
    if (nb.requires_grad)
      MatrixMap(nb.grad_buffer().data(), k, n).noalias() +=
          ConstMatrixMap(na.data.data(), m, k).transpose() * g;
  });
}

/// Batched product: [B x m x k] . [B x k x n] -> [B x m x n]. A leading
/// batch of 1 on `a` is shared across all batches of `b`.
inline Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(2) != b.dim(1) ||
      (a.dim(0) != b.dim(0) && a.dim(0) != 1))
    throw DimensionError("bmm: cannot multiply " + shape_str(a.shape()) + " by " +
                         shape_str(b.shape()));
  const std::size_t batch = b.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  const bool shared_a = a.dim(0) == 1 && batch != 1;
  std::vector<double> out(batch * m * n, 0.0);
  using namespace detail;
  for (std::size_t i = 0; i < batch; ++i) {
    const double* pa = a.data().data() + (shared_a ? 0 : i * m * k);
    MatrixMap(out.data() + i * m * n, m, n).noalias() =
        ConstMatrixMap(pa, m, k) * ConstMatrixMap(b.data().data() + i * k * n, k, n);
  }
  return make_result({batch, m, n}, std::move(out), {a, b}, "bmm",
                     [batch, m, k, n, shared_a](Node& self) {
                       Node& na = *self.inputs[0];
                       Node& nb = *self.inputs[1];
                       for (std::size_t i = 0; i < batch; ++i) {
                         ConstMatrixMap g(self.grad.data() + i * m * n, m, n);
                         const std::size_t off_a = shared_a ? 0 : i * m * k;
                         if (na.requires_grad)
                           MatrixMap(na.grad_buffer().data() + off_a, m, k).noalias() +=
                               g * ConstMatrixMap(nb.data.data() + i * k * n, k, n).transpose();
                         if (nb.requires_grad)
                           MatrixMap(nb.grad_buffer().data() + i * k * n, k, n).noalias() +=
                               ConstMatrixMap(na.data.data() + off_a, m, k).transpose() * g;
                       }
                     });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; }, [](double x, double y) { return -x / (y * y); });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  return detail::unary_op(
      a, "add_scalar", [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Tensor scale(const Tensor& a, double c) {
  return detail::unary_op(
      a, "scale", [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary_op(
      a, "sigmoid",
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline constexpr double kLeakySlope = 0.01;

inline Tensor leaky_relu(const Tensor& a, double slope = kLeakySlope) {
  return detail::unary_op(
      a, "leaky_relu", [slope](double x) { return x > 0 ? x : slope * x; },
      [slope](double x, double) { return x > 0 ? 1.0 : slope; });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary_op(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  return detail::unary_op(
      a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor square(const Tensor& a) {
  return detail::unary_op(
      a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

/// Elementwise binary cross-entropy on logits against constant targets in
/// [0, 1]: max(x,0) - x*y + log(1 + exp(-|x|)).
inline Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
  if (logits.shape() != targets.shape())
    throw DimensionError("bce_with_logits: logits " + shape_str(logits.shape()) +
                         " vs targets " + shape_str(targets.shape()));
  const auto x = logits.data();
  const auto y = targets.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = std::max(x[i], 0.0) - x[i] * y[i] + std::log1p(std::exp(-std::abs(x[i])));
  std::vector<double> labels(y.begin(), y.end());
  return detail::make_result(
      logits.shape(), std::move(out), {logits}, "bce_with_logits",
      [labels = std::move(labels)](detail::Node& self) {
        detail::Node& in = *self.inputs[0];
        auto& g = in.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double x = in.data[i];
          const double p = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
          g[i] += self.grad[i] * (p - labels[i]);
        }
      });
}

// ---------------------------------------------------------------------------
// Axis operations

/// Exp-normalizes along `axis` after subtracting the axis maximum.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  detail::check_axis(x, axis, "softmax");
  const auto s = detail::split_at(x.shape(), axis);
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.dim * s.inner + i;
      double mx = in[base];
      for (std::size_t d = 1; d < s.dim; ++d) mx = std::max(mx, in[base + d * s.inner]);
      double total = 0.0;
      for (std::size_t d = 0; d < s.dim; ++d) {
        const double e = std::exp(in[base + d * s.inner] - mx);
        out[base + d * s.inner] = e;
        total += e;
      }
      for (std::size_t d = 0; d < s.dim; ++d) out[base + d * s.inner] /= total;
    }
  return detail::make_result(x.shape(), std::move(out), {x}, "softmax", [s](detail::Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    const auto& y = self.data;
    const auto& gy = self.grad;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.dim * s.inner + i;
        double dot = 0.0;
        for (std::size_t d = 0; d < s.dim; ++d) dot += gy[base + d * s.inner] * y[base + d * s.inner];
        for (std::size_t d = 0; d < s.dim; ++d) {
          const std::size_t j = base + d * s.inner;
          g[j] += y[j] * (gy[j] - dot);
        }
      }
  });
}

namespace detail {

inline Shape reduced_shape(const Shape& shape, std::size_t axis, bool keepdim) {
  Shape out = shape;
  if (keepdim)
    out[axis] = 1;
  else
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  return out;
}

// Sum along an axis scaled by `factor` (1 for sum, 1/n for mean).
inline Tensor scaled_sum(const Tensor& x, std::size_t axis, bool keepdim, double factor,
                         const char* op) {
  check_axis(x, axis, op);
  const auto s = split_at(x.shape(), axis);
  if (s.dim == 0) throw DimensionError(std::string(op) + ": empty reduction axis");
  const auto in = x.data();
  std::vector<double> out(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t d = 0; d < s.dim; ++d)
      for (std::size_t i = 0; i < s.inner; ++i)
        out[o * s.inner + i] += in[(o * s.dim + d) * s.inner + i];
  for (auto& v : out) v *= factor;
  return make_result(reduced_shape(x.shape(), axis, keepdim), std::move(out), {x}, op,
                     [s, factor](Node& self) {
                       auto& g = self.inputs[0]->grad_buffer();
                       for (std::size_t o = 0; o < s.outer; ++o)
                         for (std::size_t d = 0; d < s.dim; ++d)
                           for (std::size_t i = 0; i < s.inner; ++i)
                             g[(o * s.dim + d) * s.inner + i] += factor * self.grad[o * s.inner + i];
                     });
}

}  // namespace detail

inline Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return detail::make_result({}, {total}, {x}, "sum", [](detail::Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw DimensionError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

inline Tensor sum(const Tensor& x, std::size_t axis, bool keepdim = false) {
  return detail::scaled_sum(x, axis, keepdim, 1.0, "sum_axis");
}

inline Tensor mean(const Tensor& x, std::size_t axis, bool keepdim = false) {
  detail::check_axis(x, axis, "mean_axis");
  const double n = static_cast<double>(x.dim(axis));
  return detail::scaled_sum(x, axis, keepdim, n > 0 ? 1.0 / n : 0.0, "mean_axis");
}

/// Population variance (divides by the count) along `axis`.
inline Tensor variance(const Tensor& x, std::size_t axis, bool keepdim = false) {
  detail::check_axis(x, axis, "variance");
  const auto s = detail::split_at(x.shape(), axis);
  if (s.dim == 0) throw DimensionError("variance: empty reduction axis");
  const auto in = x.data();
  const double n = static_cast<double>(s.dim);
  std::vector<double> means(s.outer * s.inner, 0.0), out(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      double m = 0.0;
      for (std::size_t d = 0; d < s.dim; ++d) m += in[(o * s.dim + d) * s.inner + i];
      m /= n;
      double v = 0.0;
      for (std::size_t d = 0; d < s.dim; ++d) {
        const double c = in[(o * s.dim + d) * s.inner + i] - m;
        v += c * c;
      }
      means[o * s.inner + i] = m;
      out[o * s.inner + i] = v / n;
    }
  return detail::make_result(
      detail::reduced_shape(x.shape(), axis, keepdim), std::move(out), {x}, "variance",
      [s, n, means = std::move(means)](detail::Node& self) {
        detail::Node& in = *self.inputs[0];
        auto& g = in.grad_buffer();
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t d = 0; d < s.dim; ++d)
            for (std::size_t i = 0; i < s.inner; ++i) {
              const std::size_t j = (o * s.dim + d) * s.inner + i;
              g[j] += 2.0 * (in.data[j] - means[o * s.inner + i]) * self.grad[o * s.inner + i] / n;
            }
      });
}

/// Population variance over all elements.
inline Tensor variance(const Tensor& x) {
  if (x.size() == 0) throw DimensionError("variance: empty tensor");
  return variance(detail::make_result({x.size()}, x.to_vector(), {x}, "flatten",
                                      [](detail::Node& self) {
                                        auto& g = self.inputs[0]->grad_buffer();
                                        for (std::size_t i = 0; i < g.size(); ++i)
                                          g[i] += self.grad[i];
                                      }),
                  0);
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  return detail::make_result(std::move(shape), x.to_vector(), {x}, "reshape",
                             [](detail::Node& self) {
                               auto& g = self.inputs[0]->grad_buffer();
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                             });
}

/// Output axis i is input axis perm[i].
inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  if (perm.size() != r) throw DimensionError("permute: rank mismatch for " + shape_str(x.shape()));
  std::vector<bool> seen(r, false);
  for (auto p : perm) {
    if (p >= r || seen[p]) throw DimensionError("permute: invalid permutation");
    seen[p] = true;
  }
  const auto in_strides = detail::strides_of(x.shape());
  Shape out_shape(r);
  std::vector<std::size_t> src_stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = x.shape()[perm[i]];
    src_stride[i] = in_strides[perm[i]];
  }
  // src_index[i] = input offset of output element i
  const std::size_t n = x.size();
  std::vector<std::size_t> src_index(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t i = 0; i < n; ++i) {
    src_index[i] = off;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      off += src_stride[d];
      if (idx[d] < out_shape[d]) break;
      off -= src_stride[d] * out_shape[d];
      idx[d] = 0;
    }
  }
  const auto in = x.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = in[src_index[i]];
  return detail::make_result(std::move(out_shape), std::move(out), {x}, "permute",
                             [src_index = std::move(src_index)](detail::Node& self) {
                               auto& g = self.inputs[0]->grad_buffer();
                               for (std::size_t i = 0; i < src_index.size(); ++i)
                                 g[src_index[i]] += self.grad[i];
                             });
}

/// Joins tensors along `axis`; all other dimensions must agree.
inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& ref = parts.front().shape();
  detail::check_axis(parts.front(), axis, "concat");
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != ref.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < ref.size(); ++i)
      if (i != axis && p.shape()[i] != ref[i])
        throw DimensionError("concat: " + shape_str(p.shape()) + " vs " + shape_str(ref));
    out_shape[axis] += p.shape()[axis];
  }
  const auto s = detail::split_at(out_shape, axis);
  std::vector<double> out(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t at = 0;
  for (const auto& p : parts) {
    offsets.push_back(at);
    const std::size_t len = p.shape()[axis];
    const auto src = p.data();
    for (std::size_t o = 0; o < s.outer; ++o)
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * len * s.inner), len * s.inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * s.dim + at) * s.inner));
    at += len;
  }
  return detail::make_result(std::move(out_shape), std::move(out), parts, "concat",
                             [s, offsets = std::move(offsets)](detail::Node& self) {
                               for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                                 detail::Node& in = *self.inputs[k];
                                 if (!in.requires_grad) continue;
                                 auto& g = in.grad_buffer();
                                 const std::size_t len = g.size() / (s.outer * s.inner);
                                 for (std::size_t o = 0; o < s.outer; ++o)
                                   for (std::size_t j = 0; j < len * s.inner; ++j)
                                     g[o * len * s.inner + j] +=
                                         self.grad[(o * s.dim + offsets[k]) * s.inner + j];
                               }
                             });
}

inline Tensor stack(const std::vector<Tensor>& parts) {
  std::vector<Tensor> expanded;
  expanded.reserve(parts.size());
  for (const auto& p : parts) {
    Shape sh = p.shape();
    sh.insert(sh.begin(), 1);
    expanded.push_back(reshape(p, std::move(sh)));
  }
  return concat(expanded, 0);
}

/// Slice [start, start+length) along `axis`.
inline Tensor narrow(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  detail::check_axis(x, axis, "narrow");
  if (start + length > x.dim(axis))
    throw DimensionError("narrow: range exceeds axis of " + shape_str(x.shape()));
  const auto s = detail::split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  std::vector<double> out(numel(out_shape));
  const auto in = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(in.begin() + static_cast<std::ptrdiff_t>((o * s.dim + start) * s.inner),
                length * s.inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * length * s.inner));
  return detail::make_result(std::move(out_shape), std::move(out), {x}, "narrow",
                             [s, start, length](detail::Node& self) {
                               auto& g = self.inputs[0]->grad_buffer();
                               for (std::size_t o = 0; o < s.outer; ++o)
                                 for (std::size_t j = 0; j < length * s.inner; ++j)
                                   g[(o * s.dim + start) * s.inner + j] +=
                                       self.grad[o * length * s.inner + j];
                             });
}

/// Gathers slices `index[j]` of `axis`; output axis length is index.size().
inline Tensor index_select(const Tensor& x, std::size_t axis, std::vector<std::size_t> index) {
  detail::check_axis(x, axis, "index_select");
  const auto s = detail::split_at(x.shape(), axis);
  for (auto i : index)
    if (i >= s.dim) throw DimensionError("index_select: index out of range");
  Shape out_shape = x.shape();
  out_shape[axis] = index.size();
  const std::size_t m = index.size();
  std::vector<double> out(s.outer * m * s.inner);
  const auto in = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t j = 0; j < m; ++j)
      std::copy_n(in.begin() + static_cast<std::ptrdiff_t>((o * s.dim + index[j]) * s.inner),
                  s.inner, out.begin() + static_cast<std::ptrdiff_t>((o * m + j) * s.inner));
  return detail::make_result(std::move(out_shape), std::move(out), {x}, "index_select",
                             [s, index = std::move(index)](detail::Node& self) {
                               auto& g = self.inputs[0]->grad_buffer();
                               const std::size_t m = index.size();
                               for (std::size_t o = 0; o < s.outer; ++o)
                                 for (std::size_t j = 0; j < m; ++j)
                                   for (std::size_t i = 0; i < s.inner; ++i)
                                     g[(o * s.dim + index[j]) * s.inner + i] +=
                                         self.grad[(o * m + j) * s.inner + i];
                             });
}

/// Inverse of index_select: sums slice j of `src` into slice index[j] of a
/// zero tensor whose `axis` has length `dim_size`.
/// out[b][p] = <x[b][ia[p]], x[b][ib[p]]> for x of shape B x M x D; the
/// fused form of index_select twice, mul and sum over the last axis.
inline Tensor gather_dot(const Tensor& x, std::vector<std::size_t> ia, std::vector<std::size_t> ib) {
  if (x.rank() != 3) throw DimensionError("gather_dot: expected B x M x D, got " + shape_str(x.shape()));
  if (ia.size() != ib.size()) throw DimensionError("gather_dot: index lists differ in length");
  const std::size_t B = x.dim(0), M = x.dim(1), D = x.dim(2), P = ia.size();
  for (std::size_t p = 0; p < P; ++p)
    if (ia[p] >= M || ib[p] >= M) throw DimensionError("gather_dot: index out of range");
  std::vector<double> out(B * P);
  const double* in = x.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t p = 0; p < P; ++p) {
      const double* ra = in + (b * M + ia[p]) * D;
      const double* rb = in + (b * M + ib[p]) * D;
      double s = 0.0;
      for (std::size_t i = 0; i < D; ++i) s += ra[i] * rb[i];
      out[b * P + p] = s;
    }
  return detail::make_result({B, P}, std::move(out), {x}, "gather_dot",
                             [B, M, D, P, ia = std::move(ia), ib = std::move(ib)](detail::Node& self) {
                               detail::Node& in = *self.inputs[0];
                               auto& g = in.grad_buffer();
                               for (std::size_t b = 0; b < B; ++b)
                                 for (std::size_t p = 0; p < P; ++p) {
                                   const double gp = self.grad[b * P + p];
                                   if (gp == 0.0) continue;
                                   const std::size_t oa = (b * M + ia[p]) * D, ob = (b * M + ib[p]) * D;
                                   for (std::size_t i = 0; i < D; ++i) {
                                     g[oa + i] += gp * in.data[ob + i];
                                     g[ob + i] += gp * in.data[oa + i];
                                   }
                                 }
                             });
}

/// out[b][dst[e]] += w[b][e] * x[b][src[e]] for x of shape B x N x D and
/// w of shape B x E; the fused form of index_select, mul and scatter_add.
inline Tensor edge_aggregate(const Tensor& w, const Tensor& x, std::vector<std::size_t> src,
                             std::vector<std::size_t> dst) {
  if (x.rank() != 3 || w.rank() != 2 || w.dim(0) != x.dim(0) || w.dim(1) != src.size() ||
      src.size() != dst.size())
    throw DimensionError("edge_aggregate: weights " + shape_str(w.shape()) + " do not fit input " +
                         shape_str(x.shape()));
  const std::size_t B = x.dim(0), N = x.dim(1), D = x.dim(2), E = src.size();
  for (std::size_t e = 0; e < E; ++e)
    if (src[e] >= N || dst[e] >= N) throw DimensionError("edge_aggregate: node index out of range");
  std::vector<double> out(B * N * D, 0.0);
  const double* in = x.data().data();
  const double* we = w.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t e = 0; e < E; ++e) {
      const double c = we[b * E + e];
      const double* rs = in + (b * N + src[e]) * D;
      double* rd = out.data() + (b * N + dst[e]) * D;
      for (std::size_t i = 0; i < D; ++i) rd[i] += c * rs[i];
    }
  return detail::make_result(
      {B, N, D}, std::move(out), {w, x}, "edge_aggregate",
      [B, N, D, E, src = std::move(src), dst = std::move(dst)](detail::Node& self) {
        detail::Node& nw = *self.inputs[0];
        detail::Node& nx = *self.inputs[1];
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t e = 0; e < E; ++e) {
            const double* gd = self.grad.data() + (b * N + dst[e]) * D;
            const std::size_t os = (b * N + src[e]) * D;
            if (nw.requires_grad) {
              double s = 0.0;
              for (std::size_t i = 0; i < D; ++i) s += gd[i] * nx.data[os + i];
              nw.grad_buffer()[b * E + e] += s;
            }
            if (nx.requires_grad) {
              auto& gx = nx.grad_buffer();
              const double c = nw.data[b * E + e];
              for (std::size_t i = 0; i < D; ++i) gx[os + i] += c * gd[i];
            }
          }
      });
}

inline Tensor scatter_add(const Tensor& src, std::size_t axis, std::vector<std::size_t> index,
                          std::size_t dim_size) {
  detail::check_axis(src, axis, "scatter_add");
  if (index.size() != src.dim(axis))
    throw DimensionError("scatter_add: index length does not match " + shape_str(src.shape()));
  for (auto i : index)
    if (i >= dim_size) throw DimensionError("scatter_add: index out of range");
  const auto s = detail::split_at(src.shape(), axis);
  Shape out_shape = src.shape();
  out_shape[axis] = dim_size;
  std::vector<double> out(numel(out_shape), 0.0);
  const auto in = src.data();
  const std::size_t m = index.size();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t i = 0; i < s.inner; ++i)
        out[(o * dim_size + index[j]) * s.inner + i] += in[(o * m + j) * s.inner + i];
  return detail::make_result(std::move(out_shape), std::move(out), {src}, "scatter_add",
                             [s, dim_size, index = std::move(index)](detail::Node& self) {
                               auto& g = self.inputs[0]->grad_buffer();
                               const std::size_t m = index.size();
                               for (std::size_t o = 0; o < s.outer; ++o)
                                 for (std::size_t j = 0; j < m; ++j)
                                   for (std::size_t i = 0; i < s.inner; ++i)
                                     g[(o * m + j) * s.inner + i] +=
                                         self.grad[(o * dim_size + index[j]) * s.inner + i];
                             });
}

// ---------------------------------------------------------------------------
// Reverse pass

/// Topologically ordered record of the nodes reachable from a root.
class Tape {
 public:
  static Tape record(const Tensor& root) {
    Tape tape;
    if (!root.requires_grad()) return tape;
    std::unordered_set<const detail::Node*> visited;
    // Iterative post-order DFS: a node is appended after all its inputs.
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{root.node(), 0}};
    visited.insert(root.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        detail::Node* child = node->inputs[next++].get();
        if (child->requires_grad && visited.insert(child).second) stack.push_back({child, 0});
      } else {
        tape.order_.push_back(node);
        stack.pop_back();
      }
    }
    return tape;
  }

  std::size_t size() const noexcept { return order_.size(); }
  const std::vector<detail::Node*>& order() const noexcept { return order_; }

  /// Seeds the last node (the root) with `seed` and replays in reverse.
  void run(double seed = 1.0) const {
    if (order_.empty()) return;
    order_.back()->grad_buffer()[0] += seed;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      detail::Node* node = *it;
      if (!node->backward) continue;
      if (!node->grad.empty()) node->backward(*node);
      node->grad.clear();
      node->grad.shrink_to_fit();
    }
  }

 private:
  std::vector<detail::Node*> order_;
};

/// Accumulates d(loss)/d(leaf) into every leaf reachable from `loss`.
inline void backward(const Tensor& loss) {
  if (loss.size() != 1)
    throw DimensionError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
  Tape::record(loss).run();
}

}  // namespace eagle
