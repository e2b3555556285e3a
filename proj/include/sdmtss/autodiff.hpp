// Copyright 2026 The sdmtss Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

// Reverse-mode differentiation over a fixed set of shaped-array operations.
//
// A Tape records each operation as a node holding its forward value and an
// adjoint rule. Nodes are appended in evaluation order, so the tape is
// already topologically sorted and backward() is a single reverse sweep.
// Parameters live outside the tape in Tensor objects; Tape::param() copies
// one in and backward() adds the adjoint into Tensor::grad.
//
// Layout is row-major. Binary element-wise ops broadcast size-1 axes, and a
// lower-rank operand is treated as having leading size-1 axes.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "sdmtss/error.hpp"

namespace sdmtss::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

/// Shaped array that owns its values and, for trainable tensors, a gradient
/// accumulator of the same length.
struct Tensor {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;
  bool requires_grad = false;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> v, bool trainable = false)
      : shape(std::move(s)), values(std::move(v)), requires_grad(trainable) {
    if (values.size() != numel(shape))
      throw TensorError("tensor of shape " + to_string(shape) + " given " +
                        std::to_string(values.size()) + " values");
    for (auto e : shape)
      if (e == 0) throw TensorError("tensor extents must be positive");
  }
  static Tensor zeros(Shape s, bool trainable = false) {
    const auto n = numel(s);
    return Tensor(std::move(s), std::vector<double>(n, 0.0), trainable);
  }

  std::size_t size() const { return values.size(); }
  void zero_grad() { grad.assign(values.size(), 0.0); }
};

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Shape& shape() const;
  std::span<const double> values() const;
  std::size_t size() const { return values().size(); }
  double item() const;
  std::size_t dim(std::size_t axis) const { return shape().at(axis); }
};

class Tape {
 public:
  struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    Tensor* sink = nullptr;
    std::function<void(Tape&, std::size_t)> backward;
    const char* op = "";
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Shape shape, std::vector<double> values) {
    if (values.size() != numel(shape))
      throw TensorError("constant of shape " + to_string(shape) + " given " +
                        std::to_string(values.size()) + " values");
    return push("constant", std::move(shape), std::move(values), false, nullptr);
  }
  Var constant(const Tensor& t) { return constant(t.shape, t.values); }

  /// Leaf for a trainable tensor; backward() accumulates into t.grad.
  Var param(Tensor& t) {
    Node n;
    n.shape = t.shape;
    n.value = t.values;
    n.requires_grad = t.requires_grad;
    n.sink = t.requires_grad ? &t : nullptr;
    n.op = "param";
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  /// Records an op result. `rule` runs during backward with the node id; it
  /// is dropped when no input needs a gradient.
  Var push(const char* op, Shape shape, std::vector<double> value, bool requires_grad,
           std::function<void(Tape&, std::size_t)> rule) {
    for (double v : value)
      if (!std::isfinite(v))
        throw TensorError(std::string("op '") + op + "' (node " +
                          std::to_string(nodes_.size()) + ") produced a non-finite value");
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(rule);
    n.op = op;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  const Node& node(std::size_t id) const { return nodes_[id]; }
  const std::vector<double>& value(std::size_t id) const { return nodes_[id].value; }
  const Shape& shape(std::size_t id) const { return nodes_[id].shape; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Adjoint buffer of a node, zero-filled on first access.
  std::vector<double>& grad(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
  }
  const std::vector<double>& grad_or_empty(std::size_t id) const { return nodes_[id].grad; }

  /// Reverse sweep from a scalar root (seed 1), then flush into parameters.
  void backward(Var root) {
    if (root.tape != this) throw TensorError("backward on a foreign tape");
    if (nodes_[root.id].value.size() != 1)
      throw TensorError("backward needs a scalar root, got " +
                        to_string(nodes_[root.id].shape));
    grad(root.id)[0] += 1.0;
    for (std::size_t i = root.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (n.grad.empty() || !n.requires_grad) continue;
      if (n.backward) n.backward(*this, i);
      if (n.sink) {
        auto& g = n.sink->grad;
        if (g.size() != n.grad.size()) g.assign(n.grad.size(), 0.0);
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k];
      }
    }
  }

  // Hash of every ReLU activity pattern recorded so far. Finite-difference
  // checks compare it between perturbed evaluations to detect kink crossings.
  std::uint64_t kink_signature() const { return kinks_; }
  void mix_kink(std::uint64_t h) { kinks_ = (kinks_ ^ h) * 0x100000001b3ULL + 0x9e3779b97f4a7c15ULL; }

 private:
  std::vector<Node> nodes_;
  std::uint64_t kinks_ = 0xcbf29ce484222325ULL;
};

inline const Shape& Var::shape() const { return tape->shape(id); }
inline std::span<const double> Var::values() const { return tape->value(id); }
inline double Var::item() const {
  if (size() != 1) throw TensorError("item() on non-scalar " + to_string(shape()));
  return values()[0];
}

namespace detail {

inline void same_tape(const Var& a, const Var& b) {
  if (a.tape != b.tape || a.tape == nullptr) throw TensorError("operands live on different tapes");
}

inline std::size_t norm_axis(long axis, std::size_t rank) {
  const long r = static_cast<long>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw TensorError("axis out of range");
  return static_cast<std::size_t>(axis);
}

// (outer, extent, inner) split around one axis.
inline std::tuple<std::size_t, std::size_t, std::size_t> split_axis(const Shape& s,
                                                                    std::size_t axis) {
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  return {outer, s[axis], inner};
}

// Broadcast plan: output shape plus per-operand element strides (0 on
// broadcast axes).
struct Broadcast {
  Shape out;
  std::vector<std::size_t> sa, sb;
  bool same = false;
};

inline Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast p;
  if (a == b) {
    p.out = a;
    p.same = true;
    return p;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  Shape pa(rank - a.size(), 1), pb(rank - b.size(), 1);
  pa.insert(pa.end(), a.begin(), a.end());
  pb.insert(pb.end(), b.begin(), b.end());
  p.out.resize(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1)
      throw TensorError(std::string(op) + ": shapes " + to_string(a) + " and " +
                        to_string(b) + " do not broadcast");
    p.out[i] = std::max(pa[i], pb[i]);
  }
  const auto strides = [&](const Shape& s) {
    std::vector<std::size_t> st(rank, 0);
    std::size_t acc = 1;
    for (std::size_t i = rank; i-- > 0;) {
      st[i] = s[i] == 1 ? 0 : acc;
      acc *= s[i];
    }
    return st;
  };
  p.sa = strides(pa);
  p.sb = strides(pb);
  return p;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <typename F>
void for_each_broadcast(const Broadcast& p, F&& f) {
  const std::size_t n = numel(p.out);
  if (p.same) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  const std::size_t rank = p.out.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      ia += p.sa[d];
      ib += p.sb[d];
      if (idx[d] < p.out[d]) break;
      ia -= p.sa[d] * idx[d];
      ib -= p.sb[d] * idx[d];
      idx[d] = 0;
    }
  }
}

template <typename Fwd, typename DA, typename DB>
Var binary(const char* op, Var a, Var b, Fwd fwd, DA da, DB db) {
  same_tape(a, b);
  Tape& t = *a.tape;
  auto plan = plan_broadcast(a.shape(), b.shape(), op);
  std::vector<double> out(numel(plan.out));
  const auto& va = t.value(a.id);
  const auto& vb = t.value(b.id);
  for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
    out[i] = fwd(va[ia], vb[ib]);
  });
  const bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
  Shape shape = plan.out;
  return t.push(op, std::move(shape), std::move(out), rg,
                [a, b, plan = std::move(plan), da, db](Tape& tp, std::size_t self) {
                  const auto& g = tp.grad_or_empty(self);
                  const auto& va = tp.value(a.id);
                  const auto& vb = tp.value(b.id);
                  const bool ga = tp.requires_grad(a.id), gb = tp.requires_grad(b.id);
                  std::vector<double>* gA = ga ? &tp.grad(a.id) : nullptr;
                  std::vector<double>* gB = gb ? &tp.grad(b.id) : nullptr;
                  for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
                    if (gA) (*gA)[ia] += g[i] * da(va[ia], vb[ib]);
                    if (gB) (*gB)[ib] += g[i] * db(va[ia], vb[ib]);
                  });
                });
}

template <typename Fwd, typename Dx>
Var unary(const char* op, Var x, Fwd fwd, Dx dx) {
  Tape& t = *x.tape;
  const auto& v = t.value(x.id);
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = fwd(v[i]);
  return t.push(op, x.shape(), std::move(out), t.requires_grad(x.id),
                [x, dx](Tape& tp, std::size_t self) {
                  const auto& g = tp.grad_or_empty(self);
                  const auto& xv = tp.value(x.id);
                  const auto& yv = tp.value(self);
                  auto& gx = tp.grad(x.id);
                  for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dx(xv[i], yv[i]);
                });
}

}  // namespace detail

// ------------------------------------------------------------ element-wise

inline Var add(Var a, Var b) {
  return detail::binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}
inline Var sub(Var a, Var b) {
  return detail::binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}
inline Var mul(Var a, Var b) {
  return detail::binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}
inline Var div(Var a, Var b) {
  return detail::binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; }, [](double x, double y) { return -x / (y * y); });
}
inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }

inline Var scale(Var x, double c) {
  return detail::unary(
      "scale", x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}
inline Var add_scalar(Var x, double c) {
  return detail::unary(
      "add_scalar", x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}
inline Var operator*(double c, Var x) { return scale(x, c); }

inline Var relu(Var x) {
  Var y = detail::unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
  std::uint64_t h = 0;
  const auto& v = x.tape->value(x.id);
  for (std::size_t i = 0; i < v.size(); ++i)
    if (v[i] > 0.0) h = h * 31 + i + 1;
  x.tape->mix_kink(h);
  return y;
}
inline Var sigmoid(Var x) {
  return detail::unary(
      "sigmoid", x,
      [](double v) {
        return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
      },
      [](double, double y) { return y * (1.0 - y); });
}
inline Var tanh(Var x) {
  return detail::unary(
      "tanh", x, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}
inline Var log(Var x) {
  return detail::unary(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

/// Broadcasts `x` up to `shape` (size-1 and missing leading axes only).
inline Var broadcast_to(Var x, const Shape& shape) {
  Tape& t = *x.tape;
  auto plan = detail::plan_broadcast(shape, x.shape(), "broadcast_to");
  if (plan.out != shape)
    throw TensorError("broadcast_to: " + to_string(x.shape()) + " does not expand to " +
                      to_string(shape));
  std::vector<double> out(numel(shape));
  const auto& v = t.value(x.id);
  detail::for_each_broadcast(plan, [&](std::size_t i, std::size_t, std::size_t ib) {
    out[i] = v[ib];
  });
  return t.push("broadcast_to", shape, std::move(out), t.requires_grad(x.id),
                [x, plan = std::move(plan)](Tape& tp, std::size_t self) {
                  const auto& g = tp.grad_or_empty(self);
                  auto& gx = tp.grad(x.id);
                  detail::for_each_broadcast(plan, [&](std::size_t i, std::size_t, std::size_t ib) {
                    gx[ib] += g[i];
                  });
                });
}

// ------------------------------------------------------------- reductions

/// Sum over one axis; the axis is kept with extent 1.
inline Var sum(Var x, long axis) {
  Tape& t = *x.tape;
  const std::size_t ax = detail::norm_axis(axis, x.shape().size());
  const auto [outer, n, inner] = detail::split_axis(x.shape(), ax);
  Shape s = x.shape();
  s[ax] = 1;
  const auto& v = t.value(x.id);
  std::vector<double> out(outer * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += v[(o * n + k) * inner + i];
  return t.push("sum", std::move(s), std::move(out), t.requires_grad(x.id),
                [x, outer, n, inner](Tape& tp, std::size_t self) {
                  const auto& g = tp.grad_or_empty(self);
                  auto& gx = tp.grad(x.id);
                  for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t k = 0; k < n; ++k)
                      for (std::size_t i = 0; i < inner; ++i)
                        gx[(o * n + k) * inner + i] += g[o * inner + i];
                });
}

inline Var mean(Var x, long axis) {
  const std::size_t ax = detail::norm_axis(axis, x.shape().size());
  return scale(sum(x, axis), 1.0 / static_cast<double>(x.shape()[ax]));
}

/// Sum of every element, as a [1] tensor.
inline Var sum_all(Var x) {
  Tape& t = *x.tape;
  const auto& v = t.value(x.id);
  double acc = 0.0;
  for (double e : v) acc += e;
  return t.push("sum_all", Shape{1}, {acc}, t.requires_grad(x.id), [x](Tape& tp, std::size_t self) {
    const double g = tp.grad_or_empty(self)[0];
    for (auto& e : tp.grad(x.id)) e += g;
  });
}

/// Euclidean norm over the last axis, kept with extent 1.
inline Var l2_norm_last(Var x) {
  Tape& t = *x.tape;
  const auto& s = x.shape();
  const std::size_t n = s.back();
  const std::size_t rows = x.size() / n;
  Shape os = s;
  os.back() = 1;
  const auto& v = t.value(x.id);
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t k = 0; k < n; ++k) acc += v[r * n + k] * v[r * n + k];
    out[r] = std::sqrt(acc);
  }
  return t.push("l2_norm", std::move(os), std::move(out), t.requires_grad(x.id),
                [x, rows, n](Tape& tp, std::size_t self) {
                  const auto& g = tp.grad_or_empty(self);
                  const auto& y = tp.value(self);
                  const auto& xv = tp.value(x.id);
                  auto& gx = tp.grad(x.id);
                  for (std::size_t r = 0; r < rows; ++r) {
                    if (y[r] == 0.0) continue;
                    const double c = g[r] / y[r];
                    for (std::size_t k = 0; k < n; ++k) gx[r * n + k] += c * xv[r * n + k];
                  }
                });
}

// ------------------------------------------------------ softmax family

/// Softmax along `axis`, with max subtraction.
inline Var softmax(Var x, long axis) {
  Tape& t = *x.tape;
  const std::size_t ax = detail::norm_axis(axis, x.shape().size());
  const auto [outer, n, inner] = detail::split_axis(x.shape(), ax);
  const auto& v = t.value(x.id);
  std::vector<double> out(v.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      double mx = v[base];
      for (std::size_t k = 1; k < n; ++k) mx = std::max(mx, v[base + k * inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < n; ++k) z += out[base + k * inner] = std::exp(v[base + k * inner] - mx);
      for (std::size_t k = 0; k < n; ++k) out[base + k * inner] /= z;
    }
  return t.push("softmax", x.shape(), std::move(out), t.requires_grad(x.id),
                [x, outer, n, inner](Tape& tp, std::size_t self) {
                  const auto& g = tp.grad_or_empty(self);
                  const auto& y = tp.value(self);
                  auto& gx = tp.grad(x.id);
                  for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t i = 0; i < inner; ++i) {
                      const std::size_t base = o * n * inner + i;
                      double dot = 0.0;
                      for (std::size_t k = 0; k < n; ++k) dot += g[base + k * inner] * y[base + k * inner];
                      for (std::size_t k = 0; k < n; ++k) {
                        const std::size_t j = base + k * inner;
                        gx[j] += y[j] * (g[j] - dot);
                      }
                    }
                });
}

inline Var log_softmax(Var x, long axis) {
  Tape& t = *x.tape;
  const std::size_t ax = detail::norm_axis(axis, x.shape().size());
  const auto [outer, n, inner] = detail::split_axis(x.shape(), ax);
  const auto& v = t.value(x.id);
  std::vector<double> out(v.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      double mx = v[base];
      for (std::size_t k = 1; k < n; ++k) mx = std::max(mx, v[base + k * inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < n; ++k) z += std::exp(v[base + k * inner] - mx);
      const double lse = mx + std::log(z);
      for (std::size_t k = 0; k < n; ++k) out[base + k * inner] = v[base + k * inner] - lse;
    }
  return t.push("log_softmax", x.shape(), std::move(out), t.requires_grad(x.id),
                [x, outer, n, inner](Tape& tp, std::size_t self) {
                  const auto& g = tp.grad_or_empty(self);
                  const auto& y = tp.value(self);
                  auto& gx = tp.grad(x.id);
                  for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t i = 0; i < inner; ++i) {
                      const std::size_t base = o * n * inner + i;
                      double gs = 0.0;
                      for (std::size_t k = 0; k < n; ++k) gs += g[base + k * inner];
                      for (std::size_t k = 0; k < n; ++k) {
                        const std::size_t j = base + k * inner;
                        gx[j] += g[j] - std::exp(y[j]) * gs;
                      }
                    }
                });
}

// ------------------------------------------------------------ structural

inline Var reshape(Var x, Shape shape) {
  if (numel(shape) != x.size())
    throw TensorError("reshape " + to_string(x.shape()) + " -> " + to_string(shape));
  Tape& t = *x.tape;
  return t.push("reshape", std::move(shape), t.value(x.id), t.requires_grad(x.id),
                [x](Tape& tp, std::size_t self) {
                  const auto& g = tp.grad_or_empty(self);
                  auto& gx = tp.grad(x.id);
                  for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                });
}

/// Axis permutation: output axis i is input axis perm[i].
inline Var transpose(Var x, const std::vector<std::size_t>& perm) {
  Tape& t = *x.tape;
  const Shape& s = x.shape();
  const std::size_t rank = s.size();
  if (perm.size() != rank) throw TensorError("transpose: permutation rank mismatch");
  std::vector<bool> seen(rank, false);
  for (auto p : perm) {
    if (p >= rank || seen[p]) throw TensorError("transpose: invalid permutation");
    seen[p] = true;
  }
  Shape os(rank);
  for (std::size_t i = 0; i < rank; ++i) os[i] = s[perm[i]];
  std::vector<std::size_t> in_stride(rank), src(rank);
  std::size_t acc = 1;
  for (std::size_t i = rank; i-- > 0;) {
    in_stride[i] = acc;
    acc *= s[i];
  }
  for (std::size_t i = 0; i < rank; ++i) src[i] = in_stride[perm[i]];
  // map[out] = in
  std::vector<std::size_t> map(x.size());
  std::vector<std::size_t> idx(rank, 0);
  std::size_t in = 0;
  for (std::size_t o = 0; o < map.size(); ++o) {
    map[o] = in;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      in += src[d];
      if (idx[d] < os[d]) break;
      in -= src[d] * idx[d];
      idx[d] = 0;
    }
  }
  const auto& v = t.value(x.id);
  std::vector<double> out(v.size());
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = v[map[o]];
  return t.push("transpose", std::move(os), std::move(out), t.requires_grad(x.id),
                [x, map = std::move(map)](Tape& tp, std::size_t self) {
                  const auto& g = tp.grad_or_empty(self);
                  auto& gx = tp.grad(x.id);
                  for (std::size_t o = 0; o < g.size(); ++o) gx[map[o]] += g[o];
                });
}

inline Var concat(const std::vector<Var>& parts, long axis) {
  if (parts.empty()) throw TensorError("concat of nothing");
  Tape& t = *parts.front().tape;
  const Shape& s0 = parts.front().shape();
  const std::size_t ax = detail::norm_axis(axis, s0.size());
  Shape os = s0;
  os[ax] = 0;
  bool rg = false;
  for (const auto& p : parts) {
    detail::same_tape(parts.front(), p);
    const Shape& s = p.shape();
    if (s.size() != s0.size()) throw TensorError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != ax && s[i] != s0[i])
        throw TensorError("concat: shapes " + to_string(s0) + " and " + to_string(s) +
                          " differ off the concat axis");
    os[ax] += s[ax];
    rg = rg || t.requires_grad(p.id);
  }
  const auto [outer, total, inner] = detail::split_axis(os, ax);
  std::vector<double> out(numel(os));
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    const std::size_t n = p.shape()[ax];
    const auto& v = t.value(p.id);
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(v.begin() + static_cast<long>(o * n * inner), n * inner,
                  out.begin() + static_cast<long>((o * total + offset) * inner));
    offsets.push_back(offset);
    offset += n;
  }
  return t.push("concat", std::move(os), std::move(out), rg,
                [parts, offsets, outer, total, inner, ax](Tape& tp, std::size_t self) {
                  const auto& g = tp.grad_or_empty(self);
                  for (std::size_t k = 0; k < parts.size(); ++k) {
                    if (!tp.requires_grad(parts[k].id)) continue;
                    const std::size_t n = tp.shape(parts[k].id)[ax];
                    auto& gp = tp.grad(parts[k].id);
                    for (std::size_t o = 0; o < outer; ++o)
                      for (std::size_t j = 0; j < n * inner; ++j)
                        gp[o * n * inner + j] += g[(o * total + offsets[k]) * inner + j];
                  }
                });
}

/// Elements [start, start + len) along `axis`.
inline Var slice(Var x, long axis, std::size_t start, std::size_t len) {
  Tape& t = *x.tape;
  const std::size_t ax = detail::norm_axis(axis, x.shape().size());
  const auto [outer, n, inner] = detail::split_axis(x.shape(), ax);
  if (len == 0 || start + len > n)
    throw TensorError("slice [" + std::to_string(start) + ", " + std::to_string(start + len) +
                      ") out of range for " + to_string(x.shape()));
  Shape os = x.shape();
  os[ax] = len;
  const auto& v = t.value(x.id);
  std::vector<double> out(outer * len * inner);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(v.begin() + static_cast<long>((o * n + start) * inner), len * inner,
                out.begin() + static_cast<long>(o * len * inner));
  return t.push("slice", std::move(os), std::move(out), t.requires_grad(x.id),
                [x, outer, n, inner, start, len](Tape& tp, std::size_t self) {
                  const auto& g = tp.grad_or_empty(self);
                  auto& gx = tp.grad(x.id);
                  for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t j = 0; j < len * inner; ++j)
                      gx[(o * n + start) * inner + j] += g[o * len * inner + j];
                });
}

// ----------------------------------------------------------- linear algebra

namespace detail {

// C[m x n] += A[m x k] * B[k x n], all row-major.
inline void gemm_acc(const double* A, const double* B, double* C, std::size_t m,
                     std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* c = C + i * n;
    const double* a = A + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[p];
      if (av == 0.0) continue;
      const double* b = B + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// C[m x n] += A^T * B where A is [k x m], B is [k x n].
inline void gemm_tn_acc(const double* A, const double* B, double* C, std::size_t m,
                        std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* a = A + p * m;
    const double* b = B + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = a[i];
      if (av == 0.0) continue;
      double* c = C + i * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// C[m x n] += A[m x k] * B^T where B is [n x k].
inline void gemm_nt_acc(const double* A, const double* B, double* C, std::size_t m,
                        std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* a = A + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* b = B + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a[p] * b[p];
      C[i * n + j] += acc;
    }
  }
}

}  // namespace detail

/// [m x k] times [k x n].
inline Var matmul(Var a, Var b) {
  detail::same_tape(a, b);
  Tape& t = *a.tape;
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
    throw TensorError("matmul: shapes " + to_string(sa) + " and " + to_string(sb));
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  std::vector<double> out(m * n, 0.0);
  detail::gemm_acc(t.value(a.id).data(), t.value(b.id).data(), out.data(), m, k, n);
  const bool rg = t.requires_grad(a.id) || t.requires_grad(b.id);
  return t.push("matmul", Shape{m, n}, std::move(out), rg, [a, b, m, k, n](Tape& tp, std::size_t self) {
    const auto& g = tp.grad_or_empty(self);
    if (tp.requires_grad(a.id))
      detail::gemm_nt_acc(g.data(), tp.value(b.id).data(), tp.grad(a.id).data(), m, n, k);
    if (tp.requires_grad(b.id))
      detail::gemm_tn_acc(tp.value(a.id).data(), g.data(), tp.grad(b.id).data(), k, m, n);
  });
}

// ------------------------------------------------------------ convolution

struct Conv1dOptions {
  std::size_t stride = 1;
  std::size_t dilation = 1;
  std::size_t pad_left = 0;
  std::size_t pad_right = 0;
  std::size_t groups = 1;
};

inline std::size_t conv1d_output_length(std::size_t length, std::size_t kernel,
                                        const Conv1dOptions& o) {
  const std::size_t span = o.dilation * (kernel - 1) + 1;
  const std::size_t padded = length + o.pad_left + o.pad_right;
  if (padded < span) return 0;
  return (padded - span) / o.stride + 1;
}

namespace detail {

// col[(c*K + k) * T_out + t] = x[c, t*stride + k*dilation - pad_left]
inline void im2col(const double* x, std::size_t channels, std::size_t length, std::size_t K,
                   std::size_t t_out, const Conv1dOptions& o, double* col) {
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t k = 0; k < K; ++k) {
      double* row = col + (c * K + k) * t_out;
      const long long off = static_cast<long long>(k * o.dilation) - static_cast<long long>(o.pad_left);
      for (std::size_t t = 0; t < t_out; ++t) {
        const long long pos = static_cast<long long>(t * o.stride) + off;
        row[t] = (pos >= 0 && pos < static_cast<long long>(length)) ? x[c * length + static_cast<std::size_t>(pos)] : 0.0;
      }
    }
}

inline void col2im_acc(const double* col, std::size_t channels, std::size_t length,
                       std::size_t K, std::size_t t_out, const Conv1dOptions& o, double* x) {
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t k = 0; k < K; ++k) {
      const double* row = col + (c * K + k) * t_out;
      const long long off = static_cast<long long>(k * o.dilation) - static_cast<long long>(o.pad_left);
      for (std::size_t t = 0; t < t_out; ++t) {
        const long long pos = static_cast<long long>(t * o.stride) + off;
        if (pos >= 0 && pos < static_cast<long long>(length))
          x[c * length + static_cast<std::size_t>(pos)] += row[t];
      }
    }
}

}  // namespace detail

/// 1-D convolution of x [C_in, T] with w [C_out, C_in / groups, K] and an
/// optional bias [C_out] (pass bias.tape == nullptr to omit it).
inline Var conv1d(Var x, Var w, Var bias, const Conv1dOptions& o = {}) {
  detail::same_tape(x, w);
  Tape& t = *x.tape;
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  if (sx.size() != 2 || sw.size() != 3)
    throw TensorError("conv1d: input " + to_string(sx) + ", weight " + to_string(sw));
  const std::size_t cin = sx[0], len = sx[1], cout = sw[0], K = sw[2], G = o.groups;
  if (G == 0 || o.stride == 0 || o.dilation == 0 || cin % G || cout % G || sw[1] != cin / G)
    throw TensorError("conv1d: input " + to_string(sx) + " incompatible with weight " +
                      to_string(sw) + " at groups=" + std::to_string(G));
  const bool has_bias = bias.tape != nullptr;
  if (has_bias && (bias.shape() != Shape{cout}))
    throw TensorError("conv1d: bias " + to_string(bias.shape()) + " for " + std::to_string(cout) +
                      " output channels");
  const std::size_t t_out = conv1d_output_length(len, K, o);
  if (t_out == 0) throw TensorError("conv1d: input of length " + std::to_string(len) + " shorter than kernel");
  const std::size_t cin_g = cin / G, cout_g = cout / G, rows = cin_g * K;
  const bool direct = K == 1 && o.stride == 1 && o.pad_left == 0 && o.pad_right == 0;

  const auto& xv = t.value(x.id);
  const auto& wv = t.value(w.id);
  std::vector<double> out(cout * t_out, 0.0);
  if (has_bias) {
    const auto& bv = t.value(bias.id);
    for (std::size_t c = 0; c < cout; ++c) std::fill_n(out.begin() + static_cast<long>(c * t_out), t_out, bv[c]);
  }
  std::vector<double> col(direct ? 0 : rows * t_out);
  for (std::size_t g = 0; g < G; ++g) {
    const double* xg = xv.data() + g * cin_g * len;
    const double* src = xg;
    if (!direct) {
      detail::im2col(xg, cin_g, len, K, t_out, o, col.data());
      src = col.data();
    }
    detail::gemm_acc(wv.data() + g * cout_g * rows, src, out.data() + g * cout_g * t_out, cout_g,
                     rows, t_out);
  }

  const bool rg = t.requires_grad(x.id) || t.requires_grad(w.id) || (has_bias && t.requires_grad(bias.id));
  return t.push("conv1d", Shape{cout, t_out}, std::move(out), rg,
                [=](Tape& tp, std::size_t self) {
                  const auto& g = tp.grad_or_empty(self);
                  const auto& xv = tp.value(x.id);
                  const auto& wv = tp.value(w.id);
                  if (has_bias && tp.requires_grad(bias.id)) {
                    auto& gb = tp.grad(bias.id);
                    for (std::size_t c = 0; c < cout; ++c)
                      for (std::size_t i = 0; i < t_out; ++i) gb[c] += g[c * t_out + i];
                  }
                  const bool gx = tp.requires_grad(x.id), gw = tp.requires_grad(w.id);
                  std::vector<double> col(direct ? 0 : rows * t_out), dcol;
                  for (std::size_t grp = 0; grp < G; ++grp) {
                    const double* xg = xv.data() + grp * cin_g * len;
                    const double* gy = g.data() + grp * cout_g * t_out;
                    const double* wg = wv.data() + grp * cout_g * rows;
                    if (gw) {
                      const double* src = xg;
                      if (!direct) {
                        detail::im2col(xg, cin_g, len, K, t_out, o, col.data());
                        src = col.data();
                      }
                      detail::gemm_nt_acc(gy, src, tp.grad(w.id).data() + grp * cout_g * rows, cout_g,
                                          t_out, rows);
                    }
                    if (gx) {
                      double* gxg = tp.grad(x.id).data() + grp * cin_g * len;
                      if (direct) {
                        detail::gemm_tn_acc(wg, gy, gxg, rows, cout_g, t_out);
                      } else {
                        dcol.assign(rows * t_out, 0.0);
                        detail::gemm_tn_acc(wg, gy, dcol.data(), rows, cout_g, t_out);
                        detail::col2im_acc(dcol.data(), cin_g, len, K, t_out, o, gxg);
                      }
                    }
                  }
                });
}

inline Var conv1d(Var x, Var w, const Conv1dOptions& o = {}) { return conv1d(x, w, Var{}, o); }

/// Transposed 1-D convolution: x [C_in, F], w [C_in, C_out, K], optional
/// bias [C_out]. Output length is (F - 1) * stride + K.
inline Var conv_transpose1d(Var x, Var w, Var bias, std::size_t stride) {
  detail::same_tape(x, w);
  Tape& t = *x.tape;
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  if (sx.size() != 2 || sw.size() != 3 || sw[0] != sx[0] || stride == 0)
    throw TensorError("conv_transpose1d: input " + to_string(sx) + ", weight " + to_string(sw));
  const std::size_t cin = sx[0], F = sx[1], cout = sw[1], K = sw[2];
  const bool has_bias = bias.tape != nullptr;
  if (has_bias && (bias.shape() != Shape{cout}))
    throw TensorError("conv_transpose1d: bias " + to_string(bias.shape()));
  const std::size_t len = (F - 1) * stride + K;
  const std::size_t rows = cout * K;
  Conv1dOptions o;
  o.stride = stride;

  const auto& xv = t.value(x.id);
  const auto& wv = t.value(w.id);
  // col[(o*K + k), f] = sum_i w[i, o, k] * x[i, f], then scatter.
  std::vector<double> col(rows * F, 0.0);
  detail::gemm_tn_acc(wv.data(), xv.data(), col.data(), rows, cin, F);
  std::vector<double> out(cout * len, 0.0);
  detail::col2im_acc(col.data(), cout, len, K, F, o, out.data());
  if (has_bias) {
    const auto& bv = t.value(bias.id);
    for (std::size_t c = 0; c < cout; ++c)
      for (std::size_t i = 0; i < len; ++i) out[c * len + i] += bv[c];
  }
  const bool rg = t.requires_grad(x.id) || t.requires_grad(w.id) || (has_bias && t.requires_grad(bias.id));
  return t.push("conv_transpose1d", Shape{cout, len}, std::move(out), rg,
                [=](Tape& tp, std::size_t self) {
                  const auto& g = tp.grad_or_empty(self);
                  if (has_bias && tp.requires_grad(bias.id)) {
                    auto& gb = tp.grad(bias.id);
                    for (std::size_t c = 0; c < cout; ++c)
                      for (std::size_t i = 0; i < len; ++i) gb[c] += g[c * len + i];
                  }
                  std::vector<double> dcol(rows * F);
                  detail::im2col(g.data(), cout, len, K, F, o, dcol.data());
                  if (tp.requires_grad(x.id))
                    detail::gemm_acc(tp.value(w.id).data(), dcol.data(), tp.grad(x.id).data(), cin, rows, F);
                  if (tp.requires_grad(w.id))
                    detail::gemm_nt_acc(tp.value(x.id).data(), dcol.data(), tp.grad(w.id).data(), cin, F, rows);
                });
}

// ------------------------------------------------------------ normalization

/// Global layer norm of x [C, ...] over all of its elements, with per-channel
/// gain and bias of shape [C, 1].
inline Var global_layer_norm(Var x, Var gamma, Var beta, double eps = 1e-8) {
  Tape& t = *x.tape;
  const Shape& sx = x.shape();
  if (sx.size() < 1 || gamma.shape() != Shape{sx[0], 1} || beta.shape() != Shape{sx[0], 1})
    throw TensorError("global_layer_norm: input " + to_string(sx) + ", gain " +
                      to_string(gamma.shape()) + ", bias " + to_string(beta.shape()));
  const std::size_t C = sx[0], inner = x.size() / C, n = x.size();
  const auto& v = t.value(x.id);
  double mu = 0.0;
  for (double e : v) mu += e;
  mu /= static_cast<double>(n);
  double var = 0.0;
  for (double e : v) var += (e - mu) * (e - mu);
  var /= static_cast<double>(n);
  const double rstd = 1.0 / std::sqrt(var + eps);
  const auto& gv = t.value(gamma.id);
  const auto& bv = t.value(beta.id);
  std::vector<double> out(n);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < inner; ++i)
      out[c * inner + i] = gv[c] * (v[c * inner + i] - mu) * rstd + bv[c];
  const bool rg = t.requires_grad(x.id) || t.requires_grad(gamma.id) || t.requires_grad(beta.id);
  return t.push("global_layer_norm", sx, std::move(out), rg,
                [x, gamma, beta, C, inner, n, mu, rstd](Tape& tp, std::size_t self) {
                  const auto& g = tp.grad_or_empty(self);
                  const auto& v = tp.value(x.id);
                  const auto& gv = tp.value(gamma.id);
                  if (tp.requires_grad(beta.id)) {
                    auto& gb = tp.grad(beta.id);
                    for (std::size_t c = 0; c < C; ++c)
                      for (std::size_t i = 0; i < inner; ++i) gb[c] += g[c * inner + i];
                  }
                  if (tp.requires_grad(gamma.id)) {
                    auto& gg = tp.grad(gamma.id);
                    for (std::size_t c = 0; c < C; ++c)
                      for (std::size_t i = 0; i < inner; ++i)
                        gg[c] += g[c * inner + i] * (v[c * inner + i] - mu) * rstd;
                  }
                  if (tp.requires_grad(x.id)) {
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t c = 0; c < C; ++c)
                      for (std::size_t i = 0; i < inner; ++i) {
                        const double dh = g[c * inner + i] * gv[c];
                        m1 += dh;
                        m2 += dh * (v[c * inner + i] - mu) * rstd;
                      }
                    m1 /= static_cast<double>(n);
                    m2 /= static_cast<double>(n);
                    auto& gx = tp.grad(x.id);
                    for (std::size_t c = 0; c < C; ++c)
                      for (std::size_t i = 0; i < inner; ++i) {
                        const double xh = (v[c * inner + i] - mu) * rstd;
                        gx[c * inner + i] += rstd * (g[c * inner + i] * gv[c] - m1 - xh * m2);
                      }
                  }
                });
}

}  // namespace sdmtss::ad
