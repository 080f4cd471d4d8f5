// Copyright 2026 The flashdec Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "flashdec/errors.hpp"
#include "flashdec/tensor.hpp"

namespace flashdec {

template <typename T>
class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid while the
// tape is alive.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, int id) : tape_(tape), id_(id) {}

  bool valid() const noexcept { return tape_ != nullptr; }
  int id() const noexcept { return id_; }
  Tape<T>& tape() const { return *tape_; }
  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::int64_t numel() const { return value().numel(); }

 private:
  Tape<T>* tape_ = nullptr;
  int id_ = -1;
};

// Reverse-mode computation record. Operations append nodes in execution
// order, so node ids are already a topological order; backward walks them
// in reverse and calls each recorded gradient rule once.
template <typename T>
class Tape {
 public:
  // Receives the tape and the id of the node whose output gradient is ready.
  using BackwardFn = std::function<void(Tape&, int)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) {
    return push({std::move(value), {}, false, "constant", {}, nullptr});
  }

  // Leaf that receives a gradient.
  Var<T> parameter(Tensor<T> value) {
    return push({std::move(value), {}, true, "parameter", {}, nullptr});
  }

  Var<T> record(std::string op, Tensor<T> value, std::vector<Var<T>> inputs,
                BackwardFn fn) {
    Node node{std::move(value), {}, false, std::move(op), {}, nullptr};
    for (const auto& in : inputs) {
      if (&in.tape() != this) {
        throw ContractError("operation '" + node.op +
                            "' mixes variables from different tapes");
      }
      node.inputs.push_back(in.id());
      node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
    }
    if (node.requires_grad) node.backward = std::move(fn);
    return push(std::move(node));
  }

  const Tensor<T>& value(int id) const { return nodes_.at(id).value; }
  const std::string& op_name(int id) const { return nodes_.at(id).op; }
  const std::vector<int>& inputs(int id) const { return nodes_.at(id).inputs; }
  bool requires_grad(int id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Gradient buffer of node `id`, zero-initialized on first access.
  Tensor<T>& grad_acc(int id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty() && n.value.numel() > 0) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  const Tensor<T>& grad_of(int id) const { return nodes_.at(id).grad; }

  bool has_grad(const Var<T>& v) const { return !nodes_.at(v.id()).grad.empty(); }

  // Gradient of the last backward pass w.r.t. `v`; zeros if `v` was not
  // reached or does not require a gradient.
  Tensor<T> grad(const Var<T>& v) const {
    const Node& n = nodes_.at(v.id());
    return n.grad.empty() ? Tensor<T>(n.value.shape()) : n.grad;
  }

  void backward(const Var<T>& loss) {
    if (&loss.tape() != this) throw ContractError("loss belongs to another tape");
    if (loss.numel() != 1) {
      throw ContractError("backward requires a scalar loss, got shape " +
                          shape_str(loss.shape()));
    }
    for (auto& n : nodes_) n.grad = Tensor<T>();
    grad_acc(loss.id())[0] = T{1};
    for (int id = loss.id(); id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
      n.backward(*this, id);
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::string op;
    std::vector<int> inputs;
    BackwardFn backward;
  };

  Var<T> push(Node node) {
    nodes_.push_back(std::move(node));
    return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
  }

  // deque keeps references to earlier values stable while recording.
  std::deque<Node> nodes_;
};

namespace detail {

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

// y = f(x) elementwise; `df(x, y)` is dy/dx.
template <typename T, typename F, typename DF>
Var<T> unary(const char* op, const Var<T>& x, F f, DF df) {
  const Tensor<T>& xv = x.value();
  Tensor<T> y(xv.shape());
  for (std::int64_t i = 0; i < xv.numel(); ++i) y[i] = f(xv[i]);
  const int xi = x.id();
  return x.tape().record(op, std::move(y), {x}, [xi, df](Tape<T>& tp, int self) {
    if (!tp.requires_grad(xi)) return;
    const auto& g = tp.grad_of(self);
    const auto& xv = tp.value(xi);
    const auto& yv = tp.value(self);
    auto& gx = tp.grad_acc(xi);
    for (std::int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * df(xv[i], yv[i]);
  });
}

}  // namespace detail

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> y(a.shape());
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = a.value()[i] + b.value()[i];
  const int ai = a.id(), bi = b.id();
  return a.tape().record("add", std::move(y), {a, b}, [ai, bi](Tape<T>& tp, int self) {
    const auto& g = tp.grad_of(self);
    for (int id : {ai, bi}) {
      if (!tp.requires_grad(id)) continue;
      auto& gx = tp.grad_acc(id);
      for (std::int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> y(a.shape());
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = a.value()[i] - b.value()[i];
  const int ai = a.id(), bi = b.id();
  return a.tape().record("sub", std::move(y), {a, b}, [ai, bi](Tape<T>& tp, int self) {
    const auto& g = tp.grad_of(self);
    if (tp.requires_grad(ai)) {
      auto& ga = tp.grad_acc(ai);
      for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    }
    if (tp.requires_grad(bi)) {
      auto& gb = tp.grad_acc(bi);
      for (std::int64_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> y(a.shape());
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = a.value()[i] * b.value()[i];
  const int ai = a.id(), bi = b.id();
  return a.tape().record("mul", std::move(y), {a, b}, [ai, bi](Tape<T>& tp, int self) {
    const auto& g = tp.grad_of(self);
    const auto& av = tp.value(ai);
    const auto& bv = tp.value(bi);
    if (tp.requires_grad(ai)) {
      auto& ga = tp.grad_acc(ai);
      for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tp.requires_grad(bi)) {
      auto& gb = tp.grad_acc(bi);
      for (std::int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "div");
  Tensor<T> y(a.shape());
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = a.value()[i] / b.value()[i];
  const int ai = a.id(), bi = b.id();
  return a.tape().record("div", std::move(y), {a, b}, [ai, bi](Tape<T>& tp, int self) {
    const auto& g = tp.grad_of(self);
    const auto& bv = tp.value(bi);
    const auto& yv = tp.value(self);
    if (tp.requires_grad(ai)) {
      auto& ga = tp.grad_acc(ai);
      for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] / bv[i];
    }
    if (tp.requires_grad(bi)) {
      auto& gb = tp.grad_acc(bi);
      for (std::int64_t i = 0; i < g.numel(); ++i) gb[i] -= g[i] * yv[i] / bv[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T s) {
  return detail::unary<T>("scale", x, [s](T v) { return s * v; },
                          [s](T, T) { return s; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& x, T s) {
  return detail::unary<T>("add_scalar", x, [s](T v) { return v + s; },
                          [](T, T) { return T{1}; });
}

template <typename T>
Var<T> square(const Var<T>& x) {
  return detail::unary<T>("square", x, [](T v) { return v * v; },
                          [](T v, T) { return T{2} * v; });
}

template <typename T>
Var<T> abs(const Var<T>& x) {
  return detail::unary<T>(
      "abs", x, [](T v) { return std::abs(v); },
      [](T v, T) { return v > T{0} ? T{1} : (v < T{0} ? T{-1} : T{0}); });
}

template <typename T>
Var<T> sqrt(const Var<T>& x) {
  return detail::unary<T>("sqrt", x, [](T v) { return std::sqrt(v); },
                          [](T, T y) { return T{0.5} / y; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::unary<T>(
      "sigmoid", x, [](T v) { return T{1} / (T{1} + std::exp(-v)); },
      [](T, T y) { return y * (T{1} - y); });
}

template <typename T>
Var<T> silu(const Var<T>& x) {
  return detail::unary<T>(
      "silu", x, [](T v) { return v / (T{1} + std::exp(-v)); },
      [](T v, T) {
        const T s = T{1} / (T{1} + std::exp(-v));
        return s * (T{1} + v * (T{1} - s));
      });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T acc{0};
  for (auto v : x.value().data()) acc += v;
  const int xi = x.id();
  return x.tape().record("sum", Tensor<T>({1}, acc), {x}, [xi](Tape<T>& tp, int self) {
    if (!tp.requires_grad(xi)) return;
    const T g = tp.grad_of(self)[0];
    auto& gx = tp.grad_acc(xi);
    for (std::int64_t i = 0; i < gx.numel(); ++i) gx[i] += g;
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  if (x.numel() == 0) throw ContractError("mean of an empty tensor");
  return scale(sum(x), T{1} / static_cast<T>(x.numel()));
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> y = x.value().reshaped(std::move(shape));
  const int xi = x.id();
  return x.tape().record("reshape", std::move(y), {x}, [xi](Tape<T>& tp, int self) {
    if (!tp.requires_grad(xi)) return;
    const auto& g = tp.grad_of(self);
    auto& gx = tp.grad_acc(xi);
    for (std::int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
  });
}

// Rows of x along axis 0 at `indices`, in the given order.
template <typename T>
Var<T> select_rows(const Var<T>& x, std::vector<int> indices) {
  const auto& xv = x.value();
  if (xv.rank() == 0) throw DimensionError("select_rows on a rank-0 tensor");
  const std::int64_t rows = xv.dim(0);
  const std::int64_t inner = rows ? xv.numel() / rows : 0;
  for (int r : indices) {
    if (r < 0 || r >= rows) {
      throw DimensionError("select_rows index " + std::to_string(r) +
                           " out of range for " + shape_str(xv.shape()));
    }
  }
  Shape shape = xv.shape();
  shape[0] = static_cast<std::int64_t>(indices.size());
  Tensor<T> y(shape);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    std::copy_n(xv.raw() + indices[k] * inner, inner, y.raw() + k * inner);
  }
  const int xi = x.id();
  return x.tape().record(
      "select_rows", std::move(y), {x},
      [xi, inner, indices = std::move(indices)](Tape<T>& tp, int self) {
        if (!tp.requires_grad(xi)) return;
        const auto& g = tp.grad_of(self);
        auto& gx = tp.grad_acc(xi);
        for (std::size_t k = 0; k < indices.size(); ++k) {
          for (std::int64_t i = 0; i < inner; ++i) {
            gx[indices[k] * inner + i] += g[static_cast<std::int64_t>(k) * inner + i];
          }
        }
      });
}

// Sum of scalars (or equally-shaped tensors).
template <typename T>
Var<T> add_n(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ContractError("add_n of an empty list");
  Var<T> acc = xs.front();
  for (std::size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
  return acc;
}

}  // namespace flashdec
