/*
 * Copyright (c) 2026 The cdformer Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cdformer/errors.hpp"
#include "cdformer/runtime.hpp"

namespace cdformer {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// float and double are the storage dtypes; long double only serves as the
/// extended-precision reference inside finite-difference checks.
template <typename T>
concept Scalar = std::same_as<T, float> || std::same_as<T, double> || std::same_as<T, long double>;

template <typename T>
concept StorageScalar = std::same_as<T, float> || std::same_as<T, double>;

enum class DType : std::uint8_t { kFloat32 = 0, kFloat64 = 1 };

template <StorageScalar T>
constexpr DType dtype_of() {
  return std::is_same_v<T, float> ? DType::kFloat32 : DType::kFloat64;
}

/// Integer index array (row-major) used by gathers and neighbor lists.
struct IndexTensor {
  Shape shape;
  std::vector<std::int64_t> data;

  IndexTensor() = default;
  IndexTensor(Shape s, std::vector<std::int64_t> d) : shape(std::move(s)), data(std::move(d)) {
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("index tensor shape " + shape_str(shape) + " does not match " +
                           std::to_string(data.size()) + " elements");
    }
  }
  IndexTensor(std::size_t rows, std::size_t cols) : shape{rows, cols}, data(rows * cols, 0) {}

  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }
  std::int64_t& operator()(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  std::int64_t operator()(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
};

template <Scalar T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Receives the node whose grad is complete and pushes it into parents.
  std::function<void(TensorNode&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }
};

/// Dense row-major array with an optional gradient slot. Copies share the
/// underlying node; recorded tensors are never mutated in place.
template <Scalar T>
class Tensor {
 public:
  using value_type = T;
  using Node = TensorNode<T>;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<Node>()) {
    node_->data.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
    record_allocation(node_->data.size() * sizeof(T));
  }

  Tensor(Shape shape, std::vector<T> data) : node_(std::make_shared<Node>()) {
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("shape " + shape_str(shape) + " holds " + std::to_string(shape_numel(shape)) +
                           " elements, got " + std::to_string(data.size()));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    record_allocation(node_->data.size() * sizeof(T));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  bool defined() const { return static_cast<bool>(node_); }
  explicit operator bool() const { return defined(); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::ptrdiff_t i) const {
    const auto r = static_cast<std::ptrdiff_t>(rank());
    if (i < 0) i += r;
    if (i < 0 || i >= r) throw IndexError("axis " + std::to_string(i) + " out of range for rank " + std::to_string(r));
    return node_->shape[static_cast<std::size_t>(i)];
  }
  std::size_t numel() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  T* ptr() { return node_->data.data(); }
  const T* ptr() const { return node_->data.data(); }
  T operator[](std::size_t i) const { return node_->data[i]; }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor with shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    if (!node_->is_leaf()) throw ContractError("requires_grad can only be set on leaf tensors");
    node_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    if (node_->grad.empty()) node_->grad.assign(numel(), T(0));
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }
  void clear_grad() { node_->grad.clear(); }

  /// Same values, no history, no gradient.
  Tensor detach() const { return Tensor(shape(), node_->data); }
  Tensor clone() const { return detach(); }

  const char* op_name() const { return node_->op; }
  const std::shared_ptr<Node>& node() const { return node_; }
  static Tensor from_node(std::shared_ptr<Node> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

template <Scalar T>
void validate_finite(const TensorNode<T>& n) {
  for (std::size_t i = 0; i < n.data.size(); ++i) {
    if (!std::isfinite(n.data[i])) {
      throw NumericError(std::string("non-finite value produced by ") + n.op + " at flat index " + std::to_string(i));
    }
  }
}

/// Grad buffer of a parent, allocated on first use; null if it needs none.
template <Scalar T>
T* grad_of(const std::shared_ptr<TensorNode<T>>& n) {
  if (!n->requires_grad) return nullptr;
  if (n->grad.empty()) n->grad.assign(n->data.size(), T(0));
  return n->grad.data();
}

}  // namespace detail

/// Wraps freshly computed data as an operation output and, when any input
/// requires grad and recording is on, attaches the backward closure.
template <Scalar T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> data, std::initializer_list<Tensor<T>> inputs,
                      std::function<void(TensorNode<T>&)> backward_fn) {
  Tensor<T> out(std::move(shape), std::move(data));
  auto& node = *out.node();
  node.op = op;
  if (validation_mode()) detail::validate_finite(node);
  if (!grad_enabled()) return out;
  bool needs = false;
  for (const auto& in : inputs) needs = needs || (in.defined() && in.requires_grad());
  if (!needs) return out;
  node.requires_grad = true;
  for (const auto& in : inputs) {
    if (in.defined()) node.parents.push_back(in.node());
  }
  node.backward_fn = std::move(backward_fn);
  return out;
}

/// Reverse-mode accumulation from a scalar. Leaf gradients accumulate across
/// calls; intermediate gradients are recomputed on every call.
template <Scalar T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  using NodePtr = TensorNode<T>*;
  std::vector<NodePtr> order;
  std::unordered_set<NodePtr> seen;
  // iterative post-order DFS
  std::vector<std::pair<NodePtr, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      NodePtr p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (NodePtr n : order) {
    if (!n->is_leaf()) n->grad.assign(n->data.size(), T(0));
  }
  NodePtr root = loss.node().get();
  if (!root->requires_grad) return;
  if (root->grad.empty()) root->grad.assign(1, T(0));
  root->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodePtr n = *it;
    if (!n->is_leaf()) n->backward_fn(*n);
  }
  for (NodePtr n : order) {
    if (!n->is_leaf()) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

/// Detached copy converted to another scalar type.
template <Scalar To, Scalar From>
Tensor<To> cast_tensor(const Tensor<From>& t) {
  if (!t.defined()) return Tensor<To>();
  std::vector<To> d(t.data().begin(), t.data().end());
  return Tensor<To>(t.shape(), std::move(d));
}

}  // namespace cdformer
