#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "icllab/errors.hpp"

namespace icl {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a backward pass reaches this node
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T{0});
  }
};

/// Dense row-major tensor of rank 1 or 2. Copies share the underlying node,
/// so a Tensor behaves like a handle; values are immutable once an op has
/// produced them, except through `mutable_data()` used by initializers and
/// the optimizer step.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<TensorNode<T>>()) {
    if (shape.empty() || shape.size() > 2) {
      throw DimensionError("tensor rank must be 1 or 2, got " + shape_str(shape));
    }
    for (auto e : shape) {
      if (e == 0) throw DimensionError("tensor extents must be positive: " + shape_str(shape));
    }
    if (values.size() != shape_numel(shape)) {
      throw DimensionError("data length " + std::to_string(values.size()) +
                           " does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T{0}), requires_grad);
  }
  static Tensor full(Shape shape, T value) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value));
  }
  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<T> values,
                       bool requires_grad = false) {
    return Tensor({rows, cols}, std::move(values), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  // Rank-1 tensors are treated as a single row.
  std::size_t rows() const { return rank() == 2 ? node_->shape[0] : 1; }
  std::size_t cols() const { return node_->shape.back(); }

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const T> grad() const {
    if (!has_grad()) throw ContractError("tensor has no gradient buffer");
    return node_->grad;
  }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T{0}); }
  void clear_grad() { node_->grad.clear(); }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  T at(std::size_t i) const { return node_->data.at(i); }
  T at(std::size_t r, std::size_t c) const { return node_->data.at(r * cols() + c); }

  // Deep copy detached from any tape.
  Tensor clone() const { return Tensor(shape(), node_->data, requires_grad()); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(node_->data.begin(), node_->data.end());
    return Tensor<U>(shape(), std::move(out), requires_grad());
  }

  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<TensorNode<T>> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

/// Ordered record of primitive ops for reverse-mode differentiation.
///
/// Ops append entries while a tape is active on the current thread (see
/// TapeGuard). Entries are appended after their inputs exist, so the record
/// is topologically ordered by construction; backward() walks it once in
/// reverse. Independent tapes on different threads do not interact.
template <typename T>
class Tape {
 public:
  struct Entry {
    const char* op;
    std::shared_ptr<TensorNode<T>> output;
    std::function<void()> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_; }

  void record(const char* op, std::shared_ptr<TensorNode<T>> output, std::function<void()> fn) {
    if (consumed_) throw ContractError("tape already consumed by backward()");
    entries_.push_back({op, std::move(output), std::move(fn)});
  }

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }

  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) {
      throw ContractError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
    }
    if (consumed_) throw ContractError("tape already consumed by backward()");
    const auto it = std::find_if(entries_.rbegin(), entries_.rend(),
                                 [&](const Entry& e) { return e.output == loss.node(); });
    if (it == entries_.rend()) throw ContractError("loss was not produced on this tape");
    loss.node()->ensure_grad();
    loss.node()->grad[0] += T{1};
    for (auto e = it; e != entries_.rend(); ++e) {
      if (e->output->grad.empty()) continue;  // not on a path to the loss
      e->backward();
    }
    consumed_ = true;
    // Interior buffers are no longer needed; leaves keep their gradients.
    for (auto& e : entries_) {
      e.output->grad.clear();
      e.output->grad.shrink_to_fit();
    }
    entries_.clear();
  }

 private:
  template <typename U>
  friend class TapeGuard;
  inline static thread_local Tape* active_ = nullptr;
  std::vector<Entry> entries_;
  bool consumed_ = false;
};

/// Makes a tape the active recorder for the current thread for its lifetime.
template <typename T>
class TapeGuard {
 public:
  explicit TapeGuard(Tape<T>& tape) : previous_(Tape<T>::active_) { Tape<T>::active_ = &tape; }
  ~TapeGuard() { Tape<T>::active_ = previous_; }
  TapeGuard(const TapeGuard&) = delete;
  TapeGuard& operator=(const TapeGuard&) = delete;

 private:
  Tape<T>* previous_;
};

}  // namespace icl
