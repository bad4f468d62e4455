// Copyright 2026 The grle Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace grle {

using Shape = std::vector<std::size_t>;

/// Raised when tensor shapes do not agree with an operation's contract.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an input violates a documented precondition.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a computation produces or receives non-finite values.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// Live/peak element counters over every tensor buffer (data and grad).
namespace memory {

struct Stats {
  std::int64_t live = 0;
  std::int64_t peak = 0;
};

namespace detail {
inline std::atomic<std::int64_t> live{0};
inline std::atomic<std::int64_t> peak{0};
}  // namespace detail

inline void on_alloc(std::size_t n) {
  const auto now = detail::live.fetch_add(static_cast<std::int64_t>(n), std::memory_order_relaxed) +
                   static_cast<std::int64_t>(n);
  auto prev = detail::peak.load(std::memory_order_relaxed);
  while (now > prev && !detail::peak.compare_exchange_weak(prev, now, std::memory_order_relaxed)) {
  }
}

inline void on_free(std::size_t n) {
  detail::live.fetch_sub(static_cast<std::int64_t>(n), std::memory_order_relaxed);
}

inline Stats stats() { return {detail::live.load(), detail::peak.load()}; }

/// Resets the high-water mark to the current live count.
inline void reset_peak() { detail::peak.store(detail::live.load()); }

}  // namespace memory

template <class T>
class Tape;

template <class T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  Tape<T>* tape = nullptr;  // producing tape, null for leaves
  std::size_t node = std::numeric_limits<std::size_t>::max();

  TensorImpl(Shape s, std::vector<T> d, bool rg)
      : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {
    memory::on_alloc(data.size());
  }
  TensorImpl(const TensorImpl&) = delete;
  TensorImpl& operator=(const TensorImpl&) = delete;
  ~TensorImpl() { memory::on_free(data.size() + grad.size()); }

  std::vector<T>& grad_buffer() {
    if (grad.empty() && !data.empty()) {
      grad.assign(data.size(), T(0));
      memory::on_alloc(grad.size());
    }
    return grad;
  }

  bool is_leaf() const { return tape == nullptr; }
};

/// Dense row-major tensor with shared storage. Copies alias the same buffer;
/// use clone() or detach() for a deep copy.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false) {
    check_shape(shape);
    const auto n = shape_numel(shape);
    impl_ = std::make_shared<TensorImpl<T>>(std::move(shape), std::vector<T>(n, fill), requires_grad);
  }

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false) {
    check_shape(shape);
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("tensor shape " + shape_str(shape) + " holds " +
                           std::to_string(shape_numel(shape)) + " elements, got " +
                           std::to_string(data.size()));
    }
    impl_ = std::make_shared<TensorImpl<T>>(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  T& operator[](std::size_t i) { return impl_->data[i]; }
  const T& operator[](std::size_t i) const { return impl_->data[i]; }

  T item() const {
    if (numel() != 1) {
      throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    }
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }

  /// Disabling gradients also drops any accumulated gradient.
  void set_requires_grad(bool on) {
    impl_->requires_grad = on;
    if (!on) {
      memory::on_free(impl_->grad.size());
      impl_->grad.clear();
      impl_->grad.shrink_to_fit();
    }
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> mutable_grad() { return impl_->grad_buffer(); }

  void zero_grad() { std::fill(impl_->grad.begin(), impl_->grad.end(), T(0)); }

  /// Deep copy with no gradient and no tape linkage.
  Tensor detach() const { return Tensor(shape(), impl_->data, false); }

  Tensor clone() const { return Tensor(shape(), impl_->data, requires_grad()); }

  bool is_leaf() const { return impl_->is_leaf(); }
  Tape<T>* tape() const { return impl_->tape; }

  const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }

 private:
  static void check_shape(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor shape must have at least one axis");
    for (auto d : shape) {
      if (d == 0) throw DimensionError("tensor shape " + shape_str(shape) + " has a zero extent");
    }
  }

  std::shared_ptr<TensorImpl<T>> impl_;
};

/// Ordered record of primitive applications. Nodes are appended as operations
/// execute, so insertion order is a topological order of the graph.
template <class T>
class Tape {
 public:
  using Impl = std::shared_ptr<TensorImpl<T>>;

  struct Node {
    std::string_view op;
    std::vector<Impl> inputs;
    Impl output;
    std::function<void()> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape() { reset(); }

  void record(std::string_view op, std::vector<Impl> inputs, const Impl& output,
              std::function<void()> backward) {
    output->requires_grad = true;
    output->tape = this;
    output->node = nodes_.size();
    nodes_.push_back(Node{op, std::move(inputs), output, std::move(backward)});
  }

  /// Populates grad slots of every requires_grad tensor reachable from `loss`.
  /// Intermediate gradients are cleared first, so calling this twice without
  /// reset() adds the same gradient to the leaves twice.
  void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1) {
      throw DimensionError("backward() needs a scalar loss, got " +
                           (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    }
    const auto& root = loss.impl();
    if (!root->requires_grad) {
      throw ValidationError("backward() on a loss that is detached from any tape");
    }
    if (root->tape != nullptr && root->tape != this) {
      throw ValidationError("backward() on a loss recorded by a different tape");
    }
    for (auto& node : nodes_) {
      std::fill(node.output->grad.begin(), node.output->grad.end(), T(0));
    }
    root->grad_buffer()[0] += T(1);
    if (root->tape == nullptr) return;  // the loss is itself a leaf
    for (std::size_t i = root->node + 1; i-- > 0;) {
      auto& node = nodes_[i];
      if (node.output->grad.empty()) continue;
      node.backward();
    }
  }

  /// Releases every recorded node and unlinks their outputs from this tape.
  void reset() {
    for (auto& node : nodes_) {
      node.output->tape = nullptr;
      node.output->node = std::numeric_limits<std::size_t>::max();
    }
    nodes_.clear();
  }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_.at(i); }

 private:
  std::vector<Node> nodes_;
};

namespace detail {
template <class T>
inline thread_local Tape<T>* active_tape = nullptr;
}  // namespace detail

template <class T>
Tape<T>* active_tape() {
  return detail::active_tape<T>;
}

/// Routes operations on this thread to `tape` for the scope's lifetime.
/// A null tape disables recording (gradient-free evaluation).
template <class T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>* tape) : prev_(detail::active_tape<T>) { detail::active_tape<T> = tape; }
  ~TapeScope() { detail::active_tape<T> = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

template <class T>
class NoGradScope : public TapeScope<T> {
 public:
  NoGradScope() : TapeScope<T>(nullptr) {}
};

/// Runs backward on the tape that recorded `loss`.
template <class T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw DimensionError("backward() needs a scalar loss");
  }
  if (!loss.requires_grad()) {
    throw ValidationError("backward() on a loss that is detached from any tape");
  }
  if (loss.tape() == nullptr) {
    loss.impl()->grad_buffer()[0] += T(1);
    return;
  }
  loss.tape()->backward(loss);
}

}  // namespace grle
