#pragma once

// Dense tensor with tape-based reverse-mode differentiation.
//
// Tensors are handles to shared, immutable storage. Only the gradient buffer
// is mutated after construction. Every differentiable primitive appends one
// record to the thread's active Tape; Tape::backward replays the records in
// reverse order, which is a valid reverse topological order because records
// are appended in execution order.

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sparse_detr/errors.hpp"

namespace sdetr {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace detail {
inline std::uint64_t next_tensor_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}
}  // namespace detail

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::uint64_t id = detail::next_tensor_id();

  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : impl_(std::make_shared<TensorImpl<T>>()) {
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }
  static Tensor full(Shape shape, T value) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value));
  }
  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= rank()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
    return impl_->shape[axis];
  }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  const T& operator[](std::size_t i) const { return impl_->data[i]; }
  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  void zero_grad() const { impl_->grad.clear(); }

  /// Direct access for leaf initialisation, optimiser updates and checkpoint loading.
  std::span<T> mutable_data() const { return impl_->data; }
  std::span<T> mutable_grad() const { return impl_->grad_buffer(); }

  /// Copy of the values with no gradient tracking.
  Tensor detach() const { return Tensor(shape(), impl_->data, false); }

  std::uint64_t id() const { return impl_->id; }
  const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

template <typename T>
class TapeScope;

/// Ordered record of primitive applications for one forward pass.
template <typename T>
class Tape {
 public:
  struct Record {
    const char* op;
    std::vector<std::uint64_t> inputs;
    std::uint64_t output;
    std::function<void()> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_; }

  void push(const char* op, std::vector<std::uint64_t> inputs, std::uint64_t output,
            std::function<void()> backward) {
    records_.push_back(Record{op, std::move(inputs), output, std::move(backward)});
  }

  const std::vector<Record>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  void clear() { records_.clear(); }

  /// Populates gradients of every requires_grad tensor reachable from `loss`,
  /// accumulating into existing leaf gradients. The tape is emptied afterwards.
  void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1) {
      throw ContractError("backward requires a scalar loss, got shape " +
                          (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    if (!loss.requires_grad()) throw ContractError("backward: loss is not on the tape");
    auto g = loss.impl()->grad_buffer();
    g[0] += T(1);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->backward();
    records_.clear();
  }

 private:
  friend class TapeScope<T>;
  static inline thread_local Tape* active_ = nullptr;
  std::vector<Record> records_;
};

/// Makes `tape` the active tape of the calling thread for the scope's lifetime.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(Tape<T>::active_) { Tape<T>::active_ = &tape; }
  ~TapeScope() { Tape<T>::active_ = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Runtime multiply-accumulate instrumentation.
struct OpCounter {
  std::uint64_t linear_macs = 0;
  std::uint64_t sampling_slots = 0;  // deformable attention: one per (query, head, level, point)
  std::uint64_t dense_pairs = 0;     // dense attention: one per (query, key)
};

namespace detail {
inline thread_local OpCounter* active_counter = nullptr;
}

class CounterScope {
 public:
  explicit CounterScope(OpCounter& counter) : previous_(detail::active_counter) { detail::active_counter = &counter; }
  ~CounterScope() { detail::active_counter = previous_; }
  CounterScope(const CounterScope&) = delete;
  CounterScope& operator=(const CounterScope&) = delete;

 private:
  OpCounter* previous_;
};

inline OpCounter* active_counter() { return detail::active_counter; }

namespace detail {

template <typename T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) {
  for (const auto* t : inputs)
    if (t && t->defined() && t->requires_grad()) return true;
  return false;
}

/// Registers `fn(output_grad)` as the backward rule of `out` when a tape is
/// active and some input requires a gradient.
template <typename T, typename Fn>
void record(const char* op, std::initializer_list<const Tensor<T>*> inputs, Tensor<T>& out, Fn&& fn) {
  Tape<T>* tape = Tape<T>::active();
  if (!tape || !any_requires_grad<T>(inputs)) return;
  out.impl()->requires_grad = true;
  std::vector<std::uint64_t> ids;
  ids.reserve(inputs.size());
  for (const auto* t : inputs)
    if (t && t->defined()) ids.push_back(t->id());
  tape->push(op, std::move(ids), out.id(),
             [o = out.impl(), f = std::forward<Fn>(fn)]() {
               if (o->grad.empty()) return;
               f(std::span<const T>(o->grad));
             });
}

/// Gradient buffer of an input when it participates in differentiation.
template <typename T>
T* grad_of(const std::shared_ptr<TensorImpl<T>>& impl) {
  return impl && impl->requires_grad ? impl->grad_buffer().data() : nullptr;
}

}  // namespace detail

}  // namespace sdetr
