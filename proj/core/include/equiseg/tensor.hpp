#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "equiseg/errors.hpp"

namespace equiseg {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

// Finite-value checks at operation boundaries. On by default; the training
// profile may switch them off for speed.
void set_finite_checks(bool enabled);
bool finite_checks_enabled();

// Test hook: when set, the backward rule of the named primitive is scaled by
// a wrong factor so gradient verification can be shown to catch it.
void set_gradient_fault(std::string op_name);
bool gradient_fault_active(std::string_view op_name);

namespace detail {

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

template <typename T>
void check_finite(std::span<const T> values, std::string_view where);

}  // namespace detail

/// Dense row-major array with optional gradient tracking.
///
/// A Tensor is a cheap handle; copies share storage. Values are fixed at
/// construction. Only leaves (parameters, inputs) expose mutable storage, which
/// optimizers and finite-difference checks use to update them in place.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Impl = detail::TensorImpl<T>;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> values);

  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  std::span<T> mutable_data();
  T item() const;
  T operator[](std::size_t flat_index) const { return impl_->data[flat_index]; }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const { return impl_->is_leaf; }
  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  // Same values, no gradient tracking, fresh storage.
  Tensor detach() const;

  const void* id() const { return impl_.get(); }
  const std::shared_ptr<Impl>& impl() const { return impl_; }
  static Tensor from_impl(std::shared_ptr<Impl> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
  }

 private:
  std::shared_ptr<Impl> impl_;
};

/// Ordered record of primitive operations executed while a TapeScope is
/// active. Results are appended after their operands, so a reverse sweep is a
/// valid topological order.
template <typename T>
class GradTape {
 public:
  using ImplPtr = std::shared_ptr<detail::TensorImpl<T>>;

  struct Record {
    std::string_view op;
    std::vector<ImplPtr> inputs;
    ImplPtr output;
    // Receives the result (values and incoming gradient).
    std::function<void(const detail::TensorImpl<T>& out)> backward;
  };

  void push(Record record) { records_.push_back(std::move(record)); }
  std::size_t size() const { return records_.size(); }
  const std::vector<Record>& records() const { return records_; }
  void clear() { records_.clear(); }

  // True when every operand produced on this tape is recorded before its use.
  bool topologically_ordered() const;

 private:
  std::vector<Record> records_;
};

/// Makes `tape` the recording target for the current thread.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(GradTape<T>& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradTape<T>* previous_;
};

template <typename T>
GradTape<T>* active_tape();

/// Reverse sweep from a scalar loss. Leaf gradients accumulate across calls;
/// intermediate gradients are reset on every call.
template <typename T>
void backward(const Tensor<T>& loss, GradTape<T>& tape);

namespace detail {

// Builds the result of a primitive and records it on the active tape when any
// operand requires a gradient. `make_backward` is only invoked when recording.
template <typename T, typename MakeBackward>
Tensor<T> make_result(std::string_view op, Shape shape, std::vector<T> values,
                      std::initializer_list<const Tensor<T>*> inputs,
                      MakeBackward&& make_backward);

template <typename T>
Tensor<T> record_result(std::string_view op, Shape shape, std::vector<T> values,
                        std::vector<std::shared_ptr<TensorImpl<T>>> inputs,
                        std::function<void(const TensorImpl<T>&)> backward_fn);

template <typename T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) {
  for (const auto* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

// Accumulates into `impl`'s gradient when it participates in differentiation.
template <typename T, typename Fn>
void accumulate(TensorImpl<T>& impl, Fn&& fn) {
  if (!impl.requires_grad) return;
  fn(impl.grad_buffer());
}

template <typename T, typename MakeBackward>
Tensor<T> make_result(std::string_view op, Shape shape, std::vector<T> values,
                      std::initializer_list<const Tensor<T>*> inputs,
                      MakeBackward&& make_backward) {
  if (active_tape<T>() != nullptr && any_requires_grad<T>(inputs)) {
    std::vector<std::shared_ptr<TensorImpl<T>>> impls;
    impls.reserve(inputs.size());
    for (const auto* t : inputs) impls.push_back(t->impl());
    return record_result<T>(op, std::move(shape), std::move(values), std::move(impls),
                            make_backward());
  }
  return record_result<T>(op, std::move(shape), std::move(values), {}, nullptr);
}

}  // namespace detail
}  // namespace equiseg
