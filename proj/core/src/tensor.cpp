#include "equiseg/tensor.hpp"

#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace equiseg {

namespace {
std::atomic<bool> g_finite_checks{true};
std::string g_gradient_fault;
}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

void set_finite_checks(bool enabled) { g_finite_checks.store(enabled); }
bool finite_checks_enabled() { return g_finite_checks.load(std::memory_order_relaxed); }

void set_gradient_fault(std::string op_name) { g_gradient_fault = std::move(op_name); }
bool gradient_fault_active(std::string_view op_name) {
  return !g_gradient_fault.empty() && g_gradient_fault == op_name;
}

namespace detail {

template <typename T>
void check_finite(std::span<const T> values, std::string_view where) {
  if (!finite_checks_enabled()) return;
  for (T v : values) {
    if (!std::isfinite(v))
      throw NumericError("non-finite value produced by " + std::string(where));
  }
}

}  // namespace detail

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) {
  for (auto e : shape)
    if (e == 0) throw ShapeError("tensor extents must be positive: " + shape_to_string(shape));
  impl_ = std::make_shared<Impl>();
  impl_->data.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
  detail::check_finite<T>(impl_->data, "tensor construction");
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) {
  for (auto e : shape)
    if (e == 0) throw ShapeError("tensor extents must be positive: " + shape_to_string(shape));
  if (shape_numel(shape) != values.size())
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                     shape_to_string(shape));
  impl_ = std::make_shared<Impl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
  detail::check_finite<T>(impl_->data, "tensor construction");
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= rank())
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_to_string(shape()));
  return impl_->shape[axis];
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (!impl_->is_leaf) throw ShapeError("only leaf tensors expose mutable storage");
  return impl_->data;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_to_string(shape()));
  return impl_->data[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  if (!impl_->is_leaf) throw ShapeError("requires_grad can only be toggled on leaves");
  impl_->requires_grad = on;
  return *this;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(impl_->shape, impl_->data);
}

template <typename T>
bool GradTape<T>::topologically_ordered() const {
  std::unordered_set<const void*> produced;
  for (const auto& rec : records_) {
    for (const auto& in : rec.inputs)
      if (!in->is_leaf && !produced.count(in.get())) return false;
    produced.insert(rec.output.get());
  }
  return true;
}

namespace {
template <typename T>
thread_local GradTape<T>* t_active_tape = nullptr;
}

template <typename T>
TapeScope<T>::TapeScope(GradTape<T>& tape) : previous_(t_active_tape<T>) {
  t_active_tape<T> = &tape;
}

template <typename T>
TapeScope<T>::~TapeScope() {
  t_active_tape<T> = previous_;
}

template <typename T>
GradTape<T>* active_tape() {
  return t_active_tape<T>;
}

template <typename T>
void backward(const Tensor<T>& loss, GradTape<T>& tape) {
  if (loss.numel() != 1)
    throw ShapeError("backward requires a scalar loss, got " + shape_to_string(loss.shape()));
  auto& records = tape.records();
  for (const auto& rec : records) rec.output->grad.clear();
  auto& seed = loss.impl()->grad_buffer();
  seed[0] += T(1);
  for (auto it = records.rbegin(); it != records.rend(); ++it) {
    if (it->output->grad.empty() || !it->backward) continue;
    it->backward(*it->output);
  }
}

namespace detail {

template <typename T>
Tensor<T> record_result(std::string_view op, Shape shape, std::vector<T> values,
                        std::vector<std::shared_ptr<TensorImpl<T>>> inputs,
                        std::function<void(const TensorImpl<T>&)> backward_fn) {
  check_finite<T>(values, op);
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  if (backward_fn) {
    impl->requires_grad = true;
    impl->is_leaf = false;
    auto* tape = active_tape<T>();
    tape->push({op, std::move(inputs), impl, std::move(backward_fn)});
  }
  return Tensor<T>::from_impl(std::move(impl));
}

}  // namespace detail

#define EQUISEG_INSTANTIATE(T)                                                              \
  template class Tensor<T>;                                                                 \
  template class GradTape<T>;                                                               \
  template class TapeScope<T>;                                                              \
  template GradTape<T>* active_tape<T>();                                                   \
  template void backward<T>(const Tensor<T>&, GradTape<T>&);                                \
  template void detail::check_finite<T>(std::span<const T>, std::string_view);              \
  template Tensor<T> detail::record_result<T>(std::string_view, Shape, std::vector<T>,      \
                                              std::vector<std::shared_ptr<TensorImpl<T>>>,  \
                                              std::function<void(const TensorImpl<T>&)>);

EQUISEG_INSTANTIATE(float)
EQUISEG_INSTANTIATE(double)

}  // namespace equiseg
