#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "equiseg/tensor.hpp"

// Differentiable primitives. Spatial feature maps are channels-last
// [H x W x C], which is the same memory layout as a token sequence [L x C]
// with L = H * W in row-major order.
namespace equiseg::ops {

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& x, T factor);

// x[..., d] + bias[d]
template <typename T> Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);
// x[r, d] * w[r]; w has one entry per last-axis row of x.
template <typename T> Tensor<T> mul_rows(const Tensor<T>& x, const Tensor<T>& w);

template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> transpose(const Tensor<T>& a);
// x[L, in] * w[in, out] + b[out]
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

template <typename T> Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-6));
// Exact (erf) form.
template <typename T> Tensor<T> gelu(const Tensor<T>& x);

// x [H, W, Cin], kernel [K, K, Cin, Cout] -> [Ho, Wo, Cout], zero padding.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, std::size_t stride, std::size_t padding);
// x [H, W, C], kernel [K, K, C] -> [Ho, Wo, C]
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& kernel, std::size_t stride,
                           std::size_t padding);

// Stride-1 pooling with same-size output. The average divides by the number of
// in-bounds taps so constant maps stay constant at the border.
template <typename T> Tensor<T> avg_pool_same(const Tensor<T>& x, std::size_t window);
template <typename T> Tensor<T> max_pool_same(const Tensor<T>& x, std::size_t window);

// Half-pixel (align_corners = false) bilinear resize of [H, W] or [H, W, C].
template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, std::size_t out_h, std::size_t out_w);

template <typename T> Tensor<T> concat(std::span<const Tensor<T>> parts, std::size_t axis);
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end);
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
// [C, H, W] -> [H, W, C]
template <typename T> Tensor<T> channels_last(const Tensor<T>& x);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);
// Elementwise mean of same-shaped tensors.
template <typename T> Tensor<T> mean_of(std::span<const Tensor<T>> parts);
template <typename T> Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows);

// Sum over slices along `axis` of t * log(t / s). `t` and `s` must each be
// normalized along `axis` within 1e-6 (1e-4 in single precision). Probabilities are floored at 1e-8
// inside the logarithm. Only `s` receives a gradient.
template <typename T>
Tensor<T> kl_div(const Tensor<T>& t, const Tensor<T>& s, std::size_t axis);

inline constexpr double kKlFloor = 1e-8;

}  // namespace equiseg::ops
