#include "equiseg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace equiseg::ops {

using detail::accumulate;
using detail::make_result;
using detail::TensorImpl;

namespace {

template <typename T>
T fault_factor(std::string_view op) {
  return gradient_fault_active(op) ? T(1.1) : T(1);
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
}

struct Hwc {
  std::size_t h, w, c;
};

template <typename T>
Hwc as_hwc(const Tensor<T>& x, const char* op) {
  if (x.rank() != 3)
    throw ShapeError(std::string(op) + ": expected [H, W, C], got " + shape_to_string(x.shape()));
  return {x.dim(0), x.dim(1), x.dim(2)};
}

// Splits a shape around `axis` into (outer, extent, inner).
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i < axis) s.outer *= shape[i];
    else if (i == axis) s.extent = shape[i];
    else s.inner *= shape[i];
  }
  return s;
}

template <typename T>
std::vector<std::shared_ptr<TensorImpl<T>>> impls_of(std::span<const Tensor<T>> parts) {
  std::vector<std::shared_ptr<TensorImpl<T>>> out;
  out.reserve(parts.size());
  for (const auto& p : parts) out.push_back(p.impl());
  return out;
}

template <typename T>
bool any_grad(std::span<const Tensor<T>> parts) {
  return std::any_of(parts.begin(), parts.end(), [](const Tensor<T>& t) { return t.requires_grad(); });
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return make_result<T>("add", a.shape(), std::move(out), {&a, &b}, [ai = a.impl(), bi = b.impl()] {
    return [ai, bi](const TensorImpl<T>& o) {
      const T f = fault_factor<T>("add");
      accumulate(*ai, [&](auto& g) { for (std::size_t i = 0; i < g.size(); ++i) g[i] += f * o.grad[i]; });
      accumulate(*bi, [&](auto& g) { for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i]; });
    };
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return make_result<T>("sub", a.shape(), std::move(out), {&a, &b}, [ai = a.impl(), bi = b.impl()] {
    return [ai, bi](const TensorImpl<T>& o) {
      accumulate(*ai, [&](auto& g) { for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i]; });
      accumulate(*bi, [&](auto& g) { for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i]; });
    };
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_result<T>("mul", a.shape(), std::move(out), {&a, &b}, [ai = a.impl(), bi = b.impl()] {
    return [ai, bi](const TensorImpl<T>& o) {
      const T f = fault_factor<T>("mul");
      accumulate(*ai, [&](auto& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += f * o.grad[i] * bi->data[i];
      });
      accumulate(*bi, [&](auto& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * ai->data[i];
      });
    };
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.numel());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * factor;
  return make_result<T>("scale", x.shape(), std::move(out), {&x}, [xi = x.impl(), factor] {
    return [xi, factor](const TensorImpl<T>& o) {
      accumulate(*xi, [&](auto& g) { for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * factor; });
    };
  });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  if (x.rank() == 0 || bias.rank() != 1 || bias.dim(0) != x.shape().back())
    throw ShapeError("add_bias: bias " + shape_to_string(bias.shape()) + " does not match last axis of " +
                     shape_to_string(x.shape()));
  const std::size_t d = bias.dim(0), rows = x.numel() / d;
  std::vector<T> out(x.data().begin(), x.data().end());
  auto bv = bias.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] += bv[j];
  return make_result<T>("add_bias", x.shape(), std::move(out), {&x, &bias},
                        [xi = x.impl(), bi = bias.impl(), d, rows] {
    return [xi, bi, d, rows](const TensorImpl<T>& o) {
      accumulate(*xi, [&](auto& g) { for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i]; });
      accumulate(*bi, [&](auto& g) {
        const T f = fault_factor<T>("add_bias");
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) g[j] += f * o.grad[r * d + j];
      });
    };
  });
}

template <typename T>
Tensor<T> mul_rows(const Tensor<T>& x, const Tensor<T>& w) {
  if (x.rank() == 0) throw ShapeError("mul_rows: scalar input");
  const std::size_t d = x.shape().back(), rows = x.numel() / d;
  if (w.numel() != rows)
    throw ShapeError("mul_rows: weight count " + std::to_string(w.numel()) + " does not match " +
                     std::to_string(rows) + " rows");
  std::vector<T> out(x.numel());
  auto xv = x.data(), wv = w.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] * wv[r];
  return make_result<T>("mul_rows", x.shape(), std::move(out), {&x, &w},
                        [xi = x.impl(), wi = w.impl(), d, rows] {
    return [xi, wi, d, rows](const TensorImpl<T>& o) {
      accumulate(*xi, [&](auto& g) {
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) g[r * d + j] += o.grad[r * d + j] * wi->data[r];
      });
      accumulate(*wi, [&](auto& g) {
        const T f = fault_factor<T>("mul_rows");
        for (std::size_t r = 0; r < rows; ++r) {
          T acc = 0;
          for (std::size_t j = 0; j < d; ++j) acc += o.grad[r * d + j] * xi->data[r * d + j];
          g[r] += f * acc;
        }
      });
    };
  });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible extents " + shape_to_string(a.shape()) + " x " +
                     shape_to_string(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T(0));
  const T* av = a.data().data();
  const T* bv = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    T* orow = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = av[i * k + p];
      const T* brow = bv + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  return make_result<T>("matmul", {m, n}, std::move(out), {&a, &b},
                        [ai = a.impl(), bi = b.impl(), m, k, n] {
    return [ai, bi, m, k, n](const TensorImpl<T>& o) {
      const T f = fault_factor<T>("matmul");
      const T* go = o.grad.data();
      accumulate(*ai, [&](auto& g) {
        const T* bv = bi->data.data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            T acc = 0;
            const T* brow = bv + p * n;
            const T* grow = go + i * n;
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            g[i * k + p] += f * acc;
          }
      });
      accumulate(*bi, [&](auto& g) {
        const T* av = ai->data.data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const T aip = av[i * k + p];
            T* grow = g.data() + p * n;
            const T* orow = go + i * n;
            for (std::size_t j = 0; j < n; ++j) grow[j] += aip * orow[j];
          }
      });
    };
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_to_string(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<T> out(m * n);
  auto av = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  return make_result<T>("transpose", {n, m}, std::move(out), {&a}, [ai = a.impl(), m, n] {
    return [ai, m, n](const TensorImpl<T>& o) {
      accumulate(*ai, [&](auto& g) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) g[i * n + j] += o.grad[j * m + i];
      });
    };
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add_bias(matmul(x, w), b);
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank())
    throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_to_string(x.shape()));
  const auto s = split_axis(x.shape(), axis);
  std::vector<T> out(x.numel());
  auto xv = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t e = 0; e < s.extent; ++e) mx = std::max(mx, xv[base + e * s.inner]);
      T total = 0;
      for (std::size_t e = 0; e < s.extent; ++e) {
        const T v = std::exp(xv[base + e * s.inner] - mx);
        out[base + e * s.inner] = v;
        total += v;
      }
      for (std::size_t e = 0; e < s.extent; ++e) out[base + e * s.inner] /= total;
    }
  return make_result<T>("softmax", x.shape(), std::move(out), {&x}, [xi = x.impl(), s] {
    return [xi, s](const TensorImpl<T>& o) {
      const T f = fault_factor<T>("softmax");
      accumulate(*xi, [&](auto& g) {
        for (std::size_t ou = 0; ou < s.outer; ++ou)
          for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = ou * s.extent * s.inner + in;
            T dot = 0;
            for (std::size_t e = 0; e < s.extent; ++e) {
              const std::size_t idx = base + e * s.inner;
              dot += o.grad[idx] * o.data[idx];
            }
            for (std::size_t e = 0; e < s.extent; ++e) {
              const std::size_t idx = base + e * s.inner;
              g[idx] += f * o.data[idx] * (o.grad[idx] - dot);
            }
          }
      });
    };
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  if (x.rank() == 0) throw ShapeError("layer_norm: scalar input");
  const std::size_t d = x.shape().back(), rows = x.numel() / d;
  if (gain.numel() != d || bias.numel() != d)
    throw ShapeError("layer_norm: gain/bias must have " + std::to_string(d) + " entries");
  if (!(eps > T(0))) throw ShapeError("layer_norm: eps must be positive");
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(rows);
  auto xv = x.data(), gv = gain.data(), bv = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= T(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= T(d);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - mu) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  return make_result<T>("layer_norm", x.shape(), std::move(out), {&x, &gain, &bias},
                        [xi = x.impl(), gi = gain.impl(), bi = bias.impl(), xhat = std::move(xhat),
                         inv_std = std::move(inv_std), d, rows]() mutable {
    return [xi, gi, bi, xhat = std::move(xhat), inv_std = std::move(inv_std), d,
            rows](const TensorImpl<T>& o) {
      const T f = fault_factor<T>("layer_norm");
      accumulate(*xi, [&](auto& g) {
        for (std::size_t r = 0; r < rows; ++r) {
          T mean_dh = 0, mean_dh_h = 0;
          for (std::size_t j = 0; j < d; ++j) {
            const T dh = o.grad[r * d + j] * gi->data[j];
            mean_dh += dh;
            mean_dh_h += dh * xhat[r * d + j];
          }
          mean_dh /= T(d);
          mean_dh_h /= T(d);
          for (std::size_t j = 0; j < d; ++j) {
            const T dh = o.grad[r * d + j] * gi->data[j];
            g[r * d + j] += f * inv_std[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
          }
        }
      });
      accumulate(*gi, [&](auto& g) {
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) g[j] += o.grad[r * d + j] * xhat[r * d + j];
      });
      accumulate(*bi, [&](auto& g) {
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) g[j] += o.grad[r * d + j];
      });
    };
  });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  const T inv_sqrt2 = T(0.70710678118654752440);
  std::vector<T> out(x.numel());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(0.5) * xv[i] * (T(1) + std::erf(xv[i] * inv_sqrt2));
  return make_result<T>("gelu", x.shape(), std::move(out), {&x}, [xi = x.impl(), inv_sqrt2] {
    return [xi, inv_sqrt2](const TensorImpl<T>& o) {
      const T f = fault_factor<T>("gelu");
      const T inv_sqrt_2pi = T(0.39894228040143267794);
      accumulate(*xi, [&](auto& g) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          const T v = xi->data[i];
          const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
          const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
          g[i] += f * o.grad[i] * (cdf + v * pdf);
        }
      });
    };
  });
}

namespace {

std::size_t conv_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad, const char* op) {
  if (stride == 0) throw ShapeError(std::string(op) + ": stride must be >= 1");
  if (k > in + 2 * pad)
    throw ShapeError(std::string(op) + ": kernel " + std::to_string(k) + " larger than padded input " +
                     std::to_string(in + 2 * pad));
  return (in + 2 * pad - k) / stride + 1;
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, std::size_t stride, std::size_t padding) {
  const auto [h, w, ci] = as_hwc(x, "conv2d");
  if (kernel.rank() != 4 || kernel.dim(0) != kernel.dim(1) || kernel.dim(2) != ci)
    throw ShapeError("conv2d: kernel " + shape_to_string(kernel.shape()) + " incompatible with input " +
                     shape_to_string(x.shape()));
  const std::size_t k = kernel.dim(0), co = kernel.dim(3);
  const std::size_t ho = conv_extent(h, k, stride, padding, "conv2d");
  const std::size_t wo = conv_extent(w, k, stride, padding, "conv2d");
  std::vector<T> out(ho * wo * co, T(0));
  const T* xv = x.data().data();
  const T* kv = kernel.data().data();
  const auto ipad = static_cast<std::ptrdiff_t>(padding);
  for (std::size_t oy = 0; oy < ho; ++oy)
    for (std::size_t ox = 0; ox < wo; ++ox) {
      T* op = out.data() + (oy * wo + ox) * co;
      for (std::size_t ky = 0; ky < k; ++ky) {
        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - ipad;
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
        for (std::size_t kx = 0; kx < k; ++kx) {
          const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - ipad;
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
          const T* xp = xv + (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * ci;
          const T* kp = kv + (ky * k + kx) * ci * co;
          for (std::size_t c = 0; c < ci; ++c) {
            const T xval = xp[c];
            const T* kc = kp + c * co;
            for (std::size_t j = 0; j < co; ++j) op[j] += xval * kc[j];
          }
        }
      }
    }
  return make_result<T>("conv2d", {ho, wo, co}, std::move(out), {&x, &kernel},
                        [xi = x.impl(), ki = kernel.impl(), h, w, ci, k, co, ho, wo, stride, ipad] {
    return [=](const TensorImpl<T>& o) {
      const T f = fault_factor<T>("conv2d");
      const bool gx = xi->requires_grad, gk = ki->requires_grad;
      T* dx = gx ? xi->grad_buffer().data() : nullptr;
      T* dk = gk ? ki->grad_buffer().data() : nullptr;
      const T* xv = xi->data.data();
      const T* kv = ki->data.data();
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          const T* go = o.grad.data() + (oy * wo + ox) * co;
          for (std::size_t ky = 0; ky < k; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - ipad;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t kx = 0; kx < k; ++kx) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - ipad;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              const std::size_t xoff = (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * ci;
              const std::size_t koff = (ky * k + kx) * ci * co;
              for (std::size_t c = 0; c < ci; ++c) {
                const T* kc = kv + koff + c * co;
                if (gx) {
                  T acc = 0;
                  for (std::size_t j = 0; j < co; ++j) acc += go[j] * kc[j];
                  dx[xoff + c] += acc;
                }
                if (gk) {
                  const T xval = f * xv[xoff + c];
                  T* dkc = dk + koff + c * co;
                  for (std::size_t j = 0; j < co; ++j) dkc[j] += xval * go[j];
                }
              }
            }
          }
        }
    };
  });
}

template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& kernel, std::size_t stride,
                           std::size_t padding) {
  const auto [h, w, c] = as_hwc(x, "depthwise_conv2d");
  if (kernel.rank() != 3 || kernel.dim(0) != kernel.dim(1) || kernel.dim(2) != c)
    throw ShapeError("depthwise_conv2d: kernel " + shape_to_string(kernel.shape()) +
                     " incompatible with input " + shape_to_string(x.shape()));
  const std::size_t k = kernel.dim(0);
  const std::size_t ho = conv_extent(h, k, stride, padding, "depthwise_conv2d");
  const std::size_t wo = conv_extent(w, k, stride, padding, "depthwise_conv2d");
  std::vector<T> out(ho * wo * c, T(0));
  const T* xv = x.data().data();
  const T* kv = kernel.data().data();
  const auto ipad = static_cast<std::ptrdiff_t>(padding);
  for (std::size_t oy = 0; oy < ho; ++oy)
    for (std::size_t ox = 0; ox < wo; ++ox) {
      T* op = out.data() + (oy * wo + ox) * c;
      for (std::size_t ky = 0; ky < k; ++ky) {
        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - ipad;
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
        for (std::size_t kx = 0; kx < k; ++kx) {
          const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - ipad;
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
          const T* xp = xv + (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * c;
          const T* kp = kv + (ky * k + kx) * c;
          for (std::size_t j = 0; j < c; ++j) op[j] += xp[j] * kp[j];
        }
      }
    }
  return make_result<T>("depthwise_conv2d", {ho, wo, c}, std::move(out), {&x, &kernel},
                        [xi = x.impl(), ki = kernel.impl(), h, w, c, k, ho, wo, stride, ipad] {
    return [=](const TensorImpl<T>& o) {
      const T f = fault_factor<T>("depthwise_conv2d");
      const bool gx = xi->requires_grad, gk = ki->requires_grad;
      T* dx = gx ? xi->grad_buffer().data() : nullptr;
      T* dk = gk ? ki->grad_buffer().data() : nullptr;
      const T* xv = xi->data.data();
      const T* kv = ki->data.data();
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          const T* go = o.grad.data() + (oy * wo + ox) * c;
          for (std::size_t ky = 0; ky < k; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - ipad;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t kx = 0; kx < k; ++kx) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - ipad;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              const std::size_t xoff = (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * c;
              const std::size_t koff = (ky * k + kx) * c;
              if (gx)
                for (std::size_t j = 0; j < c; ++j) dx[xoff + j] += go[j] * kv[koff + j];
              if (gk)
                for (std::size_t j = 0; j < c; ++j) dk[koff + j] += f * go[j] * xv[xoff + j];
            }
          }
        }
    };
  });
}

template <typename T>
Tensor<T> avg_pool_same(const Tensor<T>& x, std::size_t window) {
  const auto [h, w, c] = as_hwc(x, "avg_pool_same");
  if (window == 0 || window % 2 == 0) throw ShapeError("avg_pool_same: window must be odd");
  const auto r = static_cast<std::ptrdiff_t>(window / 2);
  const auto ih = static_cast<std::ptrdiff_t>(h), iw = static_cast<std::ptrdiff_t>(w);
  std::vector<T> out(x.numel(), T(0));
  std::vector<T> inv_count(h * w);
  auto xv = x.data();
  for (std::ptrdiff_t y = 0; y < ih; ++y)
    for (std::ptrdiff_t xx = 0; xx < iw; ++xx) {
      T* op = out.data() + (y * iw + xx) * c;
      std::size_t count = 0;
      for (std::ptrdiff_t dy = -r; dy <= r; ++dy)
        for (std::ptrdiff_t dx = -r; dx <= r; ++dx) {
          const auto sy = y + dy, sx = xx + dx;
          if (sy < 0 || sy >= ih || sx < 0 || sx >= iw) continue;
          ++count;
          const T* xp = xv.data() + (sy * iw + sx) * c;
          for (std::size_t j = 0; j < c; ++j) op[j] += xp[j];
        }
      const T inv = T(1) / T(count);
      inv_count[y * iw + xx] = inv;
      for (std::size_t j = 0; j < c; ++j) op[j] *= inv;
    }
  return make_result<T>("avg_pool_same", x.shape(), std::move(out), {&x},
                        [xi = x.impl(), ih, iw, c, r, inv_count = std::move(inv_count)]() mutable {
    return [xi, ih, iw, c, r, inv_count = std::move(inv_count)](const TensorImpl<T>& o) {
      const T f = fault_factor<T>("avg_pool_same");
      accumulate(*xi, [&](auto& g) {
        for (std::ptrdiff_t y = 0; y < ih; ++y)
          for (std::ptrdiff_t xx = 0; xx < iw; ++xx) {
            const T inv = f * inv_count[y * iw + xx];
            const T* go = o.grad.data() + (y * iw + xx) * c;
            for (std::ptrdiff_t dy = -r; dy <= r; ++dy)
              for (std::ptrdiff_t dx = -r; dx <= r; ++dx) {
                const auto sy = y + dy, sx = xx + dx;
                if (sy < 0 || sy >= ih || sx < 0 || sx >= iw) continue;
                T* gp = g.data() + (sy * iw + sx) * c;
                for (std::size_t j = 0; j < c; ++j) gp[j] += go[j] * inv;
              }
          }
      });
    };
  });
}

template <typename T>
Tensor<T> max_pool_same(const Tensor<T>& x, std::size_t window) {
  const auto [h, w, c] = as_hwc(x, "max_pool_same");
  if (window == 0 || window % 2 == 0) throw ShapeError("max_pool_same: window must be odd");
  const auto r = static_cast<std::ptrdiff_t>(window / 2);
  const auto ih = static_cast<std::ptrdiff_t>(h), iw = static_cast<std::ptrdiff_t>(w);
  std::vector<T> out(x.numel(), -std::numeric_limits<T>::infinity());
  std::vector<std::size_t> argmax(x.numel(), 0);
  auto xv = x.data();
  for (std::ptrdiff_t y = 0; y < ih; ++y)
    for (std::ptrdiff_t xx = 0; xx < iw; ++xx) {
      const std::size_t obase = static_cast<std::size_t>(y * iw + xx) * c;
      for (std::ptrdiff_t dy = -r; dy <= r; ++dy)
        for (std::ptrdiff_t dx = -r; dx <= r; ++dx) {
          const auto sy = y + dy, sx = xx + dx;
          if (sy < 0 || sy >= ih || sx < 0 || sx >= iw) continue;
          const std::size_t sbase = static_cast<std::size_t>(sy * iw + sx) * c;
          for (std::size_t j = 0; j < c; ++j) {
            if (xv[sbase + j] > out[obase + j]) {
              out[obase + j] = xv[sbase + j];
              argmax[obase + j] = sbase + j;
            }
          }
        }
    }
  return make_result<T>("max_pool_same", x.shape(), std::move(out), {&x},
                        [xi = x.impl(), argmax = std::move(argmax)]() mutable {
    return [xi, argmax = std::move(argmax)](const TensorImpl<T>& o) {
      const T f = fault_factor<T>("max_pool_same");
      accumulate(*xi, [&](auto& g) {
        for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += f * o.grad[i];
      });
    };
  });
}

namespace {

struct Tap {
  std::size_t i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<Tap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    auto i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace

template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  if (x.rank() != 2 && x.rank() != 3)
    throw ShapeError("bilinear_upsample: expected [H, W] or [H, W, C], got " + shape_to_string(x.shape()));
  if (out_h == 0 || out_w == 0) throw ShapeError("bilinear_upsample: output extents must be >= 1");
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.rank() == 3 ? x.dim(2) : 1;
  Shape out_shape = x.rank() == 3 ? Shape{out_h, out_w, c} : Shape{out_h, out_w};
  if (h == out_h && w == out_w) {
    std::vector<T> same(x.data().begin(), x.data().end());
    return make_result<T>("bilinear_upsample", out_shape, std::move(same), {&x}, [xi = x.impl()] {
      return [xi](const TensorImpl<T>& o) {
        accumulate(*xi, [&](auto& g) { for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i]; });
      };
    });
  }
  auto ty = bilinear_taps(h, out_h);
  auto tx = bilinear_taps(w, out_w);
  std::vector<T> out(out_h * out_w * c);
  auto xv = x.data();
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    const auto& a = ty[oy];
    const T wy1 = T(a.w1), wy0 = T(1) - wy1;
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      const auto& b = tx[ox];
      const T wx1 = T(b.w1), wx0 = T(1) - wx1;
      const T* p00 = xv.data() + (a.i0 * w + b.i0) * c;
      const T* p01 = xv.data() + (a.i0 * w + b.i1) * c;
      const T* p10 = xv.data() + (a.i1 * w + b.i0) * c;
      const T* p11 = xv.data() + (a.i1 * w + b.i1) * c;
      T* op = out.data() + (oy * out_w + ox) * c;
      for (std::size_t j = 0; j < c; ++j)
        op[j] = wy0 * (wx0 * p00[j] + wx1 * p01[j]) + wy1 * (wx0 * p10[j] + wx1 * p11[j]);
    }
  }
  return make_result<T>("bilinear_upsample", out_shape, std::move(out), {&x},
                        [xi = x.impl(), ty = std::move(ty), tx = std::move(tx), w, c, out_h, out_w]() mutable {
    return [xi, ty = std::move(ty), tx = std::move(tx), w, c, out_h, out_w](const TensorImpl<T>& o) {
      const T f = fault_factor<T>("bilinear_upsample");
      accumulate(*xi, [&](auto& g) {
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const auto& a = ty[oy];
          const T wy1 = T(a.w1), wy0 = T(1) - wy1;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const auto& b = tx[ox];
            const T wx1 = T(b.w1), wx0 = T(1) - wx1;
            const T* go = o.grad.data() + (oy * out_w + ox) * c;
            T* g00 = g.data() + (a.i0 * w + b.i0) * c;
            T* g01 = g.data() + (a.i0 * w + b.i1) * c;
            T* g10 = g.data() + (a.i1 * w + b.i0) * c;
            T* g11 = g.data() + (a.i1 * w + b.i1) * c;
            for (std::size_t j = 0; j < c; ++j) {
              const T v = f * go[j];
              g00[j] += wy0 * wx0 * v;
              g01[j] += wy0 * wx1 * v;
              g10[j] += wy1 * wx0 * v;
              g11[j] += wy1 * wx1 * v;
            }
          }
        }
      });
    };
  });
}

template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < first.size(); ++i)
      if (i != axis && p.dim(i) != first[i])
        throw ShapeError("concat: extent mismatch " + shape_to_string(p.shape()) + " vs " +
                         shape_to_string(first));
    out_shape[axis] += p.dim(axis);
  }
  const auto s = split_axis(out_shape, axis);
  std::vector<T> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t e = p.dim(axis), chunk = e * s.inner;
    auto pv = p.data();
    for (std::size_t o = 0; o < s.outer; ++o)
      std::copy_n(pv.data() + o * chunk, chunk, out.data() + o * s.extent * s.inner + offset * s.inner);
    offset += e;
  }
  auto impls = impls_of(parts);
  std::function<void(const TensorImpl<T>&)> fn;
  if (active_tape<T>() && any_grad(parts)) {
    fn = [impls, offsets, s](const TensorImpl<T>& o) {
      for (std::size_t k = 0; k < impls.size(); ++k) {
        auto& in = *impls[k];
        const std::size_t e = in.shape.empty() ? 1 : in.data.size() / (s.outer * s.inner);
        const std::size_t chunk = e * s.inner;
        accumulate(in, [&](auto& g) {
          for (std::size_t ou = 0; ou < s.outer; ++ou) {
            const T* src = o.grad.data() + ou * s.extent * s.inner + offsets[k] * s.inner;
            T* dst = g.data() + ou * chunk;
            for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
          }
        });
      }
    };
  } else {
    impls.clear();
  }
  return detail::record_result<T>("concat", std::move(out_shape), std::move(out), std::move(impls), std::move(fn));
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.rank() || begin >= end || end > x.dim(axis))
    throw ShapeError("slice: invalid range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") on axis " + std::to_string(axis) + " of " + shape_to_string(x.shape()));
  const auto s = split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  const std::size_t chunk = (end - begin) * s.inner;
  std::vector<T> out(s.outer * chunk);
  auto xv = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(xv.data() + o * s.extent * s.inner + begin * s.inner, chunk, out.data() + o * chunk);
  return make_result<T>("slice", std::move(out_shape), std::move(out), {&x}, [xi = x.impl(), s, begin, chunk] {
    return [xi, s, begin, chunk](const TensorImpl<T>& o) {
      accumulate(*xi, [&](auto& g) {
        for (std::size_t ou = 0; ou < s.outer; ++ou) {
          T* dst = g.data() + ou * s.extent * s.inner + begin * s.inner;
          const T* src = o.grad.data() + ou * chunk;
          for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
        }
      });
    };
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: " + shape_to_string(x.shape()) + " to " + shape_to_string(shape));
  std::vector<T> out(x.data().begin(), x.data().end());
  return make_result<T>("reshape", std::move(shape), std::move(out), {&x}, [xi = x.impl()] {
    return [xi](const TensorImpl<T>& o) {
      accumulate(*xi, [&](auto& g) { for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i]; });
    };
  });
}

template <typename T>
Tensor<T> channels_last(const Tensor<T>& x) {
  if (x.rank() != 3) throw ShapeError("channels_last: expected [C, H, W], got " + shape_to_string(x.shape()));
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  std::vector<T> out(x.numel());
  auto xv = x.data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h * w; ++i) out[i * c + ch] = xv[ch * h * w + i];
  return make_result<T>("channels_last", {h, w, c}, std::move(out), {&x}, [xi = x.impl(), c, h, w] {
    return [xi, c, h, w](const TensorImpl<T>& o) {
      accumulate(*xi, [&](auto& g) {
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t i = 0; i < h * w; ++i) g[ch * h * w + i] += o.grad[i * c + ch];
      });
    };
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.data()) total += v;
  return make_result<T>("sum", {}, {total}, {&x}, [xi = x.impl()] {
    return [xi](const TensorImpl<T>& o) {
      const T f = fault_factor<T>("sum");
      accumulate(*xi, [&](auto& g) { for (auto& v : g) v += f * o.grad[0]; });
    };
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / T(x.numel()));
}

template <typename T>
Tensor<T> mean_of(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ShapeError("mean_of: no inputs");
  for (const auto& p : parts) require_same_shape(parts[0], p, "mean_of");
  const T inv = T(1) / T(parts.size());
  std::vector<T> out(parts[0].numel(), T(0));
  for (const auto& p : parts) {
    auto pv = p.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += pv[i];
  }
  for (auto& v : out) v *= inv;
  auto impls = impls_of(parts);
  std::function<void(const TensorImpl<T>&)> fn;
  if (active_tape<T>() && any_grad(parts)) {
    fn = [impls, inv](const TensorImpl<T>& o) {
      const T f = fault_factor<T>("mean_of");
      for (const auto& in : impls)
        accumulate(*in, [&](auto& g) { for (std::size_t i = 0; i < g.size(); ++i) g[i] += f * o.grad[i] * inv; });
    };
  } else {
    impls.clear();
  }
  return detail::record_result<T>("mean_of", parts[0].shape(), std::move(out), std::move(impls), std::move(fn));
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows) {
  if (x.rank() != 2) throw ShapeError("gather_rows: expected rank 2");
  if (rows.empty()) throw ShapeError("gather_rows: empty row list");
  const std::size_t d = x.dim(1);
  std::vector<T> out(rows.size() * d);
  auto xv = x.data();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= x.dim(0)) throw ShapeError("gather_rows: row index out of range");
    std::copy_n(xv.data() + rows[r] * d, d, out.data() + r * d);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_result<T>("gather_rows", {rows.size(), d}, std::move(out), {&x},
                        [xi = x.impl(), idx = std::move(idx), d]() mutable {
    return [xi, idx = std::move(idx), d](const TensorImpl<T>& o) {
      accumulate(*xi, [&](auto& g) {
        for (std::size_t r = 0; r < idx.size(); ++r)
          for (std::size_t j = 0; j < d; ++j) g[idx[r] * d + j] += o.grad[r * d + j];
      });
    };
  });
}

template <typename T>
Tensor<T> kl_div(const Tensor<T>& t, const Tensor<T>& s, std::size_t axis) {
  require_same_shape(t, s, "kl_div");
  if (axis >= t.rank() && !(t.rank() == 0 && axis == 0))
    throw ShapeError("kl_div: axis out of range");
  const auto sp = split_axis(t.shape(), axis);
  auto tv = t.data(), sv = s.data();
  const T floor = T(kKlFloor);
  // Single-precision sums of a softmax row drift past 1e-6 for wide rows.
  const T tol = std::is_same_v<T, float> ? T(1e-4) : T(1e-6);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t in = 0; in < sp.inner; ++in) {
      T st = 0, ss = 0;
      for (std::size_t e = 0; e < sp.extent; ++e) {
        const std::size_t idx = (o * sp.extent + e) * sp.inner + in;
        if (tv[idx] < T(0) || sv[idx] < T(0)) throw NumericError("kl_div: negative probability");
        st += tv[idx];
        ss += sv[idx];
      }
      if (std::abs(st - T(1)) > tol || std::abs(ss - T(1)) > tol)
        throw NumericError("kl_div: input is not normalized along the distribution axis");
    }
  T total = 0;
  for (std::size_t i = 0; i < tv.size(); ++i) {
    if (tv[i] == T(0)) continue;
    total += tv[i] * (std::log(std::max(tv[i], floor)) - std::log(std::max(sv[i], floor)));
  }
  return make_result<T>("kl_div", {}, {total}, {&s}, [ti = t.impl(), si = s.impl(), floor] {
    return [ti, si, floor](const TensorImpl<T>& o) {
      const T f = fault_factor<T>("kl_div");
      accumulate(*si, [&](auto& g) {
        for (std::size_t i = 0; i < g.size(); ++i)
          if (si->data[i] > floor) g[i] -= f * o.grad[0] * ti->data[i] / si->data[i];
      });
    };
  });
}

#define EQUISEG_OPS_INSTANTIATE(T)                                                                \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                               \
  template Tensor<T> add_bias<T>(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> mul_rows<T>(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> transpose<T>(const Tensor<T>&);                                              \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> softmax<T>(const Tensor<T>&, std::size_t);                                   \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);      \
  template Tensor<T> gelu<T>(const Tensor<T>&);                                                   \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t);     \
  template Tensor<T> depthwise_conv2d<T>(const Tensor<T>&, const Tensor<T>&, std::size_t,         \
                                         std::size_t);                                            \
  template Tensor<T> avg_pool_same<T>(const Tensor<T>&, std::size_t);                             \
  template Tensor<T> max_pool_same<T>(const Tensor<T>&, std::size_t);                             \
  template Tensor<T> bilinear_upsample<T>(const Tensor<T>&, std::size_t, std::size_t);            \
  template Tensor<T> concat<T>(std::span<const Tensor<T>>, std::size_t);                          \
  template Tensor<T> slice<T>(const Tensor<T>&, std::size_t, std::size_t, std::size_t);           \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                         \
  template Tensor<T> channels_last<T>(const Tensor<T>&);                                          \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                    \
  template Tensor<T> mean<T>(const Tensor<T>&);                                                   \
  template Tensor<T> mean_of<T>(std::span<const Tensor<T>>);                                      \
  template Tensor<T> gather_rows<T>(const Tensor<T>&, std::span<const std::size_t>);              \
  template Tensor<T> kl_div<T>(const Tensor<T>&, const Tensor<T>&, std::size_t);

EQUISEG_OPS_INSTANTIATE(float)
EQUISEG_OPS_INSTANTIATE(double)

}  // namespace equiseg::ops
