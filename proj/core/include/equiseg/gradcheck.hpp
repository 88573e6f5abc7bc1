#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "equiseg/tensor.hpp"

namespace equiseg {

struct GradCheckResult {
  // max over probed entries of |analytic - central difference| / max(1, |analytic|)
  double max_rel_error = 0.0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
};

struct ProbeEntry {
  std::size_t tensor = 0;  // index into the parameter list
  std::size_t index = 0;   // flat element index
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences. `loss_fn` must be deterministic and read the current values of
/// `params`. When `probes` is empty every entry of every parameter is checked.
GradCheckResult grad_check(const std::function<Tensor<double>()>& loss_fn,
                           std::span<Tensor<double>> params,
                           std::span<const ProbeEntry> probes = {}, double eps = 1e-5);

// Single-input convenience form.
GradCheckResult grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                           Tensor<double> x, double eps = 1e-5);

}  // namespace equiseg
