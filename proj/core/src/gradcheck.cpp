#include "equiseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace equiseg {

GradCheckResult grad_check(const std::function<Tensor<double>()>& loss_fn,
                           std::span<Tensor<double>> params, std::span<const ProbeEntry> probes,
                           double eps) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    GradTape<double> tape;
    TapeScope<double> scope(tape);
    const auto loss = loss_fn();
    if (loss.numel() != 1) throw ShapeError("grad_check: function output is not scalar");
    backward(loss, tape);
  }

  std::vector<ProbeEntry> all;
  if (probes.empty()) {
    for (std::size_t t = 0; t < params.size(); ++t)
      for (std::size_t i = 0; i < params[t].numel(); ++i) all.push_back({t, i});
    probes = all;
  }

  GradCheckResult result;
  for (const auto& probe : probes) {
    auto& p = params[probe.tensor];
    const double analytic = p.has_grad() ? p.grad()[probe.index] : 0.0;
    auto values = p.mutable_data();
    const double original = values[probe.index];
    values[probe.index] = original + eps;
    const double up = loss_fn().item();
    values[probe.index] = original - eps;
    const double down = loss_fn().item();
    values[probe.index] = original;
    const double numeric = (up - down) / (2.0 * eps);
    const double err = std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
    if (err >= result.max_rel_error) {
      result.max_rel_error = err;
      result.worst_analytic = analytic;
      result.worst_numeric = numeric;
    }
    ++result.checked;
  }
  return result;
}

GradCheckResult grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                           Tensor<double> x, double eps) {
  std::vector<Tensor<double>> params{x};
  return grad_check([&] { return f(params[0]); }, params, {}, eps);
}

}  // namespace equiseg
