#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "equiseg/seg_model.hpp"

namespace equiseg::tools {

struct OpCheck {
  std::string op;
  double max_rel_error = 0.0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  bool passed = true;
};

struct GradSuiteOptions {
  std::size_t seeds = 20;
  std::uint64_t base_seed = 0;
  double tolerance = 1e-4;
  double eps = 1e-5;
  bool full_model = true;
  // Fraction of model parameters probed in the full-model check.
  double model_fraction = 0.01;
  // Restrict to these checks; empty runs all.
  std::vector<std::string> only;
};

struct GradSuiteReport {
  std::vector<OpCheck> checks;
  double worst = 0.0;
  bool passed = true;
  nlohmann::json to_json() const;
};

std::vector<std::string> grad_suite_names();

// A 64-bit model small enough for exhaustive finite differences.
ModelConfig tiny_model_config(std::uint64_t seed);

GradSuiteReport run_grad_suite(const GradSuiteOptions& options);

}  // namespace equiseg::tools
