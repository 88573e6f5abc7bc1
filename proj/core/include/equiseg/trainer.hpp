#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <vector>

#include "equiseg/seg_model.hpp"
#include <nlohmann/json.hpp>

namespace equiseg {

struct ScheduleConfig {
  std::size_t steps = 2000;
  std::size_t batch = 2;
  double lr = 6e-5;
  double warmup_fraction = 0.05;
  double poly_power = 0.9;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
  // Linear warm-up, then polynomial decay towards zero at `steps`.
  double lr_at(std::size_t step) const;
  nlohmann::json to_json() const;
};

/// Adam with decoupled weight decay. Decay applies to matrices and kernels,
/// not to biases or normalization gains.
template <typename T>
class AdamW {
 public:
  AdamW(ParamStore<T>& params, const ScheduleConfig& config);
  void step(double lr);
  std::size_t steps_taken() const { return t_; }

 private:
  ParamStore<T>& params_;
  ScheduleConfig config_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

struct StepMetrics {
  std::size_t step = 0;
  double loss = 0.0;
  double ce = 0.0;
  double sgm = 0.0;
  double lr = 0.0;
  bool sgm_no_category = false;
  nlohmann::json to_json() const;
};

// One optimizer update over a batch. Each sample is recorded and swept on its
// own tape with its loss scaled by 1/B; gradients accumulate in the leaves.
// Reported losses are batch means.
template <typename T>
StepMetrics train_step(std::span<const ModalityBundle<T>> bundles, std::span<const LabelMap> labels,
                       SegModel<T>& model, AdamW<T>& optimizer, Rng& pairing_rng, double lr);

/// Deterministic training loop state: batch order comes from one stream,
/// teacher/student pairing from another.
template <typename T>
class Trainer {
 public:
  Trainer(SegModel<T>& model, ScheduleConfig schedule, std::uint64_t seed);

  StepMetrics step(std::span<const ModalityBundle<T>> data, std::span<const LabelMap> labels);
  std::size_t steps_done() const { return step_; }
  const ScheduleConfig& schedule() const { return schedule_; }

 private:
  SegModel<T>& model_;
  ScheduleConfig schedule_;
  AdamW<T> optimizer_;
  Rng batch_rng_;
  Rng pairing_rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t step_ = 0;
};

/// Line-delimited JSON records {step, L, L_CE, L_s, lr}.
class MetricsLog {
 public:
  explicit MetricsLog(const std::filesystem::path& path);
  void write(const StepMetrics& m);

 private:
  std::ofstream out_;
};

}  // namespace equiseg
