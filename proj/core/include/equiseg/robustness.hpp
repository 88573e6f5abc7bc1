#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "equiseg/metrics.hpp"
#include "equiseg/seg_model.hpp"
#include <nlohmann/json.hpp>

namespace equiseg {

enum class PerturbationKind { emm, rmm, nm };
enum class NoiseLevel { low, mid };

double noise_sigma(NoiseLevel level);

struct PerturbationSpec {
  PerturbationKind kind = PerturbationKind::emm;
  std::vector<bool> keep;  // EMM subset
  double p = 0.0;          // EMM/RMM drop probability
  NoiseLevel level = NoiseLevel::low;
  std::uint64_t seed = 0;
  void validate() const;
};

// Zero each block x block tile of every modality map with probability p.
template <typename T>
ModalityBundle<T> rmm_perturb(const ModalityBundle<T>& bundle, double p, std::size_t block, std::uint64_t seed);

// Additive N(0, sigma^2) noise on every modality map.
template <typename T>
ModalityBundle<T> nm_perturb(const ModalityBundle<T>& bundle, double sigma, std::uint64_t seed);
template <typename T>
ModalityBundle<T> nm_perturb(const ModalityBundle<T>& bundle, NoiseLevel level, std::uint64_t seed);

// Drop each modality with probability p, redrawing until one is kept.
template <typename T>
ModalityBundle<T> emm_drop(const ModalityBundle<T>& bundle, double p, std::uint64_t seed);

template <typename T>
ModalityBundle<T> with_keep(const ModalityBundle<T>& bundle, const std::vector<bool>& keep);

// Non-empty strict subsets of n modalities in increasing bitmask order.
std::vector<std::vector<bool>> keep_subsets(std::size_t n);

template <typename T>
using BundleTransform = std::function<ModalityBundle<T>(const ModalityBundle<T>&, std::size_t index)>;

// Dataset-level confusion matrix of model predictions on transformed inputs.
// Samples may be spread over threads; per-sample counts are merged in index
// order.
template <typename T>
ConfusionMatrix evaluate(const SegModel<T>& model, std::span<const ModalityBundle<T>> bundles,
                         std::span<const LabelMap> labels, const BundleTransform<T>& transform = {},
                         std::size_t threads = 1);

struct EmmMode {
  bool average = true;
  double p = 0.1;
};

struct EmmSubsetResult {
  std::vector<bool> keep;
  double miou = 0.0;
};

template <typename T>
double emm_eval(const SegModel<T>& model, std::span<const ModalityBundle<T>> bundles,
                std::span<const LabelMap> labels, EmmMode mode, std::uint64_t seed, std::size_t threads = 1,
                std::vector<EmmSubsetResult>* subsets = nullptr);

struct RobustnessProtocol {
  double emm_p = 0.1;
  double rmm_p = 0.1;
  std::vector<double> rmm_avg_ps{0.1, 0.3, 0.5, 0.7, 0.9};
  std::size_t rmm_block = 16;
  double nm_low = 0.1;
  double nm_mid = 0.5;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  nlohmann::json to_json() const;
};

inline constexpr std::array<const char*, 7> kReportColumns{"mIoU", "EMM(Avg)", "EMM(p)", "RMM(Avg)",
                                                           "RMM(p)", "NM(Low)", "NM(Mid)"};

/// All values in percent.
struct RobustnessReport {
  double miou_clean = 0.0;
  double emm_avg = 0.0;
  double emm_p = 0.0;
  double rmm_avg = 0.0;
  double rmm_p = 0.0;
  double nm_low = 0.0;
  double nm_mid = 0.0;
  double mean = 0.0;

  std::array<double, 7> values() const { return {miou_clean, emm_avg, emm_p, rmm_avg, rmm_p, nm_low, nm_mid}; }
};

// Arithmetic mean of the seven metrics; throws ConfigError if one is missing.
double robustness_score(std::span<const std::optional<double>> metrics);

template <typename T>
RobustnessReport run_robustness(const SegModel<T>& model, std::span<const ModalityBundle<T>> bundles,
                                std::span<const LabelMap> labels, const RobustnessProtocol& protocol);

std::string format_report_table(const RobustnessReport& report, const std::string& row_label);
nlohmann::json report_to_json(const RobustnessReport& report, const RobustnessProtocol& protocol);

}  // namespace equiseg
