#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "equiseg/labels.hpp"

namespace equiseg {

struct IouResult {
  // Mean over categories that occur in the ground truth or the prediction.
  double mean = 0.0;
  // Empty for categories that occur in neither.
  std::vector<std::optional<double>> per_category;
};

/// Dataset-level confusion counts, rows = ground truth, columns = prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t categories);

  // Pixels whose ground truth equals `ignore` are skipped.
  void add(const LabelMap& prediction, const LabelMap& truth, Label ignore = kIgnoreLabel);
  void merge(const ConfusionMatrix& other);

  std::size_t categories() const { return categories_; }
  std::uint64_t at(std::size_t truth, std::size_t prediction) const {
    return counts_[truth * categories_ + prediction];
  }
  std::uint64_t total() const;
  // A matrix with no counted pixels reports mean 1.
  IouResult iou() const;

 private:
  std::size_t categories_;
  std::vector<std::uint64_t> counts_;
};

IouResult miou(const LabelMap& prediction, const LabelMap& truth, std::size_t categories,
               Label ignore = kIgnoreLabel);

}  // namespace equiseg
