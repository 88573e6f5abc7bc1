#include "equiseg/metrics.hpp"

#include <string>

#include "equiseg/errors.hpp"

namespace equiseg {

ConfusionMatrix::ConfusionMatrix(std::size_t categories)
    : categories_(categories), counts_(categories * categories, 0) {
  if (categories == 0) throw ShapeError("confusion matrix needs at least one category");
}

void ConfusionMatrix::add(const LabelMap& prediction, const LabelMap& truth, Label ignore) {
  if (prediction.height != truth.height || prediction.width != truth.width)
    throw ShapeError("prediction " + std::to_string(prediction.height) + "x" + std::to_string(prediction.width) +
                     " vs truth " + std::to_string(truth.height) + "x" + std::to_string(truth.width));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const Label t = truth.values[i];
    if (t == ignore) continue;
    const Label p = prediction.values[i];
    if (t >= categories_) throw ShapeError("ground-truth label " + std::to_string(t) + " out of range");
    if (p >= categories_) throw ShapeError("predicted label " + std::to_string(p) + " out of range");
    ++counts_[t * categories_ + p];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.categories_ != categories_) throw ShapeError("cannot merge confusion matrices of different sizes");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t s = 0;
  for (auto c : counts_) s += c;
  return s;
}

IouResult ConfusionMatrix::iou() const {
  IouResult r;
  r.per_category.resize(categories_);
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t c = 0; c < categories_; ++c) {
    std::uint64_t tp = at(c, c), row = 0, col = 0;
    for (std::size_t k = 0; k < categories_; ++k) {
      row += at(c, k);
      col += at(k, c);
    }
    const std::uint64_t uni = row + col - tp;
    if (uni == 0) continue;
    const double v = static_cast<double>(tp) / static_cast<double>(uni);
    r.per_category[c] = v;
    sum += v;
    ++n;
  }
  r.mean = n == 0 ? 1.0 : sum / static_cast<double>(n);
  return r;
}

IouResult miou(const LabelMap& prediction, const LabelMap& truth, std::size_t categories, Label ignore) {
  ConfusionMatrix m(categories);
  m.add(prediction, truth, ignore);
  return m.iou();
}

}  // namespace equiseg
