#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace equiseg {

using Label = std::uint8_t;
inline constexpr Label kIgnoreLabel = 255;

/// Dense per-pixel category ids, row-major [height x width].
struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<Label> values;

  LabelMap() = default;
  LabelMap(std::size_t h, std::size_t w, Label fill = 0) : height(h), width(w), values(h * w, fill) {}

  Label at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
  Label& at(std::size_t y, std::size_t x) { return values[y * width + x]; }
  std::size_t size() const { return values.size(); }

  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

}  // namespace equiseg
