#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "equiseg/labels.hpp"
#include "equiseg/tensor.hpp"
#include <nlohmann/json.hpp>

namespace equiseg {

enum class ShapeKind { rectangle, ellipse, diamond };

struct SceneObject {
  ShapeKind kind = ShapeKind::rectangle;
  // Top-left corner and extent in pixels, all multiples of the cell size.
  std::size_t x = 0, y = 0, width = 0, height = 0;
  Label category = 1;
  friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

struct SceneConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t categories = 6;
  std::size_t min_objects = 2;
  std::size_t max_objects = 5;
  std::size_t min_size = 12;
  std::size_t max_size = 32;
  // Objects are rasterized on a grid of cell x cell blocks.
  std::size_t cell = 4;
  std::size_t ignore_border = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static SceneConfig from_json(const nlohmann::json& j);
};

struct SceneSpec {
  std::size_t height = 0, width = 0;
  std::size_t cell = 4;
  std::size_t categories = 0;
  std::size_t ignore_border = 0;
  Label background = 0;
  std::vector<SceneObject> objects;  // painted in order, later on top
  // Illumination peak (pixels) and spread.
  double light_x = 0.0, light_y = 0.0, light_sigma = 16.0;
  std::uint64_t seed = 0;
  friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

inline const std::vector<std::string>& default_modality_names() {
  static const std::vector<std::string> names{"appearance", "depth", "event", "range"};
  return names;
}
inline const std::vector<std::size_t>& default_modality_channels() {
  static const std::vector<std::size_t> channels{3, 1, 1, 1};
  return channels;
}

/// Maps are [C x H x W] in the order of default_modality_names().
struct SampleRecord {
  std::vector<Tensor<float>> modalities;
  LabelMap labels;
  std::uint64_t seed = 0;
};

// Largest category count with a distinct palette entry.
inline constexpr std::size_t kMaxSynthCategories = 10;
// Categories 1 and 2 share a color; categories 3 and 4 share a depth.
inline constexpr std::array<Label, 2> kAppearanceCollision{1, 2};
inline constexpr std::array<Label, 2> kDepthCollision{3, 4};

std::array<double, 3> category_color(std::size_t category);
double category_depth(std::size_t category, std::size_t categories);

SceneSpec generate_scene(std::uint64_t seed, const SceneConfig& config);
bool covers(const SceneObject& object, std::size_t cell, std::size_t y, std::size_t x);
LabelMap rasterize_labels(const SceneSpec& spec);
SampleRecord render_modalities(const SceneSpec& spec);

std::uint64_t sample_seed(std::uint64_t global_seed, std::uint64_t index);
std::vector<SampleRecord> generate_samples(const SceneConfig& config, std::uint64_t global_seed, std::size_t count,
                                           std::uint64_t first_index = 0);

}  // namespace equiseg
