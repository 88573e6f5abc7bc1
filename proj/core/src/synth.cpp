#include "equiseg/synth.hpp"

#include <cmath>
#include <numbers>
#include <set>

#include "equiseg/errors.hpp"
#include "equiseg/random.hpp"

namespace equiseg {

namespace {

constexpr double kEventThreshold = 0.1;
constexpr std::size_t kRangeSectors = 24;

const std::array<std::array<double, 3>, kMaxSynthCategories> kPalette{{
    {0.35, 0.35, 0.40},
    {0.85, 0.20, 0.20},
    {0.85, 0.20, 0.20},
    {0.20, 0.75, 0.25},
    {0.20, 0.30, 0.85},
    {0.90, 0.80, 0.15},
    {0.70, 0.30, 0.80},
    {0.15, 0.80, 0.80},
    {0.95, 0.55, 0.20},
    {0.95, 0.95, 0.95},
}};

std::size_t multiple_of(std::size_t v, std::size_t cell) { return (v + cell - 1) / cell * cell; }

}  // namespace

void SceneConfig::validate() const {
  if (categories < 2) throw ConfigError("scene: at least two categories required");
  if (categories > kMaxSynthCategories)
    throw ConfigError("scene: at most " + std::to_string(kMaxSynthCategories) + " categories supported");
  if (max_objects == 0) throw ConfigError("scene: scenes need at least one object for two categories");
  if (min_objects > max_objects) throw ConfigError("scene: min_objects > max_objects");
  if (cell == 0 || height % cell != 0 || width % cell != 0)
    throw ConfigError("scene: canvas must be a multiple of the cell size");
  if (min_size == 0 || min_size > max_size) throw ConfigError("scene: invalid object size range");
  if (multiple_of(min_size, cell) > std::min(height, width))
    throw ConfigError("scene: minimum object size exceeds the canvas");
  if (2 * ignore_border >= std::min(height, width)) throw ConfigError("scene: ignore border covers the canvas");
}

nlohmann::json SceneConfig::to_json() const {
  return {{"height", height},       {"width", width},       {"categories", categories},
          {"min_objects", min_objects}, {"max_objects", max_objects}, {"min_size", min_size},
          {"max_size", max_size},   {"cell", cell},         {"ignore_border", ignore_border}};
}

SceneConfig SceneConfig::from_json(const nlohmann::json& j) {
  SceneConfig c;
  try {
    c.height = j.at("height").get<std::size_t>();
    c.width = j.at("width").get<std::size_t>();
    c.categories = j.at("categories").get<std::size_t>();
    c.min_objects = j.at("min_objects").get<std::size_t>();
    c.max_objects = j.at("max_objects").get<std::size_t>();
    c.min_size = j.at("min_size").get<std::size_t>();
    c.max_size = j.at("max_size").get<std::size_t>();
    c.cell = j.at("cell").get<std::size_t>();
    c.ignore_border = j.at("ignore_border").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed scene configuration: ") + e.what());
  }
  c.validate();
  return c;
}

std::array<double, 3> category_color(std::size_t category) {
  if (category >= kMaxSynthCategories) throw ShapeError("no color for category " + std::to_string(category));
  return kPalette[category];
}

double category_depth(std::size_t category, std::size_t categories) {
  if (category >= categories) throw ShapeError("no depth for category " + std::to_string(category));
  if (category == 0) return 0.1;
  std::size_t rank = category;
  if (category == kDepthCollision[1]) rank = kDepthCollision[0];
  const double steps = static_cast<double>(std::max<std::size_t>(categories - 2, 1));
  return 0.25 + 0.7 * static_cast<double>(rank - 1) / steps;
}

bool covers(const SceneObject& o, std::size_t cell, std::size_t y, std::size_t x) {
  if (x < o.x || y < o.y || x >= o.x + o.width || y >= o.y + o.height) return false;
  if (o.kind == ShapeKind::rectangle) return true;
  const double cx = static_cast<double>(x / cell * cell) + 0.5 * static_cast<double>(cell);
  const double cy = static_cast<double>(y / cell * cell) + 0.5 * static_cast<double>(cell);
  const double dx = (cx - (static_cast<double>(o.x) + 0.5 * static_cast<double>(o.width))) / (0.5 * static_cast<double>(o.width));
  const double dy = (cy - (static_cast<double>(o.y) + 0.5 * static_cast<double>(o.height))) / (0.5 * static_cast<double>(o.height));
  if (o.kind == ShapeKind::ellipse) return dx * dx + dy * dy <= 1.0;
  return std::abs(dx) + std::abs(dy) <= 1.0;
}

LabelMap rasterize_labels(const SceneSpec& spec) {
  LabelMap out(spec.height, spec.width, spec.background);
  for (const auto& o : spec.objects)
    for (std::size_t y = o.y; y < std::min(o.y + o.height, spec.height); ++y)
      for (std::size_t x = o.x; x < std::min(o.x + o.width, spec.width); ++x)
        if (covers(o, spec.cell, y, x)) out.at(y, x) = o.category;
  const std::size_t b = spec.ignore_border;
  for (std::size_t y = 0; y < spec.height; ++y)
    for (std::size_t x = 0; x < spec.width; ++x)
      if (y < b || x < b || y + b >= spec.height || x + b >= spec.width) out.at(y, x) = kIgnoreLabel;
  return out;
}

SceneSpec generate_scene(std::uint64_t seed, const SceneConfig& config) {
  config.validate();
  Rng rng(seed);
  const auto lo = static_cast<std::int64_t>(multiple_of(config.min_size, config.cell) / config.cell);
  const auto hi = static_cast<std::int64_t>(std::min(config.max_size, std::min(config.height, config.width)) / config.cell);
  for (int attempt = 0; attempt < 64; ++attempt) {
    SceneSpec s;
    s.height = config.height;
    s.width = config.width;
    s.cell = config.cell;
    s.categories = config.categories;
    s.ignore_border = config.ignore_border;
    s.seed = seed;
    const auto k = static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::int64_t>(config.min_objects), static_cast<std::int64_t>(config.max_objects)));
    for (std::size_t i = 0; i < k; ++i) {
      SceneObject o;
      o.kind = static_cast<ShapeKind>(rng.uniform_int(3));
      o.category = static_cast<Label>(rng.uniform_int(1, static_cast<std::int64_t>(config.categories) - 1));
      o.width = static_cast<std::size_t>(rng.uniform_int(lo, hi)) * config.cell;
      o.height = static_cast<std::size_t>(rng.uniform_int(lo, hi)) * config.cell;
      o.x = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>((config.width - o.width) / config.cell))) * config.cell;
      o.y = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>((config.height - o.height) / config.cell))) * config.cell;
      s.objects.push_back(o);
    }
    s.light_x = rng.uniform(0.0, static_cast<double>(config.width));
    s.light_y = rng.uniform(0.0, static_cast<double>(config.height));
    s.light_sigma = rng.uniform(12.0, 24.0);
    const auto labels = rasterize_labels(s);
    std::set<Label> distinct;
    for (Label l : labels.values)
      if (l != kIgnoreLabel) distinct.insert(l);
    if (distinct.size() >= 2) return s;
  }
  throw ConfigError("scene: could not place objects showing two categories");
}

SampleRecord render_modalities(const SceneSpec& spec) {
  const std::size_t h = spec.height, w = spec.width, n = h * w;
  LabelMap labels = rasterize_labels(spec);
  // Category per pixel before the ignore border is applied.
  SceneSpec unbordered = spec;
  unbordered.ignore_border = 0;
  const LabelMap cats = spec.ignore_border == 0 ? labels : rasterize_labels(unbordered);

  std::vector<float> app(3 * n), depth(n), event(n, 0.0f), range(n);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t i = y * w + x;
      const Label c = cats.values[i];
      const double dx = static_cast<double>(x) - spec.light_x, dy = static_cast<double>(y) - spec.light_y;
      const double illum = 0.85 + 0.3 * std::exp(-(dx * dx + dy * dy) / (2.0 * spec.light_sigma * spec.light_sigma));
      const auto color = category_color(c);
      for (std::size_t ch = 0; ch < 3; ++ch) app[ch * n + i] = static_cast<float>(2.0 * color[ch] * illum - 1.0);
      const double d = category_depth(c, spec.categories) + 0.15 * static_cast<double>(y) / static_cast<double>(h);
      depth[i] = static_cast<float>(2.0 * d - 1.0);
      const double theta = std::atan2(static_cast<double>(h - y) - 0.5, static_cast<double>(x) + 0.5 - 0.5 * static_cast<double>(w));
      const auto sector = static_cast<std::size_t>(theta / (std::numbers::pi / static_cast<double>(kRangeSectors)));
      range[i] = sector % 4 == 3 ? 0.0f : depth[i];
    }
  }
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double mag2 = 0.0;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const float* a = app.data() + ch * n;
        const double gx = x + 1 < w ? static_cast<double>(a[y * w + x + 1]) - a[y * w + x] : 0.0;
        const double gy = y + 1 < h ? static_cast<double>(a[(y + 1) * w + x]) - a[y * w + x] : 0.0;
        mag2 += gx * gx + gy * gy;
      }
      const double mag = std::sqrt(mag2);
      if (mag > kEventThreshold) event[y * w + x] = static_cast<float>(mag);
    }
  }
  SampleRecord r;
  r.modalities.emplace_back(Shape{3, h, w}, std::move(app));
  r.modalities.emplace_back(Shape{1, h, w}, std::move(depth));
  r.modalities.emplace_back(Shape{1, h, w}, std::move(event));
  r.modalities.emplace_back(Shape{1, h, w}, std::move(range));
  r.labels = std::move(labels);
  r.seed = spec.seed;
  return r;
}

std::uint64_t sample_seed(std::uint64_t global_seed, std::uint64_t index) { return global_seed ^ index; }

std::vector<SampleRecord> generate_samples(const SceneConfig& config, std::uint64_t global_seed, std::size_t count,
                                           std::uint64_t first_index) {
  std::vector<SampleRecord> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i)
    out.push_back(render_modalities(generate_scene(sample_seed(global_seed, first_index + i), config)));
  return out;
}

}  // namespace equiseg
