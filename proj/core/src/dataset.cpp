#include "equiseg/dataset.hpp"

#include <algorithm>
#include <fstream>

#include "equiseg/errors.hpp"
#include "equiseg/serialize.hpp"

namespace fs = std::filesystem;

namespace equiseg {

namespace {
constexpr const char* kFormat = "equiseg-dataset";

fs::path map_path(const fs::path& dir, std::size_t index, const std::string& name) {
  return dir / (std::to_string(index) + "_" + name + ".eqt");
}
}  // namespace

nlohmann::json DatasetManifest::to_json() const {
  return {{"format", kFormat},     {"version", version},     {"count", count},
          {"categories", categories}, {"modalities", modalities}, {"channels", channels},
          {"height", height},       {"width", width},         {"sample_seeds", sample_seeds},
          {"ignore_label", kIgnoreLabel}, {"generator", generator}};
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j) {
  DatasetManifest m;
  try {
    if (j.at("format").get<std::string>() != kFormat) throw IoError("not a dataset manifest");
    m.version = j.at("version").get<int>();
    if (m.version != kDatasetVersion)
      throw IoError("dataset version " + std::to_string(m.version) + " unsupported (expected " +
                    std::to_string(kDatasetVersion) + ")");
    m.count = j.at("count").get<std::size_t>();
    m.categories = j.at("categories").get<std::size_t>();
    m.modalities = j.at("modalities").get<std::vector<std::string>>();
    m.channels = j.at("channels").get<std::vector<std::size_t>>();
    m.height = j.at("height").get<std::size_t>();
    m.width = j.at("width").get<std::size_t>();
    m.sample_seeds = j.at("sample_seeds").get<std::vector<std::uint64_t>>();
    m.generator = j.value("generator", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed dataset manifest: ") + e.what());
  }
  if (m.modalities.size() != m.channels.size() || m.sample_seeds.size() != m.count)
    throw IoError("inconsistent dataset manifest");
  return m;
}

void write_dataset(const fs::path& dir, std::span<const SampleRecord> samples, std::size_t categories,
                   const nlohmann::json& generator) {
  if (samples.empty()) throw ShapeError("write_dataset: no samples");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  DatasetManifest m;
  m.count = samples.size();
  m.categories = categories;
  m.modalities = default_modality_names();
  m.channels = default_modality_channels();
  m.height = samples[0].labels.height;
  m.width = samples[0].labels.width;
  m.generator = generator;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (s.modalities.size() != m.modalities.size()) throw ShapeError("write_dataset: wrong modality count");
    if (s.labels.height != m.height || s.labels.width != m.width) throw ShapeError("write_dataset: size mismatch");
    for (std::size_t k = 0; k < s.modalities.size(); ++k)
      save_array(map_path(dir, i, m.modalities[k]), to_raw(s.modalities[k]));
    save_array(map_path(dir, i, "label"), to_raw(s.labels));
    m.sample_seeds.push_back(s.seed);
  }
  std::ofstream out(dir / "manifest.json");
  out << m.to_json().dump(2) << '\n';
  if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
}

Dataset read_dataset(const fs::path& dir, const std::vector<std::string>& modality_filter) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("missing dataset manifest in " + dir.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("unparseable dataset manifest: ") + e.what());
  }
  Dataset d;
  d.manifest = DatasetManifest::from_json(j);
  const auto& m = d.manifest;
  for (const auto& f : modality_filter)
    if (std::find(m.modalities.begin(), m.modalities.end(), f) == m.modalities.end())
      throw ConfigError("unknown modality '" + f + "'");
  d.present.resize(m.modalities.size());
  for (std::size_t k = 0; k < m.modalities.size(); ++k)
    d.present[k] = modality_filter.empty() ||
                   std::find(modality_filter.begin(), modality_filter.end(), m.modalities[k]) != modality_filter.end();
  for (std::size_t i = 0; i < m.count; ++i) {
    SampleRecord s;
    s.seed = m.sample_seeds[i];
    for (std::size_t k = 0; k < m.modalities.size(); ++k) {
      if (!d.present[k]) {
        s.modalities.emplace_back(Shape{m.channels[k], m.height, m.width}, 0.0f);
        continue;
      }
      auto t = from_raw<float>(load_array(map_path(dir, i, m.modalities[k])));
      if (t.shape() != Shape{m.channels[k], m.height, m.width})
        throw IoError("sample " + std::to_string(i) + " " + m.modalities[k] + " has shape " +
                      shape_to_string(t.shape()));
      s.modalities.push_back(std::move(t));
    }
    s.labels = labels_from_raw(load_array(map_path(dir, i, "label")));
    if (s.labels.height != m.height || s.labels.width != m.width)
      throw IoError("sample " + std::to_string(i) + " label map has the wrong size");
    d.samples.push_back(std::move(s));
  }
  return d;
}

template <typename T>
ModalityBundle<T> Dataset::bundle(std::size_t index) const {
  const auto& s = samples.at(index);
  ModalityBundle<T> b;
  b.names = manifest.modalities;
  b.present = present;
  for (const auto& map : s.modalities) {
    if constexpr (std::is_same_v<T, float>) {
      b.maps.push_back(map);
    } else {
      auto v = map.data();
      b.maps.emplace_back(map.shape(), std::vector<T>(v.begin(), v.end()));
    }
  }
  return b;
}

template <typename T>
std::vector<ModalityBundle<T>> Dataset::bundles() const {
  std::vector<ModalityBundle<T>> out;
  for (std::size_t i = 0; i < samples.size(); ++i) out.push_back(bundle<T>(i));
  return out;
}

std::vector<LabelMap> Dataset::labels() const {
  std::vector<LabelMap> out;
  for (const auto& s : samples) out.push_back(s.labels);
  return out;
}

template ModalityBundle<float> Dataset::bundle<float>(std::size_t) const;
template ModalityBundle<double> Dataset::bundle<double>(std::size_t) const;
template std::vector<ModalityBundle<float>> Dataset::bundles<float>() const;
template std::vector<ModalityBundle<double>> Dataset::bundles<double>() const;

}  // namespace equiseg
