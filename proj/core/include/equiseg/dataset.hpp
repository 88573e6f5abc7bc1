#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "equiseg/cmtb.hpp"
#include "equiseg/synth.hpp"
#include <nlohmann/json.hpp>

namespace equiseg {

inline constexpr int kDatasetVersion = 1;

struct DatasetManifest {
  int version = kDatasetVersion;
  std::size_t count = 0;
  std::size_t categories = 0;
  std::vector<std::string> modalities;
  std::vector<std::size_t> channels;
  std::size_t height = 0, width = 0;
  std::vector<std::uint64_t> sample_seeds;
  nlohmann::json generator = nlohmann::json::object();

  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j);
};

/// Directory with manifest.json, {index}_{modality}.eqt and {index}_label.eqt.
void write_dataset(const std::filesystem::path& dir, std::span<const SampleRecord> samples, std::size_t categories,
                   const nlohmann::json& generator = nlohmann::json::object());

struct Dataset {
  DatasetManifest manifest;
  std::vector<SampleRecord> samples;
  std::vector<bool> present;  // per modality, from the read filter

  template <typename T>
  ModalityBundle<T> bundle(std::size_t index) const;
  template <typename T>
  std::vector<ModalityBundle<T>> bundles() const;
  std::vector<LabelMap> labels() const;
};

// An empty filter keeps every modality. Filtered-out modalities are not read
// and appear as zero maps with present = false.
Dataset read_dataset(const std::filesystem::path& dir, const std::vector<std::string>& modality_filter = {});

}  // namespace equiseg
