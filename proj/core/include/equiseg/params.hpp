#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "equiseg/random.hpp"
#include "equiseg/tensor.hpp"
#include <nlohmann/json.hpp>

namespace equiseg {

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> value;
};

/// Ordered registry of trainable leaves. Insertion order fixes the checkpoint
/// layout and the optimizer's visiting order.
template <typename T>
class ParamStore {
 public:
  Tensor<T> add(const std::string& name, Tensor<T> value);
  const Tensor<T>& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<NamedParam<T>>& entries() { return entries_; }
  const std::vector<NamedParam<T>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t element_count() const;
  void zero_grad();

 private:
  std::vector<NamedParam<T>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

namespace init {
// Gaussian truncated to +-2 sigma.
template <typename T> Tensor<T> trunc_normal(Shape shape, double stddev, Rng& rng);
template <typename T> Tensor<T> normal(Shape shape, double stddev, Rng& rng);
template <typename T> Tensor<T> zeros(Shape shape) { return Tensor<T>(std::move(shape), T(0)); }
template <typename T> Tensor<T> ones(Shape shape) { return Tensor<T>(std::move(shape), T(1)); }
}  // namespace init

inline constexpr int kCheckpointVersion = 1;

/// Writes `dir/manifest.json` (names, shapes, byte offsets, `meta`) and
/// `dir/tensors.eqt` (the concatenated tensor containers).
template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const ParamStore<T>& params,
                     const nlohmann::json& meta);

nlohmann::json read_checkpoint_manifest(const std::filesystem::path& dir);

// Loads values into an already-built store; every name must match.
template <typename T>
void load_checkpoint(const std::filesystem::path& dir, ParamStore<T>& params);

}  // namespace equiseg
