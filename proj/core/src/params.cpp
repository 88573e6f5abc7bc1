#include "equiseg/params.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "equiseg/serialize.hpp"

namespace equiseg {

template <typename T>
Tensor<T> ParamStore<T>::add(const std::string& name, Tensor<T> value) {
  if (contains(name)) throw ConfigError("duplicate parameter name " + name);
  value.set_requires_grad(true);
  index_.emplace(name, entries_.size());
  entries_.push_back({name, value});
  return value;
}

template <typename T>
const Tensor<T>& ParamStore<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter " + name);
  return entries_[it->second].value;
}

template <typename T>
std::size_t ParamStore<T>::element_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.numel();
  return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& e : entries_) e.value.zero_grad();
}

namespace init {

template <typename T>
Tensor<T> trunc_normal(Shape shape, double stddev, Rng& rng) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) {
    double z;
    do {
      z = rng.normal();
    } while (std::abs(z) > 2.0);
    x = static_cast<T>(z * stddev);
  }
  return Tensor<T>(std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> normal(Shape shape, double stddev, Rng& rng) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.normal() * stddev);
  return Tensor<T>(std::move(shape), std::move(v));
}

}  // namespace init

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const ParamStore<T>& params,
                     const nlohmann::json& meta) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir.string());
  std::ostringstream blob;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& p : params.entries()) {
    const auto offset = static_cast<std::size_t>(blob.tellp());
    write_tensor(blob, p.value);
    entries.push_back({{"name", p.name},
                       {"shape", p.value.shape()},
                       {"offset", offset},
                       {"bytes", static_cast<std::size_t>(blob.tellp()) - offset}});
  }
  nlohmann::json manifest = {{"format", "equiseg-checkpoint"},
                             {"version", kCheckpointVersion},
                             {"dtype", std::is_same_v<T, float> ? "f32" : "f64"},
                             {"entries", entries},
                             {"meta", meta}};
  {
    std::ofstream os(dir / "tensors.eqt", std::ios::binary | std::ios::trunc);
    const auto bytes = blob.str();
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("failed to write " + (dir / "tensors.eqt").string());
  }
  std::ofstream ms(dir / "manifest.json", std::ios::trunc);
  ms << manifest.dump(2) << '\n';
  if (!ms) throw IoError("failed to write checkpoint manifest");
}

nlohmann::json read_checkpoint_manifest(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw IoError("missing checkpoint manifest in " + dir.string());
  nlohmann::json manifest;
  try {
    is >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("corrupt checkpoint manifest: ") + e.what());
  }
  if (manifest.value("format", "") != "equiseg-checkpoint" ||
      manifest.value("version", 0) != kCheckpointVersion)
    throw IoError("unsupported checkpoint format in " + dir.string());
  return manifest;
}

template <typename T>
void load_checkpoint(const std::filesystem::path& dir, ParamStore<T>& params) {
  const auto manifest = read_checkpoint_manifest(dir);
  const auto& entries = manifest.at("entries");
  if (entries.size() != params.size())
    throw IoError("checkpoint holds " + std::to_string(entries.size()) + " tensors, model expects " +
                  std::to_string(params.size()));
  std::ifstream is(dir / "tensors.eqt", std::ios::binary);
  if (!is) throw IoError("missing tensors.eqt in " + dir.string());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& p = params.entries()[i];
    if (entries[i].at("name").get<std::string>() != p.name)
      throw IoError("checkpoint entry " + entries[i].at("name").get<std::string>() + " does not match " + p.name);
    is.seekg(static_cast<std::streamoff>(entries[i].at("offset").get<std::size_t>()));
    auto loaded = read_tensor<T>(is);
    if (loaded.shape() != p.value.shape()) throw IoError("shape mismatch for " + p.name);
    auto dst = p.value.mutable_data();
    std::copy(loaded.data().begin(), loaded.data().end(), dst.begin());
  }
}

template class ParamStore<float>;
template class ParamStore<double>;
template Tensor<float> init::trunc_normal<float>(Shape, double, Rng&);
template Tensor<double> init::trunc_normal<double>(Shape, double, Rng&);
template Tensor<float> init::normal<float>(Shape, double, Rng&);
template Tensor<double> init::normal<double>(Shape, double, Rng&);
template void save_checkpoint<float>(const std::filesystem::path&, const ParamStore<float>&, const nlohmann::json&);
template void save_checkpoint<double>(const std::filesystem::path&, const ParamStore<double>&, const nlohmann::json&);
template void load_checkpoint<float>(const std::filesystem::path&, ParamStore<float>&);
template void load_checkpoint<double>(const std::filesystem::path&, ParamStore<double>&);

}  // namespace equiseg
