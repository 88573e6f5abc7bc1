#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "equiseg/cmtb.hpp"
#include "equiseg/labels.hpp"
#include "equiseg/sgm.hpp"
#include <nlohmann/json.hpp>

namespace equiseg {

// Numeric profile: 64-bit for verification, 32-bit for training.
enum class Profile { train, test };

struct ModelConfig {
  std::vector<std::string> modality_names{"appearance", "depth", "event", "range"};
  std::vector<std::size_t> in_channels{3, 1, 1, 1};
  EncoderConfig encoder = EncoderConfig::desk_default();
  std::size_t decode_dim = 32;
  std::size_t categories = 6;
  CmtbSwitches switches;
  SgmConfig sgm;
  Profile profile = Profile::train;
  std::uint64_t seed = 0;

  std::size_t modality_count() const { return modality_names.size(); }
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

template <typename T>
struct DecodeParams {
  std::vector<Tensor<T>> proj_w, proj_b;  // per stage: [D_i x E], [E]
  Tensor<T> fuse_w, fuse_b;               // [S*E x E], [E]
  Tensor<T> cls_w, cls_b;                 // [E x C], [C]

  static DecodeParams create(ParamStore<T>& store, const EncoderConfig& encoder, std::size_t decode_dim,
                             std::size_t categories, Rng& rng);
};

template <typename T>
struct SegOutput {
  Tensor<T> logits;               // [H x W x C], channels-last
  std::vector<Tensor<T>> fused;   // per-stage fused features
};

// Per-stage elementwise mean over present modalities.
template <typename T>
std::vector<Tensor<T>> fuse_modalities(const StageFeatures<T>& features);

// Project each stage to the decode width, upsample to the first stage's grid,
// concatenate, fuse with a pointwise layer, classify, upsample to `output`.
template <typename T>
SegOutput<T> decode_head(std::span<const Tensor<T>> fused, std::span<const GridSize> grids,
                         const DecodeParams<T>& p, GridSize output);

// Mean over non-ignored pixels of -log softmax(logits)[true label]. `logits`
// has the category axis last and one row per label.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const LabelMap& labels, Label ignore = kIgnoreLabel);

template <typename T>
Tensor<T> total_loss(const Tensor<T>& ce, const Tensor<T>& sgm, double lambda);

// Argmax over the last axis; ties resolve to the lower category id.
template <typename T>
LabelMap argmax_labels(const Tensor<T>& logits);

template <typename T>
class SegModel {
 public:
  explicit SegModel(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  const Encoder<T>& encoder() const { return encoder_; }

  StageFeatures<T> encode(const ModalityBundle<T>& bundle) const;
  SegOutput<T> head(const StageFeatures<T>& features, GridSize output) const;
  SegOutput<T> forward(const ModalityBundle<T>& bundle) const;
  // Inference without gradient recording.
  LabelMap predict(const ModalityBundle<T>& bundle) const;

 private:
  ModelConfig config_;
  ParamStore<T> params_;
  Rng init_rng_;
  Encoder<T> encoder_;
  DecodeParams<T> decode_;
};

std::string to_string(Profile p);
std::string to_string(HubMode m);
std::string to_string(PairingMode m);
std::string to_string(KlAxis a);

}  // namespace equiseg
