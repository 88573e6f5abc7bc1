#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "equiseg/attention.hpp"

namespace equiseg {

enum class HubMode { learned, mean };

// Ablation switches of the cross-modal block.
struct CmtbSwitches {
  HubMode hub = HubMode::learned;
  bool cross_attention = true;
  bool residual_add = true;
};

/// Self-Query Hub: per-position linear score of each auxiliary, softmax over
/// auxiliaries, weighted sum.
template <typename T>
struct SqHubParams {
  Tensor<T> score_w;  // [D x 1]
  Tensor<T> score_b;  // [1]
  static SqHubParams create(ParamStore<T>& store, const std::string& prefix, std::size_t dim, Rng& rng);
};

/// Parallel Pooling Mixer: identity, 3x3 average and 3x3 max branches mixed
/// back to D channels by a pointwise projection.
template <typename T>
struct PpxParams {
  Tensor<T> mix_w;  // [3D x D]
  Tensor<T> mix_b;  // [D]
  static PpxParams create(ParamStore<T>& store, const std::string& prefix, std::size_t dim, Rng& rng);
};

template <typename T>
struct CmtbParams {
  BlockParams<T> block;
  AttentionParams<T> cross;
  Tensor<T> cross_q_norm_g, cross_q_norm_b, cross_kv_norm_g, cross_kv_norm_b;
  SqHubParams<T> hub;
  PpxParams<T> ppx;
  static CmtbParams create(ParamStore<T>& store, const std::string& prefix, std::size_t dim,
                           std::size_t heads, std::size_t sr, Rng& rng);
};

// Combines auxiliary features [L x D] into one. With HubMode::mean the
// learned scoring is replaced by the arithmetic mean. If `weights_out` is
// given it receives the per-position weights [L x M].
template <typename T>
Tensor<T> sq_hub(std::span<const Tensor<T>> aux, const SqHubParams<T>& p, HubMode mode = HubMode::learned,
                 Tensor<T>* weights_out = nullptr);

template <typename T>
Tensor<T> ppx(const Tensor<T>& x, const PpxParams<T>& p, GridSize grid);

/// f' = x + mhsa(norm(x)); f_aux = ppx(sq_hub(aux)); f_c = mhca(f', f_aux);
/// returns mix_ffn(f' + f_c). Cross-attention is skipped when `aux` is empty.
template <typename T>
Tensor<T> cmtb_stage(const Tensor<T>& primary, std::span<const Tensor<T>> aux, const CmtbParams<T>& p,
                     GridSize grid, const CmtbSwitches& switches = {});

struct StageConfig {
  std::size_t embed_dim = 16;
  std::size_t depth = 1;
  std::size_t heads = 1;
  std::size_t sr = 1;
  std::size_t patch_stride = 4;
  std::size_t patch_kernel = 7;
};

struct EncoderConfig {
  std::vector<StageConfig> stages;
  // Share stage parameters across modality branches (the first patch
  // embedding stays per-modality since input channel counts differ).
  bool share_branches = false;

  // dims (16, 32, 64, 128), depth 1, heads (1, 2, 4, 8), sr (8, 4, 2, 1).
  static EncoderConfig desk_default();
  // Spatial extent of each stage's output for an input of the given size.
  std::vector<GridSize> stage_grids(GridSize input) const;
  void validate() const;
};

/// One sample's aligned modality maps [C_n x H x W] with a presence mask.
template <typename T>
struct ModalityBundle {
  std::vector<Tensor<T>> maps;
  std::vector<bool> present;
  std::vector<std::string> names;

  std::size_t size() const { return maps.size(); }
  std::size_t present_count() const;
  GridSize grid() const;
  void validate() const;
};

/// features[stage][modality] is [L_stage x D_stage]; absent modalities hold zeros.
template <typename T>
struct StageFeatures {
  std::vector<std::vector<Tensor<T>>> features;
  std::vector<GridSize> grids;
  std::vector<bool> present;
};

template <typename T>
struct PatchEmbedParams {
  Tensor<T> kernel, bias, norm_g, norm_b;
  std::size_t stride = 1;
  std::size_t padding = 0;
};

template <typename T>
struct BranchStageParams {
  PatchEmbedParams<T> embed;
  std::vector<CmtbParams<T>> blocks;
  Tensor<T> norm_g, norm_b;
};

/// Four-stage multi-branch encoder: every present modality is encoded as the
/// primary of its own branch while the other present modalities' stage
/// inputs act as auxiliaries.
template <typename T>
class Encoder {
 public:
  Encoder(const EncoderConfig& config, const std::vector<std::size_t>& in_channels, ParamStore<T>& store,
          Rng& rng, const std::string& prefix = "enc");

  StageFeatures<T> forward(const ModalityBundle<T>& bundle, const CmtbSwitches& switches = {}) const;

  const EncoderConfig& config() const { return config_; }
  std::size_t modality_count() const { return branches_.size(); }
  const BranchStageParams<T>& branch(std::size_t modality, std::size_t stage) const {
    return branches_[modality][stage];
  }
  BranchStageParams<T>& branch(std::size_t modality, std::size_t stage) { return branches_[modality][stage]; }

 private:
  EncoderConfig config_;
  std::vector<std::size_t> in_channels_;
  std::vector<std::vector<BranchStageParams<T>>> branches_;
};

}  // namespace equiseg
