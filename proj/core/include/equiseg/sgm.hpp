#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "equiseg/cmtb.hpp"
#include "equiseg/labels.hpp"
#include "equiseg/random.hpp"

namespace equiseg {

enum class PairingMode { random, cosine };
// Which axis of a prototype matrix [C x D] the KL distributions run along.
enum class KlAxis { channel, category };

struct SgmConfig {
  bool enabled = false;
  double lambda = 60.0;
  PairingMode pairing = PairingMode::random;
  KlAxis kl_axis = KlAxis::channel;
  // When off, per-pixel features are distilled directly instead of
  // per-category prototypes.
  bool prototype = true;
};

/// Per-category mean features [C x D]; rows of absent categories are zero
/// and must not be read.
template <typename T>
struct Prototypes {
  Tensor<T> protos;
  std::vector<bool> present;
  std::vector<std::size_t> present_ids() const;
};

// features [L x D], labels with L pixels. Ignore pixels are excluded.
template <typename T>
Prototypes<T> compute_prototypes(const Tensor<T>& features, const LabelMap& labels, std::size_t categories);

// Top-left representative of each block; requires exact divisibility.
LabelMap downsample_labels(const LabelMap& labels, GridSize target);

/// Teacher/student assignment for one training step.
struct Pairing {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (teacher, student)
  std::optional<std::size_t> dropped;
  // Every index in [0, n) appears exactly once across pairs and dropped.
  bool is_partition_of(std::size_t n) const;
};

// Uniform random permutation; consecutive entries form (teacher, student)
// pairs and for odd n the last index is dropped.
Pairing assign_pairs(std::size_t n, Rng& rng);

// Greedy pairing by descending cosine similarity of per-modality summary
// vectors. Roles within a pair are drawn from `rng`; for odd n the leftover
// modality is dropped.
Pairing cosine_pairs(std::span<const std::vector<double>> summaries, Rng& rng);

/// protos[modality][stage]
template <typename T>
struct PrototypeSet {
  std::vector<std::vector<Prototypes<T>>> protos;
};

template <typename T>
PrototypeSet<T> build_prototypes(const StageFeatures<T>& features, const LabelMap& labels, std::size_t categories);

template <typename T>
struct SgmLoss {
  Tensor<T> value;
  // Set when no category was present at any stage; value is then 0.
  bool no_category = false;
};

/// Sum over stages and pairs of the mean per-category KL between
/// softmax-normalized teacher and student prototype rows. Teacher rows are
/// detached. Pairs touching an absent modality are skipped.
template <typename T>
SgmLoss<T> sgm_loss(const PrototypeSet<T>& protos, const std::vector<bool>& present, const Pairing& pairing,
                    KlAxis axis = KlAxis::channel);

// Full self-guidance term from encoder features, honoring `config.prototype`
// and `config.kl_axis`.
template <typename T>
SgmLoss<T> self_guidance_loss(const StageFeatures<T>& features, const LabelMap& labels, std::size_t categories,
                              const Pairing& pairing, const SgmConfig& config);

// Mean of present-category prototype rows at the last stage, per modality.
template <typename T>
std::vector<std::vector<double>> prototype_summaries(const PrototypeSet<T>& protos);

}  // namespace equiseg
