#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "equiseg/params.hpp"
#include "equiseg/tensor.hpp"

namespace equiseg {

struct GridSize {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t tokens() const { return height * width; }
  friend bool operator==(const GridSize&, const GridSize&) = default;
};

/// Query/key/value/output projections of one multi-head attention unit.
template <typename T>
struct AttentionParams {
  Tensor<T> w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
  std::size_t heads = 1;

  std::size_t dim() const { return w_q.dim(0); }
  std::size_t head_dim() const { return dim() / heads; }
  // Throws ShapeError unless every projection is [D x D] and heads divides D.
  void validate() const;

  static AttentionParams create(ParamStore<T>& store, const std::string& prefix, std::size_t dim,
                                std::size_t heads, Rng& rng);
};

/// One transformer block: spatially-reduced self-attention plus Mix-FFN.
/// Normalization is applied before each sub-layer.
template <typename T>
struct BlockParams {
  AttentionParams<T> attn;
  std::size_t sr = 1;
  Tensor<T> norm_g, norm_b;
  // Key/value reduction (present only when sr > 1).
  Tensor<T> sr_kernel, sr_bias, sr_norm_g, sr_norm_b;
  Tensor<T> ffn_norm_g, ffn_norm_b;
  Tensor<T> fc1_w, fc1_b, dw_kernel, dw_bias, fc2_w, fc2_b;

  static BlockParams create(ParamStore<T>& store, const std::string& prefix, std::size_t dim,
                            std::size_t heads, std::size_t sr, Rng& rng, std::size_t mlp_ratio = 4);
};

// softmax(Q K^T / sqrt(d_k)) V per head, heads concatenated then projected by
// W_O. Queries come from `query_src`, keys and values from `kv_src`. When
// `weights` is non-null the per-head attention matrices are appended to it.
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& query_src, const Tensor<T>& kv_src,
                               const AttentionParams<T>& p, std::vector<Tensor<T>>* weights = nullptr);

// Self-attention over x [L x D]; keys/values come from an sr x sr strided
// convolution of x laid out on `grid`.
template <typename T>
Tensor<T> mhsa(const Tensor<T>& x, const BlockParams<T>& p, GridSize grid,
               std::vector<Tensor<T>>* weights = nullptr);

// Cross-attention: queries from the primary feature, keys/values from the
// auxiliary feature.
template <typename T>
Tensor<T> mhca(const Tensor<T>& f_primary, const Tensor<T>& f_aux, const AttentionParams<T>& p,
               std::vector<Tensor<T>>* weights = nullptr);

template <typename T>
Tensor<T> residual_fuse(const Tensor<T>& f_prime, const Tensor<T>& f_c);

// x + fc2(gelu(dwconv3x3(fc1(norm(x))))) with the 4x hidden map on `grid`.
template <typename T>
Tensor<T> mix_ffn(const Tensor<T>& x, const BlockParams<T>& p, GridSize grid);

}  // namespace equiseg
