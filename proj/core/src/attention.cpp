#include "equiseg/attention.hpp"

#include <cmath>

#include "equiseg/ops.hpp"

namespace equiseg {

namespace {

void require_tokens(std::size_t tokens, GridSize grid, const char* op) {
  if (grid.tokens() != tokens)
    throw ShapeError(std::string(op) + ": " + std::to_string(tokens) + " tokens do not form a " +
                     std::to_string(grid.height) + "x" + std::to_string(grid.width) + " grid");
}

}  // namespace

template <typename T>
void AttentionParams<T>::validate() const {
  if (heads == 0) throw ShapeError("attention: heads must be positive");
  const std::size_t d = w_q.rank() == 2 ? w_q.dim(0) : 0;
  if (d == 0 || d % heads != 0)
    throw ShapeError("attention: dim " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  for (const auto* w : {&w_q, &w_k, &w_v, &w_o})
    if (w->shape() != Shape{d, d}) throw ShapeError("attention: projection must be [D x D]");
  for (const auto* b : {&b_q, &b_k, &b_v, &b_o})
    if (b->shape() != Shape{d}) throw ShapeError("attention: bias must be [D]");
}

template <typename T>
AttentionParams<T> AttentionParams<T>::create(ParamStore<T>& store, const std::string& prefix,
                                              std::size_t dim, std::size_t heads, Rng& rng) {
  AttentionParams p;
  p.heads = heads;
  p.w_q = store.add(prefix + ".q.w", init::trunc_normal<T>({dim, dim}, 0.02, rng));
  p.b_q = store.add(prefix + ".q.b", init::zeros<T>({dim}));
  p.w_k = store.add(prefix + ".k.w", init::trunc_normal<T>({dim, dim}, 0.02, rng));
  p.b_k = store.add(prefix + ".k.b", init::zeros<T>({dim}));
  p.w_v = store.add(prefix + ".v.w", init::trunc_normal<T>({dim, dim}, 0.02, rng));
  p.b_v = store.add(prefix + ".v.b", init::zeros<T>({dim}));
  p.w_o = store.add(prefix + ".o.w", init::trunc_normal<T>({dim, dim}, 0.02, rng));
  p.b_o = store.add(prefix + ".o.b", init::zeros<T>({dim}));
  p.validate();
  return p;
}

template <typename T>
BlockParams<T> BlockParams<T>::create(ParamStore<T>& store, const std::string& prefix, std::size_t dim,
                                      std::size_t heads, std::size_t sr, Rng& rng, std::size_t mlp_ratio) {
  if (sr == 0) throw ShapeError("block: sr must be positive");
  BlockParams p;
  p.sr = sr;
  p.norm_g = store.add(prefix + ".norm1.g", init::ones<T>({dim}));
  p.norm_b = store.add(prefix + ".norm1.b", init::zeros<T>({dim}));
  p.attn = AttentionParams<T>::create(store, prefix + ".attn", dim, heads, rng);
  if (sr > 1) {
    const double fan_out = static_cast<double>(sr * sr * dim);
    p.sr_kernel = store.add(prefix + ".sr.w", init::normal<T>({sr, sr, dim, dim}, std::sqrt(2.0 / fan_out), rng));
    p.sr_bias = store.add(prefix + ".sr.b", init::zeros<T>({dim}));
    p.sr_norm_g = store.add(prefix + ".sr_norm.g", init::ones<T>({dim}));
    p.sr_norm_b = store.add(prefix + ".sr_norm.b", init::zeros<T>({dim}));
  }
  const std::size_t hidden = dim * mlp_ratio;
  p.ffn_norm_g = store.add(prefix + ".norm2.g", init::ones<T>({dim}));
  p.ffn_norm_b = store.add(prefix + ".norm2.b", init::zeros<T>({dim}));
  p.fc1_w = store.add(prefix + ".fc1.w", init::trunc_normal<T>({dim, hidden}, 0.02, rng));
  p.fc1_b = store.add(prefix + ".fc1.b", init::zeros<T>({hidden}));
  p.dw_kernel = store.add(prefix + ".dw.w", init::normal<T>({3, 3, hidden}, std::sqrt(2.0 / 9.0), rng));
  p.dw_bias = store.add(prefix + ".dw.b", init::zeros<T>({hidden}));
  p.fc2_w = store.add(prefix + ".fc2.w", init::trunc_normal<T>({hidden, dim}, 0.02, rng));
  p.fc2_b = store.add(prefix + ".fc2.b", init::zeros<T>({dim}));
  return p;
}

template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& query_src, const Tensor<T>& kv_src,
                               const AttentionParams<T>& p, std::vector<Tensor<T>>* weights) {
  const std::size_t d = p.dim();
  if (query_src.rank() != 2 || kv_src.rank() != 2 || query_src.dim(1) != d || kv_src.dim(1) != d)
    throw ShapeError("attention: inputs " + shape_to_string(query_src.shape()) + " and " +
                     shape_to_string(kv_src.shape()) + " do not match dim " + std::to_string(d));
  const auto q = ops::linear(query_src, p.w_q, p.b_q);
  const auto k = ops::linear(kv_src, p.w_k, p.b_k);
  const auto v = ops::linear(kv_src, p.w_v, p.b_v);
  const std::size_t dk = p.head_dim();
  const T inv_sqrt_dk = T(1) / std::sqrt(T(dk));
  std::vector<Tensor<T>> heads;
  heads.reserve(p.heads);
  for (std::size_t h = 0; h < p.heads; ++h) {
    const auto qh = p.heads == 1 ? q : ops::slice(q, 1, h * dk, (h + 1) * dk);
    const auto kh = p.heads == 1 ? k : ops::slice(k, 1, h * dk, (h + 1) * dk);
    const auto vh = p.heads == 1 ? v : ops::slice(v, 1, h * dk, (h + 1) * dk);
    const auto scores = ops::scale(ops::matmul(qh, ops::transpose(kh)), inv_sqrt_dk);
    const auto attn = ops::softmax(scores, 1);
    if (weights) weights->push_back(attn);
    heads.push_back(ops::matmul(attn, vh));
  }
  const auto merged = p.heads == 1 ? heads[0] : ops::concat<T>(heads, 1);
  return ops::linear(merged, p.w_o, p.b_o);
}

template <typename T>
Tensor<T> mhsa(const Tensor<T>& x, const BlockParams<T>& p, GridSize grid, std::vector<Tensor<T>>* weights) {
  if (x.rank() != 2) throw ShapeError("mhsa: expected [L x D], got " + shape_to_string(x.shape()));
  require_tokens(x.dim(0), grid, "mhsa");
  if (p.sr == 1) return multi_head_attention(x, x, p.attn, weights);
  if (grid.height % p.sr != 0 || grid.width % p.sr != 0)
    throw ShapeError("mhsa: sr " + std::to_string(p.sr) + " does not divide " + std::to_string(grid.height) +
                     "x" + std::to_string(grid.width));
  const std::size_t d = x.dim(1);
  const auto spatial = ops::reshape(x, {grid.height, grid.width, d});
  const auto reduced = ops::add_bias(ops::conv2d(spatial, p.sr_kernel, p.sr, 0), p.sr_bias);
  const auto kv = ops::layer_norm(ops::reshape(reduced, {grid.tokens() / (p.sr * p.sr), d}), p.sr_norm_g,
                                  p.sr_norm_b);
  return multi_head_attention(x, kv, p.attn, weights);
}

template <typename T>
Tensor<T> mhca(const Tensor<T>& f_primary, const Tensor<T>& f_aux, const AttentionParams<T>& p,
               std::vector<Tensor<T>>* weights) {
  if (f_primary.shape() != f_aux.shape())
    throw ShapeError("mhca: primary " + shape_to_string(f_primary.shape()) + " and auxiliary " +
                     shape_to_string(f_aux.shape()) + " differ");
  return multi_head_attention(f_primary, f_aux, p, weights);
}

template <typename T>
Tensor<T> residual_fuse(const Tensor<T>& f_prime, const Tensor<T>& f_c) {
  return ops::add(f_prime, f_c);
}

template <typename T>
Tensor<T> mix_ffn(const Tensor<T>& x, const BlockParams<T>& p, GridSize grid) {
  if (x.rank() != 2) throw ShapeError("mix_ffn: expected [L x D], got " + shape_to_string(x.shape()));
  require_tokens(x.dim(0), grid, "mix_ffn");
  const std::size_t hidden = p.fc1_w.dim(1);
  auto h = ops::linear(ops::layer_norm(x, p.ffn_norm_g, p.ffn_norm_b), p.fc1_w, p.fc1_b);
  h = ops::reshape(h, {grid.height, grid.width, hidden});
  h = ops::add_bias(ops::depthwise_conv2d(h, p.dw_kernel, 1, 1), p.dw_bias);
  h = ops::reshape(ops::gelu(h), {grid.tokens(), hidden});
  return ops::add(x, ops::linear(h, p.fc2_w, p.fc2_b));
}

#define EQUISEG_ATTN_INSTANTIATE(T)                                                                 \
  template struct AttentionParams<T>;                                                               \
  template struct BlockParams<T>;                                                                   \
  template Tensor<T> multi_head_attention<T>(const Tensor<T>&, const Tensor<T>&,                    \
                                             const AttentionParams<T>&, std::vector<Tensor<T>>*);   \
  template Tensor<T> mhsa<T>(const Tensor<T>&, const BlockParams<T>&, GridSize, std::vector<Tensor<T>>*); \
  template Tensor<T> mhca<T>(const Tensor<T>&, const Tensor<T>&, const AttentionParams<T>&,         \
                             std::vector<Tensor<T>>*);                                              \
  template Tensor<T> residual_fuse<T>(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> mix_ffn<T>(const Tensor<T>&, const BlockParams<T>&, GridSize);

EQUISEG_ATTN_INSTANTIATE(float)
EQUISEG_ATTN_INSTANTIATE(double)

}  // namespace equiseg
