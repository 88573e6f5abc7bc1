#include "equiseg/cmtb.hpp"

#include <cmath>

#include "equiseg/ops.hpp"

namespace equiseg {

template <typename T>
SqHubParams<T> SqHubParams<T>::create(ParamStore<T>& store, const std::string& prefix, std::size_t dim, Rng& rng) {
  SqHubParams p;
  p.score_w = store.add(prefix + ".score.w", init::trunc_normal<T>({dim, 1}, 0.02, rng));
  p.score_b = store.add(prefix + ".score.b", init::zeros<T>({1}));
  return p;
}

template <typename T>
PpxParams<T> PpxParams<T>::create(ParamStore<T>& store, const std::string& prefix, std::size_t dim, Rng& rng) {
  PpxParams p;
  p.mix_w = store.add(prefix + ".mix.w", init::trunc_normal<T>({3 * dim, dim}, 0.02, rng));
  p.mix_b = store.add(prefix + ".mix.b", init::zeros<T>({dim}));
  return p;
}

template <typename T>
CmtbParams<T> CmtbParams<T>::create(ParamStore<T>& store, const std::string& prefix, std::size_t dim,
                                    std::size_t heads, std::size_t sr, Rng& rng) {
  CmtbParams p;
  p.block = BlockParams<T>::create(store, prefix, dim, heads, sr, rng);
  p.cross_q_norm_g = store.add(prefix + ".cross_q_norm.g", init::ones<T>({dim}));
  p.cross_q_norm_b = store.add(prefix + ".cross_q_norm.b", init::zeros<T>({dim}));
  p.cross_kv_norm_g = store.add(prefix + ".cross_kv_norm.g", init::ones<T>({dim}));
  p.cross_kv_norm_b = store.add(prefix + ".cross_kv_norm.b", init::zeros<T>({dim}));
  p.cross = AttentionParams<T>::create(store, prefix + ".cross", dim, heads, rng);
  p.hub = SqHubParams<T>::create(store, prefix + ".hub", dim, rng);
  p.ppx = PpxParams<T>::create(store, prefix + ".ppx", dim, rng);
  return p;
}

template <typename T>
Tensor<T> sq_hub(std::span<const Tensor<T>> aux, const SqHubParams<T>& p, HubMode mode, Tensor<T>* weights_out) {
  if (aux.empty()) throw ShapeError("sq_hub: empty auxiliary list");
  for (const auto& a : aux)
    if (a.shape() != aux[0].shape() || a.rank() != 2)
      throw ShapeError("sq_hub: auxiliary shapes differ: " + shape_to_string(a.shape()) + " vs " +
                       shape_to_string(aux[0].shape()));
  const std::size_t tokens = aux[0].dim(0), m = aux.size();
  if (mode == HubMode::mean) {
    if (weights_out) *weights_out = Tensor<T>({tokens, m}, T(1) / T(m));
    return m == 1 ? aux[0] : ops::mean_of(aux);
  }
  if (m == 1) {
    if (weights_out) *weights_out = Tensor<T>({tokens, 1}, T(1));
    return aux[0];
  }
  std::vector<Tensor<T>> scores;
  scores.reserve(m);
  for (const auto& a : aux) scores.push_back(ops::linear(a, p.score_w, p.score_b));
  const auto weights = ops::softmax(ops::concat<T>(scores, 1), 1);
  if (weights_out) *weights_out = weights;
  Tensor<T> out;
  for (std::size_t i = 0; i < m; ++i) {
    const auto term = ops::mul_rows(aux[i], ops::slice(weights, 1, i, i + 1));
    out = i == 0 ? term : ops::add(out, term);
  }
  return out;
}

template <typename T>
Tensor<T> ppx(const Tensor<T>& x, const PpxParams<T>& p, GridSize grid) {
  if (x.rank() != 2 || x.dim(0) != grid.tokens())
    throw ShapeError("ppx: " + shape_to_string(x.shape()) + " does not form a " + std::to_string(grid.height) +
                     "x" + std::to_string(grid.width) + " grid");
  const std::size_t d = x.dim(1);
  const auto spatial = ops::reshape(x, {grid.height, grid.width, d});
  const std::vector<Tensor<T>> branches{spatial, ops::avg_pool_same(spatial, 3), ops::max_pool_same(spatial, 3)};
  const auto mixed = ops::reshape(ops::concat<T>(branches, 2), {grid.tokens(), 3 * d});
  return ops::linear(mixed, p.mix_w, p.mix_b);
}

template <typename T>
Tensor<T> cmtb_stage(const Tensor<T>& primary, std::span<const Tensor<T>> aux, const CmtbParams<T>& p,
                     GridSize grid, const CmtbSwitches& switches) {
  for (const auto& a : aux)
    if (a.shape() != primary.shape())
      throw ShapeError("cmtb_stage: auxiliary " + shape_to_string(a.shape()) + " does not match primary " +
                       shape_to_string(primary.shape()));
  const auto& blk = p.block;
  const auto f_prime = ops::add(primary, mhsa(ops::layer_norm(primary, blk.norm_g, blk.norm_b), blk, grid));
  Tensor<T> fused = f_prime;
  if (!aux.empty() && switches.cross_attention) {
    const auto f_aux = ppx(sq_hub(aux, p.hub, switches.hub), p.ppx, grid);
    const auto f_c = mhca(ops::layer_norm(f_prime, p.cross_q_norm_g, p.cross_q_norm_b),
                          ops::layer_norm(f_aux, p.cross_kv_norm_g, p.cross_kv_norm_b), p.cross);
    fused = switches.residual_add ? residual_fuse(f_prime, f_c) : f_c;
  }
  return mix_ffn(fused, blk, grid);
}

EncoderConfig EncoderConfig::desk_default() {
  EncoderConfig c;
  const std::size_t dims[4] = {16, 32, 64, 128};
  const std::size_t heads[4] = {1, 2, 4, 8};
  const std::size_t srs[4] = {8, 4, 2, 1};
  const std::size_t strides[4] = {4, 2, 2, 2};
  const std::size_t kernels[4] = {7, 3, 3, 3};
  for (int i = 0; i < 4; ++i) c.stages.push_back({dims[i], 1, heads[i], srs[i], strides[i], kernels[i]});
  return c;
}

std::vector<GridSize> EncoderConfig::stage_grids(GridSize input) const {
  std::vector<GridSize> grids;
  GridSize g = input;
  for (const auto& s : stages) {
    const std::size_t pad = s.patch_kernel / 2;
    if (g.height + 2 * pad < s.patch_kernel || g.width + 2 * pad < s.patch_kernel)
      throw ShapeError("encoder: input too small for stage patch embedding");
    g = {(g.height + 2 * pad - s.patch_kernel) / s.patch_stride + 1,
         (g.width + 2 * pad - s.patch_kernel) / s.patch_stride + 1};
    grids.push_back(g);
  }
  return grids;
}

void EncoderConfig::validate() const {
  if (stages.empty() || stages.size() > 4) throw ConfigError("encoder: between 1 and 4 stages required");
  for (const auto& s : stages) {
    if (s.embed_dim == 0 || s.heads == 0 || s.embed_dim % s.heads != 0)
      throw ConfigError("encoder: embed_dim must be a positive multiple of heads");
    if (s.depth == 0 || s.sr == 0 || s.patch_stride == 0 || s.patch_kernel == 0)
      throw ConfigError("encoder: depth, sr, patch stride and kernel must be positive");
  }
}

template <typename T>
std::size_t ModalityBundle<T>::present_count() const {
  std::size_t n = 0;
  for (bool p : present) n += p ? 1 : 0;
  return n;
}

template <typename T>
GridSize ModalityBundle<T>::grid() const {
  for (std::size_t i = 0; i < maps.size(); ++i)
    if (present[i]) return {maps[i].dim(1), maps[i].dim(2)};
  throw ShapeError("bundle: no modality present");
}

template <typename T>
void ModalityBundle<T>::validate() const {
  if (maps.size() != present.size() || (!names.empty() && names.size() != maps.size()))
    throw ShapeError("bundle: maps, presence mask and names disagree in length");
  if (present_count() == 0) throw ShapeError("bundle: no modality present");
  const GridSize g = grid();
  for (std::size_t i = 0; i < maps.size(); ++i) {
    if (!present[i]) continue;
    if (maps[i].rank() != 3 || maps[i].dim(1) != g.height || maps[i].dim(2) != g.width)
      throw ShapeError("bundle: modality maps are not aligned [C x H x W]");
  }
}

template <typename T>
Encoder<T>::Encoder(const EncoderConfig& config, const std::vector<std::size_t>& in_channels,
                    ParamStore<T>& store, Rng& rng, const std::string& prefix)
    : config_(config), in_channels_(in_channels) {
  config_.validate();
  if (in_channels.empty()) throw ConfigError("encoder: at least one modality required");
  const std::size_t n_mod = in_channels.size();
  branches_.resize(n_mod);
  for (std::size_t n = 0; n < n_mod; ++n) {
    std::size_t prev_dim = in_channels[n];
    for (std::size_t i = 0; i < config_.stages.size(); ++i) {
      const auto& sc = config_.stages[i];
      const bool reuse = config_.share_branches && n > 0;
      const std::string owner = reuse ? prefix + ".m0" : prefix + ".m" + std::to_string(n);
      const std::string sp = owner + ".s" + std::to_string(i);
      BranchStageParams<T> b;
      b.embed.stride = sc.patch_stride;
      b.embed.padding = sc.patch_kernel / 2;
      if (reuse && !(i == 0 && in_channels[n] != in_channels[0])) {
        b = branches_[0][i];
      } else {
        const std::string ep = i == 0 && config_.share_branches ? prefix + ".m" + std::to_string(n) + ".s0" : sp;
        const double fan_out = static_cast<double>(sc.patch_kernel * sc.patch_kernel * sc.embed_dim);
        b.embed.kernel = store.add(ep + ".patch.w",
                                   init::normal<T>({sc.patch_kernel, sc.patch_kernel, prev_dim, sc.embed_dim},
                                                   std::sqrt(2.0 / fan_out), rng));
        b.embed.bias = store.add(ep + ".patch.b", init::zeros<T>({sc.embed_dim}));
        b.embed.norm_g = store.add(ep + ".patch_norm.g", init::ones<T>({sc.embed_dim}));
        b.embed.norm_b = store.add(ep + ".patch_norm.b", init::zeros<T>({sc.embed_dim}));
        if (reuse) {
          // Only the stem differs; everything after it is shared with branch 0.
          b.blocks = branches_[0][i].blocks;
          b.norm_g = branches_[0][i].norm_g;
          b.norm_b = branches_[0][i].norm_b;
        } else {
          for (std::size_t d = 0; d < sc.depth; ++d)
            b.blocks.push_back(CmtbParams<T>::create(store, sp + ".b" + std::to_string(d), sc.embed_dim, sc.heads,
                                                     sc.sr, rng));
          b.norm_g = store.add(sp + ".norm.g", init::ones<T>({sc.embed_dim}));
          b.norm_b = store.add(sp + ".norm.b", init::zeros<T>({sc.embed_dim}));
        }
      }
      branches_[n].push_back(std::move(b));
      prev_dim = sc.embed_dim;
    }
  }
}

template <typename T>
StageFeatures<T> Encoder<T>::forward(const ModalityBundle<T>& bundle, const CmtbSwitches& switches) const {
  bundle.validate();
  const std::size_t n_mod = branches_.size();
  if (bundle.size() != n_mod)
    throw ShapeError("encoder: bundle has " + std::to_string(bundle.size()) + " modalities, expected " +
                     std::to_string(n_mod));
  for (std::size_t n = 0; n < n_mod; ++n)
    if (bundle.present[n] && bundle.maps[n].dim(0) != in_channels_[n])
      throw ShapeError("encoder: modality " + std::to_string(n) + " has wrong channel count");

  StageFeatures<T> out;
  out.present = bundle.present;
  out.grids = config_.stage_grids(bundle.grid());
  std::vector<Tensor<T>> spatial(n_mod);
  for (std::size_t n = 0; n < n_mod; ++n)
    if (bundle.present[n]) spatial[n] = ops::channels_last(bundle.maps[n]);

  for (std::size_t i = 0; i < config_.stages.size(); ++i) {
    const auto& sc = config_.stages[i];
    const GridSize grid = out.grids[i];
    std::vector<Tensor<T>> tokens(n_mod);
    for (std::size_t n = 0; n < n_mod; ++n) {
      if (!bundle.present[n]) continue;
      const auto& e = branches_[n][i].embed;
      auto emb = ops::add_bias(ops::conv2d(spatial[n], e.kernel, e.stride, e.padding), e.bias);
      tokens[n] = ops::layer_norm(ops::reshape(emb, {grid.tokens(), sc.embed_dim}), e.norm_g, e.norm_b);
    }
    for (std::size_t d = 0; d < sc.depth; ++d) {
      std::vector<Tensor<T>> next(n_mod);
      for (std::size_t n = 0; n < n_mod; ++n) {
        if (!bundle.present[n]) continue;
        std::vector<Tensor<T>> aux;
        for (std::size_t m = 0; m < n_mod; ++m)
          if (m != n && bundle.present[m]) aux.push_back(tokens[m]);
        next[n] = cmtb_stage<T>(tokens[n], aux, branches_[n][i].blocks[d], grid, switches);
      }
      tokens = std::move(next);
    }
    std::vector<Tensor<T>> stage_out(n_mod);
    for (std::size_t n = 0; n < n_mod; ++n) {
      if (!bundle.present[n]) {
        stage_out[n] = Tensor<T>({grid.tokens(), sc.embed_dim}, T(0));
        continue;
      }
      stage_out[n] = ops::layer_norm(tokens[n], branches_[n][i].norm_g, branches_[n][i].norm_b);
      spatial[n] = ops::reshape(stage_out[n], {grid.height, grid.width, sc.embed_dim});
    }
    out.features.push_back(std::move(stage_out));
  }
  return out;
}

#define EQUISEG_CMTB_INSTANTIATE(T)                                                                  \
  template struct SqHubParams<T>;                                                                    \
  template struct PpxParams<T>;                                                                      \
  template struct CmtbParams<T>;                                                                     \
  template struct ModalityBundle<T>;                                                                 \
  template class Encoder<T>;                                                                         \
  template Tensor<T> sq_hub<T>(std::span<const Tensor<T>>, const SqHubParams<T>&, HubMode, Tensor<T>*); \
  template Tensor<T> ppx<T>(const Tensor<T>&, const PpxParams<T>&, GridSize);                        \
  template Tensor<T> cmtb_stage<T>(const Tensor<T>&, std::span<const Tensor<T>>, const CmtbParams<T>&, \
                                   GridSize, const CmtbSwitches&);

EQUISEG_CMTB_INSTANTIATE(float)
EQUISEG_CMTB_INSTANTIATE(double)

}  // namespace equiseg
