#include "equiseg/seg_model.hpp"

#include <cmath>
#include <limits>

#include "equiseg/ops.hpp"

namespace equiseg {

std::string to_string(Profile p) { return p == Profile::train ? "train" : "test"; }
std::string to_string(HubMode m) { return m == HubMode::learned ? "learned" : "mean"; }
std::string to_string(PairingMode m) { return m == PairingMode::random ? "random" : "cosine"; }
std::string to_string(KlAxis a) { return a == KlAxis::channel ? "channel" : "category"; }

void ModelConfig::validate() const {
  if (modality_names.empty()) throw ConfigError("model: at least one modality required");
  if (modality_names.size() != in_channels.size())
    throw ConfigError("model: modality names and channel counts differ in length");
  for (auto c : in_channels)
    if (c == 0) throw ConfigError("model: input channel counts must be positive");
  if (categories < 2) throw ConfigError("model: at least two categories required");
  if (categories >= kIgnoreLabel) throw ConfigError("model: too many categories for 8-bit labels");
  if (!(sgm.lambda >= 0.0)) throw ConfigError("model: lambda must be >= 0");
  if (decode_dim == 0) throw ConfigError("model: decode_dim must be positive");
  encoder.validate();
}

nlohmann::json ModelConfig::to_json() const {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : encoder.stages)
    stages.push_back({{"embed_dim", s.embed_dim},
                      {"depth", s.depth},
                      {"heads", s.heads},
                      {"sr", s.sr},
                      {"patch_stride", s.patch_stride},
                      {"patch_kernel", s.patch_kernel}});
  return {{"modalities", modality_names},
          {"in_channels", in_channels},
          {"stages", stages},
          {"share_branches", encoder.share_branches},
          {"decode_dim", decode_dim},
          {"categories", categories},
          {"sq_hub", to_string(switches.hub)},
          {"cross_attention", switches.cross_attention},
          {"residual_add", switches.residual_add},
          {"sgm",
           {{"enabled", sgm.enabled},
            {"lambda", sgm.lambda},
            {"pairing", to_string(sgm.pairing)},
            {"kl_axis", to_string(sgm.kl_axis)},
            {"prototype", sgm.prototype}}},
          {"profile", to_string(profile)},
          {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  try {
    ModelConfig c;
    c.modality_names = j.at("modalities").get<std::vector<std::string>>();
    c.in_channels = j.at("in_channels").get<std::vector<std::size_t>>();
    c.encoder.stages.clear();
    for (const auto& s : j.at("stages"))
      c.encoder.stages.push_back({s.at("embed_dim").get<std::size_t>(), s.at("depth").get<std::size_t>(),
                                  s.at("heads").get<std::size_t>(), s.at("sr").get<std::size_t>(),
                                  s.at("patch_stride").get<std::size_t>(), s.at("patch_kernel").get<std::size_t>()});
    c.encoder.share_branches = j.at("share_branches").get<bool>();
    c.decode_dim = j.at("decode_dim").get<std::size_t>();
    c.categories = j.at("categories").get<std::size_t>();
    c.switches.hub = j.at("sq_hub").get<std::string>() == "mean" ? HubMode::mean : HubMode::learned;
    c.switches.cross_attention = j.at("cross_attention").get<bool>();
    c.switches.residual_add = j.at("residual_add").get<bool>();
    const auto& sg = j.at("sgm");
    c.sgm.enabled = sg.at("enabled").get<bool>();
    c.sgm.lambda = sg.at("lambda").get<double>();
    c.sgm.pairing = sg.at("pairing").get<std::string>() == "cosine" ? PairingMode::cosine : PairingMode::random;
    c.sgm.kl_axis = sg.at("kl_axis").get<std::string>() == "category" ? KlAxis::category : KlAxis::channel;
    c.sgm.prototype = sg.at("prototype").get<bool>();
    c.profile = j.at("profile").get<std::string>() == "test" ? Profile::test : Profile::train;
    c.seed = j.at("seed").get<std::uint64_t>();
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed model configuration: ") + e.what());
  }
}

template <typename T>
DecodeParams<T> DecodeParams<T>::create(ParamStore<T>& store, const EncoderConfig& encoder, std::size_t decode_dim,
                                        std::size_t categories, Rng& rng) {
  DecodeParams p;
  for (std::size_t i = 0; i < encoder.stages.size(); ++i) {
    const std::string pre = "head.proj" + std::to_string(i);
    p.proj_w.push_back(store.add(pre + ".w", init::trunc_normal<T>({encoder.stages[i].embed_dim, decode_dim}, 0.02, rng)));
    p.proj_b.push_back(store.add(pre + ".b", init::zeros<T>({decode_dim})));
  }
  const std::size_t cat = decode_dim * encoder.stages.size();
  p.fuse_w = store.add("head.fuse.w", init::trunc_normal<T>({cat, decode_dim}, 0.02, rng));
  p.fuse_b = store.add("head.fuse.b", init::zeros<T>({decode_dim}));
  p.cls_w = store.add("head.cls.w", init::trunc_normal<T>({decode_dim, categories}, 0.02, rng));
  p.cls_b = store.add("head.cls.b", init::zeros<T>({categories}));
  return p;
}

template <typename T>
std::vector<Tensor<T>> fuse_modalities(const StageFeatures<T>& features) {
  std::vector<Tensor<T>> fused;
  for (const auto& stage : features.features) {
    std::vector<Tensor<T>> present;
    for (std::size_t n = 0; n < stage.size(); ++n)
      if (features.present[n]) present.push_back(stage[n]);
    if (present.empty()) throw ShapeError("fuse_modalities: no modality present");
    fused.push_back(present.size() == 1 ? present[0] : ops::mean_of<T>(present));
  }
  return fused;
}

template <typename T>
SegOutput<T> decode_head(std::span<const Tensor<T>> fused, std::span<const GridSize> grids, const DecodeParams<T>& p,
                         GridSize output) {
  const std::size_t stages = p.proj_w.size();
  if (fused.size() != stages || grids.size() != stages)
    throw ShapeError("decode_head: expected " + std::to_string(stages) + " stages, got " +
                     std::to_string(fused.size()));
  const std::size_t e = p.fuse_b.dim(0);
  const GridSize base = grids[0];
  std::vector<Tensor<T>> pyramid;
  for (std::size_t i = 0; i < stages; ++i) {
    if (fused[i].rank() != 2 || fused[i].dim(0) != grids[i].tokens())
      throw ShapeError("decode_head: stage " + std::to_string(i) + " features do not match their grid");
    auto proj = ops::reshape(ops::linear(fused[i], p.proj_w[i], p.proj_b[i]), {grids[i].height, grids[i].width, e});
    pyramid.push_back(ops::bilinear_upsample(proj, base.height, base.width));
  }
  auto x = ops::reshape(ops::concat<T>(pyramid, 2), {base.tokens(), e * stages});
  x = ops::gelu(ops::linear(x, p.fuse_w, p.fuse_b));
  const std::size_t c = p.cls_b.dim(0);
  x = ops::reshape(ops::linear(x, p.cls_w, p.cls_b), {base.height, base.width, c});
  SegOutput<T> out;
  out.logits = ops::bilinear_upsample(x, output.height, output.width);
  out.fused.assign(fused.begin(), fused.end());
  return out;
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const LabelMap& labels, Label ignore) {
  if (logits.rank() == 0) throw ShapeError("cross_entropy: scalar logits");
  const std::size_t c = logits.shape().back(), rows = logits.numel() / c;
  if (rows != labels.size())
    throw ShapeError("cross_entropy: " + std::to_string(rows) + " logit rows vs " + std::to_string(labels.size()) +
                     " labels");
  std::size_t count = 0;
  for (Label l : labels.values) {
    if (l == ignore) continue;
    if (l >= c) throw ShapeError("cross_entropy: label " + std::to_string(l) + " out of range");
    ++count;
  }
  if (count == 0) throw ShapeError("cross_entropy: every pixel is ignored");
  auto lv = logits.data();
  std::vector<T> probs(logits.numel());
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = lv.data() + r * c;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t k = 0; k < c; ++k) mx = std::max(mx, row[k]);
    T z = 0;
    for (std::size_t k = 0; k < c; ++k) z += std::exp(row[k] - mx);
    const T log_z = mx + std::log(z);
    for (std::size_t k = 0; k < c; ++k) probs[r * c + k] = std::exp(row[k] - log_z);
    const Label l = labels.values[r];
    if (l != ignore) total += log_z - row[l];
  }
  const T inv = T(1) / T(count);
  return detail::make_result<T>("cross_entropy", {}, {total * inv}, {&logits},
                                [li = logits.impl(), probs = std::move(probs), lab = labels.values, ignore, c, inv]() mutable {
    return [li, probs = std::move(probs), lab = std::move(lab), ignore, c, inv](const detail::TensorImpl<T>& o) {
      detail::accumulate(*li, [&](auto& g) {
        const T scale = o.grad[0] * inv * (gradient_fault_active("cross_entropy") ? T(1.1) : T(1));
        for (std::size_t r = 0; r < lab.size(); ++r) {
          if (lab[r] == ignore) continue;
          for (std::size_t k = 0; k < c; ++k) g[r * c + k] += scale * probs[r * c + k];
          g[r * c + lab[r]] -= scale;
        }
      });
    };
  });
}

template <typename T>
Tensor<T> total_loss(const Tensor<T>& ce, const Tensor<T>& sgm, double lambda) {
  if (!(lambda >= 0.0)) throw ConfigError("total_loss: lambda must be >= 0");
  return ops::add(ce, ops::scale(sgm, static_cast<T>(lambda)));
}

template <typename T>
LabelMap argmax_labels(const Tensor<T>& logits) {
  if (logits.rank() != 3) throw ShapeError("argmax_labels: expected [H x W x C]");
  const std::size_t h = logits.dim(0), w = logits.dim(1), c = logits.dim(2);
  LabelMap out(h, w);
  auto lv = logits.data();
  for (std::size_t i = 0; i < h * w; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k)
      if (lv[i * c + k] > lv[i * c + best]) best = k;
    out.values[i] = static_cast<Label>(best);
  }
  return out;
}

template <typename T>
SegModel<T>::SegModel(ModelConfig config)
    : config_((config.validate(), std::move(config))),
      init_rng_(config_.seed),
      encoder_(config_.encoder, config_.in_channels, params_, init_rng_),
      decode_(DecodeParams<T>::create(params_, config_.encoder, config_.decode_dim, config_.categories, init_rng_)) {}

template <typename T>
StageFeatures<T> SegModel<T>::encode(const ModalityBundle<T>& bundle) const {
  return encoder_.forward(bundle, config_.switches);
}

template <typename T>
SegOutput<T> SegModel<T>::head(const StageFeatures<T>& features, GridSize output) const {
  const auto fused = fuse_modalities(features);
  return decode_head<T>(fused, features.grids, decode_, output);
}

template <typename T>
SegOutput<T> SegModel<T>::forward(const ModalityBundle<T>& bundle) const {
  return head(encode(bundle), bundle.grid());
}

template <typename T>
LabelMap SegModel<T>::predict(const ModalityBundle<T>& bundle) const {
  if (active_tape<T>() != nullptr) throw ShapeError("predict must run outside a recording scope");
  return argmax_labels(forward(bundle).logits);
}

#define EQUISEG_SEG_INSTANTIATE(T)                                                                  \
  template struct DecodeParams<T>;                                                                  \
  template class SegModel<T>;                                                                       \
  template std::vector<Tensor<T>> fuse_modalities<T>(const StageFeatures<T>&);                      \
  template SegOutput<T> decode_head<T>(std::span<const Tensor<T>>, std::span<const GridSize>,        \
                                       const DecodeParams<T>&, GridSize);                           \
  template Tensor<T> cross_entropy<T>(const Tensor<T>&, const LabelMap&, Label);                    \
  template Tensor<T> total_loss<T>(const Tensor<T>&, const Tensor<T>&, double);                     \
  template LabelMap argmax_labels<T>(const Tensor<T>&);

EQUISEG_SEG_INSTANTIATE(float)
EQUISEG_SEG_INSTANTIATE(double)

}  // namespace equiseg
