#include "equiseg/sgm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "equiseg/ops.hpp"

namespace equiseg {

template <typename T>
std::vector<std::size_t> Prototypes<T>::present_ids() const {
  std::vector<std::size_t> ids;
  for (std::size_t c = 0; c < present.size(); ++c)
    if (present[c]) ids.push_back(c);
  return ids;
}

template <typename T>
Prototypes<T> compute_prototypes(const Tensor<T>& features, const LabelMap& labels, std::size_t categories) {
  if (categories == 0) throw ShapeError("compute_prototypes: category count must be positive");
  if (features.rank() != 2 || features.dim(0) != labels.size())
    throw ShapeError("compute_prototypes: features " + shape_to_string(features.shape()) + " do not match " +
                     std::to_string(labels.size()) + " labels");
  const std::size_t l = features.dim(0), d = features.dim(1);
  std::vector<std::size_t> counts(categories, 0);
  for (Label lab : labels.values) {
    if (lab == kIgnoreLabel) continue;
    if (lab >= categories) throw ShapeError("compute_prototypes: label " + std::to_string(lab) + " out of range");
    ++counts[lab];
  }
  std::vector<T> sums(categories * d, T(0));
  auto fv = features.data();
  for (std::size_t j = 0; j < l; ++j) {
    const Label lab = labels.values[j];
    if (lab == kIgnoreLabel) continue;
    for (std::size_t k = 0; k < d; ++k) sums[lab * d + k] += fv[j * d + k];
  }
  Prototypes<T> out;
  out.present.resize(categories);
  for (std::size_t c = 0; c < categories; ++c) {
    out.present[c] = counts[c] > 0;
    if (counts[c] == 0) continue;
    for (std::size_t k = 0; k < d; ++k) sums[c * d + k] /= T(counts[c]);
  }
  out.protos = detail::make_result<T>("compute_prototypes", {categories, d}, std::move(sums), {&features},
                                      [fi = features.impl(), lab = labels.values, counts, d] {
    return [fi, lab, counts, d](const detail::TensorImpl<T>& o) {
      const T f = gradient_fault_active("compute_prototypes") ? T(1.1) : T(1);
      detail::accumulate(*fi, [&](auto& g) {
        for (std::size_t j = 0; j < lab.size(); ++j) {
          if (lab[j] == kIgnoreLabel) continue;
          const T inv = f / T(counts[lab[j]]);
          for (std::size_t k = 0; k < d; ++k) g[j * d + k] += o.grad[lab[j] * d + k] * inv;
        }
      });
    };
  });
  return out;
}

LabelMap downsample_labels(const LabelMap& labels, GridSize target) {
  if (target.height == 0 || target.width == 0 || labels.height % target.height != 0 ||
      labels.width % target.width != 0)
    throw ShapeError("downsample_labels: " + std::to_string(target.height) + "x" + std::to_string(target.width) +
                     " does not divide " + std::to_string(labels.height) + "x" + std::to_string(labels.width));
  const std::size_t sy = labels.height / target.height, sx = labels.width / target.width;
  LabelMap out(target.height, target.width);
  for (std::size_t y = 0; y < target.height; ++y)
    for (std::size_t x = 0; x < target.width; ++x) out.at(y, x) = labels.at(y * sy, x * sx);
  return out;
}

bool Pairing::is_partition_of(std::size_t n) const {
  std::vector<int> seen(n, 0);
  auto mark = [&](std::size_t i) {
    if (i >= n) return false;
    return ++seen[i] == 1;
  };
  for (const auto& [t, s] : pairs)
    if (!mark(t) || !mark(s)) return false;
  if (dropped && !mark(*dropped)) return false;
  if (pairs.size() != n / 2 || dropped.has_value() != (n % 2 == 1)) return false;
  return std::all_of(seen.begin(), seen.end(), [](int c) { return c == 1; });
}

Pairing assign_pairs(std::size_t n, Rng& rng) {
  if (n < 2) throw ConfigError("assign_pairs: at least two modalities required");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order.begin(), order.end());
  Pairing p;
  if (n % 2 == 1) {
    p.dropped = order.back();
    order.pop_back();
  }
  for (std::size_t i = 0; i + 1 < order.size(); i += 2) p.pairs.emplace_back(order[i], order[i + 1]);
  return p;
}

Pairing cosine_pairs(std::span<const std::vector<double>> summaries, Rng& rng) {
  const std::size_t n = summaries.size();
  if (n < 2) throw ConfigError("cosine_pairs: at least two modalities required");
  struct Candidate {
    double cosine;
    std::size_t a, b;
  };
  std::vector<Candidate> cands;
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = a + 1; b < n; ++b) {
      const auto& u = summaries[a];
      const auto& v = summaries[b];
      double dot = 0, nu = 0, nv = 0;
      for (std::size_t k = 0; k < u.size(); ++k) {
        dot += u[k] * v[k];
        nu += u[k] * u[k];
        nv += v[k] * v[k];
      }
      const double denom = std::sqrt(nu) * std::sqrt(nv);
      cands.push_back({denom > 0 ? dot / denom : 0.0, a, b});
    }
  std::stable_sort(cands.begin(), cands.end(),
                   [](const Candidate& x, const Candidate& y) { return x.cosine > y.cosine; });
  std::vector<bool> used(n, false);
  Pairing p;
  for (const auto& c : cands) {
    if (used[c.a] || used[c.b]) continue;
    used[c.a] = used[c.b] = true;
    if (rng.bernoulli(0.5)) p.pairs.emplace_back(c.a, c.b);
    else p.pairs.emplace_back(c.b, c.a);
  }
  for (std::size_t i = 0; i < n; ++i)
    if (!used[i]) p.dropped = i;
  return p;
}

template <typename T>
PrototypeSet<T> build_prototypes(const StageFeatures<T>& features, const LabelMap& labels, std::size_t categories) {
  PrototypeSet<T> set;
  const std::size_t n_mod = features.present.size();
  set.protos.resize(n_mod);
  for (std::size_t i = 0; i < features.features.size(); ++i) {
    const auto stage_labels = downsample_labels(labels, features.grids[i]);
    for (std::size_t n = 0; n < n_mod; ++n)
      set.protos[n].push_back(compute_prototypes(features.features[i][n], stage_labels, categories));
  }
  return set;
}

namespace {

// KL between row-normalized (channel axis) or column-normalized (category
// axis) teacher and student matrices, averaged over distributions.
template <typename T>
Tensor<T> mean_kl(const Tensor<T>& teacher, const Tensor<T>& student, KlAxis axis) {
  const std::size_t ax = axis == KlAxis::channel ? 1 : 0;
  const auto t = ops::softmax(teacher.detach(), ax);
  const auto s = ops::softmax(student, ax);
  const std::size_t count = axis == KlAxis::channel ? teacher.dim(0) : teacher.dim(1);
  return ops::scale(ops::kl_div(t, s, ax), T(1) / T(count));
}

}  // namespace

template <typename T>
SgmLoss<T> sgm_loss(const PrototypeSet<T>& protos, const std::vector<bool>& present, const Pairing& pairing,
                    KlAxis axis) {
  SgmLoss<T> result;
  Tensor<T> total;
  bool any_category = false;
  const std::size_t stages = protos.protos.empty() ? 0 : protos.protos[0].size();
  for (std::size_t i = 0; i < stages; ++i) {
    for (const auto& [t, s] : pairing.pairs) {
      if (!present[t] || !present[s]) continue;
      const auto& pt = protos.protos[t][i];
      const auto& ps = protos.protos[s][i];
      const auto ids = pt.present_ids();
      if (ids.empty()) continue;
      any_category = true;
      const auto term = mean_kl(ops::gather_rows(pt.protos, std::span<const std::size_t>(ids)),
                                ops::gather_rows(ps.protos, std::span<const std::size_t>(ids)), axis);
      total = total.defined() ? ops::add(total, term) : term;
    }
  }
  result.no_category = !any_category;
  result.value = total.defined() ? total : Tensor<T>::scalar(T(0));
  return result;
}

template <typename T>
SgmLoss<T> self_guidance_loss(const StageFeatures<T>& features, const LabelMap& labels, std::size_t categories,
                              const Pairing& pairing, const SgmConfig& config) {
  if (config.prototype)
    return sgm_loss(build_prototypes(features, labels, categories), features.present, pairing, config.kl_axis);

  SgmLoss<T> result;
  Tensor<T> total;
  for (std::size_t i = 0; i < features.features.size(); ++i) {
    const auto stage_labels = downsample_labels(labels, features.grids[i]);
    std::vector<std::size_t> rows;
    for (std::size_t j = 0; j < stage_labels.size(); ++j)
      if (stage_labels.values[j] != kIgnoreLabel) rows.push_back(j);
    if (rows.empty()) continue;
    for (const auto& [t, s] : pairing.pairs) {
      if (!features.present[t] || !features.present[s]) continue;
      const auto term = mean_kl(ops::gather_rows(features.features[i][t], std::span<const std::size_t>(rows)),
                                ops::gather_rows(features.features[i][s], std::span<const std::size_t>(rows)),
                                config.kl_axis);
      total = total.defined() ? ops::add(total, term) : term;
    }
  }
  result.no_category = !total.defined();
  result.value = total.defined() ? total : Tensor<T>::scalar(T(0));
  return result;
}

template <typename T>
std::vector<std::vector<double>> prototype_summaries(const PrototypeSet<T>& protos) {
  std::vector<std::vector<double>> out;
  for (const auto& per_stage : protos.protos) {
    const auto& last = per_stage.back();
    const std::size_t d = last.protos.dim(1);
    std::vector<double> v(d, 0.0);
    const auto ids = last.present_ids();
    for (auto c : ids)
      for (std::size_t k = 0; k < d; ++k) v[k] += static_cast<double>(last.protos.data()[c * d + k]);
    for (auto& x : v) x /= static_cast<double>(std::max<std::size_t>(ids.size(), 1));
    out.push_back(std::move(v));
  }
  return out;
}

#define EQUISEG_SGM_INSTANTIATE(T)                                                                   \
  template struct Prototypes<T>;                                                                     \
  template Prototypes<T> compute_prototypes<T>(const Tensor<T>&, const LabelMap&, std::size_t);      \
  template PrototypeSet<T> build_prototypes<T>(const StageFeatures<T>&, const LabelMap&, std::size_t); \
  template SgmLoss<T> sgm_loss<T>(const PrototypeSet<T>&, const std::vector<bool>&, const Pairing&, KlAxis); \
  template SgmLoss<T> self_guidance_loss<T>(const StageFeatures<T>&, const LabelMap&, std::size_t,   \
                                            const Pairing&, const SgmConfig&);                       \
  template std::vector<std::vector<double>> prototype_summaries<T>(const PrototypeSet<T>&);

EQUISEG_SGM_INSTANTIATE(float)
EQUISEG_SGM_INSTANTIATE(double)

}  // namespace equiseg
