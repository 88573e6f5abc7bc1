#include "grad_suite.hpp"

#include <algorithm>
#include <functional>
#include <map>

#include "equiseg/gradcheck.hpp"
#include "equiseg/ops.hpp"
#include "equiseg/random.hpp"

namespace equiseg::tools {

namespace {

using D = double;
using TensorD = Tensor<D>;

TensorD random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  std::vector<D> v(shape_numel(shape));
  for (auto& x : v) x = scale * rng.normal();
  return TensorD(std::move(shape), std::move(v));
}

std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) h = (h ^ ch) * 1099511628211ULL;
  return h;
}

struct Case {
  std::vector<TensorD> params;
  std::function<TensorD()> loss;
};

// Each case contracts its output with fixed random weights so every entry
// contributes to the scalar.
using CaseBuilder = std::function<Case(Rng&)>;

Case unary(Rng& rng, Shape shape, std::function<TensorD(const TensorD&)> f, double scale = 1.0) {
  Case c;
  c.params = {random_tensor(shape, rng, scale)};
  auto weights = random_tensor(f(c.params[0]).shape(), rng);
  auto p = c.params;
  c.loss = [p, f, weights] { return ops::sum(ops::mul(f(p[0]), weights)); };
  return c;
}

Case with_params(std::vector<TensorD> params, std::function<TensorD(const std::vector<TensorD>&)> f, Rng& rng) {
  Case c;
  c.params = std::move(params);
  auto weights = random_tensor(f(c.params).shape(), rng);
  auto p = c.params;
  c.loss = [p, f, weights] { return ops::sum(ops::mul(f(p), weights)); };
  return c;
}

Case from_store(ParamStore<D>& store, std::function<TensorD()> f, Rng& rng) {
  Case c;
  for (auto& e : store.entries()) c.params.push_back(e.value);
  auto weights = random_tensor(f().shape(), rng);
  c.loss = [f, weights] { return ops::sum(ops::mul(f(), weights)); };
  return c;
}

LabelMap random_labels(std::size_t h, std::size_t w, std::size_t categories, Rng& rng, bool with_ignore = false) {
  LabelMap l(h, w);
  for (auto& v : l.values) v = static_cast<Label>(rng.uniform_int(categories));
  if (with_ignore) l.values[0] = kIgnoreLabel;
  return l;
}

// Teacher rows are a stop-gradient target, so finite differences must see
// them as constants: snapshot them at the current parameters.
PrototypeSet<D> freeze_teachers(const PrototypeSet<D>& live, const Pairing& pairing) {
  PrototypeSet<D> frozen = live;
  for (const auto& [t, s] : pairing.pairs)
    for (auto& stage : frozen.protos[t]) stage.protos = stage.protos.detach();
  return frozen;
}

PrototypeSet<D> with_teachers(PrototypeSet<D> live, const PrototypeSet<D>& frozen, const Pairing& pairing) {
  for (const auto& [t, s] : pairing.pairs) live.protos[t] = frozen.protos[t];
  return live;
}

const std::vector<std::pair<std::string, CaseBuilder>>& builders() {
  static const std::vector<std::pair<std::string, CaseBuilder>> all = {
      {"add", [](Rng& r) {
         return with_params({random_tensor({3, 4}, r), random_tensor({3, 4}, r)},
                            [](const auto& p) { return ops::add(p[0], p[1]); }, r);
       }},
      {"sub", [](Rng& r) {
         return with_params({random_tensor({3, 4}, r), random_tensor({3, 4}, r)},
                            [](const auto& p) { return ops::sub(p[0], p[1]); }, r);
       }},
      {"mul", [](Rng& r) {
         return with_params({random_tensor({3, 4}, r), random_tensor({3, 4}, r)},
                            [](const auto& p) { return ops::mul(p[0], p[1]); }, r);
       }},
      {"scale", [](Rng& r) { return unary(r, {2, 5}, [](const TensorD& x) { return ops::scale(x, 1.7); }); }},
      {"add_bias", [](Rng& r) {
         return with_params({random_tensor({4, 3}, r), random_tensor({3}, r)},
                            [](const auto& p) { return ops::add_bias(p[0], p[1]); }, r);
       }},
      {"mul_rows", [](Rng& r) {
         return with_params({random_tensor({4, 3}, r), random_tensor({4}, r)},
                            [](const auto& p) { return ops::mul_rows(p[0], p[1]); }, r);
       }},
      {"matmul", [](Rng& r) {
         return with_params({random_tensor({3, 4}, r), random_tensor({4, 5}, r)},
                            [](const auto& p) { return ops::matmul(p[0], p[1]); }, r);
       }},
      {"transpose", [](Rng& r) { return unary(r, {3, 4}, [](const TensorD& x) { return ops::transpose(x); }); }},
      {"linear", [](Rng& r) {
         return with_params({random_tensor({5, 3}, r), random_tensor({3, 4}, r), random_tensor({4}, r)},
                            [](const auto& p) { return ops::linear(p[0], p[1], p[2]); }, r);
       }},
      {"softmax", [](Rng& r) {
         const std::size_t axis = r.uniform_int(2);
         return unary(r, {3, 5}, [axis](const TensorD& x) { return ops::softmax(x, axis); });
       }},
      {"layer_norm", [](Rng& r) {
         return with_params({random_tensor({4, 6}, r), random_tensor({6}, r), random_tensor({6}, r)},
                            [](const auto& p) { return ops::layer_norm(p[0], p[1], p[2]); }, r);
       }},
      {"gelu", [](Rng& r) { return unary(r, {3, 4}, [](const TensorD& x) { return ops::gelu(x); }, 2.0); }},
      {"conv2d", [](Rng& r) {
         const std::size_t stride = 1 + r.uniform_int(2);
         return with_params({random_tensor({6, 5, 2}, r), random_tensor({3, 3, 2, 3}, r)},
                            [stride](const auto& p) { return ops::conv2d(p[0], p[1], stride, 1); }, r);
       }},
      {"depthwise_conv2d", [](Rng& r) {
         return with_params({random_tensor({5, 6, 3}, r), random_tensor({3, 3, 3}, r)},
                            [](const auto& p) { return ops::depthwise_conv2d(p[0], p[1], 1, 1); }, r);
       }},
      {"avg_pool_same", [](Rng& r) {
         return unary(r, {4, 5, 2}, [](const TensorD& x) { return ops::avg_pool_same(x, 3); });
       }},
      {"max_pool_same", [](Rng& r) {
         return unary(r, {4, 5, 2}, [](const TensorD& x) { return ops::max_pool_same(x, 3); });
       }},
      {"bilinear_upsample", [](Rng& r) {
         return unary(r, {3, 4, 2}, [](const TensorD& x) { return ops::bilinear_upsample(x, 7, 5); });
       }},
      {"concat", [](Rng& r) {
         const std::size_t axis = r.uniform_int(2);
         return with_params({random_tensor({3, 2}, r), random_tensor({3, 2}, r)}, [axis](const auto& p) {
           return ops::concat<D>(p, axis);
         }, r);
       }},
      {"slice", [](Rng& r) { return unary(r, {4, 5}, [](const TensorD& x) { return ops::slice(x, 1, 1, 4); }); }},
      {"reshape", [](Rng& r) { return unary(r, {4, 3}, [](const TensorD& x) { return ops::reshape(x, {2, 6}); }); }},
      {"channels_last", [](Rng& r) {
         return unary(r, {2, 3, 4}, [](const TensorD& x) { return ops::channels_last(x); });
       }},
      {"sum", [](Rng& r) {
         Case c;
         c.params = {random_tensor({3, 4}, r)};
         auto p = c.params;
         c.loss = [p] { return ops::sum(ops::mul(p[0], p[0])); };
         return c;
       }},
      {"mean", [](Rng& r) {
         Case c;
         c.params = {random_tensor({3, 4}, r)};
         auto p = c.params;
         c.loss = [p] { return ops::mean(ops::mul(p[0], p[0])); };
         return c;
       }},
      {"mean_of", [](Rng& r) {
         return with_params({random_tensor({3, 2}, r), random_tensor({3, 2}, r), random_tensor({3, 2}, r)},
                            [](const auto& p) { return ops::mean_of<D>(p); }, r);
       }},
      {"gather_rows", [](Rng& r) {
         return unary(r, {5, 3}, [](const TensorD& x) {
           const std::vector<std::size_t> rows{4, 0, 4, 2};
           return ops::gather_rows<D>(x, rows);
         });
       }},
      {"kl_div", [](Rng& r) {
         Case c;
         const std::size_t axis = r.uniform_int(2);
         auto t = ops::softmax(random_tensor({3, 4}, r), axis);
         c.params = {random_tensor({3, 4}, r)};
         auto p = c.params;
         c.loss = [p, t, axis] { return ops::kl_div(t, ops::softmax(p[0], axis), axis); };
         return c;
       }},
      {"cross_entropy", [](Rng& r) {
         Case c;
         auto labels = random_labels(3, 4, 5, r, true);
         c.params = {random_tensor({3, 4, 5}, r)};
         auto p = c.params;
         c.loss = [p, labels] { return cross_entropy(p[0], labels); };
         return c;
       }},
      {"compute_prototypes", [](Rng& r) {
         auto labels = random_labels(3, 4, 3, r, true);
         return unary(r, {12, 4}, [labels](const TensorD& x) { return compute_prototypes(x, labels, 3).protos; });
       }},
      {"multi_head_attention", [](Rng& r) {
         auto store = std::make_shared<ParamStore<D>>();
         auto p = AttentionParams<D>::create(*store, "a", 4, 2, r);
         store->add("q", random_tensor({5, 4}, r));
         store->add("kv", random_tensor({3, 4}, r));
         return from_store(*store, [store, p] {
           return multi_head_attention(store->get("q"), store->get("kv"), p);
         }, r);
       }},
      {"mhsa", [](Rng& r) {
         auto store = std::make_shared<ParamStore<D>>();
         auto p = BlockParams<D>::create(*store, "b", 4, 2, 2, r);
         store->add("x", random_tensor({16, 4}, r));
         return from_store(*store, [store, p] { return mhsa(store->get("x"), p, GridSize{4, 4}); }, r);
       }},
      {"mhca", [](Rng& r) {
         auto store = std::make_shared<ParamStore<D>>();
         auto p = AttentionParams<D>::create(*store, "a", 4, 1, r);
         store->add("f", random_tensor({6, 4}, r));
         store->add("g", random_tensor({6, 4}, r));
         return from_store(*store, [store, p] { return mhca(store->get("f"), store->get("g"), p); }, r);
       }},
      {"mix_ffn", [](Rng& r) {
         auto store = std::make_shared<ParamStore<D>>();
         auto p = BlockParams<D>::create(*store, "b", 4, 1, 1, r, 2);
         store->add("x", random_tensor({6, 4}, r));
         return from_store(*store, [store, p] { return mix_ffn(store->get("x"), p, GridSize{2, 3}); }, r);
       }},
      {"sq_hub", [](Rng& r) {
         auto store = std::make_shared<ParamStore<D>>();
         auto p = SqHubParams<D>::create(*store, "h", 4, r);
         for (int i = 0; i < 3; ++i) store->add("aux" + std::to_string(i), random_tensor({5, 4}, r));
         return from_store(*store, [store, p] {
           std::vector<TensorD> aux{store->get("aux0"), store->get("aux1"), store->get("aux2")};
           return sq_hub<D>(aux, p);
         }, r);
       }},
      {"ppx", [](Rng& r) {
         auto store = std::make_shared<ParamStore<D>>();
         auto p = PpxParams<D>::create(*store, "m", 3, r);
         store->add("x", random_tensor({12, 3}, r));
         return from_store(*store, [store, p] { return ppx(store->get("x"), p, GridSize{3, 4}); }, r);
       }},
      {"cmtb_stage", [](Rng& r) {
         auto store = std::make_shared<ParamStore<D>>();
         auto p = CmtbParams<D>::create(*store, "c", 4, 2, 2, r);
         store->add("x", random_tensor({16, 4}, r));
         store->add("a0", random_tensor({16, 4}, r));
         store->add("a1", random_tensor({16, 4}, r));
         return from_store(*store, [store, p] {
           std::vector<TensorD> aux{store->get("a0"), store->get("a1")};
           return cmtb_stage<D>(store->get("x"), aux, p, GridSize{4, 4});
         }, r);
       }},
      {"sgm_loss", [](Rng& r) {
         Case c;
         auto labels = random_labels(4, 4, 3, r);
         c.params = {random_tensor({16, 5}, r), random_tensor({16, 5}, r), random_tensor({16, 5}, r)};
         auto p = c.params;
         const Pairing pairing = assign_pairs(3, r);
         const auto axis = r.bernoulli(0.5) ? KlAxis::channel : KlAxis::category;
         auto features = [p] {
           StageFeatures<D> f;
           f.features = {{p[0], p[1], p[2]}};
           f.grids = {GridSize{4, 4}};
           f.present = {true, true, true};
           return f;
         };
         const auto frozen = freeze_teachers(build_prototypes(features(), labels, 3), pairing);
         c.loss = [features, labels, pairing, axis, frozen] {
           const auto f = features();
           auto protos = with_teachers(build_prototypes(f, labels, 3), frozen, pairing);
           return sgm_loss(protos, f.present, pairing, axis).value;
         };
         return c;
       }},
  };
  return all;
}

Case full_model_case(std::uint64_t seed, Rng& r, double fraction, std::vector<ProbeEntry>& probes) {
  auto model = std::make_shared<SegModel<D>>(tiny_model_config(seed));
  const auto& cfg = model->config();
  ModalityBundle<D> bundle;
  bundle.names = cfg.modality_names;
  for (auto c : cfg.in_channels) bundle.maps.push_back(random_tensor({c, 16, 16}, r));
  bundle.present.assign(cfg.modality_count(), true);
  auto labels = random_labels(16, 16, cfg.categories, r);
  const Pairing pairing = assign_pairs(cfg.modality_count(), r);
  Case c;
  for (auto& e : model->params().entries()) c.params.push_back(e.value);
  const auto frozen = freeze_teachers(build_prototypes(model->encode(bundle), labels, cfg.categories), pairing);
  c.loss = [model, bundle, labels, pairing, frozen] {
    const auto& cfg = model->config();
    const auto features = model->encode(bundle);
    const auto protos = with_teachers(build_prototypes(features, labels, cfg.categories), frozen, pairing);
    const auto ls = sgm_loss(protos, features.present, pairing, cfg.sgm.kl_axis).value;
    const auto ce = cross_entropy(model->head(features, bundle.grid()).logits, labels);
    return total_loss(ce, ls, cfg.sgm.lambda);
  };
  std::size_t total = 0;
  for (const auto& p : c.params) total += p.numel();
  const auto want = std::max<std::size_t>(20, static_cast<std::size_t>(fraction * static_cast<double>(total)));
  std::vector<ProbeEntry> all;
  for (std::size_t t = 0; t < c.params.size(); ++t)
    for (std::size_t i = 0; i < c.params[t].numel(); ++i) all.push_back({t, i});
  r.shuffle(all.begin(), all.end());
  all.resize(std::min(want, all.size()));
  probes = std::move(all);
  return c;
}

}  // namespace

nlohmann::json GradSuiteReport::to_json() const {
  nlohmann::json ops = nlohmann::json::array();
  for (const auto& c : checks)
    ops.push_back({{"op", c.op},
                   {"max_rel_error", c.max_rel_error},
                   {"worst_analytic", c.worst_analytic},
                   {"worst_numeric", c.worst_numeric},
                   {"checked", c.checked},
                   {"passed", c.passed}});
  return {{"passed", passed}, {"worst", worst}, {"checks", ops}};
}

std::vector<std::string> grad_suite_names() {
  std::vector<std::string> names;
  for (const auto& [name, _] : builders()) names.push_back(name);
  names.push_back("full_model");
  return names;
}

ModelConfig tiny_model_config(std::uint64_t seed) {
  ModelConfig c;
  c.in_channels = {2, 1, 1, 1};
  c.encoder.stages = {{4, 1, 1, 2, 4, 7}, {4, 1, 2, 1, 2, 3}, {6, 1, 2, 1, 2, 3}, {6, 1, 1, 1, 2, 3}};
  c.decode_dim = 4;
  c.categories = 3;
  c.profile = Profile::test;
  c.seed = seed;
  return c;
}

GradSuiteReport run_grad_suite(const GradSuiteOptions& options) {
  const auto names = grad_suite_names();
  for (const auto& o : options.only)
    if (std::find(names.begin(), names.end(), o) == names.end()) throw ConfigError("unknown gradient check '" + o + "'");
  auto wanted = [&](const std::string& n) {
    return options.only.empty() || std::find(options.only.begin(), options.only.end(), n) != options.only.end();
  };
  GradSuiteReport report;
  auto record = [&](const std::string& name, const GradCheckResult& r, OpCheck& acc) {
    acc.op = name;
    acc.checked += r.checked;
    if (r.max_rel_error >= acc.max_rel_error) {
      acc.max_rel_error = r.max_rel_error;
      acc.worst_analytic = r.worst_analytic;
      acc.worst_numeric = r.worst_numeric;
    }
  };
  for (const auto& [name, build] : builders()) {
    if (!wanted(name)) continue;
    OpCheck acc;
    for (std::size_t s = 0; s < options.seeds; ++s) {
      Rng rng(mix_seed(options.base_seed + s) ^ name_hash(name));
      auto c = build(rng);
      record(name, grad_check(c.loss, c.params, {}, options.eps), acc);
    }
    acc.passed = acc.max_rel_error <= options.tolerance;
    report.checks.push_back(acc);
  }
  if (options.full_model && wanted("full_model")) {
    OpCheck acc;
    for (std::size_t s = 0; s < options.seeds; ++s) {
      Rng rng(mix_seed(options.base_seed + s) ^ 0x66756c6cULL);
      std::vector<ProbeEntry> probes;
      auto c = full_model_case(options.base_seed + s, rng, options.model_fraction, probes);
      record("full_model", grad_check(c.loss, c.params, probes, options.eps), acc);
    }
    acc.passed = acc.max_rel_error <= options.tolerance;
    report.checks.push_back(acc);
  }
  for (const auto& c : report.checks) {
    report.worst = std::max(report.worst, c.max_rel_error);
    report.passed = report.passed && c.passed;
  }
  return report;
}

}  // namespace equiseg::tools
