#include "equiseg/robustness.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>
#include <thread>

#include "equiseg/random.hpp"

namespace equiseg {

namespace {

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t index, std::uint64_t salt) {
  return mix_seed(seed ^ mix_seed(index + salt));
}

void check_probability(double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("probability must be in [0, 1], got " + std::to_string(p));
}

double percent(const ConfusionMatrix& m) { return 100.0 * m.iou().mean; }

}  // namespace

double noise_sigma(NoiseLevel level) { return level == NoiseLevel::low ? 0.1 : 0.5; }

void PerturbationSpec::validate() const {
  check_probability(p);
  if (kind == PerturbationKind::emm && !keep.empty() &&
      std::none_of(keep.begin(), keep.end(), [](bool k) { return k; }))
    throw ConfigError("keep-subset must not be empty");
}

template <typename T>
ModalityBundle<T> rmm_perturb(const ModalityBundle<T>& bundle, double p, std::size_t block, std::uint64_t seed) {
  check_probability(p);
  const auto g = bundle.grid();
  if (block == 0 || g.height % block != 0 || g.width % block != 0)
    throw ShapeError("rmm: block " + std::to_string(block) + " does not divide " + std::to_string(g.height) + "x" +
                     std::to_string(g.width));
  Rng rng(seed);
  ModalityBundle<T> out = bundle;
  const std::size_t th = g.height / block, tw = g.width / block;
  for (auto& map : out.maps) {
    std::vector<bool> drop(th * tw);
    for (std::size_t t = 0; t < drop.size(); ++t) drop[t] = rng.bernoulli(p);
    auto v = map.data();
    std::vector<T> values(v.begin(), v.end());
    const std::size_t c = map.dim(0);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < g.height; ++y)
        for (std::size_t x = 0; x < g.width; ++x)
          if (drop[(y / block) * tw + x / block]) values[(ch * g.height + y) * g.width + x] = T(0);
    map = Tensor<T>(map.shape(), std::move(values));
  }
  return out;
}

template <typename T>
ModalityBundle<T> nm_perturb(const ModalityBundle<T>& bundle, double sigma, std::uint64_t seed) {
  if (!(sigma >= 0.0)) throw ConfigError("noise sigma must be >= 0");
  if (sigma == 0.0) return bundle;
  Rng rng(seed);
  ModalityBundle<T> out = bundle;
  for (auto& map : out.maps) {
    auto v = map.data();
    std::vector<T> values(v.begin(), v.end());
    for (auto& x : values) x = static_cast<T>(static_cast<double>(x) + sigma * rng.normal());
    map = Tensor<T>(map.shape(), std::move(values));
  }
  return out;
}

template <typename T>
ModalityBundle<T> nm_perturb(const ModalityBundle<T>& bundle, NoiseLevel level, std::uint64_t seed) {
  return nm_perturb(bundle, noise_sigma(level), seed);
}

template <typename T>
ModalityBundle<T> with_keep(const ModalityBundle<T>& bundle, const std::vector<bool>& keep) {
  if (keep.size() != bundle.size()) throw ShapeError("keep mask size differs from modality count");
  ModalityBundle<T> out = bundle;
  for (std::size_t i = 0; i < keep.size(); ++i) out.present[i] = bundle.present[i] && keep[i];
  if (out.present_count() == 0) throw ConfigError("keep-subset leaves no modality present");
  return out;
}

template <typename T>
ModalityBundle<T> emm_drop(const ModalityBundle<T>& bundle, double p, std::uint64_t seed) {
  check_probability(p);
  if (bundle.present_count() == 0) throw ShapeError("emm: no modality present");
  Rng rng(seed);
  std::vector<bool> keep(bundle.size());
  for (;;) {
    bool any = false;
    for (std::size_t i = 0; i < keep.size(); ++i) {
      keep[i] = !rng.bernoulli(p);
      any = any || (keep[i] && bundle.present[i]);
    }
    if (any) break;
  }
  return with_keep(bundle, keep);
}

std::vector<std::vector<bool>> keep_subsets(std::size_t n) {
  if (n < 2) throw ConfigError("subset enumeration needs at least two modalities");
  if (n > 20) throw ConfigError("too many modalities to enumerate");
  std::vector<std::vector<bool>> out;
  const std::uint64_t full = (std::uint64_t{1} << n) - 1;
  for (std::uint64_t mask = 1; mask < full; ++mask) {
    std::vector<bool> keep(n);
    for (std::size_t i = 0; i < n; ++i) keep[i] = (mask >> i) & 1U;
    out.push_back(std::move(keep));
  }
  return out;
}

template <typename T>
ConfusionMatrix evaluate(const SegModel<T>& model, std::span<const ModalityBundle<T>> bundles,
                         std::span<const LabelMap> labels, const BundleTransform<T>& transform, std::size_t threads) {
  if (bundles.size() != labels.size()) throw ShapeError("evaluate: bundles and labels differ in count");
  const std::size_t c = model.config().categories;
  std::vector<ConfusionMatrix> per(bundles.size(), ConfusionMatrix(c));
  auto run = [&](std::size_t i) {
    const auto pred = transform ? model.predict(transform(bundles[i], i)) : model.predict(bundles[i]);
    per[i].add(pred, labels[i]);
  };
  threads = std::max<std::size_t>(1, std::min(threads, bundles.size()));
  if (threads == 1) {
    for (std::size_t i = 0; i < bundles.size(); ++i) run(i);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t t = 0; t < threads; ++t)
      pool.emplace_back([&, t] {
        try {
          for (std::size_t i = t; i < bundles.size(); i += threads) run(i);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  ConfusionMatrix total(c);
  for (const auto& m : per) total.merge(m);
  return total;
}

template <typename T>
double emm_eval(const SegModel<T>& model, std::span<const ModalityBundle<T>> bundles,
                std::span<const LabelMap> labels, EmmMode mode, std::uint64_t seed, std::size_t threads,
                std::vector<EmmSubsetResult>* subsets) {
  const std::size_t n = model.config().modality_count();
  if (mode.average) {
    const auto all = keep_subsets(n);
    double sum = 0.0;
    for (const auto& keep : all) {
      const auto m = evaluate<T>(model, bundles, labels,
                                 [&keep](const ModalityBundle<T>& b, std::size_t) { return with_keep(b, keep); },
                                 threads);
      const double v = m.iou().mean;
      if (subsets) subsets->push_back({keep, v});
      sum += v;
    }
    return sum / static_cast<double>(all.size());
  }
  check_probability(mode.p);
  const auto m = evaluate<T>(
      model, bundles, labels,
      [&](const ModalityBundle<T>& b, std::size_t i) { return emm_drop(b, mode.p, stream_seed(seed, i, 0x454d4d)); },
      threads);
  return m.iou().mean;
}

nlohmann::json RobustnessProtocol::to_json() const {
  return {{"version", 1},
          {"miou", "dataset-level confusion matrix; mean over categories present in prediction or ground truth"},
          {"emm_avg", "mean mIoU over all non-empty strict keep-subsets; dropped modalities are masked out"},
          {"emm_p", {{"p", emm_p}, {"rule", "per sample, each modality dropped independently; redrawn if none kept"}}},
          {"rmm_avg", {{"ps", rmm_avg_ps}, {"block", rmm_block}, {"rule", "mean of RMM mIoU over ps"}}},
          {"rmm_p", {{"p", rmm_p}, {"block", rmm_block}, {"rule", "block tiles zeroed independently per modality"}}},
          {"nm", {{"low_sigma", nm_low}, {"mid_sigma", nm_mid}, {"rule", "additive Gaussian noise on every map"}}},
          {"seed", seed},
          {"threads", threads}};
}

double robustness_score(std::span<const std::optional<double>> metrics) {
  if (metrics.size() != kReportColumns.size())
    throw ConfigError("robustness score needs " + std::to_string(kReportColumns.size()) + " metrics, got " +
                      std::to_string(metrics.size()));
  double sum = 0.0;
  for (std::size_t i = 0; i < metrics.size(); ++i) {
    if (!metrics[i]) throw ConfigError(std::string("robustness score: missing ") + kReportColumns[i]);
    sum += *metrics[i];
  }
  return sum / static_cast<double>(metrics.size());
}

template <typename T>
RobustnessReport run_robustness(const SegModel<T>& model, std::span<const ModalityBundle<T>> bundles,
                                std::span<const LabelMap> labels, const RobustnessProtocol& protocol) {
  const std::uint64_t seed = protocol.seed;
  const std::size_t threads = protocol.threads;
  RobustnessReport r;
  r.miou_clean = percent(evaluate<T>(model, bundles, labels, {}, threads));
  r.emm_avg = 100.0 * emm_eval<T>(model, bundles, labels, {true, 0.0}, seed, threads);
  r.emm_p = 100.0 * emm_eval<T>(model, bundles, labels, {false, protocol.emm_p}, seed, threads);
  auto rmm = [&](double p, std::uint64_t salt) {
    return percent(evaluate<T>(
        model, bundles, labels,
        [&](const ModalityBundle<T>& b, std::size_t i) {
          return rmm_perturb(b, p, protocol.rmm_block, stream_seed(seed, i, salt));
        },
        threads));
  };
  double sum = 0.0;
  for (std::size_t k = 0; k < protocol.rmm_avg_ps.size(); ++k) sum += rmm(protocol.rmm_avg_ps[k], 0x524d4d00 + k);
  r.rmm_avg = protocol.rmm_avg_ps.empty() ? 0.0 : sum / static_cast<double>(protocol.rmm_avg_ps.size());
  r.rmm_p = rmm(protocol.rmm_p, 0x524d4d50);
  auto nm = [&](double sigma, std::uint64_t salt) {
    return percent(evaluate<T>(
        model, bundles, labels,
        [&](const ModalityBundle<T>& b, std::size_t i) { return nm_perturb(b, sigma, stream_seed(seed, i, salt)); },
        threads));
  };
  r.nm_low = nm(protocol.nm_low, 0x4e4d4c);
  r.nm_mid = nm(protocol.nm_mid, 0x4e4d4d);
  std::vector<std::optional<double>> v;
  for (double x : r.values()) v.emplace_back(x);
  r.mean = robustness_score(v);
  return r;
}

std::string format_report_table(const RobustnessReport& report, const std::string& row_label) {
  std::ostringstream os;
  char buf[64];
  const int label_width = static_cast<int>(std::max<std::size_t>(row_label.size(), 5));
  std::snprintf(buf, sizeof buf, "%-*s", label_width, "Model");
  os << buf;
  for (const char* c : kReportColumns) {
    std::snprintf(buf, sizeof buf, " %9s", c);
    os << buf;
  }
  std::snprintf(buf, sizeof buf, " %9s\n", "Mean");
  os << buf;
  std::snprintf(buf, sizeof buf, "%-*s", label_width, row_label.c_str());
  os << buf;
  for (double v : report.values()) {
    std::snprintf(buf, sizeof buf, " %9.2f", v);
    os << buf;
  }
  std::snprintf(buf, sizeof buf, " %9.2f\n", report.mean);
  os << buf;
  return os.str();
}

nlohmann::json report_to_json(const RobustnessReport& report, const RobustnessProtocol& protocol) {
  nlohmann::json metrics = nlohmann::json::object();
  const auto v = report.values();
  for (std::size_t i = 0; i < v.size(); ++i) metrics[kReportColumns[i]] = v[i];
  metrics["Mean"] = report.mean;
  return {{"protocol", protocol.to_json()}, {"units", "percent"}, {"metrics", metrics}};
}

#define EQUISEG_ROBUST_INSTANTIATE(T)                                                                              \
  template ModalityBundle<T> rmm_perturb<T>(const ModalityBundle<T>&, double, std::size_t, std::uint64_t);         \
  template ModalityBundle<T> nm_perturb<T>(const ModalityBundle<T>&, double, std::uint64_t);                       \
  template ModalityBundle<T> nm_perturb<T>(const ModalityBundle<T>&, NoiseLevel, std::uint64_t);                   \
  template ModalityBundle<T> emm_drop<T>(const ModalityBundle<T>&, double, std::uint64_t);                         \
  template ModalityBundle<T> with_keep<T>(const ModalityBundle<T>&, const std::vector<bool>&);                     \
  template ConfusionMatrix evaluate<T>(const SegModel<T>&, std::span<const ModalityBundle<T>>,                     \
                                       std::span<const LabelMap>, const BundleTransform<T>&, std::size_t);         \
  template double emm_eval<T>(const SegModel<T>&, std::span<const ModalityBundle<T>>, std::span<const LabelMap>,   \
                              EmmMode, std::uint64_t, std::size_t, std::vector<EmmSubsetResult>*);                 \
  template RobustnessReport run_robustness<T>(const SegModel<T>&, std::span<const ModalityBundle<T>>,              \
                                              std::span<const LabelMap>, const RobustnessProtocol&);

EQUISEG_ROBUST_INSTANTIATE(float)
EQUISEG_ROBUST_INSTANTIATE(double)

}  // namespace equiseg
