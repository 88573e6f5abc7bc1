#include "equiseg/trainer.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "equiseg/ops.hpp"

namespace equiseg {

void ScheduleConfig::validate() const {
  if (batch == 0) throw ConfigError("schedule: batch must be positive");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("schedule: lr must be positive");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0))
    throw ConfigError("schedule: warmup fraction must be in [0, 1)");
  if (!(poly_power >= 0.0)) throw ConfigError("schedule: poly exponent must be >= 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("schedule: weight decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("schedule: betas must be in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("schedule: eps must be positive");
}

double ScheduleConfig::lr_at(std::size_t step) const {
  if (steps == 0) return lr;
  const auto warm = static_cast<std::size_t>(std::llround(warmup_fraction * static_cast<double>(steps)));
  if (step < warm) return lr * static_cast<double>(step + 1) / static_cast<double>(warm);
  const double span = static_cast<double>(steps - warm);
  const double done = std::min(static_cast<double>(step - warm), span);
  return lr * std::pow(1.0 - done / span, poly_power);
}

nlohmann::json ScheduleConfig::to_json() const {
  return {{"steps", steps},       {"batch", batch},   {"lr", lr},       {"warmup_fraction", warmup_fraction},
          {"poly_power", poly_power}, {"weight_decay", weight_decay}, {"beta1", beta1}, {"beta2", beta2},
          {"eps", eps}};
}

template <typename T>
AdamW<T>::AdamW(ParamStore<T>& params, const ScheduleConfig& config) : params_(params), config_(config) {
  config_.validate();
  for (const auto& e : params_.entries()) {
    m_.emplace_back(e.value.numel(), 0.0);
    v_.emplace_back(e.value.numel(), 0.0);
  }
}

template <typename T>
void AdamW<T>::step(double lr) {
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  auto& entries = params_.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& p = entries[i].value;
    const bool decay = p.rank() >= 2;
    auto values = p.mutable_data();
    const bool has_grad = p.has_grad();
    auto grad = has_grad ? p.grad() : std::span<const T>{};
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < values.size(); ++k) {
      const double g = has_grad ? static_cast<double>(grad[k]) : 0.0;
      m[k] = b1 * m[k] + (1.0 - b1) * g;
      v[k] = b2 * v[k] + (1.0 - b2) * g * g;
      double x = static_cast<double>(values[k]);
      if (decay) x -= lr * config_.weight_decay * x;
      x -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + config_.eps);
      values[k] = static_cast<T>(x);
    }
  }
}

nlohmann::json StepMetrics::to_json() const {
  return {{"step", step}, {"L", loss}, {"L_CE", ce}, {"L_s", sgm}, {"lr", lr}};
}

template <typename T>
StepMetrics train_step(std::span<const ModalityBundle<T>> bundles, std::span<const LabelMap> labels,
                       SegModel<T>& model, AdamW<T>& optimizer, Rng& pairing_rng, double lr) {
  const auto& cfg = model.config();
  if (cfg.profile != Profile::train) throw ConfigError("train_step requires the train profile");
  if (bundles.empty() || bundles.size() != labels.size())
    throw ShapeError("train_step: " + std::to_string(bundles.size()) + " bundles vs " +
                     std::to_string(labels.size()) + " label maps");
  const std::size_t n = cfg.modality_count();
  const bool sgm_on = cfg.sgm.enabled;
  std::optional<Pairing> shared_pairing;
  if (sgm_on && cfg.sgm.pairing == PairingMode::random && n >= 2) shared_pairing = assign_pairs(n, pairing_rng);

  const T inv_b = T(1) / static_cast<T>(bundles.size());
  StepMetrics out;
  out.lr = lr;
  bool all_no_category = sgm_on;
  for (std::size_t s = 0; s < bundles.size(); ++s) {
    GradTape<T> tape;
    TapeScope<T> scope(tape);
    const auto features = model.encode(bundles[s]);
    Tensor<T> ls = Tensor<T>::scalar(T(0));
    if (sgm_on && n >= 2 && bundles[s].present_count() >= 2) {
      Pairing pairing;
      if (shared_pairing) {
        pairing = *shared_pairing;
      } else {
        const auto summaries = prototype_summaries(build_prototypes(features, labels[s], cfg.categories));
        pairing = cosine_pairs(summaries, pairing_rng);
      }
      auto r = self_guidance_loss(features, labels[s], cfg.categories, pairing, cfg.sgm);
      ls = r.value;
      all_no_category = all_no_category && r.no_category;
    }
    const auto logits = model.head(features, bundles[s].grid()).logits;
    const auto ce = cross_entropy(logits, labels[s]);
    const Tensor<T> loss = (sgm_on && cfg.sgm.lambda > 0.0) ? total_loss(ce, ls, cfg.sgm.lambda) : ce;
    const double lv = static_cast<double>(loss.item());
    if (!std::isfinite(lv)) {
      std::ostringstream msg;
      msg << "non-finite loss at sample " << s << ": L=" << lv << " L_CE=" << ce.item() << " L_s=" << ls.item();
      throw NumericError(msg.str());
    }
    backward(ops::scale(loss, inv_b), tape);
    out.loss += lv;
    out.ce += static_cast<double>(ce.item());
    out.sgm += static_cast<double>(ls.item());
  }
  const double b = static_cast<double>(bundles.size());
  out.loss /= b;
  out.ce /= b;
  out.sgm /= b;
  out.sgm_no_category = all_no_category;
  optimizer.step(lr);
  model.params().zero_grad();
  return out;
}

template <typename T>
Trainer<T>::Trainer(SegModel<T>& model, ScheduleConfig schedule, std::uint64_t seed)
    : model_(model),
      schedule_((schedule.validate(), schedule)),
      optimizer_(model.params(), schedule_),
      batch_rng_(mix_seed(seed) ^ 0x6261746368ULL),
      pairing_rng_(mix_seed(seed) ^ 0x70616972ULL) {}

template <typename T>
StepMetrics Trainer<T>::step(std::span<const ModalityBundle<T>> data, std::span<const LabelMap> labels) {
  if (data.empty() || data.size() != labels.size()) throw ShapeError("trainer: empty or mismatched dataset");
  std::vector<ModalityBundle<T>> batch;
  std::vector<LabelMap> batch_labels;
  for (std::size_t b = 0; b < schedule_.batch; ++b) {
    if (cursor_ >= order_.size() || order_.size() != data.size()) {
      order_.resize(data.size());
      std::iota(order_.begin(), order_.end(), std::size_t{0});
      batch_rng_.shuffle(order_.begin(), order_.end());
      cursor_ = 0;
    }
    const std::size_t idx = order_[cursor_++];
    batch.push_back(data[idx]);
    batch_labels.push_back(labels[idx]);
  }
  auto m = train_step<T>(batch, batch_labels, model_, optimizer_, pairing_rng_, schedule_.lr_at(step_));
  m.step = step_++;
  return m;
}

MetricsLog::MetricsLog(const std::filesystem::path& path) : out_(path) {
  if (!out_) throw IoError("cannot open metrics log " + path.string());
}

void MetricsLog::write(const StepMetrics& m) {
  out_ << m.to_json().dump() << '\n';
  out_.flush();
  if (!out_) throw IoError("failed writing metrics log");
}

#define EQUISEG_TRAIN_INSTANTIATE(T)                                                                        \
  template class AdamW<T>;                                                                                  \
  template class Trainer<T>;                                                                                \
  template StepMetrics train_step<T>(std::span<const ModalityBundle<T>>, std::span<const LabelMap>,          \
                                     SegModel<T>&, AdamW<T>&, Rng&, double);

EQUISEG_TRAIN_INSTANTIATE(float)
EQUISEG_TRAIN_INSTANTIATE(double)

}  // namespace equiseg
