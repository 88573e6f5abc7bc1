#include <benchmark/benchmark.h>

#include "equiseg/seg_model.hpp"
#include "equiseg/synth.hpp"
#include "equiseg/trainer.hpp"

namespace {

using namespace equiseg;

struct Batch {
  std::vector<ModalityBundle<float>> bundles;
  std::vector<LabelMap> labels;
};

Batch make_batch(std::size_t count) {
  SceneConfig sc;
  Batch b;
  for (const auto& r : generate_samples(sc, 9, count)) {
    b.bundles.push_back({r.modalities, std::vector<bool>(r.modalities.size(), true), default_modality_names()});
    b.labels.push_back(r.labels);
  }
  return b;
}

void BM_Forward(benchmark::State& state) {
  const SegModel<float> model{ModelConfig{}};
  const auto batch = make_batch(1);
  for (auto _ : state) benchmark::DoNotOptimize(model.predict(batch.bundles[0]));
}
BENCHMARK(BM_Forward)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  ModelConfig cfg;
  cfg.sgm.enabled = state.range(0) != 0;
  SegModel<float> model(cfg);
  ScheduleConfig sch;
  sch.batch = 2;
  sch.steps = 1000000;
  Trainer<float> trainer(model, sch, 1);
  const auto batch = make_batch(4);
  for (auto _ : state) benchmark::DoNotOptimize(trainer.step(batch.bundles, batch.labels));
}
BENCHMARK(BM_TrainStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
