#include <benchmark/benchmark.h>

#include "epalab/datagen.hpp"
#include "epalab/losses.hpp"
#include "epalab/objectives.hpp"
#include "epalab/rng.hpp"
#include "epalab/trainer.hpp"

using namespace epalab;

namespace {

struct Fixture {
  World world;
  Dataset data;

  explicit Fixture(std::size_t V, std::size_t n_strong = 1) {
    WorldParams wp;
    wp.seed = 1;
    wp.prompts = 16;
    wp.responses = V;
    world = build_world(wp);
    data = sample_preferences(world, SamplingScheme{}, 256, n_strong, 2);
    data = attach_weak_negatives(std::move(data), world, 4, WeakMode::InBatchMarker, 3);
  }
};

void BM_LossGradient(benchmark::State& state, LossVariant variant) {
  const bool listwise = variant == LossVariant::EpaGeneral || variant == LossVariant::DpoPl;
  const Fixture f(static_cast<std::size_t>(state.range(0)), listwise ? 3 : 1);
  LossConfig lc;
  lc.variant = variant;
  lc.beta = 0.1;
  if (variant == LossVariant::EpaNarrow || variant == LossVariant::EpaGeneral) lc.n_weak = 4;
  Rng rng(4);
  const auto records = std::span<const PreferenceRecord>(f.data.records).subspan(0, 16);
  const Batch batch = assemble_batch(records, f.world, lc, rng);
  for (auto _ : state) {
    auto g = loss_gradient(batch, f.world.reference, f.world, lc);
    benchmark::DoNotOptimize(g.value.loss);
  }
}
BENCHMARK_CAPTURE(BM_LossGradient, dpo, LossVariant::Dpo)->Arg(32)->Arg(256);
BENCHMARK_CAPTURE(BM_LossGradient, epa_narrow, LossVariant::EpaNarrow)->Arg(32)->Arg(256);
BENCHMARK_CAPTURE(BM_LossGradient, epa_general, LossVariant::EpaGeneral)->Arg(32)->Arg(256);
BENCHMARK_CAPTURE(BM_LossGradient, dpo_pl, LossVariant::DpoPl)->Arg(32)->Arg(256);

void BM_ExactEnergyDiscrepancy(benchmark::State& state) {
  const Fixture f(static_cast<std::size_t>(state.range(0)));
  const auto kernel = make_symmetric_kernel(f.world.responses(), 0.5);
  const auto row = f.world.rewards.row(0);
  const auto target = ipm_distribution(row);
  for (auto _ : state) {
    benchmark::DoNotOptimize(exact_energy_discrepancy(row, kernel, target));
  }
}
BENCHMARK(BM_ExactEnergyDiscrepancy)->Arg(16)->Arg(64)->Arg(256);

void BM_TrainSteps(benchmark::State& state) {
  const Fixture f(32);
  LossConfig lc;
  lc.variant = LossVariant::EpaNarrow;
  lc.beta = 0.1;
  lc.n_weak = 2;
  TrainConfig tc;
  tc.steps = static_cast<std::size_t>(state.range(0));
  tc.checkpoint_every = tc.steps;
  for (auto _ : state) {
    auto res = train(f.world, f.data.records, lc, tc);
    benchmark::DoNotOptimize(res.policy.logits().data().data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_TrainSteps)->Arg(1000)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
