// Serial reference against the OpenMP path for the batch kernels.
//
//   dflab_bench --benchmark_filter=MixtureScore

#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "dflab/kernels.hpp"
#include "dflab/world.hpp"

namespace {

using namespace dflab;

const NoiseSchedule kSchedule = NoiseSchedule::geometric(0.05, 2.0, 8);

std::vector<LatentState> points(std::size_t n) {
  Rng rng(1);
  std::uniform_real_distribution<double> u(-6.0, 6.0);
  std::vector<LatentState> xs(n);
  for (auto& x : xs) x = {u(rng), u(rng)};
  return xs;
}

void MixtureScore(benchmark::State& state, Execution exec) {
  const World world = make_benchmark_world(WorldSpec::benchmark());
  const auto xs = points(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) {
    auto scores = batch_mixture_score(world.mixture(), xs, kSchedule, 4, exec);
    benchmark::DoNotOptimize(scores.data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

void MonteCarlo(benchmark::State& state, Execution exec) {
  const World world = make_benchmark_world(WorldSpec::benchmark());
  const DenseVector x{0.5, -1.0};
  for (auto _ : state) {
    auto mc = monte_carlo_marginalized_score(world, world.condition(1), x, kSchedule, 4,
                                             static_cast<std::size_t>(state.range(0)), 7, exec);
    benchmark::DoNotOptimize(mc.mean.data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

}  // namespace

BENCHMARK_CAPTURE(MixtureScore, serial, Execution::kSerial)->Arg(1 << 10)->Arg(1 << 14);
BENCHMARK_CAPTURE(MixtureScore, openmp, Execution::kOpenMP)->Arg(1 << 10)->Arg(1 << 14);
BENCHMARK_CAPTURE(MonteCarlo, serial, Execution::kSerial)->Arg(10000);
BENCHMARK_CAPTURE(MonteCarlo, openmp, Execution::kOpenMP)->Arg(10000);

BENCHMARK_MAIN();
