#pragma once

// Batch kernels with a serial reference and an OpenMP path. Both paths
// evaluate the same per-item arithmetic and reduce in index order, so their
// results are bitwise identical for any thread count.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dflab/diffusion.hpp"
#include "dflab/world.hpp"

namespace dflab {

enum class Execution { kSerial, kOpenMP };

std::string to_string(Execution exec);
Execution execution_from_string(const std::string& name);

// Worker count used by the OpenMP path (1 when built without OpenMP).
int max_workers();

std::vector<DenseVector> batch_mixture_score(const GaussianMixture& mix,
                                             std::span<const LatentState> xs,
                                             const NoiseSchedule& schedule, std::size_t level,
                                             Execution exec);

struct MonteCarloScore {
  DenseVector mean;
  DenseVector standard_error;
  std::size_t samples = 0;
};

// Average of history-aware scores at x with the history basin drawn from the
// condition's prior. Sample i uses its own generator derived from (seed, i).
MonteCarloScore monte_carlo_marginalized_score(const World& world, const Condition& cond,
                                               std::span<const double> x,
                                               const NoiseSchedule& schedule, std::size_t level,
                                               std::size_t samples, std::uint64_t seed,
                                               Execution exec);

// Calls task(i) for i in [0, n). Tasks must not share mutable state.
void run_indexed(std::size_t n, const std::function<void(std::size_t)>& task, Execution exec,
                 int workers = 0);

// Independent stream for item `index` of a job seeded with `seed`.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

}  // namespace dflab
