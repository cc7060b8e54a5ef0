#include "dflab/kernels.hpp"

#include <cmath>
#include <exception>
#include <random>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "dflab/errors.hpp"

namespace dflab {

std::string to_string(Execution exec) {
  return exec == Execution::kSerial ? "serial" : "openmp";
}

Execution execution_from_string(const std::string& name) {
  if (name == "serial") return Execution::kSerial;
  if (name == "openmp") return Execution::kOpenMP;
  throw ConfigError("unknown execution '" + name + "'");
}

int max_workers() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  // splitmix64 finalizer over the pair
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

void run_indexed(std::size_t n, const std::function<void(std::size_t)>& task, Execution exec,
                 int workers) {
  if (exec == Execution::kSerial) {
    for (std::size_t i = 0; i < n; ++i) task(i);
    return;
  }
  // Exceptions cannot cross the parallel region; keep the first by index.
  std::vector<std::exception_ptr> errors(n);
  const int threads = workers > 0 ? workers : max_workers();
  const auto count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(dynamic, 1) num_threads(threads)
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    try {
      task(static_cast<std::size_t>(i));
    } catch (...) {
      errors[static_cast<std::size_t>(i)] = std::current_exception();
    }
  }
  (void)threads;
  for (const std::exception_ptr& e : errors)
    if (e) std::rethrow_exception(e);
}

std::vector<DenseVector> batch_mixture_score(const GaussianMixture& mix,
                                             std::span<const LatentState> xs,
                                             const NoiseSchedule& schedule, std::size_t level,
                                             Execution exec) {
  if (!schedule.valid(level)) throw StructuralError("noise level out of range");
  std::vector<DenseVector> out(xs.size());
  run_indexed(
      xs.size(), [&](std::size_t i) { out[i] = mixture_score(mix, xs[i], schedule, level); }, exec);
  return out;
}

MonteCarloScore monte_carlo_marginalized_score(const World& world, const Condition& cond,
                                               std::span<const double> x,
                                               const NoiseSchedule& schedule, std::size_t level,
                                               std::size_t samples, std::uint64_t seed,
                                               Execution exec) {
  if (samples < 2) throw UsageError("monte carlo needs at least 2 samples");
  if (cond.modes.empty()) throw StructuralError("condition has no modes");
  std::vector<DenseVector> draws(samples);
  run_indexed(
      samples,
      [&](std::size_t i) {
        Rng rng(derive_seed(seed, i));
        std::discrete_distribution<std::size_t> pick(cond.history_prior.begin(),
                                                     cond.history_prior.end());
        const std::size_t mode = cond.modes[pick(rng)];
        HistorySummary hist;
        hist.empty = false;
        hist.running_mean = world.mixture()[mode].mean;
        hist.terminal = hist.running_mean;
        draws[i] = history_aware_score(world, cond, hist, x, schedule, level);
      },
      exec);

  MonteCarloScore result;
  result.samples = samples;
  const std::size_t d = x.size();
  result.mean.assign(d, 0.0);
  for (const DenseVector& s : draws)
    for (std::size_t j = 0; j < d; ++j) result.mean[j] += s[j];
  for (double& m : result.mean) m /= static_cast<double>(samples);
  result.standard_error.assign(d, 0.0);
  for (const DenseVector& s : draws)
    for (std::size_t j = 0; j < d; ++j) {
      const double dev = s[j] - result.mean[j];
      result.standard_error[j] += dev * dev;
    }
  for (double& v : result.standard_error)
    v = std::sqrt(v / static_cast<double>(samples - 1) / static_cast<double>(samples));
  return result;
}

}  // namespace dflab
