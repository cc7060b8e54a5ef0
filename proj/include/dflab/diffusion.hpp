#pragma once

// Variance-exploding noise schedule, isotropic Gaussian mixtures with exact
// scores, and the Tweedie denoiser.

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dflab/tensor.hpp"

namespace dflab {

using Rng = std::mt19937_64;

// Noise levels are 1-based: level t has standard deviation sigma(t).
class NoiseSchedule {
 public:
  NoiseSchedule() = default;
  explicit NoiseSchedule(std::vector<double> sigmas);
  // sigma_t geometric from sigma_min to sigma_max over `levels` levels.
  static NoiseSchedule geometric(double sigma_min, double sigma_max, std::size_t levels);

  std::size_t levels() const noexcept { return sigmas_.size(); }
  double sigma(std::size_t level) const;
  bool valid(std::size_t level) const noexcept { return level >= 1 && level <= sigmas_.size(); }
  const std::vector<double>& sigmas() const noexcept { return sigmas_; }
  std::size_t sample_level(Rng& rng) const;

 private:
  std::vector<double> sigmas_;
};

struct MixtureComponent {
  DenseVector mean;
  double variance = 1.0;
  double weight = 1.0;
};

class GaussianMixture {
 public:
  GaussianMixture() = default;
  explicit GaussianMixture(std::vector<MixtureComponent> components);

  std::size_t size() const noexcept { return components_.size(); }
  std::size_t dim() const noexcept { return components_.empty() ? 0 : components_[0].mean.size(); }
  const std::vector<MixtureComponent>& components() const noexcept { return components_; }
  const MixtureComponent& operator[](std::size_t k) const { return components_[k]; }

  // Components picked by index with weights renormalized by `weights`.
  GaussianMixture subset(std::span<const std::size_t> ids, std::span<const double> weights) const;

 private:
  std::vector<MixtureComponent> components_;
};

struct NoisySample {
  LatentState x;
  std::size_t level = 1;
  LatentState source;
  DenseVector noise;  // epsilon with x = source + sigma * noise
};

NoisySample perturb(const NoiseSchedule& schedule, std::span<const double> x0, std::size_t level,
                    Rng& rng);

// Posterior responsibilities of each component for x after convolution with
// N(0, extra_variance I).
DenseVector responsibilities(const GaussianMixture& mix, std::span<const double> x,
                             double extra_variance);

// log density of the mixture convolved with N(0, extra_variance I).
double mixture_log_density(const GaussianMixture& mix, std::span<const double> x,
                           double extra_variance);

// Exact score of the mixture convolved with N(0, sigma_t^2 I).
DenseVector mixture_score(const GaussianMixture& mix, std::span<const double> x,
                          const NoiseSchedule& schedule, std::size_t level);
DenseVector mixture_score_at_variance(const GaussianMixture& mix, std::span<const double> x,
                                      double extra_variance);

// x + sigma_t^2 * score
LatentState tweedie_denoise(std::span<const double> score, std::span<const double> x,
                            const NoiseSchedule& schedule, std::size_t level);

enum class ScoreRole { kTeacherHistoryAware, kTeacherMarginalized, kFakeCritic };

std::string to_string(ScoreRole role);

// A tagged score evaluator s(x, t).
struct ScoreField {
  ScoreRole role;
  std::function<DenseVector(std::span<const double> x, std::size_t level)> evaluate;
};

}  // namespace dflab
