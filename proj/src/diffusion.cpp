#include "dflab/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "dflab/errors.hpp"

namespace dflab {

NoiseSchedule::NoiseSchedule(std::vector<double> sigmas) : sigmas_(std::move(sigmas)) {
  if (sigmas_.empty()) throw ConfigError("noise schedule needs at least one level");
  if (!(sigmas_[0] > 0.0)) throw ConfigError("sigma_1 must be positive");
  for (std::size_t i = 1; i < sigmas_.size(); ++i)
    if (!(sigmas_[i] > sigmas_[i - 1]))
      throw ConfigError("noise levels must be strictly increasing");
}

NoiseSchedule NoiseSchedule::geometric(double sigma_min, double sigma_max, std::size_t levels) {
  if (levels == 0) throw ConfigError("noise schedule needs at least one level");
  std::vector<double> sigmas(levels);
  if (levels == 1) {
    sigmas[0] = sigma_min;
  } else {
    const double ratio = std::log(sigma_max / sigma_min) / static_cast<double>(levels - 1);
    for (std::size_t i = 0; i < levels; ++i)
      sigmas[i] = sigma_min * std::exp(ratio * static_cast<double>(i));
    sigmas.back() = sigma_max;
  }
  return NoiseSchedule(std::move(sigmas));
}

double NoiseSchedule::sigma(std::size_t level) const {
  if (!valid(level))
    throw StructuralError("noise level " + std::to_string(level) + " outside [1, " +
                          std::to_string(sigmas_.size()) + "]");
  return sigmas_[level - 1];
}

std::size_t NoiseSchedule::sample_level(Rng& rng) const {
  std::uniform_int_distribution<std::size_t> pick(1, sigmas_.size());
  return pick(rng);
}

GaussianMixture::GaussianMixture(std::vector<MixtureComponent> components)
    : components_(std::move(components)) {
  if (components_.empty()) throw ConfigError("mixture needs at least one component");
  const std::size_t d = components_[0].mean.size();
  double total = 0.0;
  for (const MixtureComponent& c : components_) {
    if (c.mean.size() != d) throw StructuralError("mixture components disagree on dimension");
    if (!(c.variance > 0.0)) throw ConfigError("mixture variance must be positive");
    if (!(c.weight >= 0.0)) throw ConfigError("mixture weight must be nonnegative");
    total += c.weight;
  }
  if (!(std::abs(total - 1.0) <= 1e-6)) throw ConfigError("mixture weights must sum to 1");
  for (MixtureComponent& c : components_) c.weight /= total;
}

GaussianMixture GaussianMixture::subset(std::span<const std::size_t> ids,
                                        std::span<const double> weights) const {
  if (ids.size() != weights.size()) throw StructuralError("subset ids and weights differ in size");
  std::vector<MixtureComponent> picked;
  double total = 0.0;
  for (double w : weights) total += w;
  if (!(total > 0.0)) throw ConfigError("subset weights must have positive mass");
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= components_.size()) throw StructuralError("component id out of range");
    MixtureComponent c = components_[ids[i]];
    c.weight = weights[i] / total;
    picked.push_back(std::move(c));
  }
  return GaussianMixture(std::move(picked));
}

NoisySample perturb(const NoiseSchedule& schedule, std::span<const double> x0, std::size_t level,
                    Rng& rng) {
  const double sigma = schedule.sigma(level);
  std::normal_distribution<double> normal(0.0, 1.0);
  NoisySample sample{LatentState(x0.size()), level, LatentState(x0.begin(), x0.end()),
                     DenseVector(x0.size())};
  for (std::size_t i = 0; i < x0.size(); ++i) {
    sample.noise[i] = normal(rng);
    sample.x[i] = x0[i] + sigma * sample.noise[i];
  }
  return sample;
}

namespace {

// log(w_k) + log N(x; m_k, (v_k + extra) I) for every component.
DenseVector component_log_terms(const GaussianMixture& mix, std::span<const double> x,
                                double extra_variance) {
  if (x.size() != mix.dim())
    throw StructuralError("point dimension " + std::to_string(x.size()) + " != mixture dimension " +
                          std::to_string(mix.dim()));
  const double d = static_cast<double>(mix.dim());
  DenseVector terms(mix.size());
  for (std::size_t k = 0; k < mix.size(); ++k) {
    const MixtureComponent& c = mix[k];
    const double var = c.variance + extra_variance;
    terms[k] = c.weight > 0.0 ? std::log(c.weight) - 0.5 * d * std::log(2.0 * std::numbers::pi * var) -
                                    0.5 * squared_distance(x, c.mean) / var
                              : -std::numeric_limits<double>::infinity();
  }
  return terms;
}

double log_sum_exp(std::span<const double> terms, double max_term) {
  double acc = 0.0;
  for (double t : terms) acc += std::exp(t - max_term);
  return max_term + std::log(acc);
}

}  // namespace

DenseVector responsibilities(const GaussianMixture& mix, std::span<const double> x,
                             double extra_variance) {
  DenseVector terms = component_log_terms(mix, x, extra_variance);
  const double max_term = *std::ranges::max_element(terms);
  double total = 0.0;
  for (double& t : terms) {
    t = std::exp(t - max_term);
    total += t;
  }
  for (double& t : terms) t /= total;
  return terms;
}

double mixture_log_density(const GaussianMixture& mix, std::span<const double> x,
                           double extra_variance) {
  const DenseVector terms = component_log_terms(mix, x, extra_variance);
  return log_sum_exp(terms, *std::ranges::max_element(terms));
}

DenseVector mixture_score_at_variance(const GaussianMixture& mix, std::span<const double> x,
                                      double extra_variance) {
  const DenseVector r = responsibilities(mix, x, extra_variance);
  DenseVector score(x.size(), 0.0);
  for (std::size_t k = 0; k < mix.size(); ++k) {
    if (r[k] == 0.0) continue;
    const MixtureComponent& c = mix[k];
    const double scale = r[k] / (c.variance + extra_variance);
    for (std::size_t i = 0; i < x.size(); ++i) score[i] += scale * (c.mean[i] - x[i]);
  }
  return score;
}

DenseVector mixture_score(const GaussianMixture& mix, std::span<const double> x,
                          const NoiseSchedule& schedule, std::size_t level) {
  const double sigma = schedule.sigma(level);
  return mixture_score_at_variance(mix, x, sigma * sigma);
}

LatentState tweedie_denoise(std::span<const double> score, std::span<const double> x,
                            const NoiseSchedule& schedule, std::size_t level) {
  if (score.size() != x.size()) throw StructuralError("score and point differ in dimension");
  const double sigma = schedule.sigma(level);
  const double var = sigma * sigma;
  LatentState out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + var * score[i];
  return out;
}

std::string to_string(ScoreRole role) {
  switch (role) {
    case ScoreRole::kTeacherHistoryAware:
      return "teacher_history_aware";
    case ScoreRole::kTeacherMarginalized:
      return "teacher_marginalized";
    case ScoreRole::kFakeCritic:
      return "fake_critic";
  }
  return "unknown";
}

}  // namespace dflab
