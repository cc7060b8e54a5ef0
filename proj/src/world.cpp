#include "dflab/world.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include "dflab/errors.hpp"

namespace dflab {

WorldSpec WorldSpec::benchmark(std::size_t conditions, std::size_t modes_per_condition,
                               double radius, double variance) {
  WorldSpec spec;
  const std::size_t total = conditions * modes_per_condition;
  for (std::size_t j = 0; j < total; ++j) {
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(j) / static_cast<double>(total);
    spec.modes.push_back({{radius * std::cos(angle), radius * std::sin(angle)},
                          variance,
                          1.0 / static_cast<double>(total)});
  }
  for (std::size_t c = 0; c < conditions; ++c) {
    ConditionSpec cond;
    for (std::size_t m = 0; m < modes_per_condition; ++m)
      cond.modes.push_back(c * modes_per_condition + m);
    spec.conditions.push_back(std::move(cond));
  }
  return spec;
}

void to_json(nlohmann::json& j, const WorldSpec& spec) {
  nlohmann::json modes = nlohmann::json::array();
  for (const ModeSpec& m : spec.modes)
    modes.push_back({{"mean", m.mean}, {"variance", m.variance}, {"weight", m.weight}});
  nlohmann::json conditions = nlohmann::json::array();
  for (const ConditionSpec& c : spec.conditions)
    conditions.push_back({{"modes", c.modes}, {"history_prior", c.history_prior}});
  j = {{"modes", modes}, {"conditions", conditions}, {"window", spec.window}};
}

void from_json(const nlohmann::json& j, WorldSpec& spec) {
  spec = WorldSpec{};
  for (const auto& m : j.at("modes"))
    spec.modes.push_back({m.at("mean").get<DenseVector>(), m.at("variance").get<double>(),
                          m.at("weight").get<double>()});
  for (const auto& c : j.at("conditions")) {
    ConditionSpec cond;
    cond.modes = c.at("modes").get<std::vector<std::size_t>>();
    if (c.contains("history_prior")) cond.history_prior = c.at("history_prior").get<std::vector<double>>();
    spec.conditions.push_back(std::move(cond));
  }
  spec.window = j.value("window", std::size_t{3});
}

World::World(GaussianMixture mixture, std::vector<Condition> conditions, std::size_t window)
    : mixture_(std::move(mixture)), conditions_(std::move(conditions)), window_(window) {
  if (window_ == 0) throw ConfigError("history window must be positive");
  for (std::size_t i = 0; i < conditions_.size(); ++i) {
    const Condition& c = conditions_[i];
    if (c.id != i) throw ConfigError("condition ids must be 0..n-1 in order");
    if (c.modes.empty()) throw StructuralError("condition " + std::to_string(i) + " has no modes");
    if (c.history_prior.size() != c.modes.size())
      throw ConfigError("condition " + std::to_string(i) + ": history prior size mismatch");
    double total = 0.0;
    for (double p : c.history_prior) {
      if (!(p >= 0.0)) throw ConfigError("history prior must be nonnegative");
      total += p;
    }
    if (!(std::abs(total - 1.0) <= 1e-9)) throw ConfigError("history prior must sum to 1");
    for (std::size_t m : c.modes)
      if (m >= mixture_.size()) throw ConfigError("condition references unknown mode");
  }
}

const Condition& World::condition(std::size_t id) const {
  if (id >= conditions_.size()) throw StructuralError("unknown condition " + std::to_string(id));
  return conditions_[id];
}

std::size_t World::embedding_dim() const noexcept {
  return conditions_.empty() ? 0 : conditions_[0].embedding.size();
}

double World::median_mode_distance() const {
  std::vector<double> dists;
  for (std::size_t a = 0; a < mixture_.size(); ++a)
    for (std::size_t b = a + 1; b < mixture_.size(); ++b)
      dists.push_back(distance(mixture_[a].mean, mixture_[b].mean));
  if (dists.empty()) return 0.0;
  std::ranges::sort(dists);
  const std::size_t n = dists.size();
  return n % 2 == 1 ? dists[n / 2] : 0.5 * (dists[n / 2 - 1] + dists[n / 2]);
}

double World::mean_mode_std() const {
  double acc = 0.0;
  for (const MixtureComponent& c : mixture_.components()) acc += std::sqrt(c.variance);
  return acc / static_cast<double>(mixture_.size());
}

std::size_t World::nearest_mode(const Condition& cond, std::span<const double> point) const {
  if (cond.modes.empty()) throw StructuralError("condition has no modes");
  std::size_t best = cond.modes.front();
  double best_dist = squared_distance(point, mixture_[best].mean);
  for (std::size_t m : cond.modes) {
    const double d = squared_distance(point, mixture_[m].mean);
    if (d < best_dist || (d == best_dist && m < best)) {
      best = m;
      best_dist = d;
    }
  }
  return best;
}

std::size_t World::nearest_global_mode(std::span<const double> point) const {
  std::size_t best = 0;
  double best_dist = squared_distance(point, mixture_[0].mean);
  for (std::size_t m = 1; m < mixture_.size(); ++m) {
    const double d = squared_distance(point, mixture_[m].mean);
    if (d < best_dist) {
      best = m;
      best_dist = d;
    }
  }
  return best;
}

std::size_t World::consistent_mode(const Condition& cond, const HistorySummary& hist) const {
  if (hist.running_mean.empty()) return nearest_mode(cond, DenseVector(dim(), 0.0));
  return nearest_mode(cond, hist.running_mean);
}

World World::translated(std::span<const double> offset) const {
  std::vector<MixtureComponent> comps = mixture_.components();
  for (MixtureComponent& c : comps)
    for (std::size_t i = 0; i < c.mean.size(); ++i) c.mean[i] += offset[i];
  return World(GaussianMixture(std::move(comps)), conditions_, window_);
}

World make_benchmark_world(const WorldSpec& spec) {
  if (spec.modes.empty()) throw ConfigError("world spec has no modes");
  if (spec.conditions.empty()) throw ConfigError("world spec has no conditions");
  std::vector<MixtureComponent> comps;
  for (const ModeSpec& m : spec.modes) comps.push_back({m.mean, m.variance, m.weight});
  GaussianMixture mixture(std::move(comps));

  std::set<std::size_t> used;
  std::vector<Condition> conditions;
  const std::size_t n = spec.conditions.size();
  for (std::size_t c = 0; c < n; ++c) {
    const ConditionSpec& cs = spec.conditions[c];
    if (cs.modes.empty()) throw StructuralError("condition " + std::to_string(c) + " has no modes");
    for (std::size_t m : cs.modes) {
      if (m >= mixture.size())
        throw ConfigError("condition " + std::to_string(c) + " references unknown mode " +
                          std::to_string(m));
      if (!used.insert(m).second)
        throw ConfigError("mode " + std::to_string(m) + " is claimed by more than one condition");
    }
    Condition cond;
    cond.id = c;
    cond.embedding.assign(n, 0.0);
    cond.embedding[c] = 1.0;
    cond.modes = cs.modes;
    if (cs.history_prior.empty()) {
      cond.history_prior.assign(cs.modes.size(), 1.0 / static_cast<double>(cs.modes.size()));
    } else {
      if (cs.history_prior.size() != cs.modes.size())
        throw ConfigError("condition " + std::to_string(c) + ": history prior size mismatch");
      double total = 0.0;
      for (double p : cs.history_prior) total += p;
      if (!(total > 0.0)) throw ConfigError("history prior must have positive mass");
      for (double p : cs.history_prior) cond.history_prior.push_back(p / total);
    }
    conditions.push_back(std::move(cond));
  }
  return World(std::move(mixture), std::move(conditions), spec.window);
}

namespace {

DenseVector component_score(const MixtureComponent& c, std::span<const double> x, double var) {
  DenseVector s(x.size());
  const double denom = c.variance + var;
  for (std::size_t i = 0; i < x.size(); ++i) s[i] = (c.mean[i] - x[i]) / denom;
  return s;
}

}  // namespace

DenseVector history_aware_score(const World& world, const Condition& cond,
                                const HistorySummary& hist, std::span<const double> x,
                                const NoiseSchedule& schedule, std::size_t level) {
  if (cond.modes.empty()) throw StructuralError("condition has no modes");
  const std::size_t mode = world.consistent_mode(cond, hist);
  const double sigma = schedule.sigma(level);
  return component_score(world.mixture()[mode], x, sigma * sigma);
}

DenseVector marginalized_score(const World& world, const Condition& cond,
                               std::span<const double> x, const NoiseSchedule& schedule,
                               std::size_t level) {
  if (cond.modes.empty()) throw StructuralError("condition has no modes");
  const double sigma = schedule.sigma(level);
  DenseVector score(x.size(), 0.0);
  for (std::size_t i = 0; i < cond.modes.size(); ++i) {
    const DenseVector s = component_score(world.mixture()[cond.modes[i]], x, sigma * sigma);
    for (std::size_t j = 0; j < x.size(); ++j) score[j] += cond.history_prior[i] * s[j];
  }
  return score;
}

BiasSample bias_field(const World& world, const Condition& cond, const HistorySummary& hist,
                      std::span<const double> x, const NoiseSchedule& schedule, std::size_t level,
                      std::size_t event) {
  BiasSample sample;
  sample.x.assign(x.begin(), x.end());
  sample.level = level;
  sample.event = event;
  sample.s_aware = history_aware_score(world, cond, hist, x, schedule, level);
  sample.s_marginal = marginalized_score(world, cond, x, schedule, level);
  sample.b = subtract(sample.s_aware, sample.s_marginal);
  return sample;
}

std::size_t EventSchedule::event_of_chunk(std::size_t k) const {
  std::size_t e = 1;
  for (std::size_t s : switches)
    if (k > s) ++e;
  return e;
}

std::size_t EventSchedule::condition_of_chunk(std::size_t k) const {
  return conditions.at(event_of_chunk(k) - 1);
}

bool EventSchedule::is_switch_chunk(std::size_t k) const {
  return std::ranges::find(switches, k - 1) != switches.end() && k > 1;
}

void EventSchedule::validate() const {
  if (chunk_length == 0) throw ConfigError("chunk length must be positive");
  if (video_length < chunk_length || video_length % chunk_length != 0)
    throw ConfigError("video length must be a positive multiple of the chunk length");
  if (conditions.size() != switches.size() + 1)
    throw ConfigError("schedule needs exactly one more condition than switch points");
  const std::size_t n = chunk_count();
  for (std::size_t i = 0; i < switches.size(); ++i) {
    if (switches[i] < 1 || switches[i] >= n) throw ConfigError("switch index outside [1, chunks-1]");
    if (i > 0 && switches[i] <= switches[i - 1]) throw ConfigError("switch indices must increase");
  }
}

EventSchedule sample_schedule(std::span<const std::size_t> prompt_set, std::size_t chunk_length,
                              std::size_t video_length, std::size_t events, Rng& rng) {
  EventSchedule schedule;
  schedule.chunk_length = chunk_length;
  schedule.video_length = video_length;
  if (events == 0) throw ConfigError("schedule needs at least one event");
  if (chunk_length == 0 || video_length % chunk_length != 0 || video_length < chunk_length)
    throw ConfigError("video length must be a positive multiple of the chunk length");
  if (prompt_set.empty()) throw ConfigError("prompt set is empty");
  if (events >= 2 && prompt_set.size() < 2)
    throw ConfigError("multi-event schedules need at least two conditions");
  const std::size_t n = schedule.chunk_count();
  if (events - 1 > n - 1) throw ConfigError("more events than available switch points");

  std::uniform_int_distribution<std::size_t> first(0, prompt_set.size() - 1);
  std::size_t current = first(rng);
  schedule.conditions.push_back(prompt_set[current]);
  for (std::size_t e = 1; e < events; ++e) {
    std::uniform_int_distribution<std::size_t> other(0, prompt_set.size() - 2);
    std::size_t next = other(rng);
    if (next >= current) ++next;
    current = next;
    schedule.conditions.push_back(prompt_set[current]);
  }

  if (events == 2) {
    std::uniform_int_distribution<std::size_t> tau(1, n - 1);
    schedule.switches.push_back(tau(rng));
  } else if (events > 2) {
    std::vector<std::size_t> candidates(n - 1);
    for (std::size_t i = 0; i < candidates.size(); ++i) candidates[i] = i + 1;
    // partial Fisher-Yates
    for (std::size_t i = 0; i < events - 1; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, candidates.size() - 1);
      std::swap(candidates[i], candidates[pick(rng)]);
    }
    schedule.switches.assign(candidates.begin(), candidates.begin() + static_cast<long>(events - 1));
    std::ranges::sort(schedule.switches);
  }
  return schedule;
}

}  // namespace dflab
