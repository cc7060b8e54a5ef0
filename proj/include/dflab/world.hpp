#pragma once

// Synthetic multi-event world: a global Gaussian mixture, conditions that own
// disjoint subsets of its modes, history-aware and history-marginalized
// teacher scores, and event schedules.

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"

#include "dflab/diffusion.hpp"
#include "dflab/tensor.hpp"

namespace dflab {

struct Condition {
  std::size_t id = 0;
  DenseVector embedding;
  std::vector<std::size_t> modes;    // indices into the world's mixture
  std::vector<double> history_prior;  // p(history basin = modes[i] | c)
};

// What the synthetic teacher can read from a student's history.
struct HistorySummary {
  LatentState terminal;
  LatentState running_mean;
  bool empty = true;
  std::optional<std::size_t> active_mode;
};

struct ModeSpec {
  DenseVector mean;
  double variance = 0.25;
  double weight = 1.0;
  bool operator==(const ModeSpec&) const = default;
};

struct ConditionSpec {
  std::vector<std::size_t> modes;
  std::vector<double> history_prior;  // empty means uniform
  bool operator==(const ConditionSpec&) const = default;
};

struct WorldSpec {
  std::vector<ModeSpec> modes;
  std::vector<ConditionSpec> conditions;
  std::size_t window = 3;  // chunks in the history running mean

  // 3 conditions x 2 adjacent modes on a circle of radius 4, variance 0.25.
  static WorldSpec benchmark(std::size_t conditions = 3, std::size_t modes_per_condition = 2,
                             double radius = 4.0, double variance = 0.25);
  bool operator==(const WorldSpec&) const = default;
};

void to_json(nlohmann::json& j, const WorldSpec& spec);
void from_json(const nlohmann::json& j, WorldSpec& spec);

class World {
 public:
  World() = default;
  World(GaussianMixture mixture, std::vector<Condition> conditions, std::size_t window);

  const GaussianMixture& mixture() const noexcept { return mixture_; }
  const std::vector<Condition>& conditions() const noexcept { return conditions_; }
  const Condition& condition(std::size_t id) const;
  std::size_t dim() const noexcept { return mixture_.dim(); }
  std::size_t embedding_dim() const noexcept;
  std::size_t window() const noexcept { return window_; }

  // Median pairwise distance between mode means.
  double median_mode_distance() const;
  // Mean standard deviation of the modes.
  double mean_mode_std() const;

  // Mode of `cond` nearest (Euclidean, on means) to `point`; ties go to the
  // lowest mode id.
  std::size_t nearest_mode(const Condition& cond, std::span<const double> point) const;
  // Nearest mode over the whole mixture.
  std::size_t nearest_global_mode(std::span<const double> point) const;
  // Trajectory-consistent mode for a history under a condition.
  std::size_t consistent_mode(const Condition& cond, const HistorySummary& hist) const;

  World translated(std::span<const double> offset) const;

 private:
  GaussianMixture mixture_;
  std::vector<Condition> conditions_;
  std::size_t window_ = 3;
};

World make_benchmark_world(const WorldSpec& spec);

DenseVector history_aware_score(const World& world, const Condition& cond,
                                const HistorySummary& hist, std::span<const double> x,
                                const NoiseSchedule& schedule, std::size_t level);

// E_{h ~ prior}[history_aware_score]: the prior-weighted average of the
// per-mode scores of the condition.
DenseVector marginalized_score(const World& world, const Condition& cond,
                               std::span<const double> x, const NoiseSchedule& schedule,
                               std::size_t level);

struct BiasSample {
  LatentState x;
  std::size_t level = 1;
  std::size_t event = 0;
  DenseVector s_aware;
  DenseVector s_marginal;
  DenseVector b;
};

BiasSample bias_field(const World& world, const Condition& cond, const HistorySummary& hist,
                      std::span<const double> x, const NoiseSchedule& schedule, std::size_t level,
                      std::size_t event = 0);

struct EventSchedule {
  std::vector<std::size_t> conditions;  // condition id per event
  std::vector<std::size_t> switches;    // chunk index after which event e+1 starts
  std::size_t chunk_length = 4;
  std::size_t video_length = 24;

  std::size_t chunk_count() const { return video_length / chunk_length; }
  std::size_t tau() const { return switches.empty() ? chunk_count() : switches.front(); }
  // 1-based event index of 1-based chunk k.
  std::size_t event_of_chunk(std::size_t k) const;
  std::size_t condition_of_chunk(std::size_t k) const;
  bool is_switch_chunk(std::size_t k) const;  // first chunk of a new event
  void validate() const;
};

// (p, p_next) uniform without replacement and tau uniform in
// [1, l_video/l_chunk - 1]; with events > 2 each following condition differs
// from its predecessor and the switch points are distinct and sorted.
EventSchedule sample_schedule(std::span<const std::size_t> prompt_set, std::size_t chunk_length,
                              std::size_t video_length, std::size_t events, Rng& rng);

}  // namespace dflab
