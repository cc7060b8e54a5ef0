#pragma once

// Latent trajectory analysis: deterministic PCA, per-event aggregation,
// cross-event displacement, smoothness, and ground-truth mode accuracy.

#include <array>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "dflab/student.hpp"
#include "dflab/tensor.hpp"
#include "dflab/world.hpp"

namespace dflab {

struct TrajectoryRow {
  std::size_t step = 0;  // global state index
  std::size_t rollout = 0;
  std::size_t chunk = 0;
  std::size_t event = 0;
  std::size_t condition = 0;
  LatentState z;
  bool operator==(const TrajectoryRow&) const = default;
};

struct TrajectoryRecord {
  std::vector<TrajectoryRow> rows;

  std::size_t dim() const { return rows.empty() ? 0 : rows.front().z.size(); }
  void validate() const;
  void append_rollout(const Rollout& r, std::size_t rollout_id);
};

struct PcaProjection {
  DenseVector mean;
  DenseMatrix directions;  // d x 2, orthonormal columns
  std::array<double, 2> variances{};
  double total_variance = 0.0;
  std::vector<std::array<double, 2>> projected;

  std::array<double, 2> explained_ratio() const {
    return {variances[0] / total_variance, variances[1] / total_variance};
  }
  DenseVector reconstruct(std::size_t i) const;
};

PcaProjection fit_pca(const TrajectoryRecord& traj);

struct EventSegment {
  std::size_t rollout = 0;
  std::size_t event = 0;
  std::size_t condition = 0;
  DenseVector centroid;
  double scatter = 0.0;
  std::size_t states = 0;
};

struct TrajectoryMetrics {
  std::vector<EventSegment> segments;
  double scatter = 0.0;                      // mean within-event distance to centroid
  std::optional<double> displacement;        // mean consecutive centroid distance
  std::optional<double> smoothness_ratio;    // max step / median step
  std::optional<double> mode_accuracy;       // chunks with history landing on the consistent mode
  double direction_autocorrelation = 0.0;    // mean cosine of consecutive steps
  std::size_t events = 0;
};

TrajectoryMetrics trajectory_metrics(const TrajectoryRecord& traj, const World& world);

enum class FailureLabel { kHealthy, kUnderReactive, kUnstructuredDrift, kModeSeeking };

std::string to_string(FailureLabel label);

struct FailureThresholds {
  double under_reactive_fraction = 0.25;  // of the median inter-mode distance
  double drift_scatter_factor = 1.5;      // of the mean mode standard deviation
  double drift_accuracy = 0.5;
  double mode_seeking_autocorrelation = 0.8;

  // Absolute thresholds for a given world.
  double displacement_threshold(const World& world) const;
  double scatter_threshold(const World& world) const;
  bool operator==(const FailureThresholds&) const = default;
};

void to_json(nlohmann::json& j, const FailureThresholds& t);
void from_json(const nlohmann::json& j, FailureThresholds& t);

// mode_seeking, then under_reactive, then unstructured_drift, else healthy.
FailureLabel classify_failure(const TrajectoryMetrics& metrics, const World& world,
                              const FailureThresholds& thresholds = {});

// step,rollout,chunk_k,event_e,condition,z0..z{d-1}
void write_trajectory_csv(const TrajectoryRecord& traj, std::ostream& out);
TrajectoryRecord read_trajectory_csv(std::istream& in);
// pc1,pc2,chunk_k,event_e
void write_projection_csv(const PcaProjection& pca, const TrajectoryRecord& traj, std::ostream& out);

nlohmann::json metrics_to_json(const TrajectoryMetrics& metrics);

// Shortest representation that still round-trips through strtod.
std::string format_double(double v);

}  // namespace dflab
