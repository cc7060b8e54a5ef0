#pragma once

// Experiment plumbing: configuration, run directories, manifests, and the
// train / eval / compare / diagnose / calibrate-gate operations.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "dflab/diagnostics.hpp"
#include "dflab/kernels.hpp"
#include "dflab/trainer.hpp"
#include "dflab/world.hpp"

namespace dflab {

inline constexpr const char* kCodeVersion = "dflab 0.1.0";
inline constexpr const char* kOutputRootEnv = "DFLAB_OUTPUT_ROOT";

struct ScheduleParams {
  std::size_t chunk_length = 4;
  std::size_t video_length = 24;
  std::size_t events = 2;
  bool operator==(const ScheduleParams&) const = default;
};

struct NoiseParams {
  double sigma_min = 0.05;
  double sigma_max = 2.0;
  std::size_t levels = 8;
  bool operator==(const NoiseParams&) const = default;
};

struct NetworkParams {
  std::vector<std::size_t> hidden{64, 64};
  std::optional<std::uint64_t> seed;  // derived from the master seed when absent
  bool operator==(const NetworkParams&) const = default;
};

struct CriticParams {
  std::vector<std::size_t> hidden{64, 64};
  std::optional<std::uint64_t> seed;
  CriticContext context = CriticContext::kFull;
  bool operator==(const CriticParams&) const = default;
};

struct FeatureParams {
  std::vector<std::size_t> hidden{32};
  std::size_t output_dim = 8;
  double gain = 3.0;
  std::uint64_t seed = 7;
  bool operator==(const FeatureParams&) const = default;
};

struct TrainParams {
  std::size_t steps = 2000;
  double lr_generator = 1e-3;
  double lr_critic = 2e-3;
  std::size_t critic_ratio = 5;
  std::size_t critic_buffer = 8;
  std::size_t warmup_steps = 200;
  std::optional<double> mu;
  std::optional<double> sharpness;
  bool operator==(const TrainParams&) const = default;
};

struct EvalParams {
  std::size_t rollouts = 50;
  std::vector<std::uint64_t> seeds{1000};
  bool operator==(const EvalParams&) const = default;
};

struct ExecutionParams {
  Execution mode = Execution::kOpenMP;
  int workers = 0;  // 0: OpenMP default
  bool operator==(const ExecutionParams&) const = default;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "run";
  TeacherArm teacher = TeacherArm::kMarginalized;
  AblationFlags ablation;
  WorldSpec world = WorldSpec::benchmark();
  ScheduleParams schedule;
  NoiseParams noise;
  NetworkParams generator;
  CriticParams critic;
  FeatureParams features;
  TrainParams train;
  EvalParams eval;
  FailureThresholds thresholds;
  ExecutionParams execution;

  bool operator==(const ExperimentConfig&) const = default;

  // "path: message" for every violated constraint.
  std::vector<std::string> validation_errors() const;
  // Throws ConfigError listing every violation.
  void validate() const;

  std::uint64_t generator_seed() const;
  std::uint64_t critic_seed() const;
  std::uint64_t training_seed() const;
  TrainConfig train_config() const;
};

nlohmann::json to_json(const ExperimentConfig& cfg);
// Missing fields take their defaults; unknown fields and wrong types are
// reported with their dotted path.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

// Applies "a.b.c=value" style overrides; the value is read as JSON when it
// parses, otherwise as a string.
nlohmann::json apply_override(nlohmann::json j, const std::string& dotted_path,
                              const std::string& value);

// Sorted-key compact serialization.
std::string canonical_json(const nlohmann::json& j);
// The config without where outputs go and how work is scheduled; neither
// changes a result. This is what manifests record and hash.
nlohmann::json experiment_identity(const ExperimentConfig& cfg);
std::string config_hash(const ExperimentConfig& cfg);
std::string sha256_hex(const std::string& bytes);
std::string file_sha256(const std::filesystem::path& path);

// Relative directories are placed under $DFLAB_OUTPUT_ROOT when it is set.
std::filesystem::path resolve_output_dir(const std::string& dir);

// Pieces a run is built from.
struct ExperimentSetup {
  World world;
  NoiseSchedule schedule;
  StudentGenerator generator;
  FakeCritic critic;
  FeatureExtractor features;
};

ExperimentSetup build_setup(const ExperimentConfig& cfg);
std::size_t critic_context_dim(const ExperimentConfig& cfg, const World& world);

struct RunManifest {
  std::string config_hash;
  std::string code_version = kCodeVersion;
  std::map<std::string, std::string> files;  // name -> sha256
  double wall_clock_seconds = 0.0;
  std::string status = "ok";
  nlohmann::json config;
};

nlohmann::json to_json(const RunManifest& m);
RunManifest read_manifest(const std::filesystem::path& dir);
// Checksums every listed file and writes manifest.json into `dir`. The
// config hash is taken over the canonical form of `config`.
RunManifest write_manifest(const std::filesystem::path& dir, const std::vector<std::string>& files,
                           const nlohmann::json& config, double seconds,
                           const std::string& status = "ok");

// step,chunk_k,event_e,rho,w,loss_dmd,loss_cont,loss_total,drift_mode_acc,grad_norm
std::string train_log_header();
std::string train_log_row(const LogRecord& r);

struct TrainResult {
  std::filesystem::path dir;
  TrainingLog log;
  RunManifest manifest;
};

TrainResult run_train(const ExperimentConfig& cfg);

struct RolloutMetricsRow {
  std::uint64_t seed = 0;
  std::size_t rollout = 0;
  TrajectoryMetrics metrics;
  FailureLabel label = FailureLabel::kHealthy;
};

struct MetricSummary {
  std::string metric;
  double median = 0.0;
  double iqr = 0.0;
  double mean = 0.0;
  std::size_t count = 0;
};

struct EvalResult {
  std::filesystem::path dir;
  std::vector<RolloutMetricsRow> rows;
  std::vector<MetricSummary> summary;       // one row per metric
  TrajectoryMetrics pooled;                 // all rollouts together
  FailureLabel pooled_label = FailureLabel::kHealthy;
  std::map<std::string, std::size_t> label_counts;

  const MetricSummary& metric(const std::string& name) const;
};

// Median and IQR (linear-interpolation quartiles) of each per-rollout metric;
// values are sorted first so the result ignores row order.
std::vector<MetricSummary> summarize_rollouts(const std::vector<RolloutMetricsRow>& rows);

// Reads the run's config and generator snapshot, writes into <run>/eval.
EvalResult run_eval(const std::filesystem::path& run_dir, std::size_t rollouts,
                    const std::vector<std::uint64_t>& seeds);

struct ArmSpec {
  std::string name;
  ExperimentConfig config;
};

// baseline, full, no_cont, no_gate, ideal applied on top of `base`.
ArmSpec preset_arm(const std::string& name, const ExperimentConfig& base);

struct CompareRow {
  std::string arm;
  std::uint64_t seed = 0;
  std::string status = "ok";
  std::optional<double> mode_accuracy;       // median over rollouts
  std::optional<double> mode_accuracy_mean;
  std::optional<double> scatter;
  std::optional<double> displacement;
  std::optional<FailureLabel> label;
};

struct CompareArmSummary {
  std::string arm;
  std::size_t runs = 0;
  std::size_t failed = 0;
  std::optional<double> median_mode_accuracy;
  std::optional<double> iqr_mode_accuracy;
  std::optional<double> median_mode_accuracy_mean;
  std::optional<double> median_scatter;
  std::optional<double> median_displacement;
  std::map<std::string, std::size_t> label_counts;
};

struct PairedDelta {
  std::string arm;
  std::string reference;
  std::uint64_t seed = 0;
  std::optional<double> delta_mode_accuracy;
  std::optional<double> delta_mode_accuracy_mean;
  std::optional<double> delta_scatter;
  std::optional<double> delta_displacement;
};

struct CompareReport {
  std::filesystem::path dir;
  std::vector<CompareRow> rows;  // arm-major, seed-minor
  std::vector<CompareArmSummary> arms;
  std::vector<PairedDelta> deltas;  // every arm against the first
  double wall_clock_seconds = 0.0;

  const CompareArmSummary& arm(const std::string& name) const;
  const CompareRow& row(const std::string& arm, std::uint64_t seed) const;
};

// Trains and evaluates every (arm, seed) pair into <out_dir>/<arm>/seed_<s>.
// A failing pair is recorded and the others still run.
CompareReport run_compare(const std::vector<ArmSpec>& arms, const std::vector<std::uint64_t>& seeds,
                          const std::filesystem::path& out_dir, const ExecutionParams& exec = {});

struct DiagnoseResult {
  std::filesystem::path dir;
  PcaProjection pca;
  TrajectoryMetrics metrics;
  FailureLabel label = FailureLabel::kHealthy;
};

DiagnoseResult run_diagnose(const std::filesystem::path& trajectory_csv,
                            const std::filesystem::path& out_dir, const ExperimentConfig& cfg);

struct CalibrationResult {
  std::filesystem::path dir;
  GateCalibration calibration;
  std::vector<double> rhos;
};

// Runs only the gate-free warm-up and reports mu and s.
CalibrationResult run_calibrate_gate(const ExperimentConfig& cfg);

}  // namespace dflab
