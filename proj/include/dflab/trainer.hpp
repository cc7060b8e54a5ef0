#pragma once

// Streaming long tuning with reliability-gated teacher supervision.
//
// Every generator step blends a distribution-matching update against the
// teacher with a continuity update on the student's own chunk descriptors:
//
//   L = w_k * L_dmd + (1 - w_k) * L_cont
//   w_k = sigmoid(-(rho_k - mu) * s)
//   rho_k = || delta_real_k - delta_fake_k ||
//
// where the deltas are consecutive differences of frozen-extractor
// descriptors of the teacher's denoised chunk and the student's clean chunk.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dflab/diffusion.hpp"
#include "dflab/errors.hpp"
#include "dflab/smallgrad.hpp"
#include "dflab/student.hpp"
#include "dflab/world.hpp"

namespace dflab {

// ---------------------------------------------------------------- critic --

enum class CriticContext { kNone, kCondition, kFull };

std::string to_string(CriticContext context);
CriticContext critic_context_from_string(const std::string& name);

// Learnable score model of the student's output distribution. The network
// predicts the injected noise; the score is -prediction / sigma_t.
struct FakeCritic {
  Mlp net;
  AdamState optimizer;
  std::size_t dim = 2;
  std::size_t context_dim = 0;
  CriticContext context = CriticContext::kFull;
  std::size_t update_ratio = 5;

  static FakeCritic create(std::size_t dim, std::size_t context_dim, CriticContext context,
                           std::span<const std::size_t> hidden, std::uint64_t seed);

  DenseVector input(std::span<const double> x, double sigma, std::span<const double> ctx) const;
  DenseVector score(std::span<const double> x, const NoiseSchedule& schedule, std::size_t level,
                    std::span<const double> ctx) const;
};

// Critic conditioning for a chunk generated under `cond` from `cache`.
DenseVector critic_context(const FakeCritic& critic, const Condition& cond,
                           const HistoryCache& cache);

struct CriticSample {
  Chunk chunk;
  DenseVector context;
};

// One denoising-score-matching update over every state of every chunk;
// returns the mean squared noise-prediction residual before the update.
double critic_step(FakeCritic& critic, std::span<const CriticSample> batch,
                   const NoiseSchedule& schedule, double learning_rate, Rng& rng);

// Mean squared residual without updating (same sampling as critic_step).
double critic_loss(const FakeCritic& critic, std::span<const CriticSample> batch,
                   const NoiseSchedule& schedule, Rng& rng);

// ------------------------------------------------------------------- DMD --

struct DmdResult {
  std::size_t level = 1;
  std::vector<NoisySample> noisy;  // one per state
  Chunk x_hat_real;                // teacher Tweedie estimate per state
  DenseVector teacher_score;       // flattened s*
  DenseVector fake_score;          // flattened s_fake
  DenseVector output_grad;         // -(s* - s_fake), the generator-output gradient
  double loss = 0.0;               // 0.5 * ||s* - s_fake||^2
};

// Fake score as seen by the DMD gradient: s_fake(x, t).
using FakeScoreFn = std::function<DenseVector(std::span<const double> x, std::size_t level)>;

DmdResult dmd_loss(const ScoreField& teacher, const FakeScoreFn& fake, const Chunk& chunk,
                   const NoiseSchedule& schedule, Rng& rng);
DmdResult dmd_loss(const ScoreField& teacher, const FakeCritic& critic,
                   std::span<const double> critic_ctx, const Chunk& chunk,
                   const NoiseSchedule& schedule, Rng& rng);

// Parameter gradient of the DMD surrogate for a traced generator pass.
GradientTape dmd_parameter_gradient(const StudentGenerator& gen, const GeneratedChunk& generated,
                                    std::span<const double> output_grad);

// ------------------------------------------------------------- features --

struct FeatureExtractor {
  Mlp net;
  std::uint64_t seed = 0;

  // tanh hidden layers and a linear readout scaled by `gain`.
  static FeatureExtractor create(std::size_t input_dim, std::span<const std::size_t> hidden,
                                 std::size_t output_dim, std::uint64_t seed, double gain = 1.0);
  std::size_t descriptor_dim() const { return net.out_dim(); }
};

DenseVector extract_features(const FeatureExtractor& phi, const Chunk& chunk);

// d <descriptor, descriptor_grad> / d chunk, flattened.
DenseVector feature_input_gradient(const FeatureExtractor& phi, const Chunk& chunk,
                                   std::span<const double> descriptor_grad);

// ||f_k - f_prev||^2
double continuity_loss(std::span<const double> f_k, std::span<const double> f_prev);

struct ContinuityTerm {
  double loss = 0.0;
  DenseVector descriptor;
  DenseVector output_grad;  // gradient with respect to the flattened chunk
};

// Continuity loss of a fake chunk against a constant previous descriptor.
ContinuityTerm continuity_term(const FeatureExtractor& phi, const Chunk& fake_chunk,
                               std::span<const double> f_prev);

// ------------------------------------------------------------------ gate --

double gate_weight(double rho, double mu, double sharpness);

struct TrustGateState {
  std::optional<DenseVector> prev_fake;
  std::optional<DenseVector> prev_real;
  DenseVector delta_fake;
  DenseVector delta_real;
  std::optional<double> rho;
  double w = 1.0;
  double mu = 0.0;
  double sharpness = 1.0;

  bool has_previous() const { return prev_fake.has_value() && prev_real.has_value(); }
  // Forget descriptors at a rollout reset; mu and s are kept.
  void reset();
};

// Deltas, rho, w, then rotate the previous descriptors.
TrustGateState gate_update(TrustGateState state, std::span<const double> f_fake_k,
                           std::span<const double> f_real_k);

// First chunk of a rollout: remember descriptors, w = 1.
TrustGateState gate_prime(TrustGateState state, std::span<const double> f_fake_k,
                          std::span<const double> f_real_k);

struct GateCalibration {
  double mu = 0.0;
  double sharpness = 1.0;
  std::size_t samples = 0;
};

// mu = median(rho), s = 4 / max(IQR(rho), 1e-3).
GateCalibration calibrate_gate(std::vector<double> rhos);

// ------------------------------------------------------------ full step --

struct AblationFlags {
  bool no_gate = false;  // DMD term loses its trust-region weight
  bool no_cont = false;  // continuity term removed
  bool operator==(const AblationFlags&) const = default;
};

struct LossBreakdown {
  double loss_dmd = 0.0;
  double loss_cont = 0.0;
  double w = 1.0;
  std::optional<double> rho;
  double weight_dmd = 1.0;
  double weight_cont = 0.0;
  double loss_total = 0.0;
  double grad_norm_dmd = 0.0;
  double grad_norm_cont = 0.0;
  double grad_norm = 0.0;
};

class StepError : public TrainingError {
 public:
  StepError(const std::string& what, LossBreakdown breakdown)
      : TrainingError(what), breakdown_(breakdown) {}
  const LossBreakdown& breakdown() const noexcept { return breakdown_; }

 private:
  LossBreakdown breakdown_;
};

struct StepGradients {
  GradientTape dmd;
  GradientTape cont;
  GradientTape total;
};

struct StepInputs {
  const GeneratedChunk* generated = nullptr;
  const ScoreField* teacher = nullptr;
  std::span<const double> critic_ctx;
  bool gate_enabled = true;  // false during warm-up: pure DMD
  std::optional<double> forced_w;  // replaces the computed gate weight
};

// One generator update. Gate quantities and the previous descriptor are
// constants. The step's parameter gradient is written to `gradients` when
// non-null.
LossBreakdown delta_forcing_step(StudentGenerator& gen, const FakeCritic& critic,
                                 const FeatureExtractor& phi, TrustGateState& gate,
                                 const StepInputs& inputs, const AblationFlags& flags,
                                 const NoiseSchedule& schedule, double learning_rate, Rng& rng,
                                 StepGradients* gradients = nullptr);

// Reference plain DMD update used to check the blended step's limits.
LossBreakdown plain_dmd_step(StudentGenerator& gen, const FakeCritic& critic,
                             const GeneratedChunk& generated, const ScoreField& teacher,
                             std::span<const double> critic_ctx, const NoiseSchedule& schedule,
                             double learning_rate, Rng& rng);

// ------------------------------------------------------------- the loop --

enum class TeacherArm { kHistoryAware, kMarginalized };

std::string to_string(TeacherArm arm);
TeacherArm teacher_arm_from_string(const std::string& name);

ScoreField make_teacher(const World& world, TeacherArm arm, const Condition& cond,
                        const HistorySummary& hist, const NoiseSchedule& schedule);

struct TrainConfig {
  std::size_t steps = 2000;
  double lr_generator = 1e-3;
  double lr_critic = 2e-3;
  std::size_t critic_ratio = 5;
  std::size_t critic_buffer = 8;
  TeacherArm teacher = TeacherArm::kMarginalized;
  AblationFlags flags;
  std::optional<double> mu;
  std::optional<double> sharpness;
  std::size_t warmup_steps = 200;
  std::size_t chunk_length = 4;
  std::size_t video_length = 24;
  std::size_t events = 2;
};

struct LogRecord {
  std::size_t step = 0;
  std::size_t chunk_k = 0;
  std::size_t event_e = 0;
  std::size_t condition = 0;
  bool switch_chunk = false;
  bool warmup = false;
  std::optional<double> rho;
  double w = 1.0;
  double loss_dmd = 0.0;
  double loss_cont = 0.0;
  double loss_total = 0.0;
  std::optional<double> drift_mode_acc;
  double grad_norm = 0.0;
};

struct TrainingLog {
  std::vector<LogRecord> records;
  std::optional<GateCalibration> calibration;
  double mu = 0.0;
  double sharpness = 1.0;
};

// One generator step per generated chunk, critic updates
// interleaved, recache at switches, reset once the video length is reached.
// `on_record` sees every record as it is produced, so a caller keeps the log
// up to any failure.
TrainingLog streaming_long_tuning(StudentGenerator& gen, FakeCritic& critic,
                                  const FeatureExtractor& phi, const World& world,
                                  const NoiseSchedule& schedule, const TrainConfig& cfg, Rng& rng,
                                  const std::function<void(const LogRecord&)>& on_record = {});

}  // namespace dflab
