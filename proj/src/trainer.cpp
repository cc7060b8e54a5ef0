#include "dflab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

namespace dflab {

std::string to_string(CriticContext context) {
  switch (context) {
    case CriticContext::kNone:
      return "none";
    case CriticContext::kCondition:
      return "condition";
    case CriticContext::kFull:
      return "full";
  }
  return "full";
}

CriticContext critic_context_from_string(const std::string& name) {
  if (name == "none") return CriticContext::kNone;
  if (name == "condition") return CriticContext::kCondition;
  if (name == "full") return CriticContext::kFull;
  throw ConfigError("unknown critic context '" + name + "'");
}

FakeCritic FakeCritic::create(std::size_t dim, std::size_t context_dim, CriticContext context,
                              std::span<const std::size_t> hidden, std::uint64_t seed) {
  FakeCritic critic;
  critic.dim = dim;
  critic.context_dim = context_dim;
  critic.context = context;
  std::vector<std::size_t> dims{dim + 1 + context_dim};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(dim);
  std::vector<Activation> acts(hidden.size(), Activation::kTanh);
  acts.push_back(Activation::kIdentity);
  critic.net = Mlp::create(dims, acts, seed);
  critic.optimizer = AdamState(critic.net);
  return critic;
}

DenseVector FakeCritic::input(std::span<const double> x, double sigma,
                              std::span<const double> ctx) const {
  if (x.size() != dim) throw StructuralError("critic point has wrong dimension");
  if (ctx.size() != context_dim) throw StructuralError("critic context has wrong dimension");
  DenseVector in(x.begin(), x.end());
  in.push_back(std::log(sigma));
  in.insert(in.end(), ctx.begin(), ctx.end());
  return in;
}

DenseVector FakeCritic::score(std::span<const double> x, const NoiseSchedule& schedule,
                              std::size_t level, std::span<const double> ctx) const {
  const double sigma = schedule.sigma(level);
  DenseVector out = mlp_forward(net, input(x, sigma, ctx));
  for (double& v : out) v = -v / sigma;
  return out;
}

DenseVector critic_context(const FakeCritic& critic, const Condition& cond,
                           const HistoryCache& cache) {
  switch (critic.context) {
    case CriticContext::kNone:
      return {};
    case CriticContext::kCondition:
      return cond.embedding;
    case CriticContext::kFull: {
      DenseVector ctx = cond.embedding;
      const DenseVector summary = cache.summary_vector();
      ctx.insert(ctx.end(), summary.begin(), summary.end());
      return ctx;
    }
  }
  return {};
}

namespace {

// Accumulates the DSM residual and, when `tape` is given, its gradient.
double critic_pass(const FakeCritic& critic, std::span<const CriticSample> batch,
                   const NoiseSchedule& schedule, Rng& rng, GradientTape* tape) {
  std::size_t count = 0;
  for (const CriticSample& s : batch) count += s.chunk.states.size();
  if (count == 0) throw UsageError("critic step needs a nonempty batch");
  const double inv = 1.0 / static_cast<double>(count);

  double loss = 0.0;
  for (const CriticSample& sample : batch) {
    for (const LatentState& x0 : sample.chunk.states) {
      const std::size_t level = schedule.sample_level(rng);
      const NoisySample noisy = perturb(schedule, x0, level, rng);
      const DenseVector in = critic.input(noisy.x, schedule.sigma(level), sample.context);
      const ForwardTrace trace = mlp_forward_traced(critic.net, in);
      DenseVector residual = subtract(trace.output(), noisy.noise);
      loss += squared_norm(residual) * inv;
      if (tape != nullptr) {
        for (double& r : residual) r *= 2.0 * inv;
        tape->accumulate(mlp_backward(critic.net, trace, residual).tape);
      }
    }
  }
  return loss;
}

}  // namespace

double critic_step(FakeCritic& critic, std::span<const CriticSample> batch,
                   const NoiseSchedule& schedule, double learning_rate, Rng& rng) {
  GradientTape tape(critic.net);
  const double loss = critic_pass(critic, batch, schedule, rng, &tape);
  if (!std::isfinite(loss)) throw TrainingError("critic loss is not finite");
  adam_step(critic.net, critic.optimizer, tape, learning_rate);
  return loss;
}

double critic_loss(const FakeCritic& critic, std::span<const CriticSample> batch,
                   const NoiseSchedule& schedule, Rng& rng) {
  return critic_pass(critic, batch, schedule, rng, nullptr);
}

DmdResult dmd_loss(const ScoreField& teacher, const FakeScoreFn& fake, const Chunk& chunk,
                   const NoiseSchedule& schedule, Rng& rng) {
  DmdResult result;
  result.level = schedule.sample_level(rng);
  result.x_hat_real.index = chunk.index;
  result.x_hat_real.event = chunk.event;
  for (const LatentState& x0 : chunk.states) {
    NoisySample noisy = perturb(schedule, x0, result.level, rng);
    const DenseVector s_real = teacher.evaluate(noisy.x, result.level);
    const DenseVector s_fake = fake(noisy.x, result.level);
    result.x_hat_real.states.push_back(tweedie_denoise(s_real, noisy.x, schedule, result.level));
    for (std::size_t i = 0; i < s_real.size(); ++i) {
      const double diff = s_real[i] - s_fake[i];
      result.output_grad.push_back(-diff);
      result.loss += 0.5 * diff * diff;
    }
    result.teacher_score.insert(result.teacher_score.end(), s_real.begin(), s_real.end());
    result.fake_score.insert(result.fake_score.end(), s_fake.begin(), s_fake.end());
    result.noisy.push_back(std::move(noisy));
  }
  return result;
}

DmdResult dmd_loss(const ScoreField& teacher, const FakeCritic& critic,
                   std::span<const double> critic_ctx, const Chunk& chunk,
                   const NoiseSchedule& schedule, Rng& rng) {
  const DenseVector ctx(critic_ctx.begin(), critic_ctx.end());
  return dmd_loss(
      teacher,
      [&critic, &schedule, &ctx](std::span<const double> x, std::size_t level) {
        return critic.score(x, schedule, level, ctx);
      },
      chunk, schedule, rng);
}

GradientTape dmd_parameter_gradient(const StudentGenerator& gen, const GeneratedChunk& generated,
                                    std::span<const double> output_grad) {
  return mlp_backward(gen.net, generated.trace, output_grad).tape;
}

FeatureExtractor FeatureExtractor::create(std::size_t input_dim,
                                          std::span<const std::size_t> hidden,
                                          std::size_t output_dim, std::uint64_t seed,
                                          double gain) {
  std::vector<std::size_t> dims{input_dim};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(output_dim);
  std::vector<Activation> acts(hidden.size(), Activation::kTanh);
  acts.push_back(Activation::kIdentity);
  Mlp net = Mlp::create(dims, acts, seed);
  for (double& w : net.layers().back().weight.values()) w *= gain;
  return FeatureExtractor{std::move(net), seed};
}

DenseVector extract_features(const FeatureExtractor& phi, const Chunk& chunk) {
  return mlp_forward(phi.net, chunk.flatten());
}

DenseVector feature_input_gradient(const FeatureExtractor& phi, const Chunk& chunk,
                                   std::span<const double> descriptor_grad) {
  const ForwardTrace trace = mlp_forward_traced(phi.net, chunk.flatten());
  return mlp_backward(phi.net, trace, descriptor_grad).input_grad;
}

double continuity_loss(std::span<const double> f_k, std::span<const double> f_prev) {
  if (f_k.size() != f_prev.size())
    throw StructuralError("descriptor dimensions differ: " + std::to_string(f_k.size()) + " vs " +
                          std::to_string(f_prev.size()));
  return squared_distance(f_k, f_prev);
}

ContinuityTerm continuity_term(const FeatureExtractor& phi, const Chunk& fake_chunk,
                               std::span<const double> f_prev) {
  ContinuityTerm term;
  const ForwardTrace trace = mlp_forward_traced(phi.net, fake_chunk.flatten());
  term.descriptor = trace.output();
  term.loss = continuity_loss(term.descriptor, f_prev);
  DenseVector grad(term.descriptor.size());
  for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = 2.0 * (term.descriptor[i] - f_prev[i]);
  term.output_grad = mlp_backward(phi.net, trace, grad).input_grad;
  return term;
}

double gate_weight(double rho, double mu, double sharpness) {
  return 1.0 / (1.0 + std::exp((rho - mu) * sharpness));
}

void TrustGateState::reset() {
  prev_fake.reset();
  prev_real.reset();
  delta_fake.clear();
  delta_real.clear();
  rho.reset();
  w = 1.0;
}

TrustGateState gate_update(TrustGateState state, std::span<const double> f_fake_k,
                           std::span<const double> f_real_k) {
  if (!state.has_previous()) throw UsageError("gate update needs the previous chunk's descriptors");
  if (f_fake_k.size() != state.prev_fake->size() || f_real_k.size() != state.prev_real->size())
    throw StructuralError("descriptor dimension changed between chunks");
  state.delta_fake = subtract(f_fake_k, *state.prev_fake);
  state.delta_real = subtract(f_real_k, *state.prev_real);
  state.rho = distance(state.delta_real, state.delta_fake);
  state.w = gate_weight(*state.rho, state.mu, state.sharpness);
  state.prev_fake = DenseVector(f_fake_k.begin(), f_fake_k.end());
  state.prev_real = DenseVector(f_real_k.begin(), f_real_k.end());
  return state;
}

TrustGateState gate_prime(TrustGateState state, std::span<const double> f_fake_k,
                          std::span<const double> f_real_k) {
  state.reset();
  state.prev_fake = DenseVector(f_fake_k.begin(), f_fake_k.end());
  state.prev_real = DenseVector(f_real_k.begin(), f_real_k.end());
  return state;
}

namespace {

// Linear-interpolation quantile of sorted data.
double quantile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return 0.0;
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

}  // namespace

GateCalibration calibrate_gate(std::vector<double> rhos) {
  if (rhos.empty()) throw UsageError("gate calibration needs at least one rho sample");
  std::ranges::sort(rhos);
  GateCalibration cal;
  cal.samples = rhos.size();
  cal.mu = quantile(rhos, 0.5);
  const double iqr = quantile(rhos, 0.75) - quantile(rhos, 0.25);
  cal.sharpness = 4.0 / std::max(iqr, 1e-3);
  return cal;
}

namespace {

// a * x + b * y, skipping zero-weight terms so the limits are exact.
DenseVector blend(double a, std::span<const double> x, double b, std::span<const double> y) {
  if (b == 0.0) {
    DenseVector out(x.begin(), x.end());
    if (a != 1.0)
      for (double& v : out) v *= a;
    return out;
  }
  if (a == 0.0) {
    DenseVector out(y.begin(), y.end());
    if (b != 1.0)
      for (double& v : out) v *= b;
    return out;
  }
  DenseVector out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = a * x[i] + b * y[i];
  return out;
}

}  // namespace

LossBreakdown delta_forcing_step(StudentGenerator& gen, const FakeCritic& critic,
                                 const FeatureExtractor& phi, TrustGateState& gate,
                                 const StepInputs& inputs, const AblationFlags& flags,
                                 const NoiseSchedule& schedule, double learning_rate, Rng& rng,
                                 StepGradients* gradients) {
  if (inputs.generated == nullptr || inputs.teacher == nullptr)
    throw UsageError("delta forcing step needs a generated chunk and a teacher");
  const GeneratedChunk& generated = *inputs.generated;
  const Chunk& fake_chunk = generated.chunk;

  const DmdResult dmd = dmd_loss(*inputs.teacher, critic, inputs.critic_ctx, fake_chunk, schedule, rng);
  const DenseVector f_real = extract_features(phi, dmd.x_hat_real);

  LossBreakdown out;
  out.loss_dmd = dmd.loss;

  ContinuityTerm cont;
  const bool has_previous = gate.has_previous();
  if (has_previous) {
    cont = continuity_term(phi, fake_chunk, *gate.prev_fake);
    gate = gate_update(std::move(gate), cont.descriptor, f_real);
    if (inputs.forced_w) gate.w = *inputs.forced_w;
    out.rho = gate.rho;
    out.w = inputs.gate_enabled ? gate.w : 1.0;
    out.loss_cont = cont.loss;
  } else {
    cont.descriptor = extract_features(phi, fake_chunk);
    cont.output_grad.assign(fake_chunk.flatten().size(), 0.0);
    gate = gate_prime(std::move(gate), cont.descriptor, f_real);
    out.w = 1.0;
  }

  if (!has_previous || !inputs.gate_enabled) {
    out.weight_dmd = 1.0;
    out.weight_cont = 0.0;
  } else {
    out.weight_dmd = flags.no_gate ? 1.0 : out.w;
    out.weight_cont = flags.no_cont ? 0.0 : 1.0 - out.w;
  }
  out.loss_total = out.weight_dmd * out.loss_dmd + out.weight_cont * out.loss_cont;

  const DenseVector output_grad =
      blend(out.weight_dmd, dmd.output_grad, out.weight_cont, cont.output_grad);
  GradientTape total = mlp_backward(gen.net, generated.trace, output_grad).tape;
  GradientTape dmd_tape = mlp_backward(gen.net, generated.trace, dmd.output_grad).tape;
  GradientTape cont_tape = mlp_backward(gen.net, generated.trace, cont.output_grad).tape;
  out.grad_norm_dmd = dmd_tape.norm();
  out.grad_norm_cont = cont_tape.norm();
  out.grad_norm = total.norm();

  if (!std::isfinite(out.loss_total) || !total.all_finite())
    throw StepError("non-finite blended loss at chunk " + std::to_string(fake_chunk.index), out);

  sgd_step(gen.net, total, learning_rate);
  if (gradients != nullptr) *gradients = {std::move(dmd_tape), std::move(cont_tape), std::move(total)};
  return out;
}

LossBreakdown plain_dmd_step(StudentGenerator& gen, const FakeCritic& critic,
                             const GeneratedChunk& generated, const ScoreField& teacher,
                             std::span<const double> critic_ctx, const NoiseSchedule& schedule,
                             double learning_rate, Rng& rng) {
  const DmdResult dmd = dmd_loss(teacher, critic, critic_ctx, generated.chunk, schedule, rng);
  const GradientTape tape = dmd_parameter_gradient(gen, generated, dmd.output_grad);
  LossBreakdown out;
  out.loss_dmd = dmd.loss;
  out.loss_total = dmd.loss;
  out.grad_norm_dmd = out.grad_norm = tape.norm();
  sgd_step(gen.net, tape, learning_rate);
  return out;
}

std::string to_string(TeacherArm arm) {
  return arm == TeacherArm::kHistoryAware ? "history_aware" : "marginalized";
}

TeacherArm teacher_arm_from_string(const std::string& name) {
  if (name == "history_aware") return TeacherArm::kHistoryAware;
  if (name == "marginalized") return TeacherArm::kMarginalized;
  throw ConfigError("unknown teacher arm '" + name + "'");
}

ScoreField make_teacher(const World& world, TeacherArm arm, const Condition& cond,
                        const HistorySummary& hist, const NoiseSchedule& schedule) {
  if (arm == TeacherArm::kHistoryAware) {
    return {ScoreRole::kTeacherHistoryAware,
            [&world, &cond, hist, &schedule](std::span<const double> x, std::size_t level) {
              return history_aware_score(world, cond, hist, x, schedule, level);
            }};
  }
  return {ScoreRole::kTeacherMarginalized,
          [&world, &cond, &schedule](std::span<const double> x, std::size_t level) {
            return marginalized_score(world, cond, x, schedule, level);
          }};
}

TrainingLog streaming_long_tuning(StudentGenerator& gen, FakeCritic& critic,
                                  const FeatureExtractor& phi, const World& world,
                                  const NoiseSchedule& schedule, const TrainConfig& cfg, Rng& rng,
                                  const std::function<void(const LogRecord&)>& on_record) {
  TrainingLog log;
  std::vector<std::size_t> prompt_set(world.conditions().size());
  for (std::size_t i = 0; i < prompt_set.size(); ++i) prompt_set[i] = i;

  const bool calibrate = !(cfg.mu && cfg.sharpness);
  TrustGateState gate;
  gate.mu = cfg.mu.value_or(0.0);
  gate.sharpness = cfg.sharpness.value_or(1.0);
  bool gate_enabled = !calibrate || cfg.warmup_steps == 0;
  std::vector<double> warmup_rhos;
  auto finish_calibration = [&] {
    GateCalibration cal = warmup_rhos.empty() ? GateCalibration{0.0, 1.0, 0}
                                              : calibrate_gate(warmup_rhos);
    if (cfg.mu) cal.mu = *cfg.mu;
    if (cfg.sharpness) cal.sharpness = *cfg.sharpness;
    gate.mu = cal.mu;
    gate.sharpness = cal.sharpness;
    log.calibration = cal;
    gate_enabled = true;
  };
  if (calibrate && cfg.warmup_steps == 0) finish_calibration();

  std::deque<CriticSample> buffer;
  EventSchedule events;
  HistoryCache cache;
  std::size_t length = cfg.video_length;  // forces a reset on the first step

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    if (length >= cfg.video_length) {
      events = sample_schedule(prompt_set, cfg.chunk_length, cfg.video_length, cfg.events, rng);
      cache = HistoryCache(gen.dim, world.window(), world.condition(events.conditions[0]).embedding);
      gate.reset();
      length = 0;
    }
    const std::size_t k = cache.chunk_count() + 1;
    const Condition& cond = world.condition(events.condition_of_chunk(k));
    const bool switch_chunk = events.is_switch_chunk(k);
    if (switch_chunk) cache = recache(gen, std::move(cache), cond);

    const GeneratedChunk generated =
        generate_next_chunk_traced(gen, cache, cond, rng, events.event_of_chunk(k));
    const HistorySummary hist = cache.history_summary();
    const ScoreField teacher = make_teacher(world, cfg.teacher, cond, hist, schedule);
    const DenseVector ctx = critic_context(critic, cond, cache);

    LogRecord rec;
    rec.step = step;
    rec.chunk_k = k;
    rec.event_e = generated.chunk.event;
    rec.condition = cond.id;
    rec.switch_chunk = switch_chunk;
    rec.warmup = !gate_enabled;

    const StepInputs inputs{&generated, &teacher, ctx, gate_enabled, std::nullopt};
    LossBreakdown b;
    try {
      b = delta_forcing_step(gen, critic, phi, gate, inputs, cfg.flags, schedule, cfg.lr_generator,
                             rng);
    } catch (const StepError& err) {
      rec.rho = err.breakdown().rho;
      rec.w = err.breakdown().w;
      rec.loss_dmd = err.breakdown().loss_dmd;
      rec.loss_cont = err.breakdown().loss_cont;
      rec.loss_total = err.breakdown().loss_total;
      rec.grad_norm = err.breakdown().grad_norm;
      log.records.push_back(rec);
      if (on_record) on_record(rec);
      throw;
    }
    rec.rho = b.rho;
    rec.w = b.w;
    rec.loss_dmd = b.loss_dmd;
    rec.loss_cont = b.loss_cont;
    rec.loss_total = b.loss_total;
    rec.grad_norm = b.grad_norm;
    if (!hist.empty) {
      const std::size_t target = world.consistent_mode(cond, hist);
      rec.drift_mode_acc = world.nearest_global_mode(generated.chunk.terminal()) == target ? 1.0 : 0.0;
    }
    log.records.push_back(rec);
    if (on_record) on_record(rec);

    if (!gate_enabled && b.rho) warmup_rhos.push_back(*b.rho);
    if (!gate_enabled && step >= cfg.warmup_steps) finish_calibration();

    buffer.push_back({generated.chunk, ctx});
    while (buffer.size() > std::max<std::size_t>(cfg.critic_buffer, 1)) buffer.pop_front();
    const std::vector<CriticSample> batch(buffer.begin(), buffer.end());
    for (std::size_t r = 0; r < cfg.critic_ratio; ++r)
      critic_step(critic, batch, schedule, cfg.lr_critic, rng);

    cache.append(generated.chunk);
    length += cfg.chunk_length;
  }
  if (!gate_enabled) finish_calibration();
  log.mu = gate.mu;
  log.sharpness = gate.sharpness;
  return log;
}

}  // namespace dflab
