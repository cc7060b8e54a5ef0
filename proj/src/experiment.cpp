#include "dflab/experiment.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "dflab/errors.hpp"

namespace dflab {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- config --

nlohmann::json to_json(const ExperimentConfig& cfg) {
  auto optional_number = [](const auto& v) -> json { return v ? json(*v) : json(nullptr); };
  json world;
  to_json(world, cfg.world);
  json thresholds;
  to_json(thresholds, cfg.thresholds);
  return {
      {"seed", cfg.seed},
      {"output_dir", cfg.output_dir},
      {"teacher", to_string(cfg.teacher)},
      {"ablation", {{"no_gate", cfg.ablation.no_gate}, {"no_cont", cfg.ablation.no_cont}}},
      {"world", world},
      {"schedule",
       {{"chunk_length", cfg.schedule.chunk_length},
        {"video_length", cfg.schedule.video_length},
        {"events", cfg.schedule.events}}},
      {"noise",
       {{"sigma_min", cfg.noise.sigma_min},
        {"sigma_max", cfg.noise.sigma_max},
        {"levels", cfg.noise.levels}}},
      {"generator",
       {{"hidden", cfg.generator.hidden}, {"seed", optional_number(cfg.generator.seed)}}},
      {"critic",
       {{"hidden", cfg.critic.hidden},
        {"seed", optional_number(cfg.critic.seed)},
        {"context", to_string(cfg.critic.context)}}},
      {"features",
       {{"hidden", cfg.features.hidden},
        {"output_dim", cfg.features.output_dim},
        {"gain", cfg.features.gain},
        {"seed", cfg.features.seed}}},
      {"train",
       {{"steps", cfg.train.steps},
        {"lr_generator", cfg.train.lr_generator},
        {"lr_critic", cfg.train.lr_critic},
        {"critic_ratio", cfg.train.critic_ratio},
        {"critic_buffer", cfg.train.critic_buffer},
        {"warmup_steps", cfg.train.warmup_steps},
        {"mu", optional_number(cfg.train.mu)},
        {"sharpness", optional_number(cfg.train.sharpness)}}},
      {"eval", {{"rollouts", cfg.eval.rollouts}, {"seeds", cfg.eval.seeds}}},
      {"thresholds", thresholds},
      {"execution",
       {{"mode", to_string(cfg.execution.mode)}, {"workers", cfg.execution.workers}}},
  };
}

namespace {

std::string join_path(const std::string& parent, const std::string& key) {
  return parent.empty() ? key : parent + "." + key;
}

// Fields whose default is null accept a number or null.
bool nullable_number(const std::string& path) {
  return path == "generator.seed" || path == "critic.seed" || path == "train.mu" ||
         path == "train.sharpness";
}

void check_shape(const json& defaults, const json& given, const std::string& path,
                 std::vector<std::string>& errors) {
  if (defaults.is_object()) {
    if (!given.is_object()) {
      errors.push_back(path + ": expected an object");
      return;
    }
    for (auto it = given.begin(); it != given.end(); ++it) {
      const std::string child = join_path(path, it.key());
      if (!defaults.contains(it.key())) {
        errors.push_back(child + ": unknown field");
        continue;
      }
      // The world is free-form below its top level; it is checked when built.
      if (path == "world") continue;
      check_shape(defaults.at(it.key()), it.value(), child, errors);
    }
    return;
  }
  if (nullable_number(path)) {
    if (!given.is_null() && !given.is_number()) errors.push_back(path + ": expected a number or null");
    return;
  }
  if (defaults.is_boolean() && !given.is_boolean()) errors.push_back(path + ": expected a boolean");
  if (defaults.is_string() && !given.is_string()) errors.push_back(path + ": expected a string");
  if (defaults.is_array() && !given.is_array()) errors.push_back(path + ": expected an array");
  if (defaults.is_number_unsigned() && !given.is_number_unsigned())
    errors.push_back(path + ": expected a non-negative integer");
  else if (defaults.is_number_integer() && !given.is_number_integer())
    errors.push_back(path + ": expected an integer");
  else if (defaults.is_number_float() && !given.is_number())
    errors.push_back(path + ": expected a number");
}

// Recursive overlay that keeps explicit nulls.
void overlay(json& base, const json& patch) {
  if (!base.is_object() || !patch.is_object()) {
    base = patch;
    return;
  }
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    if (base.contains(it.key()) && base[it.key()].is_object() && it.value().is_object() &&
        it.key() != "world")
      overlay(base[it.key()], it.value());
    else
      base[it.key()] = it.value();
  }
}

template <class T>
T field(const json& root, const std::string& dotted) {
  const json* node = &root;
  std::stringstream ss(dotted);
  std::string part;
  while (std::getline(ss, part, '.')) node = &node->at(part);
  try {
    return node->get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(dotted + ": " + e.what());
  }
}

template <class T>
std::optional<T> optional_field(const json& root, const std::string& dotted) {
  const json* node = &root;
  std::stringstream ss(dotted);
  std::string part;
  while (std::getline(ss, part, '.')) node = &node->at(part);
  if (node->is_null()) return std::nullopt;
  try {
    return node->get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(dotted + ": " + e.what());
  }
}

}  // namespace

ExperimentConfig config_from_json(const json& given) {
  const json defaults = to_json(ExperimentConfig{});
  std::vector<std::string> errors;
  check_shape(defaults, given, "", errors);
  if (!errors.empty()) {
    std::string msg = "invalid config:";
    for (const std::string& e : errors) msg += "\n  " + e;
    throw ConfigError(msg);
  }
  json j = defaults;
  overlay(j, given);

  ExperimentConfig cfg;
  cfg.seed = field<std::uint64_t>(j, "seed");
  cfg.output_dir = field<std::string>(j, "output_dir");
  cfg.teacher = teacher_arm_from_string(field<std::string>(j, "teacher"));
  cfg.ablation.no_gate = field<bool>(j, "ablation.no_gate");
  cfg.ablation.no_cont = field<bool>(j, "ablation.no_cont");
  try {
    cfg.world = j.at("world").get<WorldSpec>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("world: ") + e.what());
  }
  cfg.schedule.chunk_length = field<std::size_t>(j, "schedule.chunk_length");
  cfg.schedule.video_length = field<std::size_t>(j, "schedule.video_length");
  cfg.schedule.events = field<std::size_t>(j, "schedule.events");
  cfg.noise.sigma_min = field<double>(j, "noise.sigma_min");
  cfg.noise.sigma_max = field<double>(j, "noise.sigma_max");
  cfg.noise.levels = field<std::size_t>(j, "noise.levels");
  cfg.generator.hidden = field<std::vector<std::size_t>>(j, "generator.hidden");
  cfg.generator.seed = optional_field<std::uint64_t>(j, "generator.seed");
  cfg.critic.hidden = field<std::vector<std::size_t>>(j, "critic.hidden");
  cfg.critic.seed = optional_field<std::uint64_t>(j, "critic.seed");
  cfg.critic.context = critic_context_from_string(field<std::string>(j, "critic.context"));
  cfg.features.hidden = field<std::vector<std::size_t>>(j, "features.hidden");
  cfg.features.output_dim = field<std::size_t>(j, "features.output_dim");
  cfg.features.gain = field<double>(j, "features.gain");
  cfg.features.seed = field<std::uint64_t>(j, "features.seed");
  cfg.train.steps = field<std::size_t>(j, "train.steps");
  cfg.train.lr_generator = field<double>(j, "train.lr_generator");
  cfg.train.lr_critic = field<double>(j, "train.lr_critic");
  cfg.train.critic_ratio = field<std::size_t>(j, "train.critic_ratio");
  cfg.train.critic_buffer = field<std::size_t>(j, "train.critic_buffer");
  cfg.train.warmup_steps = field<std::size_t>(j, "train.warmup_steps");
  cfg.train.mu = optional_field<double>(j, "train.mu");
  cfg.train.sharpness = optional_field<double>(j, "train.sharpness");
  cfg.eval.rollouts = field<std::size_t>(j, "eval.rollouts");
  cfg.eval.seeds = field<std::vector<std::uint64_t>>(j, "eval.seeds");
  cfg.thresholds = j.at("thresholds").get<FailureThresholds>();
  cfg.execution.mode = execution_from_string(field<std::string>(j, "execution.mode"));
  cfg.execution.workers = field<int>(j, "execution.workers");
  return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

json apply_override(json j, const std::string& dotted_path, const std::string& value) {
  if (dotted_path.empty()) throw ConfigError("empty override path");
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::parse_error&) {
    parsed = value;
  }
  json* node = &j;
  std::stringstream ss(dotted_path);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const std::string& key = parts[i];
    const bool last = i + 1 == parts.size();
    if (node->is_array()) {
      std::size_t idx = 0;
      try {
        idx = std::stoul(key);
      } catch (const std::exception&) {
        throw ConfigError(dotted_path + ": '" + key + "' is not an array index");
      }
      if (idx >= node->size()) throw ConfigError(dotted_path + ": index out of range");
      node = &(*node)[idx];
    } else {
      if (node->is_null()) *node = json::object();
      if (!node->is_object()) throw ConfigError(dotted_path + ": cannot descend into a value");
      node = &(*node)[key];
    }
    if (last) *node = parsed;
  }
  return j;
}

std::string canonical_json(const json& j) { return j.dump(); }

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256 failed");
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

std::string file_sha256(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return sha256_hex(ss.str());
}

json experiment_identity(const ExperimentConfig& cfg) {
  json j = to_json(cfg);
  j.erase("output_dir");
  j.erase("execution");
  return j;
}

std::string config_hash(const ExperimentConfig& cfg) {
  return sha256_hex(canonical_json(experiment_identity(cfg)));
}

fs::path resolve_output_dir(const std::string& dir) {
  fs::path p(dir);
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv(kOutputRootEnv); root != nullptr && *root != '\0')
    return fs::path(root) / p;
  return p;
}

std::vector<std::string> ExperimentConfig::validation_errors() const {
  std::vector<std::string> errors;
  auto require = [&errors](bool ok, const std::string& msg) {
    if (!ok) errors.push_back(msg);
  };
  auto positive_finite = [](double v) { return std::isfinite(v) && v > 0.0; };

  require(!output_dir.empty(), "output_dir: must not be empty");
  require(schedule.chunk_length > 0, "schedule.chunk_length: must be positive");
  if (schedule.chunk_length > 0) {
    require(schedule.video_length % schedule.chunk_length == 0,
            "schedule.video_length: must be a multiple of schedule.chunk_length");
    const std::size_t chunks = schedule.video_length / schedule.chunk_length;
    require(chunks >= 2, "schedule.video_length: needs at least 2 chunks");
    require(schedule.events >= 1 && schedule.events <= chunks,
            "schedule.events: must be between 1 and the chunk count");
  }
  require(schedule.events <= 1 || world.conditions.size() >= 2,
          "schedule.events: switching needs at least 2 world conditions");
  require(noise.levels >= 1, "noise.levels: must be positive");
  require(positive_finite(noise.sigma_min), "noise.sigma_min: must be positive");
  require(std::isfinite(noise.sigma_max) && noise.sigma_max > noise.sigma_min,
          "noise.sigma_max: must exceed noise.sigma_min");
  auto hidden_ok = [](const std::vector<std::size_t>& h) {
    return std::all_of(h.begin(), h.end(), [](std::size_t n) { return n > 0; });
  };
  require(!generator.hidden.empty() && hidden_ok(generator.hidden),
          "generator.hidden: needs at least one positive width");
  require(!critic.hidden.empty() && hidden_ok(critic.hidden),
          "critic.hidden: needs at least one positive width");
  require(hidden_ok(features.hidden), "features.hidden: widths must be positive");
  require(features.output_dim > 0, "features.output_dim: must be positive");
  require(positive_finite(features.gain), "features.gain: must be positive");
  require(positive_finite(train.lr_generator), "train.lr_generator: must be positive");
  require(positive_finite(train.lr_critic), "train.lr_critic: must be positive");
  require(train.critic_buffer >= 1, "train.critic_buffer: must be positive");
  require(!train.mu || std::isfinite(*train.mu), "train.mu: must be finite");
  require(!train.sharpness || positive_finite(*train.sharpness),
          "train.sharpness: must be positive");
  require(eval.rollouts >= 1, "eval.rollouts: must be positive");
  require(!eval.seeds.empty(), "eval.seeds: must not be empty");
  require(execution.workers >= 0, "execution.workers: must be non-negative");
  require(thresholds.under_reactive_fraction >= 0.0, "thresholds.under_reactive_fraction: negative");
  require(thresholds.drift_scatter_factor >= 0.0, "thresholds.drift_scatter_factor: negative");

  require(!world.modes.empty(), "world.modes: must not be empty");
  require(!world.conditions.empty(), "world.conditions: must not be empty");
  if (!world.modes.empty()) {
    const std::size_t d = world.modes.front().mean.size();
    require(d >= 1, "world.modes.0.mean: must not be empty");
    for (std::size_t i = 0; i < world.modes.size(); ++i) {
      const std::string p = "world.modes." + std::to_string(i);
      require(world.modes[i].mean.size() == d, p + ".mean: dimension differs from mode 0");
      require(positive_finite(world.modes[i].variance), p + ".variance: must be positive");
    }
  }
  for (std::size_t c = 0; c < world.conditions.size(); ++c) {
    const std::string p = "world.conditions." + std::to_string(c);
    const ConditionSpec& cs = world.conditions[c];
    require(!cs.modes.empty(), p + ".modes: must not be empty");
    for (std::size_t m : cs.modes)
      require(m < world.modes.size(), p + ".modes: id " + std::to_string(m) + " out of range");
    require(cs.history_prior.empty() || cs.history_prior.size() == cs.modes.size(),
            p + ".history_prior: size must match modes");
  }
  require(world.window >= 1, "world.window: must be positive");
  if (errors.empty()) {
    try {
      make_benchmark_world(world);
    } catch (const Error& e) {
      errors.push_back(std::string("world: ") + e.what());
    }
  }
  return errors;
}

void ExperimentConfig::validate() const {
  const std::vector<std::string> errors = validation_errors();
  if (errors.empty()) return;
  std::string msg = "invalid config:";
  for (const std::string& e : errors) msg += "\n  " + e;
  throw ConfigError(msg);
}

std::uint64_t ExperimentConfig::generator_seed() const {
  return generator.seed.value_or(derive_seed(seed, 1));
}
std::uint64_t ExperimentConfig::critic_seed() const {
  return critic.seed.value_or(derive_seed(seed, 2));
}
std::uint64_t ExperimentConfig::training_seed() const { return derive_seed(seed, 3); }

TrainConfig ExperimentConfig::train_config() const {
  TrainConfig tc;
  tc.steps = train.steps;
  tc.lr_generator = train.lr_generator;
  tc.lr_critic = train.lr_critic;
  tc.critic_ratio = train.critic_ratio;
  tc.critic_buffer = train.critic_buffer;
  tc.teacher = teacher;
  tc.flags = ablation;
  tc.mu = train.mu;
  tc.sharpness = train.sharpness;
  tc.warmup_steps = train.warmup_steps;
  tc.chunk_length = schedule.chunk_length;
  tc.video_length = schedule.video_length;
  tc.events = schedule.events;
  return tc;
}

std::size_t critic_context_dim(const ExperimentConfig& cfg, const World& world) {
  const std::size_t e = world.embedding_dim();
  switch (cfg.critic.context) {
    case CriticContext::kNone:
      return 0;
    case CriticContext::kCondition:
      return e;
    case CriticContext::kFull:
      return e + 2 * world.dim() + e;
  }
  return 0;
}

ExperimentSetup build_setup(const ExperimentConfig& cfg) {
  cfg.validate();
  ExperimentSetup s;
  s.world = make_benchmark_world(cfg.world);
  s.schedule = NoiseSchedule::geometric(cfg.noise.sigma_min, cfg.noise.sigma_max, cfg.noise.levels);
  const std::size_t d = s.world.dim();
  s.generator = StudentGenerator::create(d, cfg.schedule.chunk_length, s.world.embedding_dim(),
                                         cfg.generator.hidden, cfg.generator_seed());
  s.critic = FakeCritic::create(d, critic_context_dim(cfg, s.world), cfg.critic.context,
                                cfg.critic.hidden, cfg.critic_seed());
  s.critic.update_ratio = cfg.train.critic_ratio;
  s.features = FeatureExtractor::create(d * cfg.schedule.chunk_length, cfg.features.hidden,
                                        cfg.features.output_dim, cfg.features.seed,
                                        cfg.features.gain);
  return s;
}

// -------------------------------------------------------------- manifest --

json to_json(const RunManifest& m) {
  return {{"config_hash", m.config_hash},       {"code_version", m.code_version},
          {"files", m.files},                   {"wall_clock_seconds", m.wall_clock_seconds},
          {"status", m.status},                 {"config", m.config}};
}

RunManifest read_manifest(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw UsageError("no manifest in " + dir.string());
  const json j = json::parse(in);
  RunManifest m;
  m.config_hash = j.at("config_hash").get<std::string>();
  m.code_version = j.at("code_version").get<std::string>();
  m.files = j.at("files").get<std::map<std::string, std::string>>();
  m.wall_clock_seconds = j.at("wall_clock_seconds").get<double>();
  m.status = j.at("status").get<std::string>();
  m.config = j.at("config");
  return m;
}

RunManifest write_manifest(const fs::path& dir, const std::vector<std::string>& files,
                           const json& config, double seconds, const std::string& status) {
  RunManifest m;
  m.config_hash = sha256_hex(canonical_json(config));
  m.config = config;
  m.wall_clock_seconds = seconds;
  m.status = status;
  for (const std::string& f : files) m.files[f] = file_sha256(dir / f);
  std::ofstream out(dir / "manifest.json");
  out << to_json(m).dump(2) << "\n";
  if (!out) throw Error("cannot write manifest in " + dir.string());
  return m;
}

// ----------------------------------------------------------------- train --

namespace {

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::string optional_cell(const std::optional<double>& v) { return v ? format_double(*v) : ""; }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
  if (!out) throw Error("cannot write " + path.string());
}

void write_snapshot(const fs::path& path, const Mlp& net) {
  std::ofstream out(path);
  save_snapshot(net, out);
  if (!out) throw Error("cannot write " + path.string());
}

Mlp read_snapshot(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("missing snapshot " + path.string());
  return load_snapshot(in);
}

json calibration_json(const TrainingLog& log) {
  json j = {{"mu", log.mu}, {"sharpness", log.sharpness}};
  j["calibrated_samples"] = log.calibration ? json(log.calibration->samples) : json(nullptr);
  return j;
}

}  // namespace

std::string train_log_header() {
  return "step,chunk_k,event_e,rho,w,loss_dmd,loss_cont,loss_total,drift_mode_acc,grad_norm";
}

std::string train_log_row(const LogRecord& r) {
  std::string row = std::to_string(r.step) + "," + std::to_string(r.chunk_k) + "," +
                    std::to_string(r.event_e) + "," + optional_cell(r.rho) + "," +
                    format_double(r.w) + "," + format_double(r.loss_dmd) + "," +
                    format_double(r.loss_cont) + "," + format_double(r.loss_total) + "," +
                    optional_cell(r.drift_mode_acc) + "," + format_double(r.grad_norm);
  return row;
}

TrainResult run_train(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  TrainResult result;
  result.dir = resolve_output_dir(cfg.output_dir);
  fs::create_directories(result.dir);
  const json config = experiment_identity(cfg);
  write_text(result.dir / "config.json", to_json(cfg).dump(2) + "\n");

  ExperimentSetup s = build_setup(cfg);
  std::ofstream log_out(result.dir / "train_log.csv");
  log_out << train_log_header() << "\n";
  Rng rng(cfg.training_seed());
  try {
    result.log = streaming_long_tuning(s.generator, s.critic, s.features, s.world, s.schedule,
                                       cfg.train_config(), rng, [&log_out](const LogRecord& r) {
                                         log_out << train_log_row(r) << "\n";
                                       });
  } catch (const TrainingError& e) {
    log_out.close();
    write_manifest(result.dir, {"config.json", "train_log.csv"}, config, seconds_since(start),
                   std::string("failed: ") + e.what());
    throw;
  }
  log_out.close();
  write_snapshot(result.dir / "generator.snapshot", s.generator.net);
  write_snapshot(result.dir / "critic.snapshot", s.critic.net);
  write_text(result.dir / "gate.json", calibration_json(result.log).dump(2) + "\n");
  result.manifest = write_manifest(
      result.dir, {"config.json", "train_log.csv", "generator.snapshot", "critic.snapshot", "gate.json"},
      config, seconds_since(start));
  return result;
}

// ------------------------------------------------------------------ eval --

namespace {

// Linear-interpolation quantile of sorted values.
double quantile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return 0.0;
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

MetricSummary summarize(const std::string& name, std::vector<double> values) {
  MetricSummary m;
  m.metric = name;
  m.count = values.size();
  if (values.empty()) return m;
  std::sort(values.begin(), values.end());
  m.median = quantile(values, 0.5);
  m.iqr = quantile(values, 0.75) - quantile(values, 0.25);
  double sum = 0.0;
  for (double v : values) sum += v;
  m.mean = sum / static_cast<double>(values.size());
  return m;
}

const char* const kMetricNames[] = {"mode_accuracy", "scatter", "displacement", "smoothness_ratio",
                                    "direction_autocorrelation"};

std::optional<double> metric_value(const TrajectoryMetrics& m, const std::string& name) {
  if (name == "mode_accuracy") return m.mode_accuracy;
  if (name == "scatter") return m.scatter;
  if (name == "displacement") return m.displacement;
  if (name == "smoothness_ratio") return m.smoothness_ratio;
  if (name == "direction_autocorrelation") return m.direction_autocorrelation;
  throw UsageError("unknown metric " + name);
}

std::optional<double> median_of(std::vector<double> v) {
  if (v.empty()) return std::nullopt;
  std::sort(v.begin(), v.end());
  return quantile(v, 0.5);
}

}  // namespace

std::vector<MetricSummary> summarize_rollouts(const std::vector<RolloutMetricsRow>& rows) {
  std::vector<MetricSummary> out;
  for (const char* name : kMetricNames) {
    std::vector<double> values;
    for (const RolloutMetricsRow& r : rows)
      if (auto v = metric_value(r.metrics, name)) values.push_back(*v);
    out.push_back(summarize(name, std::move(values)));
  }
  return out;
}

const MetricSummary& EvalResult::metric(const std::string& name) const {
  for (const MetricSummary& m : summary)
    if (m.metric == name) return m;
  throw UsageError("no metric " + name);
}

EvalResult run_eval(const fs::path& run_dir, std::size_t rollouts,
                    const std::vector<std::uint64_t>& seeds) {
  if (rollouts == 0) throw UsageError("eval needs at least one rollout");
  if (seeds.empty()) throw UsageError("eval needs at least one seed");
  if (!fs::exists(run_dir / "generator.snapshot"))
    throw UsageError("no generator snapshot in " + run_dir.string());
  const auto start = std::chrono::steady_clock::now();
  const ExperimentConfig cfg = load_config(run_dir / "config.json");
  ExperimentSetup s = build_setup(cfg);
  Mlp net = read_snapshot(run_dir / "generator.snapshot");
  if (net.in_dim() != s.generator.net.in_dim() || net.out_dim() != s.generator.net.out_dim())
    throw StructuralError("generator snapshot does not match the config");
  s.generator.net = std::move(net);

  std::vector<std::size_t> prompt_set(s.world.conditions().size());
  for (std::size_t i = 0; i < prompt_set.size(); ++i) prompt_set[i] = i;

  const std::size_t n = rollouts * seeds.size();
  std::vector<Rollout> generated(n);
  std::vector<RolloutMetricsRow> rows(n);
  run_indexed(
      n,
      [&](std::size_t i) {
        const std::uint64_t seed = seeds[i / rollouts];
        const std::size_t r = i % rollouts;
        Rng rng(derive_seed(seed, r));
        const EventSchedule events =
            sample_schedule(prompt_set, cfg.schedule.chunk_length, cfg.schedule.video_length,
                            cfg.schedule.events, rng);
        generated[i] = rollout(s.generator, s.world, events, rng);
        TrajectoryRecord single;
        single.append_rollout(generated[i], r);
        rows[i].seed = seed;
        rows[i].rollout = r;
        rows[i].metrics = trajectory_metrics(single, s.world);
        rows[i].label = classify_failure(rows[i].metrics, s.world, cfg.thresholds);
      },
      cfg.execution.mode, cfg.execution.workers);

  EvalResult result;
  result.dir = run_dir / "eval";
  fs::create_directories(result.dir);
  result.rows = rows;
  result.summary = summarize_rollouts(rows);
  TrajectoryRecord pooled;
  for (std::size_t i = 0; i < n; ++i) pooled.append_rollout(generated[i], i);
  result.pooled = trajectory_metrics(pooled, s.world);
  result.pooled_label = classify_failure(result.pooled, s.world, cfg.thresholds);
  for (FailureLabel l : {FailureLabel::kHealthy, FailureLabel::kUnderReactive,
                         FailureLabel::kUnstructuredDrift, FailureLabel::kModeSeeking})
    result.label_counts[to_string(l)] = 0;
  for (const RolloutMetricsRow& r : rows) ++result.label_counts[to_string(r.label)];

  {
    std::ofstream out(result.dir / "eval_rollouts.csv");
    out << "seed,rollout,mode_accuracy,scatter,displacement,smoothness_ratio,"
           "direction_autocorrelation,label\n";
    for (const RolloutMetricsRow& r : rows)
      out << r.seed << "," << r.rollout << "," << optional_cell(r.metrics.mode_accuracy) << ","
          << format_double(r.metrics.scatter) << "," << optional_cell(r.metrics.displacement)
          << "," << optional_cell(r.metrics.smoothness_ratio) << ","
          << format_double(r.metrics.direction_autocorrelation) << "," << to_string(r.label)
          << "\n";
  }
  {
    std::ofstream out(result.dir / "eval_summary.csv");
    out << "metric,median,iqr,mean,count\n";
    for (const MetricSummary& m : result.summary)
      out << m.metric << "," << format_double(m.median) << "," << format_double(m.iqr) << ","
          << format_double(m.mean) << "," << m.count << "\n";
  }
  {
    std::ofstream out(result.dir / "trajectory.csv");
    write_trajectory_csv(pooled, out);
  }
  json report = {{"rollouts", rollouts},
                 {"seeds", seeds},
                 {"pooled", metrics_to_json(result.pooled)},
                 {"pooled_label", to_string(result.pooled_label)},
                 {"label_counts", result.label_counts}};
  write_text(result.dir / "eval.json", report.dump(2) + "\n");
  json config = {{"run_config", experiment_identity(cfg)}, {"rollouts", rollouts}, {"seeds", seeds}};
  write_manifest(result.dir,
                 {"eval_rollouts.csv", "eval_summary.csv", "trajectory.csv", "eval.json"}, config,
                 seconds_since(start));
  return result;
}

// --------------------------------------------------------------- compare --

ArmSpec preset_arm(const std::string& name, const ExperimentConfig& base) {
  ArmSpec arm{name, base};
  ExperimentConfig& c = arm.config;
  c.teacher = TeacherArm::kMarginalized;
  if (name == "baseline") {
    c.ablation = {true, true};
  } else if (name == "full") {
    c.ablation = {false, false};
  } else if (name == "no_cont") {
    c.ablation = {false, true};
  } else if (name == "no_gate") {
    c.ablation = {true, false};
  } else if (name == "ideal") {
    c.ablation = {true, true};
    c.teacher = TeacherArm::kHistoryAware;
  } else {
    throw ConfigError("unknown arm '" + name + "' (baseline, full, no_cont, no_gate, ideal)");
  }
  return arm;
}

const CompareArmSummary& CompareReport::arm(const std::string& name) const {
  for (const CompareArmSummary& a : arms)
    if (a.arm == name) return a;
  throw UsageError("no arm " + name);
}

const CompareRow& CompareReport::row(const std::string& arm_name, std::uint64_t seed) const {
  for (const CompareRow& r : rows)
    if (r.arm == arm_name && r.seed == seed) return r;
  throw UsageError("no row for " + arm_name + " seed " + std::to_string(seed));
}

namespace {

std::optional<double> difference(const std::optional<double>& a, const std::optional<double>& b) {
  if (!a || !b) return std::nullopt;
  return *a - *b;
}

}  // namespace

CompareReport run_compare(const std::vector<ArmSpec>& arms, const std::vector<std::uint64_t>& seeds,
                          const fs::path& out_dir, const ExecutionParams& exec) {
  if (arms.size() < 2) throw UsageError("compare needs at least two arms");
  if (seeds.empty()) throw UsageError("compare needs at least one seed");
  for (std::size_t i = 0; i < arms.size(); ++i)
    for (std::size_t j = i + 1; j < arms.size(); ++j)
      if (arms[i].name == arms[j].name) throw UsageError("duplicate arm " + arms[i].name);
  for (const ArmSpec& a : arms) {
    try {
      a.config.validate();
    } catch (const ConfigError& e) {
      throw ConfigError("arm " + a.name + ": " + e.what());
    }
  }
  const auto start = std::chrono::steady_clock::now();
  CompareReport report;
  report.dir = fs::absolute(resolve_output_dir(out_dir.string()));
  fs::create_directories(report.dir);

  const std::size_t n = arms.size() * seeds.size();
  report.rows.resize(n);
  run_indexed(
      n,
      [&](std::size_t i) {
        const ArmSpec& arm = arms[i / seeds.size()];
        CompareRow& row = report.rows[i];
        row.arm = arm.name;
        row.seed = seeds[i % seeds.size()];
        ExperimentConfig cfg = arm.config;
        cfg.seed = row.seed;
        cfg.output_dir = (report.dir / arm.name / ("seed_" + std::to_string(row.seed))).string();
        cfg.execution.mode = Execution::kSerial;
        try {
          const TrainResult trained = run_train(cfg);
          const EvalResult ev = run_eval(trained.dir, cfg.eval.rollouts, cfg.eval.seeds);
          const MetricSummary& acc = ev.metric("mode_accuracy");
          if (acc.count > 0) {
            row.mode_accuracy = acc.median;
            row.mode_accuracy_mean = acc.mean;
          }
          row.scatter = ev.metric("scatter").median;
          if (ev.metric("displacement").count > 0) row.displacement = ev.metric("displacement").median;
          row.label = ev.pooled_label;
        } catch (const std::exception& e) {
          row.status = std::string("failed: ") + e.what();
        }
      },
      exec.mode, exec.workers);

  for (const ArmSpec& arm : arms) {
    CompareArmSummary s;
    s.arm = arm.name;
    for (FailureLabel l : {FailureLabel::kHealthy, FailureLabel::kUnderReactive,
                           FailureLabel::kUnstructuredDrift, FailureLabel::kModeSeeking})
      s.label_counts[to_string(l)] = 0;
    std::vector<double> acc, acc_mean, scatter, disp;
    for (const CompareRow& r : report.rows) {
      if (r.arm != arm.name) continue;
      ++s.runs;
      if (r.status != "ok") {
        ++s.failed;
        continue;
      }
      if (r.mode_accuracy) acc.push_back(*r.mode_accuracy);
      if (r.mode_accuracy_mean) acc_mean.push_back(*r.mode_accuracy_mean);
      if (r.scatter) scatter.push_back(*r.scatter);
      if (r.displacement) disp.push_back(*r.displacement);
      if (r.label) ++s.label_counts[to_string(*r.label)];
    }
    s.median_mode_accuracy = median_of(acc);
    if (!acc.empty()) s.iqr_mode_accuracy = summarize("", acc).iqr;
    s.median_mode_accuracy_mean = median_of(acc_mean);
    s.median_scatter = median_of(scatter);
    s.median_displacement = median_of(disp);
    report.arms.push_back(std::move(s));
  }

  const std::string& reference = arms.front().name;
  for (std::size_t a = 1; a < arms.size(); ++a)
    for (std::uint64_t seed : seeds) {
      const CompareRow& x = report.row(arms[a].name, seed);
      const CompareRow& ref = report.row(reference, seed);
      PairedDelta d;
      d.arm = arms[a].name;
      d.reference = reference;
      d.seed = seed;
      d.delta_mode_accuracy = difference(x.mode_accuracy, ref.mode_accuracy);
      d.delta_mode_accuracy_mean = difference(x.mode_accuracy_mean, ref.mode_accuracy_mean);
      d.delta_scatter = difference(x.scatter, ref.scatter);
      d.delta_displacement = difference(x.displacement, ref.displacement);
      report.deltas.push_back(d);
    }
  report.wall_clock_seconds = seconds_since(start);

  {
    std::ofstream out(report.dir / "compare_runs.csv");
    out << "arm,seed,status,mode_accuracy,mode_accuracy_mean,scatter,displacement,label\n";
    for (const CompareRow& r : report.rows)
      out << r.arm << "," << r.seed << "," << (r.status == "ok" ? "ok" : "failed") << ","
          << optional_cell(r.mode_accuracy) << "," << optional_cell(r.mode_accuracy_mean) << ","
          << optional_cell(r.scatter) << "," << optional_cell(r.displacement) << ","
          << (r.label ? to_string(*r.label) : "") << "\n";
  }
  {
    std::ofstream out(report.dir / "compare_summary.csv");
    out << "arm,runs,failed,median_mode_accuracy,iqr_mode_accuracy,median_mode_accuracy_mean,"
           "median_scatter,median_displacement,healthy,under_reactive,unstructured_drift,"
           "mode_seeking\n";
    for (const CompareArmSummary& s : report.arms)
      out << s.arm << "," << s.runs << "," << s.failed << "," << optional_cell(s.median_mode_accuracy)
          << "," << optional_cell(s.iqr_mode_accuracy) << ","
          << optional_cell(s.median_mode_accuracy_mean) << "," << optional_cell(s.median_scatter)
          << "," << optional_cell(s.median_displacement) << "," << s.label_counts.at("healthy")
          << "," << s.label_counts.at("under_reactive") << ","
          << s.label_counts.at("unstructured_drift") << "," << s.label_counts.at("mode_seeking")
          << "\n";
  }
  {
    std::ofstream out(report.dir / "compare_deltas.csv");
    out << "arm,reference,seed,delta_mode_accuracy,delta_mode_accuracy_mean,delta_scatter,"
           "delta_displacement\n";
    for (const PairedDelta& d : report.deltas)
      out << d.arm << "," << d.reference << "," << d.seed << ","
          << optional_cell(d.delta_mode_accuracy) << "," << optional_cell(d.delta_mode_accuracy_mean)
          << "," << optional_cell(d.delta_scatter) << "," << optional_cell(d.delta_displacement)
          << "\n";
  }
  json failures = json::array();
  for (const CompareRow& r : report.rows)
    if (r.status != "ok") failures.push_back({{"arm", r.arm}, {"seed", r.seed}, {"error", r.status}});
  json arm_configs = json::object();
  for (const ArmSpec& a : arms) arm_configs[a.name] = experiment_identity(a.config);
  json summary = json::array();
  for (const CompareArmSummary& s : report.arms) {
    auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
    summary.push_back({{"arm", s.arm},
                       {"runs", s.runs},
                       {"failed", s.failed},
                       {"median_mode_accuracy", opt(s.median_mode_accuracy)},
                       {"iqr_mode_accuracy", opt(s.iqr_mode_accuracy)},
                       {"median_mode_accuracy_mean", opt(s.median_mode_accuracy_mean)},
                       {"median_scatter", opt(s.median_scatter)},
                       {"median_displacement", opt(s.median_displacement)},
                       {"label_counts", s.label_counts}});
  }
  write_text(report.dir / "report.json",
             json({{"reference", reference}, {"seeds", seeds}, {"arms", summary}, {"failures", failures}})
                     .dump(2) +
                 "\n");
  write_manifest(report.dir,
                 {"compare_runs.csv", "compare_summary.csv", "compare_deltas.csv", "report.json"},
                 {{"arms", arm_configs}, {"seeds", seeds}}, report.wall_clock_seconds);
  return report;
}

// -------------------------------------------------------------- diagnose --

DiagnoseResult run_diagnose(const fs::path& trajectory_csv, const fs::path& out_dir,
                            const ExperimentConfig& cfg) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  std::ifstream in(trajectory_csv);
  if (!in) throw UsageError("cannot read " + trajectory_csv.string());
  const TrajectoryRecord traj = read_trajectory_csv(in);
  const World world = make_benchmark_world(cfg.world);
  if (traj.dim() != world.dim())
    throw StructuralError("trajectory dimension does not match the world");

  DiagnoseResult result;
  result.pca = fit_pca(traj);
  result.metrics = trajectory_metrics(traj, world);
  result.label = classify_failure(result.metrics, world, cfg.thresholds);
  result.dir = resolve_output_dir(out_dir.string());
  fs::create_directories(result.dir);
  {
    std::ofstream out(result.dir / "projection.csv");
    write_projection_csv(result.pca, traj, out);
  }
  const auto ratio = result.pca.explained_ratio();
  json report = {{"input", trajectory_csv.string()},
                 {"states", traj.rows.size()},
                 {"explained_ratio", {ratio[0], ratio[1]}},
                 {"metrics", metrics_to_json(result.metrics)},
                 {"label", to_string(result.label)}};
  write_text(result.dir / "diagnose.json", report.dump(2) + "\n");
  write_manifest(result.dir, {"projection.csv", "diagnose.json"},
                 {{"input_sha256", file_sha256(trajectory_csv)}, {"run_config", experiment_identity(cfg)}},
                 seconds_since(start));
  return result;
}

// ------------------------------------------------------------- calibrate --

CalibrationResult run_calibrate_gate(const ExperimentConfig& cfg) {
  cfg.validate();
  if (cfg.train.warmup_steps == 0) throw ConfigError("train.warmup_steps: must be positive to calibrate");
  const auto start = std::chrono::steady_clock::now();
  CalibrationResult result;
  result.dir = resolve_output_dir(cfg.output_dir);
  fs::create_directories(result.dir);
  const json config = experiment_identity(cfg);
  write_text(result.dir / "config.json", to_json(cfg).dump(2) + "\n");

  ExperimentSetup s = build_setup(cfg);
  TrainConfig tc = cfg.train_config();
  tc.steps = tc.warmup_steps;
  tc.mu.reset();
  tc.sharpness.reset();
  Rng rng(cfg.training_seed());
  const TrainingLog log =
      streaming_long_tuning(s.generator, s.critic, s.features, s.world, s.schedule, tc, rng);
  std::ofstream out(result.dir / "warmup_rho.csv");
  out << "step,chunk_k,event_e,switch,rho\n";
  for (const LogRecord& r : log.records) {
    if (!r.rho) continue;
    result.rhos.push_back(*r.rho);
    out << r.step << "," << r.chunk_k << "," << r.event_e << "," << (r.switch_chunk ? 1 : 0) << ","
        << format_double(*r.rho) << "\n";
  }
  out.close();
  result.calibration = log.calibration.value_or(GateCalibration{log.mu, log.sharpness, 0});
  write_text(result.dir / "gate.json",
             json({{"mu", result.calibration.mu},
                   {"sharpness", result.calibration.sharpness},
                   {"samples", result.calibration.samples}})
                     .dump(2) +
                 "\n");
  write_manifest(result.dir, {"config.json", "warmup_rho.csv", "gate.json"}, config,
                 seconds_since(start));
  return result;
}

}  // namespace dflab
