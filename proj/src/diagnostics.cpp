#include "dflab/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

#include <Eigen/Dense>

#include "dflab/errors.hpp"

namespace dflab {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void TrajectoryRecord::validate() const {
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].z.size() != dim()) throw StructuralError("trajectory rows disagree on dimension");
    if (i == 0) continue;
    const TrajectoryRow& prev = rows[i - 1];
    const TrajectoryRow& cur = rows[i];
    if (cur.step <= prev.step) throw StructuralError("trajectory steps must strictly increase");
    if (cur.rollout == prev.rollout && (cur.event < prev.event || cur.chunk < prev.chunk))
      throw StructuralError("event and chunk indices must not decrease within a rollout");
  }
}

void TrajectoryRecord::append_rollout(const Rollout& r, std::size_t rollout_id) {
  std::size_t step = rows.empty() ? 0 : rows.back().step + 1;
  for (std::size_t i = 0; i < r.chunks.size(); ++i) {
    const Chunk& chunk = r.chunks[i];
    for (const LatentState& s : chunk.states)
      rows.push_back({step++, rollout_id, chunk.index, chunk.event, r.conditions[i], s});
  }
}

DenseVector PcaProjection::reconstruct(std::size_t i) const {
  DenseVector out = mean;
  for (std::size_t r = 0; r < out.size(); ++r)
    out[r] += directions(r, 0) * projected[i][0] + directions(r, 1) * projected[i][1];
  return out;
}

PcaProjection fit_pca(const TrajectoryRecord& traj) {
  const std::size_t n = traj.rows.size();
  const std::size_t d = traj.dim();
  if (n < 3) throw DegenerateInputError("PCA needs at least 3 states");
  if (d < 2) throw DegenerateInputError("PCA to two components needs dimension >= 2");

  PcaProjection pca;
  pca.mean.assign(d, 0.0);
  for (const TrajectoryRow& row : traj.rows)
    for (std::size_t i = 0; i < d; ++i) pca.mean[i] += row.z[i];
  for (double& m : pca.mean) m /= static_cast<double>(n);

  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  for (const TrajectoryRow& row : traj.rows) {
    for (std::size_t a = 0; a < d; ++a) {
      const double da = row.z[a] - pca.mean[a];
      for (std::size_t b = a; b < d; ++b)
        cov(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) += da * (row.z[b] - pca.mean[b]);
    }
  }
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = a; b < d; ++b) {
      const auto ia = static_cast<Eigen::Index>(a);
      const auto ib = static_cast<Eigen::Index>(b);
      cov(ia, ib) /= static_cast<double>(n);
      cov(ib, ia) = cov(ia, ib);
    }
  pca.total_variance = cov.trace();
  if (!(pca.total_variance > 0.0)) throw DegenerateInputError("trajectory has zero variance");

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw DegenerateInputError("eigendecomposition failed");
  pca.directions = DenseMatrix(d, 2);
  for (std::size_t c = 0; c < 2; ++c) {
    const auto col = static_cast<Eigen::Index>(d - 1 - c);  // eigenvalues ascend
    Eigen::VectorXd v = solver.eigenvectors().col(col);
    Eigen::Index largest = 0;
    for (Eigen::Index i = 1; i < v.size(); ++i)
      if (std::abs(v(i)) > std::abs(v(largest))) largest = i;
    if (v(largest) < 0.0) v = -v;
    for (std::size_t r = 0; r < d; ++r) pca.directions(r, c) = v(static_cast<Eigen::Index>(r));
    pca.variances[c] = std::max(solver.eigenvalues()(col), 0.0);
  }

  pca.projected.reserve(n);
  for (const TrajectoryRow& row : traj.rows) {
    std::array<double, 2> p{0.0, 0.0};
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t r = 0; r < d; ++r) p[c] += pca.directions(r, c) * (row.z[r] - pca.mean[r]);
    pca.projected.push_back(p);
  }
  return pca;
}

namespace {

double median_of(std::vector<double> v) {
  std::ranges::sort(v);
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

TrajectoryMetrics trajectory_metrics(const TrajectoryRecord& traj, const World& world) {
  traj.validate();
  TrajectoryMetrics m;
  const std::size_t d = traj.dim();

  // Segments: maximal runs of rows sharing (rollout, event).
  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  for (std::size_t i = 0; i < traj.rows.size(); ++i) {
    const TrajectoryRow& row = traj.rows[i];
    if (i == 0 || row.rollout != traj.rows[i - 1].rollout || row.event != traj.rows[i - 1].event)
      ranges.emplace_back(i, i + 1);
    else
      ranges.back().second = i + 1;
  }
  for (const auto& [begin, end] : ranges) {
    EventSegment seg;
    seg.rollout = traj.rows[begin].rollout;
    seg.event = traj.rows[begin].event;
    seg.condition = traj.rows[begin].condition;
    seg.states = end - begin;
    seg.centroid.assign(d, 0.0);
    for (std::size_t i = begin; i < end; ++i)
      for (std::size_t j = 0; j < d; ++j) seg.centroid[j] += traj.rows[i].z[j];
    for (double& c : seg.centroid) c /= static_cast<double>(seg.states);
    for (std::size_t i = begin; i < end; ++i) seg.scatter += distance(traj.rows[i].z, seg.centroid);
    seg.scatter /= static_cast<double>(seg.states);
    m.segments.push_back(std::move(seg));
  }

  double scatter = 0.0;
  for (const EventSegment& seg : m.segments) scatter += seg.scatter;
  m.scatter = m.segments.empty() ? 0.0 : scatter / static_cast<double>(m.segments.size());
  m.events = m.segments.size();

  double disp = 0.0;
  std::size_t transitions = 0;
  for (std::size_t i = 1; i < m.segments.size(); ++i) {
    if (m.segments[i].rollout != m.segments[i - 1].rollout) continue;
    disp += distance(m.segments[i].centroid, m.segments[i - 1].centroid);
    ++transitions;
  }
  if (transitions > 0) m.displacement = disp / static_cast<double>(transitions);

  std::vector<double> step_lengths;
  std::vector<DenseVector> steps;
  double cosine_sum = 0.0;
  std::size_t cosine_count = 0;
  for (std::size_t i = 1; i < traj.rows.size(); ++i) {
    if (traj.rows[i].rollout != traj.rows[i - 1].rollout) continue;
    DenseVector step = subtract(traj.rows[i].z, traj.rows[i - 1].z);
    const double len = norm(step);
    step_lengths.push_back(len);
    if (i >= 2 && traj.rows[i - 2].rollout == traj.rows[i].rollout && !steps.empty()) {
      const DenseVector& prev = steps.back();
      const double prev_len = norm(prev);
      if (len > 0.0 && prev_len > 0.0) {
        cosine_sum += dot(step, prev) / (len * prev_len);
        ++cosine_count;
      }
    }
    steps.push_back(std::move(step));
  }
  if (!step_lengths.empty()) {
    const double med = median_of(step_lengths);
    if (med > 0.0) m.smoothness_ratio = *std::ranges::max_element(step_lengths) / med;
  }
  if (cosine_count > 0) m.direction_autocorrelation = cosine_sum / static_cast<double>(cosine_count);

  // Mode accuracy replays each rollout's history window chunk by chunk.
  std::size_t hits = 0;
  std::size_t eligible = 0;
  std::size_t i = 0;
  while (i < traj.rows.size()) {
    const std::size_t rollout = traj.rows[i].rollout;
    std::deque<std::vector<const LatentState*>> window;
    while (i < traj.rows.size() && traj.rows[i].rollout == rollout) {
      const std::size_t chunk = traj.rows[i].chunk;
      std::vector<const LatentState*> states;
      const std::size_t cond_id = traj.rows[i].condition;
      while (i < traj.rows.size() && traj.rows[i].rollout == rollout && traj.rows[i].chunk == chunk)
        states.push_back(&traj.rows[i++].z);
      if (!window.empty() && cond_id < world.conditions().size()) {
        DenseVector mean(d, 0.0);
        std::size_t count = 0;
        for (const auto& w : window)
          for (const LatentState* s : w) {
            for (std::size_t j = 0; j < d; ++j) mean[j] += (*s)[j];
            ++count;
          }
        for (double& v : mean) v /= static_cast<double>(count);
        const std::size_t target = world.nearest_mode(world.condition(cond_id), mean);
        if (world.nearest_global_mode(*states.back()) == target) ++hits;
        ++eligible;
      }
      window.push_back(std::move(states));
      while (window.size() > world.window()) window.pop_front();
    }
  }
  if (eligible > 0) m.mode_accuracy = static_cast<double>(hits) / static_cast<double>(eligible);
  return m;
}

std::string to_string(FailureLabel label) {
  switch (label) {
    case FailureLabel::kHealthy:
      return "healthy";
    case FailureLabel::kUnderReactive:
      return "under_reactive";
    case FailureLabel::kUnstructuredDrift:
      return "unstructured_drift";
    case FailureLabel::kModeSeeking:
      return "mode_seeking";
  }
  return "healthy";
}

double FailureThresholds::displacement_threshold(const World& world) const {
  return under_reactive_fraction * world.median_mode_distance();
}

double FailureThresholds::scatter_threshold(const World& world) const {
  return drift_scatter_factor * world.mean_mode_std();
}

void to_json(nlohmann::json& j, const FailureThresholds& t) {
  j = {{"under_reactive_fraction", t.under_reactive_fraction},
       {"drift_scatter_factor", t.drift_scatter_factor},
       {"drift_accuracy", t.drift_accuracy},
       {"mode_seeking_autocorrelation", t.mode_seeking_autocorrelation}};
}

void from_json(const nlohmann::json& j, FailureThresholds& t) {
  const FailureThresholds defaults;
  t.under_reactive_fraction = j.value("under_reactive_fraction", defaults.under_reactive_fraction);
  t.drift_scatter_factor = j.value("drift_scatter_factor", defaults.drift_scatter_factor);
  t.drift_accuracy = j.value("drift_accuracy", defaults.drift_accuracy);
  t.mode_seeking_autocorrelation =
      j.value("mode_seeking_autocorrelation", defaults.mode_seeking_autocorrelation);
}

FailureLabel classify_failure(const TrajectoryMetrics& metrics, const World& world,
                              const FailureThresholds& thresholds) {
  if (metrics.direction_autocorrelation > thresholds.mode_seeking_autocorrelation)
    return FailureLabel::kModeSeeking;
  if (metrics.displacement && *metrics.displacement < thresholds.displacement_threshold(world))
    return FailureLabel::kUnderReactive;
  const bool low_accuracy =
      !metrics.mode_accuracy || *metrics.mode_accuracy < thresholds.drift_accuracy;
  if (metrics.scatter > thresholds.scatter_threshold(world) && low_accuracy)
    return FailureLabel::kUnstructuredDrift;
  return FailureLabel::kHealthy;
}

void write_trajectory_csv(const TrajectoryRecord& traj, std::ostream& out) {
  out << "step,rollout,chunk_k,event_e,condition";
  for (std::size_t i = 0; i < traj.dim(); ++i) out << ",z" << i;
  out << '\n';
  for (const TrajectoryRow& row : traj.rows) {
    out << row.step << ',' << row.rollout << ',' << row.chunk << ',' << row.event << ','
        << row.condition;
    for (double v : row.z) out << ',' << format_double(v);
    out << '\n';
  }
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

std::size_t parse_index(const std::string& s, std::size_t line) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
    throw ParseError("'" + s + "' is not a nonnegative integer", line);
  return std::stoull(s);
}

double parse_real(const std::string& s, std::size_t line) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || *end != '\0') throw ParseError("'" + s + "' is not a number", line);
  if (!std::isfinite(v)) throw ParseError("non-finite coordinate", line);
  return v;
}

}  // namespace

TrajectoryRecord read_trajectory_csv(std::istream& in) {
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(in, line)) throw ParseError("empty trajectory file", line_no);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const std::vector<std::string> header = split_csv(line);
  const std::vector<std::string> fixed{"step", "rollout", "chunk_k", "event_e", "condition"};
  if (header.size() <= fixed.size() || !std::equal(fixed.begin(), fixed.end(), header.begin()))
    throw ParseError("header must start with step,rollout,chunk_k,event_e,condition and name "
                     "at least one coordinate",
                     line_no);
  const std::size_t d = header.size() - fixed.size();

  TrajectoryRecord traj;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::vector<std::string> fields = split_csv(line);
    if (fields.size() != header.size())
      throw ParseError("expected " + std::to_string(header.size()) + " fields, found " +
                           std::to_string(fields.size()),
                       line_no);
    TrajectoryRow row;
    row.step = parse_index(fields[0], line_no);
    row.rollout = parse_index(fields[1], line_no);
    row.chunk = parse_index(fields[2], line_no);
    row.event = parse_index(fields[3], line_no);
    row.condition = parse_index(fields[4], line_no);
    for (std::size_t i = 0; i < d; ++i) row.z.push_back(parse_real(fields[5 + i], line_no));
    if (!traj.rows.empty()) {
      const TrajectoryRow& prev = traj.rows.back();
      if (row.step <= prev.step) throw ParseError("step index does not increase", line_no);
      if (row.rollout == prev.rollout && (row.event < prev.event || row.chunk < prev.chunk))
        throw ParseError("event or chunk index decreases within a rollout", line_no);
    }
    traj.rows.push_back(std::move(row));
  }
  return traj;
}

void write_projection_csv(const PcaProjection& pca, const TrajectoryRecord& traj, std::ostream& out) {
  out << "pc1,pc2,chunk_k,event_e\n";
  for (std::size_t i = 0; i < pca.projected.size(); ++i)
    out << format_double(pca.projected[i][0]) << ',' << format_double(pca.projected[i][1]) << ','
        << traj.rows[i].chunk << ',' << traj.rows[i].event << '\n';
}

nlohmann::json metrics_to_json(const TrajectoryMetrics& metrics) {
  auto optional = [](const std::optional<double>& v) -> nlohmann::json {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  };
  nlohmann::json segments = nlohmann::json::array();
  for (const EventSegment& s : metrics.segments)
    segments.push_back({{"rollout", s.rollout},
                        {"event", s.event},
                        {"condition", s.condition},
                        {"centroid", s.centroid},
                        {"scatter", s.scatter},
                        {"states", s.states}});
  return {{"scatter", metrics.scatter},
          {"displacement", optional(metrics.displacement)},
          {"smoothness_ratio", optional(metrics.smoothness_ratio)},
          {"mode_accuracy", optional(metrics.mode_accuracy)},
          {"direction_autocorrelation", metrics.direction_autocorrelation},
          {"events", metrics.events},
          {"segments", segments}};
}

}  // namespace dflab
