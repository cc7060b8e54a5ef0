#include "dflab/student.hpp"

#include "dflab/errors.hpp"

namespace dflab {

DenseVector Chunk::flatten() const {
  DenseVector flat;
  for (const LatentState& s : states) flat.insert(flat.end(), s.begin(), s.end());
  return flat;
}

Chunk Chunk::unflatten(std::span<const double> flat, std::size_t dim, std::size_t index,
                       std::size_t event) {
  if (dim == 0 || flat.size() % dim != 0)
    throw StructuralError("flat chunk size is not a multiple of the latent dimension");
  Chunk chunk;
  chunk.index = index;
  chunk.event = event;
  for (std::size_t i = 0; i < flat.size(); i += dim)
    chunk.states.emplace_back(flat.begin() + static_cast<long>(i),
                              flat.begin() + static_cast<long>(i + dim));
  return chunk;
}

HistoryCache::HistoryCache(std::size_t dim, std::size_t window, DenseVector active_embedding)
    : dim_(dim),
      window_(window),
      active_embedding_(std::move(active_embedding)),
      terminal_(dim, 0.0),
      running_mean_(dim, 0.0) {
  if (window_ == 0) throw ConfigError("history window must be positive");
}

DenseVector HistoryCache::summary_vector() const {
  DenseVector v;
  v.reserve(2 * dim_ + active_embedding_.size());
  v.insert(v.end(), terminal_.begin(), terminal_.end());
  v.insert(v.end(), running_mean_.begin(), running_mean_.end());
  v.insert(v.end(), active_embedding_.begin(), active_embedding_.end());
  return v;
}

HistorySummary HistoryCache::history_summary() const {
  return HistorySummary{terminal_, running_mean_, empty(), std::nullopt};
}

void HistoryCache::append(const Chunk& chunk) {
  if (chunk.index != k_ + 1)
    throw UsageError("chunk " + std::to_string(chunk.index) + " appended after chunk " +
                     std::to_string(k_));
  for (const LatentState& s : chunk.states)
    if (s.size() != dim_) throw StructuralError("chunk state dimension does not match cache");
  retained_.push_back(chunk.states);
  while (retained_.size() > window_) retained_.pop_front();
  event_map_.push_back(chunk.event);
  ++k_;
  refresh();
}

void HistoryCache::refresh() {
  terminal_.assign(dim_, 0.0);
  running_mean_.assign(dim_, 0.0);
  if (retained_.empty()) return;
  terminal_ = retained_.back().back();
  std::size_t count = 0;
  for (const auto& states : retained_) {
    for (const LatentState& s : states) {
      for (std::size_t i = 0; i < dim_; ++i) running_mean_[i] += s[i];
      ++count;
    }
  }
  for (double& v : running_mean_) v /= static_cast<double>(count);
}

StudentGenerator StudentGenerator::create(std::size_t dim, std::size_t chunk_length,
                                          std::size_t embedding_dim,
                                          std::span<const std::size_t> hidden,
                                          std::uint64_t seed) {
  StudentGenerator gen;
  gen.dim = dim;
  gen.chunk_length = chunk_length;
  gen.embedding_dim = embedding_dim;
  gen.seed = seed;
  std::vector<std::size_t> dims{gen.input_dim()};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(dim * chunk_length);
  std::vector<Activation> acts(hidden.size(), Activation::kTanh);
  acts.push_back(Activation::kIdentity);
  gen.net = Mlp::create(dims, acts, seed);
  return gen;
}

DenseVector StudentGenerator::assemble_input(std::span<const double> noise,
                                             const DenseVector& condition_embedding,
                                             const HistoryCache& cache) const {
  if (noise.size() != noise_dim()) throw StructuralError("generator noise has wrong dimension");
  if (condition_embedding.size() != embedding_dim)
    throw StructuralError("condition embedding has wrong dimension");
  DenseVector input(noise.begin(), noise.end());
  input.insert(input.end(), condition_embedding.begin(), condition_embedding.end());
  const DenseVector summary = cache.summary_vector();
  if (summary.size() != 2 * dim + embedding_dim)
    throw StructuralError("history summary has wrong dimension");
  input.insert(input.end(), summary.begin(), summary.end());
  return input;
}

GeneratedChunk generate_next_chunk_traced(const StudentGenerator& gen, const HistoryCache& cache,
                                          const Condition& cond, Rng& rng, std::size_t event) {
  GeneratedChunk out;
  out.noise.resize(gen.noise_dim());
  std::normal_distribution<double> normal(0.0, 1.0);
  for (double& z : out.noise) z = normal(rng);
  out.input = gen.assemble_input(out.noise, cond.embedding, cache);
  out.trace = mlp_forward_traced(gen.net, out.input);
  out.chunk = Chunk::unflatten(out.trace.output(), gen.dim, cache.chunk_count() + 1, event);
  return out;
}

Chunk generate_next_chunk(const StudentGenerator& gen, const HistoryCache& cache,
                          const Condition& cond, Rng& rng, std::size_t event) {
  return generate_next_chunk_traced(gen, cache, cond, rng, event).chunk;
}

Chunk generate_chunk_from_noise(const StudentGenerator& gen, const HistoryCache& cache,
                                const Condition& cond, std::span<const double> noise,
                                std::size_t event) {
  const DenseVector input = gen.assemble_input(noise, cond.embedding, cache);
  return Chunk::unflatten(mlp_forward(gen.net, input), gen.dim, cache.chunk_count() + 1, event);
}

HistoryCache append_chunk(HistoryCache cache, const Chunk& chunk) {
  cache.append(chunk);
  return cache;
}

HistoryCache recache(const StudentGenerator& gen, HistoryCache cache, const Condition& new_cond) {
  if (new_cond.embedding.size() != gen.embedding_dim)
    throw StructuralError("condition embedding has wrong dimension");
  cache.set_active_embedding(new_cond.embedding);
  return cache;
}

Rollout rollout(const StudentGenerator& gen, const World& world, const EventSchedule& schedule,
                Rng& rng) {
  schedule.validate();
  if (schedule.chunk_length != gen.chunk_length)
    throw StructuralError("schedule chunk length does not match the generator");
  Rollout out;
  const std::size_t chunks = schedule.chunk_count();
  HistoryCache cache(gen.dim, world.window(), world.condition(schedule.conditions.front()).embedding);
  for (std::size_t k = 1; k <= chunks; ++k) {
    const Condition& cond = world.condition(schedule.condition_of_chunk(k));
    if (schedule.is_switch_chunk(k)) cache = recache(gen, std::move(cache), cond);
    Chunk chunk = generate_next_chunk(gen, cache, cond, rng, schedule.event_of_chunk(k));
    out.caches.push_back(cache);
    cache.append(chunk);
    out.conditions.push_back(cond.id);
    out.chunks.push_back(std::move(chunk));
    out.snapshots.push_back(cache);
  }
  return out;
}

}  // namespace dflab
