#pragma once

// Causal chunk-wise generator with an explicit fixed-size history summary.

#include <cstdint>
#include <deque>
#include <span>
#include <vector>

#include "dflab/diffusion.hpp"
#include "dflab/smallgrad.hpp"
#include "dflab/world.hpp"

namespace dflab {

struct Chunk {
  std::vector<LatentState> states;
  std::size_t index = 0;  // k, 1-based within a rollout
  std::size_t event = 1;  // e(k)

  DenseVector flatten() const;
  static Chunk unflatten(std::span<const double> flat, std::size_t dim, std::size_t index,
                         std::size_t event);
  const LatentState& terminal() const { return states.back(); }
  bool operator==(const Chunk&) const = default;
};

class HistoryCache {
 public:
  HistoryCache() = default;
  HistoryCache(std::size_t dim, std::size_t window, DenseVector active_embedding);

  std::size_t dim() const noexcept { return dim_; }
  std::size_t window() const noexcept { return window_; }
  std::size_t chunk_count() const noexcept { return k_; }
  bool empty() const noexcept { return k_ == 0; }
  const std::deque<std::vector<LatentState>>& retained() const noexcept { return retained_; }
  const DenseVector& active_embedding() const noexcept { return active_embedding_; }
  const std::vector<std::size_t>& event_map() const noexcept { return event_map_; }

  const LatentState& terminal() const noexcept { return terminal_; }
  const LatentState& running_mean() const noexcept { return running_mean_; }

  // terminal ++ running mean ++ active-condition embedding
  DenseVector summary_vector() const;
  HistorySummary history_summary() const;

  void append(const Chunk& chunk);
  void set_active_embedding(DenseVector embedding) { active_embedding_ = std::move(embedding); }

  bool operator==(const HistoryCache&) const = default;

 private:
  void refresh();

  std::size_t dim_ = 0;
  std::size_t window_ = 3;
  std::size_t k_ = 0;
  std::deque<std::vector<LatentState>> retained_;
  std::vector<std::size_t> event_map_;
  DenseVector active_embedding_;
  LatentState terminal_;
  LatentState running_mean_;
};

struct StudentGenerator {
  Mlp net;
  std::size_t dim = 2;
  std::size_t chunk_length = 4;
  std::size_t embedding_dim = 3;
  std::uint64_t seed = 0;

  static StudentGenerator create(std::size_t dim, std::size_t chunk_length,
                                 std::size_t embedding_dim, std::span<const std::size_t> hidden,
                                 std::uint64_t seed);

  std::size_t noise_dim() const { return dim * chunk_length; }
  std::size_t input_dim() const { return noise_dim() + embedding_dim + 2 * dim + embedding_dim; }
  DenseVector assemble_input(std::span<const double> noise, const DenseVector& condition_embedding,
                             const HistoryCache& cache) const;
};

// One forward pass with everything needed to backpropagate into the generator.
struct GeneratedChunk {
  Chunk chunk;
  DenseVector noise;
  DenseVector input;
  ForwardTrace trace;
};

GeneratedChunk generate_next_chunk_traced(const StudentGenerator& gen, const HistoryCache& cache,
                                          const Condition& cond, Rng& rng, std::size_t event = 1);
// Samples z ~ N(0, I) and runs the generator; the cache is not modified.
Chunk generate_next_chunk(const StudentGenerator& gen, const HistoryCache& cache,
                          const Condition& cond, Rng& rng, std::size_t event = 1);
// Deterministic generation from a given noise vector.
Chunk generate_chunk_from_noise(const StudentGenerator& gen, const HistoryCache& cache,
                                const Condition& cond, std::span<const double> noise,
                                std::size_t event = 1);

HistoryCache append_chunk(HistoryCache cache, const Chunk& chunk);

// Swaps the active-condition embedding; geometric history is untouched.
HistoryCache recache(const StudentGenerator& gen, HistoryCache cache, const Condition& new_cond);

struct Rollout {
  std::vector<Chunk> chunks;
  std::vector<std::size_t> conditions;    // condition id per chunk
  std::vector<HistoryCache> caches;       // cache used to generate each chunk
  std::vector<HistoryCache> snapshots;    // cache after appending each chunk
};

Rollout rollout(const StudentGenerator& gen, const World& world, const EventSchedule& schedule,
                Rng& rng);

}  // namespace dflab
