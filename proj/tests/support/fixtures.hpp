#pragma once

// Hand-built trajectories on the default benchmark world (6 modes on a
// radius-4 circle, condition c owning modes 2c and 2c+1).

#include <cmath>
#include <random>

#include "dflab/diagnostics.hpp"

namespace dflab::fixtures {

inline LatentState mode_mean(const World& world, std::size_t mode) {
  return world.mixture()[mode].mean;
}

// One rollout of 6 chunks x 4 states, switching from condition 0 to
// condition 1 after chunk 3. `place(k, i)` gives state i of chunk k.
template <typename Place>
TrajectoryRecord two_event_rollout(Place place) {
  TrajectoryRecord traj;
  std::size_t step = 0;
  for (std::size_t k = 1; k <= 6; ++k) {
    const std::size_t event = k <= 3 ? 1 : 2;
    for (std::size_t i = 0; i < 4; ++i)
      traj.rows.push_back({step++, 0, k, event, event - 1, place(k, i)});
  }
  return traj;
}

// Small jitter that turns 90 degrees every state.
inline LatentState jittered(const LatentState& at, std::size_t i, double size = 0.1) {
  static const double dx[] = {1, 0, -1, 0};
  static const double dy[] = {0, 1, 0, -1};
  return {at[0] + size * dx[i % 4], at[1] + size * dy[i % 4]};
}

// Settles on mode 0, then moves to mode 2, the condition-1 mode nearest the
// history.
inline TrajectoryRecord healthy(const World& world) {
  return two_event_rollout([&](std::size_t k, std::size_t i) {
    return jittered(mode_mean(world, k <= 3 ? 0 : 2), i);
  });
}

// Ignores the switch: stays on mode 0 throughout.
inline TrajectoryRecord under_reactive(const World& world) {
  return two_event_rollout([&](std::size_t, std::size_t i) { return jittered(mode_mean(world, 0), i); });
}

// States scattered over a wide box around two far-apart event centres, with
// every chunk ending next to mode 4, which neither condition owns.
inline TrajectoryRecord unstructured_drift(const World& world) {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(-2.5, 2.5);
  return two_event_rollout([&](std::size_t k, std::size_t i) -> LatentState {
    if (i == 3) return jittered(mode_mean(world, 4), k, 0.2);
    const double cx = k <= 3 ? -3.0 : 3.0;
    return {cx + u(rng), u(rng)};
  });
}

// Every step moves the same way regardless of the events.
inline TrajectoryRecord mode_seeking(const World&) {
  return two_event_rollout([](std::size_t k, std::size_t i) -> LatentState {
    const double t = static_cast<double>((k - 1) * 4 + i);
    return {-5.0 + 0.4 * t, 0.1 * t};
  });
}

}  // namespace dflab::fixtures
