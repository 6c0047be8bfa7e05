#pragma once

// Synthetic congestion data: a small road network whose speeds carry a daily
// dip plus random congestion events that travel downstream along directed
// links with a one-step lag.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "dgcrn/data.hpp"
#include "dgcrn/error.hpp"
#include "dgcrn/graph_static.hpp"

namespace dgcrn {

struct SynthEdge {
  std::size_t from = 0;
  std::size_t to = 0;
};

struct SynthNetwork {
  std::size_t n_nodes = 0;
  std::vector<double> x, y;      // sensor positions (km)
  std::vector<SynthEdge> edges;  // directed traffic flow
  double link_radius = std::numeric_limits<double>::infinity();  // pairs further apart are unlisted

  double distance(std::size_t a, std::size_t b) const { return std::hypot(x[a] - x[b], y[a] - y[b]); }

  // Symmetric sensor distances for pairs within `link_radius`, inf otherwise.
  SquareMatrix distances() const {
    SquareMatrix d(n_nodes, std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < n_nodes; ++i)
      for (std::size_t j = 0; j < n_nodes; ++j) {
        if (i == j) {
          d(i, j) = 0.0;
        } else if (distance(i, j) <= link_radius) {
          d(i, j) = distance(i, j);
        }
      }
    return d;
  }

  std::vector<std::vector<std::size_t>> in_neighbors() const {
    std::vector<std::vector<std::size_t>> in(n_nodes);
    for (const auto& e : edges) in[e.to].push_back(e.from);
    return in;
  }

  bool adjacent(std::size_t a, std::size_t b) const {
    return std::any_of(edges.begin(), edges.end(),
                       [&](const SynthEdge& e) { return (e.from == a && e.to == b) || (e.from == b && e.to == a); });
  }

  // Weakly connected through the directed edges.
  bool connected() const {
    if (n_nodes == 0) return false;
    std::vector<std::size_t> parent(n_nodes);
    for (std::size_t i = 0; i < n_nodes; ++i) parent[i] = i;
    auto root = [&](std::size_t i) {
      while (parent[i] != i) i = parent[i] = parent[parent[i]];
      return i;
    };
    for (const auto& e : edges) parent[root(e.from)] = root(e.to);
    for (std::size_t i = 1; i < n_nodes; ++i)
      if (root(i) != root(0)) return false;
    return true;
  }
};

// Sensors on a one-way ring road (1 km apart, jittered) plus `shortcuts`
// long-range one-way links between sensors at least `shortcut_min_km` apart,
// far enough that the distance kernel gives them no static edge.
inline SynthNetwork make_synth_network(std::size_t n_nodes, std::uint64_t seed, std::size_t shortcuts = 3,
                                       double shortcut_min_km = 3.5) {
  if (n_nodes < 3) throw PreconditionError("synthetic network needs at least 3 nodes");
  std::mt19937_64 rng(seed ^ 0x5eed0f0adULL);
  std::uniform_real_distribution<double> jitter(-0.15, 0.15);
  SynthNetwork net;
  net.n_nodes = n_nodes;
  const double radius = static_cast<double>(n_nodes) / (2.0 * std::numbers::pi);
  for (std::size_t i = 0; i < n_nodes; ++i) {
    const double a = 2.0 * std::numbers::pi * (static_cast<double>(i) + jitter(rng)) / static_cast<double>(n_nodes);
    const double r = radius * (1.0 + jitter(rng) / 3.0);
    net.x.push_back(r * std::cos(a));
    net.y.push_back(r * std::sin(a));
  }
  for (std::size_t i = 0; i < n_nodes; ++i) net.edges.push_back({i, (i + 1) % n_nodes});
  std::uniform_int_distribution<std::size_t> pick(0, n_nodes - 1);
  std::size_t added = 0;
  for (std::size_t attempt = 0; added < shortcuts && attempt < 1000; ++attempt) {
    const std::size_t a = pick(rng), b = pick(rng);
    if (a == b || net.distance(a, b) < shortcut_min_km || net.adjacent(a, b)) continue;
    net.edges.push_back({a, b});
    ++added;
  }
  return net;
}

struct SynthOptions {
  std::size_t n_days = 20;
  std::uint64_t seed = 1;
  double congestion_rate = 0.004;  // event starts per node and step
  double noise = 1.0;              // additive Gaussian std (km/h)
  double damping = 0.6;            // congestion carried one hop downstream
  double free_flow = 60.0;
  double jam_speed = 15.0;
  std::uint32_t dt_seconds = 300;
  std::int64_t start_epoch = 1330905600;  // 2012-03-05T00:00 (a Monday)
};

// Speed = free_flow - daily dip - (base - jam) * congestion + noise, where a
// node's congestion is the larger of its own event intensity and the damped
// congestion of its upstream neighbours one step earlier.
inline SpeedSeries synth_generate(const SynthNetwork& net, const SynthOptions& o) {
  if (!net.connected()) throw PreconditionError("synth_generate: network must be connected");
  if (o.n_days < 1) throw PreconditionError("synth_generate: need at least one day");
  if (o.dt_seconds == 0 || kSecondsPerDay % o.dt_seconds != 0) {
    throw PreconditionError("synth_generate: step must divide a day");
  }
  const std::size_t n = net.n_nodes;
  const std::size_t spd = static_cast<std::size_t>(kSecondsPerDay / o.dt_seconds);
  const std::size_t steps = o.n_days * spd;
  std::mt19937_64 rng(o.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> duration(6, 24);
  std::normal_distribution<double> gauss(0.0, 1.0);

  std::vector<double> amplitude(n), phase(n);
  for (std::size_t k = 0; k < n; ++k) {
    amplitude[k] = 5.0 + 10.0 * unit(rng);
    phase[k] = 0.05 * (unit(rng) - 0.5);
  }
  const auto in = net.in_neighbors();

  SpeedSeries s;
  s.n_nodes = n;
  s.n_steps = steps;
  s.dt_seconds = o.dt_seconds;
  s.start_epoch = o.start_epoch;
  s.values.resize(steps * n);
  std::vector<double> cong(n, 0.0), prev(n, 0.0), intensity(n, 0.0);
  std::vector<int> remaining(n, 0);
  for (std::size_t t = 0; t < steps; ++t) {
    const double tod = time_of_day(s.timestamp(t));
    for (std::size_t k = 0; k < n; ++k) {
      if (remaining[k] == 0 && o.congestion_rate > 0 && unit(rng) < o.congestion_rate) {
        remaining[k] = duration(rng);
        intensity[k] = 0.6 + 0.4 * unit(rng);
      }
      double c = remaining[k] > 0 ? intensity[k] : 0.0;
      if (remaining[k] > 0) --remaining[k];
      for (std::size_t up : in[k]) c = std::max(c, o.damping * prev[up]);
      cong[k] = c;
      const double base = o.free_flow - amplitude[k] * 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * (tod + phase[k])));
      const double noise = o.noise > 0 ? o.noise * gauss(rng) : 0.0;
      s.at(t, k) = std::max(1.0, base - (base - o.jam_speed) * c + noise);
    }
    std::swap(prev, cong);
  }
  return s;
}

}  // namespace dgcrn
