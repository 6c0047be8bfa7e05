#pragma once

// Shared helpers for the unit tests: seeded random tensors and a
// backprop-versus-central-difference comparison for small graphs.

#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "dgcrn/dgcrn.hpp"

namespace dgcrn::test {

using Rng = std::mt19937_64;

inline std::vector<double> uniform_values(std::size_t n, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

inline Tensor<double> random_param(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  const auto n = numel(shape);
  return Tensor<double>::parameter(std::move(shape), uniform_values(n, rng, lo, hi));
}

// Max relative error between backprop and central differences over every
// input, for a scalar function rebuilt from the inputs on each call.
inline double op_gradcheck(std::vector<Tensor<double>> inputs,
                           const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& f,
                           double eps = 1e-5) {
  for (auto& t : inputs) t.zero_grad();
  f(inputs).backward();
  double worst = 0;
  for (auto& t : inputs) {
    const auto analytic = t.grad();
    std::function<double(const Tensor<double>&)> g = [&](const Tensor<double>&) {
      NoGradGuard off;
      return f(inputs).item();
    };
    const auto numeric = finite_diff_grad<double>(g, t, eps);
    worst = std::max(worst, max_relative_error<double>(analytic, numeric.data()));
  }
  return worst;
}

// Weighted sum with fixed pseudo-random weights, so every output entry gets
// a distinct upstream gradient.
inline Tensor<double> probe(const Tensor<double>& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  Tensor<double> w(y.shape(), uniform_values(y.size(), rng, 0.5, 1.5));
  return sum(mul(y, w));
}

inline SpeedSeries constant_series(std::size_t nodes, std::size_t steps, double v) {
  SpeedSeries s;
  s.n_nodes = nodes;
  s.n_steps = steps;
  s.dt_seconds = 300;
  s.start_epoch = 1330905600;
  s.values.assign(nodes * steps, v);
  return s;
}

}  // namespace dgcrn::test
