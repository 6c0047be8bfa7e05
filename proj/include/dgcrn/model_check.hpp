#pragma once

// End-to-end gradient check: masked MAE through encoder, decoder, dynamic
// graph generator and dual graph convolutions, against central differences
// on every parameter of a tiny double-precision model.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "dgcrn/config.hpp"
#include "dgcrn/dgcrm.hpp"
#include "dgcrn/gradcheck.hpp"
#include "dgcrn/graph_static.hpp"
#include "dgcrn/training.hpp"

namespace dgcrn {

struct GradcheckOptions {
  std::size_t nodes = 3;
  std::size_t input_len = 2;
  std::size_t output_len = 2;
  std::size_t hidden = 4;
  std::size_t hops = 2;
  std::size_t embed_dim = 3;
  std::size_t hyper_dim = 3;
  std::size_t batch = 2;
  double sampling_prob = 0.5;
  double eps = 1e-5;
  double floor = 1e-6;
  std::string ablation = "none";
};

struct ParameterCheck {
  std::string name;
  std::size_t size = 0;
  double max_rel_error = 0;
};

struct GradcheckReport {
  std::vector<ParameterCheck> parameters;
  double max_rel_error = 0;
  std::size_t evaluations = 0;
};

inline GradcheckReport gradcheck_model(std::uint64_t seed, const GradcheckOptions& o = {}) {
  using T = double;
  Config cfg;
  cfg.model.hidden = o.hidden;
  cfg.model.hops = o.hops;
  cfg.model.hyper_hops = o.hops;
  cfg.model.embed_dim = o.embed_dim;
  cfg.model.hyper_dim = o.hyper_dim;
  cfg.model.input_len = o.input_len;
  cfg.model.output_len = o.output_len;
  apply_ablation(cfg, o.ablation);
  auto params = init_model<T>(cfg.model, o.nodes, seed);

  Rng rng(seed + 1);
  std::uniform_real_distribution<double> u(0.2, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  SquareMatrix adj(o.nodes, 0.0);
  for (std::size_t i = 0; i < o.nodes; ++i)
    for (std::size_t j = 0; j < o.nodes; ++j) adj(i, j) = i == j ? 1.0 : u(rng);
  const auto graph = GraphTensors<T>::from(graph_from_adjacency(adj));

  const std::size_t b = o.batch, p = o.input_len, q = o.output_len, n = o.nodes;
  std::vector<T> x(b * p * n * 2), tod(b * q * n), teacher(b * q * n), target(b * q * n), mask(b * q * n, 1.0);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = i % 2 ? u(rng) : gauss(rng);
  for (auto& v : tod) v = u(rng);
  for (std::size_t i = 0; i < target.size(); ++i) {
    teacher[i] = gauss(rng);
    target[i] = teacher[i];
  }
  mask[1] = 0.0;
  target[1] = 0.0;
  const Tensor<T> xs({b, p, n, 2}, x), ts({b, q, n, 1}, tod), tt({b, q, n}, teacher);
  // Identity stats keep the loss O(1), which keeps central-difference rounding
  // noise well under the tolerance.
  const NormStats stats{0.0, 1.0};

  GradcheckReport rep;
  auto loss_of = [&]() {
    Rng coins(seed + 2);  // same coin sequence on every evaluation
    auto enc = encode(xs, graph, params);
    auto dec = decode(enc.h_final, ts, graph, params, &tt, o.sampling_prob, q, coins);
    ++rep.evaluations;
    return masked_mae_loss(dec.predictions, target, mask, q, stats);
  };

  params.zero_grad();
  loss_of().backward();
  for (auto& [name, t] : params.named_parameters()) {
    const auto analytic = t.grad();
    Tensor<T> handle = t;
    std::function<T(const Tensor<T>&)> f = [&](const Tensor<T>&) {
      NoGradGuard no_grad;
      return loss_of().item();
    };
    const auto numeric = finite_diff_grad<T>(f, handle, o.eps);
    ParameterCheck pc;
    pc.name = name;
    pc.size = t.size();
    pc.max_rel_error = max_relative_error<T>(analytic, numeric.data(), o.floor);
    rep.max_rel_error = std::max(rep.max_rel_error, pc.max_rel_error);
    rep.parameters.push_back(pc);
  }
  return rep;
}

}  // namespace dgcrn
