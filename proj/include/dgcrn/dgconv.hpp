#pragma once

// K-hop graph convolution that mixes the input signal, a dynamic graph and
// the static graph at every hop, then projects each hop with its own weight:
//
//   H(0) = H_in
//   H(k) = alpha * H_in + beta * DA~ H(k-1) + gamma * A~ H(k-1)
//   H_out = sum_k H(k) W(k)
//
// Aggregation runs over the node axis: row n of a normalized graph gathers
// from the nodes it points at.

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "dgcrn/error.hpp"
#include "dgcrn/graph_static.hpp"
#include "dgcrn/ops.hpp"
#include "dgcrn/tensor.hpp"

namespace dgcrn {

struct Mixing {
  double alpha = 0.05;
  double beta = 0.95;
  double gamma = 0.95;
};

template <class T>
struct ConvParams {
  Tensor<T> weights;  // [K+1, D_in, D_out]
  Mixing mix;

  std::size_t hops() const { return weights.dim(0) - 1; }
  std::size_t in_dim() const { return weights.dim(1); }
  std::size_t out_dim() const { return weights.dim(2); }
};

// Static graph in both orientations, converted once per run.
template <class T>
struct GraphTensors {
  std::size_t n_nodes = 0;
  Tensor<T> forward;   // [N,N] row-stochastic D^-1 A
  Tensor<T> backward;  // [N,N] row-stochastic from A^T

  static GraphTensors from(const StaticGraph& g) {
    return {g.n_nodes, g.forward_tensor<T>(), g.backward_tensor<T>()};
  }
};

// out[b,n,:] = sum_m graph[b or -, n, m] * h[b,m,:]
template <class T>
Tensor<T> aggregate(const Tensor<T>& graph, const Tensor<T>& h) {
  return matmul(graph, h);
}

// All hop states H(0..K) concatenated on the last axis: [B,N,(K+1)*D_in].
// Terms whose coefficient is exactly zero are skipped, so beta = 0 with no
// dynamic graph and beta = 0 with one give bit-identical results.
template <class T>
Tensor<T> propagate(const Tensor<T>& h_in, const Tensor<T>* dynamic_norm,
                    const Tensor<T>& static_norm, const Mixing& mix, std::size_t hops) {
  if (mix.beta != 0.0 && dynamic_norm == nullptr) {
    throw ConfigError("graph convolution: beta > 0 requires a dynamic graph");
  }
  if (h_in.rank() < 2 || static_norm.dim(-1) != h_in.dim(-2)) {
    throw DimensionError("graph convolution: static graph " + shape_str(static_norm.shape()) +
                         " does not match node axis of " + shape_str(h_in.shape()));
  }
  if (dynamic_norm && dynamic_norm->dim(-1) != h_in.dim(-2)) {
    throw DimensionError("graph convolution: dynamic graph " + shape_str(dynamic_norm->shape()) +
                         " does not match node axis of " + shape_str(h_in.shape()));
  }
  std::vector<Tensor<T>> states{h_in};
  states.reserve(hops + 1);
  std::optional<Tensor<T>> skip;
  if (mix.alpha != 0.0) skip = scale(h_in, static_cast<T>(mix.alpha));
  for (std::size_t k = 1; k <= hops; ++k) {
    const Tensor<T>& prev = states.back();
    std::optional<Tensor<T>> acc = skip;
    auto accumulate = [&acc](Tensor<T> term) { acc = acc ? add(*acc, term) : std::move(term); };
    if (mix.beta != 0.0) accumulate(scale(aggregate(*dynamic_norm, prev), static_cast<T>(mix.beta)));
    if (mix.gamma != 0.0) accumulate(scale(aggregate(static_norm, prev), static_cast<T>(mix.gamma)));
    states.push_back(acc ? *acc : scale(prev, T(0)));
  }
  return states.size() == 1 ? states.front() : concat_last(states);
}

// sum_k H(k) W(k) as one product against the stacked weights.
template <class T>
Tensor<T> project(const Tensor<T>& hop_states, const Tensor<T>& weights) {
  const std::size_t rows = weights.dim(0) * weights.dim(1);
  if (hop_states.dim(-1) != rows) {
    throw DimensionError("graph convolution: hop states " + shape_str(hop_states.shape()) +
                         " do not match weights " + shape_str(weights.shape()));
  }
  return matmul(hop_states, reshape(weights, {rows, weights.dim(2)}));
}

template <class T>
Tensor<T> dgconv_forward(const Tensor<T>& h_in, const Tensor<T>* dynamic_norm,
                         const Tensor<T>& static_norm, const ConvParams<T>& p) {
  if (p.weights.rank() != 3 || p.in_dim() != h_in.dim(-1)) {
    throw DimensionError("graph convolution: weights " + shape_str(p.weights.shape()) +
                         " do not accept input " + shape_str(h_in.shape()));
  }
  return project(propagate(h_in, dynamic_norm, static_norm, p.mix, p.hops()), p.weights);
}

// Per-step, per-batch generated graph. raw is DA^t; normalized adds the self
// loop and rescales rows; normalized_t does the same for raw^T.
template <class T>
struct DynamicGraph {
  Tensor<T> raw;           // [B,N,N], entries in [0,1)
  Tensor<T> normalized;    // [B,N,N], row-stochastic
  Tensor<T> normalized_t;  // [B,N,N], row-stochastic
};

// Forward orientation (DA~, A~) plus reversed orientation (renormalized DA^T,
// A^T) with independent weights, summed.
template <class T>
Tensor<T> dual_dgconv(const Tensor<T>& h_in, const DynamicGraph<T>* dyn, const GraphTensors<T>& g,
                      const ConvParams<T>& p_fwd, const ConvParams<T>& p_bwd) {
  const Tensor<T>* dyn_f = dyn ? &dyn->normalized : nullptr;
  const Tensor<T>* dyn_b = dyn ? &dyn->normalized_t : nullptr;
  return add(dgconv_forward(h_in, dyn_f, g.forward, p_fwd),
             dgconv_forward(h_in, dyn_b, g.backward, p_bwd));
}

}  // namespace dgcrn
