#pragma once

// Step-wise dynamic graph generator.
//
// A small graph-convolutional hyper-network turns the current node features
// (speed, time of day, previous hidden state) into a dynamic filter. The
// filter modulates a learnable node embedding, and the antisymmetric
// similarity of the two modulated embeddings becomes the adjacency for this
// step and batch element.

#include <cstddef>
#include <optional>
#include <string>
#include <utility>

#include "dgcrn/dgconv.hpp"
#include "dgcrn/error.hpp"
#include "dgcrn/ops.hpp"
#include "dgcrn/tensor.hpp"

namespace dgcrn {

enum class FilterMode {
  hadamard,  // DE = tanh(a * (DF (.) E))
  matmul,    // DF reshaped to [B,N,D,D]; DE row = tanh(a * E row . DF)
};

// With gcn_weights undefined the hyper-network degenerates to one affine map
// D_in -> D_out (the "no hyper-network" ablation).
template <class T>
struct HyperNetParams {
  Tensor<T> gcn_weights;  // [K_h+1, D_in, D_h]
  Mixing mix{0.05, 0.0, 0.95};
  Tensor<T> out_weight;   // [D_h or D_in, D_out]
  Tensor<T> out_bias;     // [D_out]

  bool has_gcn() const { return gcn_weights.defined(); }
};

template <class T>
struct GeneratorParams {
  HyperNetParams<T> hyper_src;
  HyperNetParams<T> hyper_tgt;
  Tensor<T> emb_src;  // E1 [N, D_e]
  Tensor<T> emb_tgt;  // E2 [N, D_e]
  double alpha_sat = 3.0;
  FilterMode mode = FilterMode::hadamard;
  // Filters pinned to 1: the graph no longer depends on the step and reduces
  // to the static adaptive graph of the embeddings.
  bool fixed_filters = false;

  std::size_t n_nodes() const { return emb_src.dim(0); }
  std::size_t embed_dim() const { return emb_src.dim(1); }
};

// I_t = speed || time_of_day || hidden on the last axis.
template <class T>
Tensor<T> assemble_hyper_input(const Tensor<T>& speed, const Tensor<T>& time_of_day,
                               const Tensor<T>& hidden) {
  auto check = [](const char* what, const Tensor<T>& t) {
    if (t.rank() != 3) throw DimensionError(std::string("hyper input: ") + what + " must be [B,N,d], got " + shape_str(t.shape()));
  };
  check("speed", speed);
  check("time_of_day", time_of_day);
  check("hidden", hidden);
  if (speed.dim(-1) != 1) throw DimensionError("hyper input: speed must have one channel, got " + shape_str(speed.shape()));
  if (time_of_day.dim(-1) != 1) throw DimensionError("hyper input: time_of_day must have one channel, got " + shape_str(time_of_day.shape()));
  for (const auto* other : {&time_of_day, &hidden}) {
    if (other->dim(0) != speed.dim(0) || other->dim(1) != speed.dim(1)) {
      throw DimensionError(std::string("hyper input: ") + (other == &hidden ? "hidden " : "time_of_day ") +
                           shape_str(other->shape()) + " disagrees with speed " + shape_str(speed.shape()));
    }
  }
  return concat_last<T>({speed, time_of_day, hidden});
}

// Dynamic filter DF^t: static-graph convolution (no dynamic term) followed by
// a node-shared affine projection.
template <class T>
Tensor<T> hyper_forward(const Tensor<T>& input, const GraphTensors<T>& graph,
                        const HyperNetParams<T>& p) {
  if (input.rank() != 3 || input.dim(1) != graph.n_nodes) {
    throw DimensionError("hyper_forward: input " + shape_str(input.shape()) + " vs graph of " +
                         std::to_string(graph.n_nodes) + " nodes");
  }
  if (!p.has_gcn()) return affine(input, p.out_weight, p.out_bias);
  ConvParams<T> conv{p.gcn_weights, Mixing{p.mix.alpha, 0.0, p.mix.gamma}};
  return affine(dgconv_forward<T>(input, nullptr, graph.forward, conv), p.out_weight, p.out_bias);
}

template <class T>
Tensor<T> modulate(const Tensor<T>& filter, const Tensor<T>& embedding, double alpha_sat,
                   FilterMode mode) {
  const T a = static_cast<T>(alpha_sat);
  if (mode == FilterMode::hadamard) return tanh(scale(broadcast_hadamard(filter, embedding), a));
  const std::size_t b = filter.dim(0), n = embedding.dim(0), d = embedding.dim(1);
  if (filter.rank() != 3 || filter.dim(1) != n || filter.dim(2) != d * d) {
    throw DimensionError("matmul filter " + shape_str(filter.shape()) + " must be [B," +
                         std::to_string(n) + "," + std::to_string(d * d) + "]");
  }
  auto rows = reshape(embedding, {n, 1, d});
  auto mats = reshape(filter, {b, n, d, d});
  return tanh(scale(reshape(matmul(rows, mats), {b, n, d}), a));
}

template <class T>
std::pair<Tensor<T>, Tensor<T>> dynamic_embeddings(const Tensor<T>& df_src, const Tensor<T>& df_tgt,
                                                   const GeneratorParams<T>& p) {
  return {modulate(df_src, p.emb_src, p.alpha_sat, p.mode),
          modulate(df_tgt, p.emb_tgt, p.alpha_sat, p.mode)};
}

// raw = ReLU(tanh(a * (M - M^T))), M = DE1 DE2^T. Forming the antisymmetric
// part from a single product keeps the diagonal exactly zero and makes every
// positive pair strictly one-directional.
template <class T>
DynamicGraph<T> dynamic_adjacency(const Tensor<T>& de_src, const Tensor<T>& de_tgt, double alpha_sat) {
  if (de_src.shape() != de_tgt.shape() || de_src.rank() != 3) {
    throw DimensionError("dynamic_adjacency: embeddings " + shape_str(de_src.shape()) + " and " +
                         shape_str(de_tgt.shape()) + " must be equal [B,N,D]");
  }
  if (!(alpha_sat > 0)) throw ConfigError("dynamic_adjacency: saturation rate must be positive");
  auto m = matmul(de_src, transpose_last2(de_tgt));
  auto raw = relu(tanh(scale(sub(m, transpose_last2(m)), static_cast<T>(alpha_sat))));
  DynamicGraph<T> g;
  g.normalized = normalize_with_self_loop(raw);
  g.normalized_t = normalize_with_self_loop(transpose_last2(raw));
  g.raw = std::move(raw);
  return g;
}

// The step-independent adaptive graph built from the embeddings alone.
template <class T>
DynamicGraph<T> static_adaptive_graph(const GeneratorParams<T>& p) {
  const std::size_t n = p.n_nodes(), d = p.embed_dim();
  const T a = static_cast<T>(p.alpha_sat);
  auto t1 = reshape(tanh(scale(p.emb_src, a)), {1, n, d});
  auto t2 = reshape(tanh(scale(p.emb_tgt, a)), {1, n, d});
  return dynamic_adjacency(t1, t2, p.alpha_sat);
}

// Full generator pass for one step.
template <class T>
DynamicGraph<T> generate_graph(const Tensor<T>& hyper_input, const GraphTensors<T>& graph,
                               const GeneratorParams<T>& p) {
  if (p.fixed_filters) {
    auto ones = Tensor<T>::ones({hyper_input.dim(0), p.n_nodes(), p.embed_dim()});
    auto de1 = modulate(ones, p.emb_src, p.alpha_sat, FilterMode::hadamard);
    auto de2 = modulate(ones, p.emb_tgt, p.alpha_sat, FilterMode::hadamard);
    return dynamic_adjacency(de1, de2, p.alpha_sat);
  }
  auto df_src = hyper_forward(hyper_input, graph, p.hyper_src);
  auto df_tgt = hyper_forward(hyper_input, graph, p.hyper_tgt);
  auto [de1, de2] = dynamic_embeddings(df_src, df_tgt, p);
  return dynamic_adjacency(de1, de2, p.alpha_sat);
}

}  // namespace dgcrn
