#pragma once

// Recurrent cell with every dense map replaced by a dual-direction dynamic
// graph convolution, and the encoder/decoder built from it.

#include <cmath>
#include <cstddef>
#include <optional>
#include <random>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dgcrn/config.hpp"
#include "dgcrn/dgconv.hpp"
#include "dgcrn/dyngen.hpp"
#include "dgcrn/error.hpp"
#include "dgcrn/ops.hpp"
#include "dgcrn/tensor.hpp"

namespace dgcrn {

using Rng = std::mt19937_64;

template <class T>
struct CellParams {
  // Absent when the dynamic-graph term is switched off.
  std::optional<GeneratorParams<T>> generator;
  ConvParams<T> z_fwd, z_bwd;  // update gate
  ConvParams<T> r_fwd, r_bwd;  // reset gate
  ConvParams<T> c_fwd, c_bwd;  // candidate state
  Tensor<T> z_bias, r_bias, c_bias;

  std::size_t hidden() const { return z_fwd.out_dim(); }
};

template <class T>
struct ReadoutParams {
  Tensor<T> w1, b1;
  Tensor<T> w2, b2;  // undefined for the single-layer readout
};

template <class T>
struct ModelParams {
  ModelConfig config;
  std::size_t n_nodes = 0;
  CellParams<T> encoder;
  CellParams<T> decoder;
  ReadoutParams<T> readout;

  // Stable order; tensors shared between encoder and decoder appear once.
  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    std::unordered_set<const void*> seen;
    auto put = [&](const std::string& name, const Tensor<T>& t) {
      if (t.defined() && seen.insert(t.node().get()).second) out.emplace_back(name, t);
    };
    auto put_hyper = [&](const std::string& p, const HyperNetParams<T>& h) {
      put(p + "/gcn", h.gcn_weights);
      put(p + "/out_weight", h.out_weight);
      put(p + "/out_bias", h.out_bias);
    };
    auto put_cell = [&](const std::string& p, const CellParams<T>& c) {
      if (c.generator) {
        put(p + "/gen/emb_src", c.generator->emb_src);
        put(p + "/gen/emb_tgt", c.generator->emb_tgt);
        if (!c.generator->fixed_filters) {
          put_hyper(p + "/gen/hyper_src", c.generator->hyper_src);
          put_hyper(p + "/gen/hyper_tgt", c.generator->hyper_tgt);
        }
      }
      put(p + "/z_fwd", c.z_fwd.weights);
      put(p + "/z_bwd", c.z_bwd.weights);
      put(p + "/r_fwd", c.r_fwd.weights);
      put(p + "/r_bwd", c.r_bwd.weights);
      put(p + "/c_fwd", c.c_fwd.weights);
      put(p + "/c_bwd", c.c_bwd.weights);
      put(p + "/z_bias", c.z_bias);
      put(p + "/r_bias", c.r_bias);
      put(p + "/c_bias", c.c_bias);
    };
    put_cell("encoder", encoder);
    put_cell("decoder", decoder);
    put("readout/w1", readout.w1);
    put("readout/b1", readout.b1);
    put("readout/w2", readout.w2);
    put("readout/b2", readout.b2);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named_parameters()) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& [name, t] : named_parameters()) {
      auto copy = t;
      copy.zero_grad();
    }
  }
};

// ---------------------------------------------------------------------------
// Initialization: weights U(+-1/sqrt(fan_in)), embeddings N(0,1), biases 0.

namespace detail {

template <class T>
Tensor<T> uniform_param(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(u(rng));
  return Tensor<T>::parameter(std::move(shape), std::move(v));
}

template <class T>
Tensor<T> normal_param(Shape shape, Rng& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(nd(rng));
  return Tensor<T>::parameter(std::move(shape), std::move(v));
}

template <class T>
Tensor<T> zero_param(Shape shape) {
  return Tensor<T>::parameter(shape, std::vector<T>(numel(shape), T(0)));
}

template <class T>
HyperNetParams<T> init_hyper(const ModelConfig& c, std::size_t in_dim, std::size_t out_dim, Rng& rng) {
  HyperNetParams<T> h;
  h.mix = Mixing{c.hyper_alpha_mix, 0.0, c.hyper_gamma_mix};
  std::size_t proj_in = in_dim;
  if (c.use_hypernet) {
    h.gcn_weights = uniform_param<T>({c.hyper_hops + 1, in_dim, c.hyper_dim}, (c.hyper_hops + 1) * in_dim, rng);
    proj_in = c.hyper_dim;
  }
  h.out_weight = uniform_param<T>({proj_in, out_dim}, proj_in, rng);
  h.out_bias = zero_param<T>({out_dim});
  return h;
}

template <class T>
CellParams<T> init_cell(const ModelConfig& c, std::size_t n_nodes, std::size_t x_dim, Rng& rng,
                        const GeneratorParams<T>* share_from) {
  CellParams<T> cell;
  const std::size_t h = c.hidden;
  const std::size_t in = x_dim + h;
  if (c.uses_dynamic_graph()) {
    GeneratorParams<T> g;
    g.alpha_sat = c.alpha_sat;
    g.mode = c.filter_mode;
    g.fixed_filters = c.fixed_filters;
    if (share_from) {
      g.emb_src = share_from->emb_src;
      g.emb_tgt = share_from->emb_tgt;
    } else {
      g.emb_src = normal_param<T>({n_nodes, c.embed_dim}, rng);
      g.emb_tgt = normal_param<T>({n_nodes, c.embed_dim}, rng);
    }
    if (!c.fixed_filters) {
      const std::size_t out = c.filter_mode == FilterMode::hadamard ? c.embed_dim : c.embed_dim * c.embed_dim;
      g.hyper_src = init_hyper<T>(c, in, out, rng);
      g.hyper_tgt = init_hyper<T>(c, in, out, rng);
    }
    cell.generator = std::move(g);
  }
  const Mixing mix{c.alpha_mix, c.beta_mix, c.gamma_mix};
  auto conv = [&](std::size_t out) {
    return ConvParams<T>{uniform_param<T>({c.hops + 1, in, out}, (c.hops + 1) * in, rng), mix};
  };
  cell.z_fwd = conv(h);
  cell.z_bwd = conv(h);
  cell.r_fwd = conv(h);
  cell.r_bwd = conv(h);
  cell.c_fwd = conv(h);
  cell.c_bwd = conv(h);
  cell.z_bias = zero_param<T>({h});
  cell.r_bias = zero_param<T>({h});
  cell.c_bias = zero_param<T>({h});
  return cell;
}

}  // namespace detail

// Speed and time of day are the two input channels of both halves.
inline constexpr std::size_t kInputChannels = 2;

template <class T>
ModelParams<T> init_model(const ModelConfig& config, std::size_t n_nodes, std::uint64_t seed) {
  if (n_nodes == 0) throw PreconditionError("init_model: need at least one node");
  Rng rng(seed);
  ModelParams<T> m;
  m.config = config;
  m.n_nodes = n_nodes;
  m.encoder = detail::init_cell<T>(config, n_nodes, kInputChannels, rng, nullptr);
  const GeneratorParams<T>* shared =
      config.share_embeddings && m.encoder.generator ? &*m.encoder.generator : nullptr;
  m.decoder = detail::init_cell<T>(config, n_nodes, kInputChannels, rng, shared);
  const std::size_t h = config.hidden;
  if (config.readout_layers == 2) {
    m.readout.w1 = detail::uniform_param<T>({h, h}, h, rng);
    m.readout.b1 = detail::zero_param<T>({h});
    m.readout.w2 = detail::uniform_param<T>({h, 1}, h, rng);
    m.readout.b2 = detail::zero_param<T>({1});
  } else {
    m.readout.w1 = detail::uniform_param<T>({h, 1}, h, rng);
    m.readout.b1 = detail::zero_param<T>({1});
  }
  return m;
}

// ---------------------------------------------------------------------------
// Forward pass

template <class T>
struct CellOutput {
  Tensor<T> hidden;
  std::optional<DynamicGraph<T>> graph;
};

// One recurrent step. `speed` and `time_of_day` are [B,N,1], `h_prev` is
// [B,N,h]. The generator input and the gate input coincide
// (speed || time || hidden), so both read the same concatenation.
template <class T>
CellOutput<T> cell_step(const Tensor<T>& speed, const Tensor<T>& time_of_day, const Tensor<T>& h_prev,
                        const GraphTensors<T>& g, const CellParams<T>& p, std::size_t step = 0) {
  if (h_prev.rank() != 3 || h_prev.dim(-1) != p.hidden()) {
    throw DimensionError("cell_step: hidden state " + shape_str(h_prev.shape()) + " vs hidden size " +
                         std::to_string(p.hidden()));
  }
  if (h_prev.dim(1) != g.n_nodes) {
    throw DimensionError("cell_step: " + std::to_string(h_prev.dim(1)) + " nodes in state, " +
                         std::to_string(g.n_nodes) + " in graph");
  }
  auto xh = assemble_hyper_input(speed, time_of_day, h_prev);

  CellOutput<T> out;
  if (p.generator) out.graph = generate_graph(xh, g, *p.generator);
  const Tensor<T>* dyn_f = out.graph ? &out.graph->normalized : nullptr;
  const Tensor<T>* dyn_b = out.graph ? &out.graph->normalized_t : nullptr;
  const std::size_t hops = p.z_fwd.hops();
  const Mixing& mix = p.z_fwd.mix;

  // z and r read the same input through the same graphs; only the
  // projections differ, so the hop states are shared.
  auto hops_f = propagate(xh, dyn_f, g.forward, mix, hops);
  auto hops_b = propagate(xh, dyn_b, g.backward, mix, hops);
  auto z = sigmoid(add(add(project(hops_f, p.z_fwd.weights), project(hops_b, p.z_bwd.weights)), p.z_bias));
  auto r = sigmoid(add(add(project(hops_f, p.r_fwd.weights), project(hops_b, p.r_bwd.weights)), p.r_bias));

  auto xrh = concat_last<T>({speed, time_of_day, mul(r, h_prev)});
  auto cand_f = propagate(xrh, dyn_f, g.forward, mix, hops);
  auto cand_b = propagate(xrh, dyn_b, g.backward, mix, hops);
  auto cand = tanh(add(add(project(cand_f, p.c_fwd.weights), project(cand_b, p.c_bwd.weights)), p.c_bias));

  // z * h_prev + (1 - z) * cand
  out.hidden = add(cand, mul(z, sub(h_prev, cand)));
  if (!out.hidden.all_finite()) {
    throw NumericError("non-finite hidden state at recurrent step " + std::to_string(step));
  }
  return out;
}

// [B,N,h] -> [B,N] speed in normalized units.
template <class T>
Tensor<T> readout(const Tensor<T>& h, const ReadoutParams<T>& p) {
  const std::size_t b = h.dim(0), n = h.dim(1);
  Tensor<T> y = affine(h, p.w1, p.b1);
  if (p.w2.defined()) y = affine(relu(y), p.w2, p.b2);
  return reshape(y, {b, n});
}

template <class T>
struct EncodeResult {
  Tensor<T> h_final;
  std::vector<Tensor<T>> trace;
  std::vector<DynamicGraph<T>> graphs;
};

namespace detail {

// [B,S,N,C] -> channel c of step s as [B,N,1].
template <class T>
Tensor<T> channel_at(const Tensor<T>& seq, std::size_t step, std::size_t channel) {
  auto x = select(seq, 1, step);  // [B,N,C]
  auto c = select(x, 2, channel);
  return reshape(c, {seq.dim(0), seq.dim(2), 1});
}

}  // namespace detail

// x_seq: [B,P,N,2] with channel 0 = speed, channel 1 = time of day.
template <class T>
EncodeResult<T> encode(const Tensor<T>& x_seq, const GraphTensors<T>& g, const ModelParams<T>& params) {
  if (x_seq.rank() != 4 || x_seq.dim(3) != kInputChannels) {
    throw DimensionError("encode: expected [B,P,N,2], got " + shape_str(x_seq.shape()));
  }
  const std::size_t steps = x_seq.dim(1);
  if (steps == 0) throw PreconditionError("encode: need at least one input step");
  EncodeResult<T> res;
  Tensor<T> h = Tensor<T>::zeros({x_seq.dim(0), x_seq.dim(2), params.config.hidden});
  for (std::size_t p = 0; p < steps; ++p) {
    auto out = cell_step(detail::channel_at(x_seq, p, 0), detail::channel_at(x_seq, p, 1), h, g,
                         params.encoder, p);
    h = out.hidden;
    res.trace.push_back(h);
    if (out.graph) res.graphs.push_back(std::move(*out.graph));
  }
  res.h_final = h;
  return res;
}

template <class T>
struct DecodeResult {
  Tensor<T> predictions;  // [B,i,N]
  std::vector<Tensor<T>> steps;  // i tensors of [B,N]
  std::vector<DynamicGraph<T>> graphs;
  std::size_t cell_steps = 0;
  std::size_t teacher_picks = 0;
};

// Autoregressive decoder. The first input speed is zero; afterwards each
// step's input speed is the label with probability sampling_prob (one coin
// per step) and the model's own prediction otherwise.
template <class T>
DecodeResult<T> decode(const Tensor<T>& h_init, const Tensor<T>& time_seq, const GraphTensors<T>& g,
                       const ModelParams<T>& params, const Tensor<T>* teacher, double sampling_prob,
                       std::size_t horizon, Rng& rng) {
  if (time_seq.rank() != 4 || time_seq.dim(3) != 1) {
    throw DimensionError("decode: time sequence must be [B,Q,N,1], got " + shape_str(time_seq.shape()));
  }
  const std::size_t b = h_init.dim(0), n = h_init.dim(1), q = time_seq.dim(1);
  if (horizon < 1 || horizon > q) {
    throw PreconditionError("decode: horizon " + std::to_string(horizon) + " outside [1," + std::to_string(q) + "]");
  }
  if (!(sampling_prob >= 0.0 && sampling_prob <= 1.0)) {
    throw PreconditionError("decode: sampling probability must lie in [0,1]");
  }
  if (!teacher && sampling_prob != 0.0) {
    throw PreconditionError("decode: sampling probability must be 0 without teacher labels");
  }
  if (teacher && (teacher->rank() != 3 || teacher->dim(0) != b || teacher->dim(1) != q || teacher->dim(2) != n)) {
    throw DimensionError("decode: teacher labels must be [B,Q,N], got " + shape_str(teacher->shape()));
  }

  DecodeResult<T> res;
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  Tensor<T> y_in = Tensor<T>::zeros({b, n, 1});
  Tensor<T> h = h_init;
  std::vector<Tensor<T>> columns;
  for (std::size_t step = 0; step < horizon; ++step) {
    auto tod = reshape(select(time_seq, 1, step), {b, n, 1});
    auto out = cell_step(y_in, tod, h, g, params.decoder, step);
    h = out.hidden;
    ++res.cell_steps;
    if (out.graph) res.graphs.push_back(std::move(*out.graph));
    auto pred = readout(h, params.readout);
    res.steps.push_back(pred);
    columns.push_back(reshape(pred, {b, n, 1}));
    if (teacher && coin(rng) < sampling_prob) {
      y_in = reshape(select(*teacher, 1, step), {b, n, 1});
      ++res.teacher_picks;
    } else {
      y_in = reshape(pred, {b, n, 1});
    }
  }
  res.predictions = transpose_last2(concat_last(columns));
  return res;
}

}  // namespace dgcrn
