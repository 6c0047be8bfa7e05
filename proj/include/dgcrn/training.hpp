#pragma once

// Training loop: curriculum horizon, scheduled sampling, Adam with global
// gradient-norm clipping, early stopping, training log and checkpoints.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dgcrn/config.hpp"
#include "dgcrn/data.hpp"
#include "dgcrn/dgcrm.hpp"
#include "dgcrn/error.hpp"
#include "dgcrn/eval.hpp"
#include "dgcrn/io.hpp"

namespace dgcrn {

// Value of i at 1-based iteration `iter`: bumped every s iterations, capped at q.
inline std::size_t curriculum_horizon(std::size_t iter, std::size_t s, std::size_t q) {
  if (iter < 1 || s < 1 || q < 1) throw PreconditionError("curriculum_horizon: iter, s and q must be >= 1");
  return std::min(q, 1 + iter / s);
}

// Inverse-sigmoid decay tau / (tau + exp(iter / tau)); 0 once exp overflows.
inline double scheduled_sampling_prob(std::size_t iter, std::size_t tau) {
  if (tau < 1) throw PreconditionError("scheduled_sampling_prob: tau must be >= 1");
  const double t = static_cast<double>(tau);
  const double e = std::exp(static_cast<double>(iter) / t);
  if (!std::isfinite(e)) return 0.0;
  return t / (t + e);
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamOptions {
  double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

template <class T>
class Adam {
 public:
  Adam() = default;
  explicit Adam(std::vector<Tensor<T>> params) : params_(std::move(params)) {
    for (const auto& p : params_) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }

  std::size_t steps() const { return t_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

  // sqrt of the sum of squared gradients over all parameters.
  double grad_norm() const {
    double s = 0;
    for (const auto& p : params_)
      if (p.has_grad())
        for (T g : p.node()->grad) s += static_cast<double>(g) * static_cast<double>(g);
    return std::sqrt(s);
  }

  // One update. Gradients are rescaled first so their global norm is at most
  // `clip` (inf disables clipping). Returns the pre-clip norm.
  double step(const AdamOptions& o, double clip) {
    const double norm = grad_norm();
    const double factor = std::isfinite(clip) && norm > clip ? clip / norm : 1.0;
    ++t_;
    const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      if (!p.has_grad()) p.mutable_grad();
      const auto& g = p.node()->grad;
      auto val = p.mutable_data();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < val.size(); ++i) {
        const double gi = static_cast<double>(g[i]) * factor;
        m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * gi;
        v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * gi * gi;
        const double upd = o.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + o.eps);
        val[i] = static_cast<T>(static_cast<double>(val[i]) - upd);
      }
    }
    return norm;
  }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Loss and one step

// Masked MAE in speed units over the first `horizon` decoder steps.
// `pred_norm` is [B,horizon,N] in normalized units; target/mask are [B,Q,N].
template <class T>
Tensor<T> masked_mae_loss(const Tensor<T>& pred_norm, const std::vector<T>& target, const std::vector<T>& mask,
                          std::size_t q, const NormStats& stats) {
  const std::size_t b = pred_norm.dim(0), h = pred_norm.dim(1), n = pred_norm.dim(2);
  if (h > q || target.size() != b * q * n || mask.size() != target.size()) {
    throw DimensionError("masked_mae_loss: predictions " + shape_str(pred_norm.shape()) + " vs Q=" + std::to_string(q));
  }
  std::vector<T> tgt(b * h * n), msk(b * h * n);
  double count = 0;
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t s = 0; s < h; ++s)
      for (std::size_t k = 0; k < n; ++k) {
        tgt[(i * h + s) * n + k] = target[(i * q + s) * n + k];
        msk[(i * h + s) * n + k] = mask[(i * q + s) * n + k];
        count += static_cast<double>(mask[(i * q + s) * n + k]);
      }
  auto pred = add_scalar(scale(pred_norm, static_cast<T>(stats.std)), static_cast<T>(stats.mean));
  auto total = masked_abs_sum<T>(pred, tgt, msk);
  if (count == 0) return scale(total, T(0));
  return scale(total, static_cast<T>(1.0 / count));
}

template <class T>
struct TrainState {
  std::size_t iter = 0;     // completed optimizer steps
  std::size_t horizon = 1;  // i used by the latest step
  double ss_prob = 1.0;
  Adam<T> optimizer;
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  std::size_t epochs_since_best = 0;
  std::size_t decoder_cell_steps = 0;
  std::size_t teacher_picks = 0;
  Rng coin_rng;
  Rng shuffle_rng;

  TrainState() = default;
  TrainState(const ModelParams<T>& params, std::uint64_t seed)
      : coin_rng(seed ^ 0xc01dc0ffeeULL), shuffle_rng(seed ^ 0x5a17f00dULL) {
    std::vector<Tensor<T>> ps;
    for (auto& [name, t] : params.named_parameters()) ps.push_back(t);
    optimizer = Adam<T>(std::move(ps));
  }
};

struct StepResult {
  double loss = 0;
  std::size_t horizon = 0;
  double ss_prob = 0;
  std::size_t cell_steps = 0;
  double grad_norm = 0;
};

// The horizon and sampling probability for the next step.
inline std::size_t step_horizon(std::size_t iter, const TrainConfig& cfg, std::size_t q) {
  return cfg.curriculum ? curriculum_horizon(iter, cfg.step_size, q) : q;
}

template <class T>
StepResult train_step(ModelParams<T>& params, TrainState<T>& state, const Batch<T>& batch,
                      const GraphTensors<T>& graph, const TrainConfig& cfg, const NormStats& stats,
                      std::size_t batch_index = 0) {
  const std::size_t q = params.config.output_len;
  const std::size_t iter = state.iter + 1;
  StepResult r;
  r.horizon = step_horizon(iter, cfg, q);
  r.ss_prob = scheduled_sampling_prob(iter, cfg.ss_decay);

  params.zero_grad();
  auto enc = encode(batch.x, graph, params);
  auto dec = decode(enc.h_final, batch.tod, graph, params, &batch.teacher, r.ss_prob, r.horizon, state.coin_rng);
  auto loss = masked_mae_loss(dec.predictions, batch.target, batch.mask, q, stats);
  r.loss = static_cast<double>(loss.item());
  if (!std::isfinite(r.loss)) {
    throw NumericError("non-finite training loss at batch " + std::to_string(batch_index) + " (iteration " +
                       std::to_string(iter) + ")");
  }
  loss.backward();
  r.grad_norm = state.optimizer.step({cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps},
                                     cfg.grad_clip);
  r.cell_steps = dec.cell_steps;
  state.iter = iter;
  state.horizon = r.horizon;
  state.ss_prob = r.ss_prob;
  state.decoder_cell_steps += dec.cell_steps;
  state.teacher_picks += dec.teacher_picks;
  return r;
}

// ---------------------------------------------------------------------------
// Fit

struct EpochRecord {
  std::size_t epoch = 0;
  double train_mae = 0;
  double val_mae = 0, val_rmse = 0, val_mape = 0;
  double seconds = 0;
  std::size_t horizon = 0;
  double ss_prob = 0;
  std::size_t cell_steps = 0;
};

// Metrics pooled over every step of the forecast.
inline HorizonMetrics pooled_metrics(const Forecast& f, MissingPolicy policy) {
  Forecast flat = f;
  flat.samples = f.samples * f.steps;
  flat.steps = 1;
  // [S,Q,N] is already contiguous as [(S*Q),1,N].
  auto rep = masked_metrics(flat, {1}, policy);
  return rep.rows.front();
}

inline void write_training_log_header(std::ostream& out) {
  out << "epoch,train_mae,val_mae,val_rmse,val_mape,seconds,horizon_i,ss_prob\n";
}

inline void write_training_log_row(std::ostream& out, const EpochRecord& e) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%.6f,%.4f,%.3f,%zu,%.6f\n", e.epoch, e.train_mae, e.val_mae,
                e.val_rmse, e.val_mape, e.seconds, e.horizon, e.ss_prob);
  out << buf;
}

template <class T>
struct FitResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val = 0;
  std::size_t iterations = 0;
  std::size_t decoder_cell_steps = 0;
};

struct FitOptions {
  std::ostream* log = nullptr;  // CSV training log, written as epochs finish
  std::function<void(const EpochRecord&)> on_epoch;
  std::size_t eval_batch = 256;
};

// Trains on shuffled batches, validates at the full horizon without teacher
// input after every epoch, stops once more than `patience` epochs pass
// without improvement and leaves the best-validation parameters in `params`.
template <class T>
FitResult<T> fit(ModelParams<T>& params, const WindowedDataset& d, const GraphTensors<T>& graph,
                 const TrainConfig& cfg, const FitOptions& opt = {}) {
  if (d.train.starts.empty()) throw ConfigError("training split has no windows");
  if (d.val.starts.empty()) throw ConfigError("validation split has no windows");
  if (cfg.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  using clock = std::chrono::steady_clock;

  TrainState<T> state(params, cfg.seed);
  FitResult<T> res;
  auto named = params.named_parameters();
  std::vector<std::vector<T>> best(named.size());
  auto snapshot = [&] {
    for (std::size_t k = 0; k < named.size(); ++k) best[k] = named[k].second.values();
  };
  snapshot();
  if (opt.log) write_training_log_header(*opt.log);

  std::vector<std::size_t> order = d.train.starts;
  std::size_t batch_index = 0;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = clock::now();
    std::shuffle(order.begin(), order.end(), state.shuffle_rng);
    double loss_sum = 0;
    std::size_t n_batches = 0;
    const std::size_t steps_before = state.decoder_cell_steps;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
      auto batch = make_batch<T>(d, std::span<const std::size_t>(order.data() + b0, b1 - b0));
      loss_sum += train_step(params, state, batch, graph, cfg, d.stats, batch_index++).loss;
      ++n_batches;
    }
    const auto val = pooled_metrics(predict_model(params, graph, d, d.val.starts, opt.eval_batch), d.policy);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_mae = loss_sum / static_cast<double>(n_batches);
    rec.val_mae = val.mae;
    rec.val_rmse = val.rmse;
    rec.val_mape = val.mape;
    rec.seconds = cfg.record_timing ? std::chrono::duration<double>(clock::now() - t0).count() : 0.0;
    rec.horizon = state.horizon;
    rec.ss_prob = state.ss_prob;
    rec.cell_steps = state.decoder_cell_steps - steps_before;
    res.history.push_back(rec);
    if (opt.log) {
      write_training_log_row(*opt.log, rec);
      opt.log->flush();
    }
    if (opt.on_epoch) opt.on_epoch(rec);

    if (val.present() && val.mae < state.best_val) {
      state.best_val = val.mae;
      state.best_epoch = epoch;
      state.epochs_since_best = 0;
      snapshot();
    } else {
      ++state.epochs_since_best;
      if (state.epochs_since_best > cfg.patience) break;
    }
  }
  for (std::size_t k = 0; k < named.size(); ++k) {
    auto t = named[k].second;
    std::copy(best[k].begin(), best[k].end(), t.mutable_data().begin());
  }
  res.best_epoch = state.best_epoch;
  res.best_val = state.best_val;
  res.iterations = state.iter;
  res.decoder_cell_steps = state.decoder_cell_steps;
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoints

template <class T>
struct Checkpoint {
  Config config;
  NormStats stats;
  ModelParams<T> params;
};

template <class T>
Container checkpoint_container(const Config& config, const NormStats& stats, const ModelParams<T>& params) {
  Container c;
  c.add_text("meta/config", to_json(config).dump());
  c.add_values("meta/norm", DType::f64, {2}, {stats.mean, stats.std});
  c.add_values("meta/n_nodes", DType::i64, {1}, {static_cast<double>(params.n_nodes)});
  for (const auto& [name, t] : params.named_parameters()) c.add_tensor("param/" + name, t);
  return c;
}

template <class T>
void save_checkpoint(const std::string& path, const Config& config, const NormStats& stats,
                     const ModelParams<T>& params) {
  checkpoint_container(config, stats, params).save(path);
}

// Rebuilds the model from the stored config and fills every parameter;
// records may be in either precision.
template <class T>
Checkpoint<T> checkpoint_from_container(const Container& c) {
  Checkpoint<T> ck;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(c.get("meta/config").text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint config is not valid JSON: ") + e.what());
  }
  ck.config = config_from_json(j);
  const auto& norm = c.get("meta/norm");
  if (norm.values.size() != 2) throw IoError("checkpoint normalization record must hold 2 values");
  ck.stats = {norm.values[0], norm.values[1]};
  const auto& nn = c.get("meta/n_nodes");
  if (nn.values.size() != 1 || nn.values[0] < 1) throw IoError("checkpoint node count is invalid");
  ck.params = init_model<T>(ck.config.model, static_cast<std::size_t>(nn.values[0]), 0);
  std::size_t expected = 0;
  for (auto& [name, t] : ck.params.named_parameters()) {
    const auto& r = c.get("param/" + name);
    if (r.shape != t.shape()) {
      throw IoError("checkpoint parameter " + name + " has shape " + shape_str(r.shape) + ", model expects " +
                    shape_str(t.shape()));
    }
    auto dst = t.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(r.values[i]);
    ++expected;
  }
  std::size_t stored = 0;
  for (const auto& r : c.records)
    if (r.name.rfind("param/", 0) == 0) ++stored;
  if (stored != expected) throw IoError("checkpoint holds parameters the configured model does not have");
  return ck;
}

template <class T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  return checkpoint_from_container<T>(Container::load(path));
}

// Model tensors of a StaticGraph in the requested precision.
template <class T>
GraphTensors<T> graph_tensors(const StaticGraph& g) {
  return GraphTensors<T>::from(g);
}

}  // namespace dgcrn
