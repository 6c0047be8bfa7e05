#pragma once

// Masked error metrics, reference baselines, dataset statistics and report
// emission.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "dgcrn/data.hpp"
#include "dgcrn/dgcrm.hpp"
#include "dgcrn/error.hpp"

namespace dgcrn {

struct HorizonMetrics {
  std::size_t horizon = 0;  // 1-based step
  std::size_t n_observed = 0;
  double mae = 0, rmse = 0, mape = 0;  // mape in percent

  bool present() const { return n_observed > 0; }
};

struct MetricReport {
  std::string model;
  std::vector<HorizonMetrics> rows;

  const HorizonMetrics& at(std::size_t horizon) const {
    for (const auto& r : rows)
      if (r.horizon == horizon) return r;
    throw PreconditionError("report has no horizon " + std::to_string(horizon));
  }
};

// Forecasts for S samples: pred and truth are [S,Q,N] in speed units; truth
// carries NaN (or 0 under the zero-is-missing policy) where unobserved.
struct Forecast {
  std::size_t samples = 0, steps = 0, nodes = 0;
  std::vector<double> pred, truth;

  std::size_t index(std::size_t s, std::size_t q, std::size_t n) const { return (s * steps + q) * nodes + n; }
};

// Per-horizon metrics over all observed (sample, node) entries of that step.
inline MetricReport masked_metrics(const Forecast& f, const std::vector<std::size_t>& horizons,
                                   MissingPolicy policy = {}) {
  if (f.pred.size() != f.truth.size() || f.pred.size() != f.samples * f.steps * f.nodes) {
    throw DimensionError("masked_metrics: prediction and truth sizes disagree");
  }
  MetricReport rep;
  for (std::size_t h : horizons) {
    if (h < 1 || h > f.steps) {
      throw ConfigError("horizon " + std::to_string(h) + " outside [1," + std::to_string(f.steps) + "]");
    }
    HorizonMetrics m;
    m.horizon = h;
    double abs_sum = 0, sq_sum = 0, pct_sum = 0;
    for (std::size_t s = 0; s < f.samples; ++s)
      for (std::size_t n = 0; n < f.nodes; ++n) {
        const std::size_t i = f.index(s, h - 1, n);
        const double x = f.truth[i];
        if (policy.missing(x)) continue;
        const double e = x - f.pred[i];
        abs_sum += std::abs(e);
        sq_sum += e * e;
        pct_sum += std::abs(e / x);
        ++m.n_observed;
      }
    if (m.n_observed > 0) {
      const double c = static_cast<double>(m.n_observed);
      m.mae = abs_sum / c;
      m.rmse = std::sqrt(sq_sum / c);
      m.mape = 100.0 * pct_sum / c;
    }
    rep.rows.push_back(m);
  }
  return rep;
}

inline std::vector<std::size_t> default_horizons(std::size_t q) {
  std::vector<std::size_t> out;
  for (std::size_t h : {3, 6, 12})
    if (h <= q) out.push_back(h);
  if (out.empty()) out.push_back(q);
  return out;
}

// Ground truth of the given windows, in speed units with NaN where missing.
inline Forecast truth_for(const WindowedDataset& d, const std::vector<std::size_t>& starts) {
  Forecast f;
  f.samples = starts.size();
  f.steps = d.output_len;
  f.nodes = d.n_nodes;
  f.truth.resize(f.samples * f.steps * f.nodes);
  f.pred.assign(f.truth.size(), 0.0);
  for (std::size_t s = 0; s < f.samples; ++s)
    for (std::size_t q = 0; q < f.steps; ++q)
      for (std::size_t n = 0; n < f.nodes; ++n) f.truth[f.index(s, q, n)] = d.raw.at(starts[s] + q, n);
  return f;
}

// ---------------------------------------------------------------------------
// Baselines

// Mean per (node, time-of-week slot) over the training segment.
class HistoricalAverage {
 public:
  HistoricalAverage(const SpeedSeries& s, Segment train, MissingPolicy policy)
      : nodes_(s.n_nodes), slots_per_day_(s.steps_per_day()), dt_(s.dt_seconds) {
    const std::size_t slots = slots_per_day_ * 7;
    sum_.assign(slots * nodes_, 0.0);
    count_.assign(slots * nodes_, 0);
    global_ = node_means(s, train, policy);
    for (std::size_t t = train.begin; t < train.end; ++t) {
      const std::size_t slot = slot_of(s.timestamp(t));
      for (std::size_t n = 0; n < nodes_; ++n) {
        const double v = s.at(t, n);
        if (policy.missing(v)) continue;
        sum_[slot * nodes_ + n] += v;
        ++count_[slot * nodes_ + n];
      }
    }
    for (std::size_t n = 0; n < nodes_; ++n)
      if (std::isnan(global_[n])) throw DegenerateInputError("HA: node " + std::to_string(n) + " has no training data");
  }

  double predict(std::int64_t epoch, std::size_t node) const {
    const std::size_t k = slot_of(epoch) * nodes_ + node;
    return count_[k] ? sum_[k] / static_cast<double>(count_[k]) : global_[node];
  }

 private:
  std::size_t slot_of(std::int64_t epoch) const {
    const std::int64_t sec = ((epoch % kSecondsPerDay) + kSecondsPerDay) % kSecondsPerDay;
    return day_of_week(epoch) * slots_per_day_ + static_cast<std::size_t>(sec / dt_);
  }

  std::size_t nodes_, slots_per_day_;
  std::uint32_t dt_;
  std::vector<double> sum_;
  std::vector<std::size_t> count_;
  std::vector<double> global_;
};

inline Forecast baseline_ha(const WindowedDataset& d, const std::vector<std::size_t>& starts) {
  HistoricalAverage ha(d.raw, d.segments.train, d.policy);
  Forecast f = truth_for(d, starts);
  for (std::size_t s = 0; s < f.samples; ++s)
    for (std::size_t q = 0; q < f.steps; ++q)
      for (std::size_t n = 0; n < f.nodes; ++n) f.pred[f.index(s, q, n)] = ha.predict(d.raw.timestamp(starts[s] + q), n);
  return f;
}

// Last observed input value, repeated. The imputed series already carries
// the forward-fill, so its value just before the target window is exactly
// that.
inline Forecast baseline_persistence(const WindowedDataset& d, const std::vector<std::size_t>& starts) {
  Forecast f = truth_for(d, starts);
  for (std::size_t s = 0; s < f.samples; ++s)
    for (std::size_t n = 0; n < f.nodes; ++n) {
      const double last = d.filled_raw[(starts[s] - 1) * d.n_nodes + n];
      for (std::size_t q = 0; q < f.steps; ++q) f.pred[f.index(s, q, n)] = last;
    }
  return f;
}

// Model forecasts in speed units, free-running decoder over the full Q.
template <class T>
Forecast predict_model(const ModelParams<T>& params, const GraphTensors<T>& graph, const WindowedDataset& d,
                       const std::vector<std::size_t>& starts, std::size_t batch_size) {
  if (starts.empty()) throw ConfigError("no windows to evaluate");
  NoGradGuard no_grad;
  Forecast f = truth_for(d, starts);
  Rng unused(0);
  for (std::size_t b0 = 0; b0 < starts.size(); b0 += batch_size) {
    const std::size_t b1 = std::min(starts.size(), b0 + batch_size);
    const std::span<const std::size_t> idx(starts.data() + b0, b1 - b0);
    auto batch = make_batch<T>(d, idx);
    auto enc = encode(batch.x, graph, params);
    auto dec = decode<T>(enc.h_final, batch.tod, graph, params, nullptr, 0.0, d.output_len, unused);
    const auto pv = dec.predictions.data();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t q = 0; q < f.steps; ++q)
        for (std::size_t n = 0; n < f.nodes; ++n)
          f.pred[f.index(b0 + i, q, n)] =
              normalize(static_cast<double>(pv[(i * f.steps + q) * f.nodes + n]), d.stats, Direction::inverse);
  }
  return f;
}

// ---------------------------------------------------------------------------
// Forecast files: `sample,horizon,node,pred,truth`, horizon 1-based, empty
// truth for missing.

inline void write_forecast_csv(std::ostream& out, const Forecast& f) {
  out << "sample,horizon,node,pred,truth\n";
  char buf[96];
  for (std::size_t s = 0; s < f.samples; ++s)
    for (std::size_t q = 0; q < f.steps; ++q)
      for (std::size_t n = 0; n < f.nodes; ++n) {
        const std::size_t i = f.index(s, q, n);
        std::snprintf(buf, sizeof buf, "%zu,%zu,%zu,%.9g,", s, q + 1, n, f.pred[i]);
        out << buf;
        if (!std::isnan(f.truth[i])) {
          std::snprintf(buf, sizeof buf, "%.9g", f.truth[i]);
          out << buf;
        }
        out << '\n';
      }
}

inline Forecast read_forecast_csv(std::istream& in, const std::string& origin = "forecast csv") {
  std::string line;
  if (!std::getline(in, line)) throw IoError(origin + ": empty file");
  struct Row {
    std::size_t s, q, n;
    double pred, truth;
  };
  std::vector<Row> rows;
  std::size_t lineno = 1;
  Forecast f;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> c;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) c.push_back(cell);
    if (line.back() == ',') c.emplace_back();
    if (c.size() != 5) throw IoError(origin + ": line " + std::to_string(lineno) + " needs 5 fields");
    try {
      Row r{std::stoul(c[0]), std::stoul(c[1]), std::stoul(c[2]), std::stod(c[3]),
            c[4].empty() ? kMissing : std::stod(c[4])};
      if (r.q == 0) throw IoError(origin + ": horizon is 1-based (line " + std::to_string(lineno) + ")");
      f.samples = std::max(f.samples, r.s + 1);
      f.steps = std::max(f.steps, r.q);
      f.nodes = std::max(f.nodes, r.n + 1);
      rows.push_back(r);
    } catch (const std::logic_error&) {
      throw IoError(origin + ": bad number on line " + std::to_string(lineno));
    }
  }
  if (rows.empty()) throw IoError(origin + ": no rows");
  const std::size_t total = f.samples * f.steps * f.nodes;
  if (rows.size() != total) throw IoError(origin + ": expected a dense sample x horizon x node grid");
  f.pred.assign(total, kMissing);
  f.truth.assign(total, kMissing);
  std::vector<bool> seen(total, false);
  for (const auto& r : rows) {
    const std::size_t i = f.index(r.s, r.q - 1, r.n);
    if (seen[i]) throw IoError(origin + ": duplicate row for sample " + std::to_string(r.s));
    seen[i] = true;
    f.pred[i] = r.pred;
    f.truth[i] = r.truth;
  }
  return f;
}

// ---------------------------------------------------------------------------
// Reports

inline void write_report_csv(std::ostream& out, const std::vector<MetricReport>& reports) {
  out << "model,horizon,mae,rmse,mape,n_observed\n";
  char buf[160];
  for (const auto& rep : reports)
    for (const auto& r : rep.rows) {
      if (!r.present()) {
        std::snprintf(buf, sizeof buf, "%s,%zu,,,,0\n", rep.model.c_str(), r.horizon);
      } else {
        std::snprintf(buf, sizeof buf, "%s,%zu,%.6f,%.6f,%.2f,%zu\n", rep.model.c_str(), r.horizon, r.mae, r.rmse,
                      r.mape, r.n_observed);
      }
      out << buf;
    }
}

inline std::string format_report_table(const std::vector<MetricReport>& reports) {
  std::ostringstream os;
  std::size_t width = 5;
  for (const auto& r : reports) width = std::max(width, r.model.size());
  char buf[160];
  os << std::left << std::setw(static_cast<int>(width)) << "model";
  os << "  horizon       MAE      RMSE     MAPE%  observed\n";
  for (const auto& rep : reports)
    for (const auto& r : rep.rows) {
      os << std::left << std::setw(static_cast<int>(width)) << rep.model;
      if (!r.present()) {
        std::snprintf(buf, sizeof buf, "  %7zu  %8s  %8s  %8s  %8d\n", r.horizon, "-", "-", "-", 0);
      } else {
        std::snprintf(buf, sizeof buf, "  %7zu  %8.4f  %8.4f  %8.2f  %8zu\n", r.horizon, r.mae, r.rmse, r.mape,
                      r.n_observed);
      }
      os << buf;
    }
  return os.str();
}

// ---------------------------------------------------------------------------
// Dataset statistics

// Pearson correlation over steps where both series are observed, optionally
// with `b` shifted `lag` steps later. nullopt when either side is constant.
inline std::optional<double> pearson(const SpeedSeries& s, std::size_t a, std::size_t b, MissingPolicy policy,
                                     std::size_t lag = 0) {
  double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
  std::size_t n = 0;
  for (std::size_t t = 0; t + lag < s.n_steps; ++t) {
    const double x = s.at(t, a), y = s.at(t + lag, b);
    if (policy.missing(x) || policy.missing(y)) continue;
    sa += x;
    sb += y;
    ++n;
  }
  if (n < 2) return std::nullopt;
  const double ma = sa / static_cast<double>(n), mb = sb / static_cast<double>(n);
  for (std::size_t t = 0; t + lag < s.n_steps; ++t) {
    const double x = s.at(t, a), y = s.at(t + lag, b);
    if (policy.missing(x) || policy.missing(y)) continue;
    saa += (x - ma) * (x - ma);
    sbb += (y - mb) * (y - mb);
    sab += (x - ma) * (y - mb);
  }
  if (!(saa > 0) || !(sbb > 0)) return std::nullopt;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

struct Histogram {
  double lo = 0, hi = 1;
  std::vector<std::size_t> counts;

  Histogram(double low, double high, std::size_t bins) : lo(low), hi(high), counts(bins, 0) {}

  void add(double v) {
    const double u = (v - lo) / (hi - lo) * static_cast<double>(counts.size());
    const auto k = static_cast<std::ptrdiff_t>(std::floor(u));
    counts[static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(k, 0, static_cast<std::ptrdiff_t>(counts.size()) - 1))]++;
  }
  double edge(std::size_t k) const { return lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(counts.size()); }
};

struct DatasetStats {
  Histogram correlation{-1.0, 1.0, 20};
  Histogram speed{0.0, 100.0, 20};
  std::vector<std::size_t> excluded_nodes;  // zero variance
  double mean_correlation = 0;
  std::size_t pairs = 0;
};

inline DatasetStats analyze_dataset(const SpeedSeries& s, MissingPolicy policy, double speed_max = 0) {
  if (s.n_steps < 2) throw PreconditionError("analyze: need at least two steps");
  double hi = speed_max;
  if (!(hi > 0)) {
    for (double v : s.values)
      if (!policy.missing(v)) hi = std::max(hi, v);
    hi = std::max(1.0, std::ceil(hi / 10.0) * 10.0);
  }
  DatasetStats st;
  st.speed = Histogram(0.0, hi, 20);
  for (double v : s.values)
    if (!policy.missing(v)) st.speed.add(v);
  std::vector<bool> flat(s.n_nodes, false);
  for (std::size_t n = 0; n < s.n_nodes; ++n) {
    if (!pearson(s, n, n, policy)) {
      flat[n] = true;
      st.excluded_nodes.push_back(n);
    }
  }
  double total = 0;
  for (std::size_t a = 0; a < s.n_nodes; ++a)
    for (std::size_t b = a + 1; b < s.n_nodes; ++b) {
      if (flat[a] || flat[b]) continue;
      if (auto r = pearson(s, a, b, policy)) {
        st.correlation.add(*r);
        total += *r;
        ++st.pairs;
      }
    }
  if (st.pairs) st.mean_correlation = total / static_cast<double>(st.pairs);
  return st;
}

inline void write_stats_csv(std::ostream& out, const DatasetStats& st) {
  out << "statistic,bin_low,bin_high,count\n";
  char buf[128];
  auto dump = [&](const char* name, const Histogram& h) {
    for (std::size_t k = 0; k < h.counts.size(); ++k) {
      std::snprintf(buf, sizeof buf, "%s,%.4f,%.4f,%zu\n", name, h.edge(k), h.edge(k + 1), h.counts[k]);
      out << buf;
    }
  };
  dump("correlation", st.correlation);
  dump("speed", st.speed);
}

}  // namespace dgcrn
