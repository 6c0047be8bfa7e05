#pragma once

// Speed series ingestion, chronological splitting, missing-value handling,
// Z-score normalization and sliding-window sample construction.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "dgcrn/error.hpp"
#include "dgcrn/io.hpp"
#include "dgcrn/tensor.hpp"

namespace dgcrn {

inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();
inline constexpr std::int64_t kSecondsPerDay = 86400;

struct MissingPolicy {
  bool zero_is_missing = true;

  bool missing(double v) const { return std::isnan(v) || (zero_is_missing && v == 0.0); }
};

struct SpeedSeries {
  std::size_t n_nodes = 0;
  std::size_t n_steps = 0;
  std::uint32_t dt_seconds = 300;
  std::int64_t start_epoch = 0;  // naive local time, seconds
  std::vector<double> values;    // [T,N] row-major; NaN marks missing

  double at(std::size_t t, std::size_t n) const { return values[t * n_nodes + n]; }
  double& at(std::size_t t, std::size_t n) { return values[t * n_nodes + n]; }
  std::int64_t timestamp(std::size_t t) const { return start_epoch + static_cast<std::int64_t>(t) * dt_seconds; }
  std::size_t steps_per_day() const { return static_cast<std::size_t>(kSecondsPerDay / dt_seconds); }

  void validate() const {
    if (n_nodes == 0 || n_steps == 0) throw PreconditionError("speed series must have at least one node and step");
    if (dt_seconds == 0) throw PreconditionError("speed series step must be positive");
    if (values.size() != n_nodes * n_steps) throw DimensionError("speed series holds the wrong number of values");
    for (double v : values)
      if (!std::isnan(v) && !std::isfinite(v)) throw NumericError("speed series contains an infinite value");
  }

  // Rows [begin, end) as a standalone series.
  SpeedSeries slice(std::size_t begin, std::size_t end) const {
    SpeedSeries s;
    s.n_nodes = n_nodes;
    s.n_steps = end - begin;
    s.dt_seconds = dt_seconds;
    s.start_epoch = timestamp(begin);
    s.values.assign(values.begin() + static_cast<long>(begin * n_nodes), values.begin() + static_cast<long>(end * n_nodes));
    return s;
  }
};

// Minutes since midnight / 1440.
inline double time_of_day(std::int64_t epoch) {
  const std::int64_t sec = ((epoch % kSecondsPerDay) + kSecondsPerDay) % kSecondsPerDay;
  return static_cast<double>(sec / 60) / 1440.0;
}

// 0 = Monday.
inline std::size_t day_of_week(std::int64_t epoch) {
  const std::int64_t days = epoch >= 0 ? epoch / kSecondsPerDay : (epoch - kSecondsPerDay + 1) / kSecondsPerDay;
  return static_cast<std::size_t>(((days % 7) + 7 + 3) % 7);  // 1970-01-01 was a Thursday
}

// ---------------------------------------------------------------------------
// Normalization

struct NormStats {
  double mean = 0;
  double std = 1;
};

enum class Direction { forward, inverse };

inline NormStats fit_norm_stats(const SpeedSeries& s, MissingPolicy policy) {
  double sum = 0;
  std::size_t n = 0;
  for (double v : s.values)
    if (!policy.missing(v)) {
      sum += v;
      ++n;
    }
  if (n == 0) throw DegenerateInputError("cannot fit normalization: no observed values");
  const double mean = sum / static_cast<double>(n);
  double ss = 0;
  for (double v : s.values)
    if (!policy.missing(v)) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n));
  if (!(sd > 0)) throw DegenerateInputError("cannot fit normalization: zero standard deviation");
  return {mean, sd};
}

// NaN passes through untouched.
inline double normalize(double x, const NormStats& st, Direction dir) {
  if (std::isnan(x)) return x;
  return dir == Direction::forward ? (x - st.mean) / st.std : x * st.std + st.mean;
}

inline std::vector<double> normalize(std::span<const double> xs, const NormStats& st, Direction dir) {
  if (!(st.std > 0)) throw DegenerateInputError("normalize: standard deviation must be positive");
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = normalize(xs[i], st, dir);
  return out;
}

// ---------------------------------------------------------------------------
// Splitting

struct Segment {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t length() const { return end - begin; }
};

struct RatioSplit {
  double train = 0.7, val = 0.1, test = 0.2;
};

struct DaySplit {
  std::vector<std::size_t> train_days, val_days, test_days;

  static DaySplit consecutive(std::size_t train, std::size_t val, std::size_t test) {
    DaySplit d;
    std::size_t k = 0;
    for (std::size_t i = 0; i < train; ++i) d.train_days.push_back(k++);
    for (std::size_t i = 0; i < val; ++i) d.val_days.push_back(k++);
    for (std::size_t i = 0; i < test; ++i) d.test_days.push_back(k++);
    return d;
  }
};

using SplitPolicy = std::variant<RatioSplit, DaySplit>;

struct Splits {
  Segment train, val, test;
};

// Ratio policy: floor(train*T) and floor(val*T) steps, remainder to test.
inline Splits split(const SpeedSeries& s, const SplitPolicy& policy) {
  const std::size_t t = s.n_steps;
  if (const auto* r = std::get_if<RatioSplit>(&policy)) {
    if (r->train < 0 || r->val < 0 || r->test < 0 || std::abs(r->train + r->val + r->test - 1.0) > 1e-9) {
      throw ConfigError("split ratios must be non-negative and sum to 1");
    }
    const auto n_train = static_cast<std::size_t>(std::floor(r->train * static_cast<double>(t) + 1e-9));
    const auto n_val = static_cast<std::size_t>(std::floor(r->val * static_cast<double>(t) + 1e-9));
    return {{0, n_train}, {n_train, n_train + n_val}, {n_train + n_val, t}};
  }
  const auto& d = std::get<DaySplit>(policy);
  const std::size_t spd = s.steps_per_day();
  std::size_t next_day = 0;
  bool first = true;
  auto seg = [&](const std::vector<std::size_t>& days, const char* name) {
    if (days.empty()) throw ConfigError(std::string("day split: no ") + name + " days");
    for (std::size_t i = 1; i < days.size(); ++i)
      if (days[i] != days[i - 1] + 1) throw ConfigError(std::string("day split: ") + name + " days must be consecutive");
    if (!first && days.front() < next_day) throw ConfigError("day split: segments must be chronological and disjoint");
    first = false;
    next_day = days.back() + 1;
    const std::size_t b = days.front() * spd;
    const std::size_t e = std::min((days.back() + 1) * spd, t);
    if (b >= t) throw ConfigError(std::string("day split: ") + name + " days exceed the series");
    return Segment{b, e};
  };
  Splits out;
  out.train = seg(d.train_days, "train");
  out.val = seg(d.val_days, "val");
  out.test = seg(d.test_days, "test");
  return out;
}

// ---------------------------------------------------------------------------
// Imputation

// Per-node mean of observed values within `segment`; NaN for a node with none.
inline std::vector<double> node_means(const SpeedSeries& s, Segment segment, MissingPolicy policy) {
  std::vector<double> sum(s.n_nodes, 0.0);
  std::vector<std::size_t> cnt(s.n_nodes, 0);
  for (std::size_t t = segment.begin; t < segment.end; ++t)
    for (std::size_t n = 0; n < s.n_nodes; ++n) {
      const double v = s.at(t, n);
      if (!policy.missing(v)) {
        sum[n] += v;
        ++cnt[n];
      }
    }
  std::vector<double> out(s.n_nodes, kMissing);
  for (std::size_t n = 0; n < s.n_nodes; ++n)
    if (cnt[n]) out[n] = sum[n] / static_cast<double>(cnt[n]);
  return out;
}

// Forward fill per node; leading gaps take the node's fallback (training
// mean). A node with no observation at all is an error.
inline SpeedSeries impute_last(const SpeedSeries& s, const std::vector<double>& fallback, MissingPolicy policy) {
  if (fallback.size() != s.n_nodes) throw DimensionError("impute_last: one fallback value per node required");
  SpeedSeries out = s;
  for (std::size_t n = 0; n < s.n_nodes; ++n) {
    bool any = false;
    for (std::size_t t = 0; t < s.n_steps && !any; ++t) any = !policy.missing(s.at(t, n));
    if (!any) throw DegenerateInputError("impute_last: node " + std::to_string(n) + " has no observed values");
    double last = fallback[n];
    for (std::size_t t = 0; t < s.n_steps; ++t) {
      const double v = s.at(t, n);
      if (policy.missing(v)) {
        if (std::isnan(last)) throw DegenerateInputError("impute_last: node " + std::to_string(n) + " has no fallback mean");
        out.at(t, n) = last;
      } else {
        last = v;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Windows

struct WindowSet {
  std::vector<std::size_t> starts;  // index of the first target step
  std::string warning;
};

// Stride-1 windows fully inside the segment: T_seg - P - Q + 1 of them.
inline WindowSet make_windows(Segment seg, std::size_t p, std::size_t q) {
  if (p == 0 || q == 0) throw PreconditionError("make_windows: P and Q must be >= 1");
  WindowSet w;
  if (seg.length() < p + q) {
    w.warning = "segment of " + std::to_string(seg.length()) + " steps is shorter than P+Q=" + std::to_string(p + q) +
                "; no windows";
    return w;
  }
  for (std::size_t t0 = seg.begin + p; t0 + q <= seg.end; ++t0) w.starts.push_back(t0);
  return w;
}

// Materialized view of one sample, for inspection and tests.
struct WindowSample {
  std::vector<double> x;     // [P,N,2] normalized speed, time of day
  std::vector<double> y;     // [Q,N] raw labels (NaN where missing)
  std::vector<double> tod;   // [Q,N]
  std::vector<double> mask;  // [Q,N] 1 observed, 0 missing
};

// Everything a training run needs from one series.
struct WindowedDataset {
  std::size_t n_nodes = 0;
  std::size_t input_len = 0;
  std::size_t output_len = 0;
  MissingPolicy policy;
  NormStats stats;
  SpeedSeries raw;                 // original values, missing as NaN
  std::vector<double> filled_raw;  // [T,N] imputed, speed units
  std::vector<double> filled_norm; // [T,N] imputed, normalized
  std::vector<double> tod;         // [T]
  Splits segments;
  WindowSet train, val, test;
  std::vector<std::string> warnings;

  const WindowSet& windows(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw ConfigError("unknown split '" + name + "' (train, val or test)");
  }

  WindowSample sample(std::size_t t0) const {
    WindowSample s;
    const std::size_t n = n_nodes;
    for (std::size_t t = t0 - input_len; t < t0; ++t)
      for (std::size_t k = 0; k < n; ++k) {
        s.x.push_back(filled_norm[t * n + k]);
        s.x.push_back(tod[t]);
      }
    for (std::size_t t = t0; t < t0 + output_len; ++t)
      for (std::size_t k = 0; k < n; ++k) {
        const double v = raw.at(t, k);
        const bool obs = !policy.missing(v);
        s.y.push_back(obs ? v : kMissing);
        s.mask.push_back(obs ? 1.0 : 0.0);
        s.tod.push_back(tod[t]);
      }
    return s;
  }
};

inline WindowedDataset prepare_dataset(const SpeedSeries& series, const SplitPolicy& policy, std::size_t p,
                                       std::size_t q, MissingPolicy missing) {
  series.validate();
  WindowedDataset d;
  d.n_nodes = series.n_nodes;
  d.input_len = p;
  d.output_len = q;
  d.policy = missing;
  d.segments = split(series, policy);
  d.raw = series;
  for (auto& v : d.raw.values)
    if (missing.missing(v)) v = kMissing;
  const auto train_series = series.slice(d.segments.train.begin, d.segments.train.end);
  d.stats = fit_norm_stats(train_series, missing);
  const auto filled = impute_last(series, node_means(series, d.segments.train, missing), missing);
  d.filled_raw = filled.values;
  d.filled_norm = normalize(filled.values, d.stats, Direction::forward);
  d.tod.resize(series.n_steps);
  for (std::size_t t = 0; t < series.n_steps; ++t) d.tod[t] = time_of_day(series.timestamp(t));
  d.train = make_windows(d.segments.train, p, q);
  d.val = make_windows(d.segments.val, p, q);
  d.test = make_windows(d.segments.test, p, q);
  for (const auto* w : {&d.train, &d.val, &d.test})
    if (!w->warning.empty()) d.warnings.push_back(w->warning);
  return d;
}

// One batch in model precision.
template <class T>
struct Batch {
  std::size_t size = 0;
  Tensor<T> x;        // [B,P,N,2]
  Tensor<T> tod;      // [B,Q,N,1]
  Tensor<T> teacher;  // [B,Q,N] normalized imputed labels
  std::vector<T> target;  // [B,Q,N] speed units, 0 where missing
  std::vector<T> mask;    // [B,Q,N]
  std::vector<std::size_t> starts;
};

template <class T>
Batch<T> make_batch(const WindowedDataset& d, std::span<const std::size_t> starts) {
  const std::size_t b = starts.size(), p = d.input_len, q = d.output_len, n = d.n_nodes;
  if (b == 0) throw PreconditionError("make_batch: empty batch");
  std::vector<T> x(b * p * n * 2), tod(b * q * n), teacher(b * q * n), target(b * q * n), mask(b * q * n);
  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t t0 = starts[i];
    for (std::size_t s = 0; s < p; ++s) {
      const std::size_t t = t0 - p + s;
      for (std::size_t k = 0; k < n; ++k) {
        const std::size_t o = ((i * p + s) * n + k) * 2;
        x[o] = static_cast<T>(d.filled_norm[t * n + k]);
        x[o + 1] = static_cast<T>(d.tod[t]);
      }
    }
    for (std::size_t s = 0; s < q; ++s) {
      const std::size_t t = t0 + s;
      for (std::size_t k = 0; k < n; ++k) {
        const std::size_t o = (i * q + s) * n + k;
        tod[o] = static_cast<T>(d.tod[t]);
        teacher[o] = static_cast<T>(d.filled_norm[t * n + k]);
        const double v = d.raw.at(t, k);
        const bool obs = !d.policy.missing(v);
        target[o] = obs ? static_cast<T>(v) : T(0);
        mask[o] = obs ? T(1) : T(0);
      }
    }
  }
  Batch<T> out;
  out.size = b;
  out.x = Tensor<T>({b, p, n, 2}, std::move(x));
  out.tod = Tensor<T>({b, q, n, 1}, std::move(tod));
  out.teacher = Tensor<T>({b, q, n}, std::move(teacher));
  out.target = std::move(target);
  out.mask = std::move(mask);
  out.starts.assign(starts.begin(), starts.end());
  return out;
}

// ---------------------------------------------------------------------------
// Files

inline constexpr std::string_view kSpeedMagic{"DGCRNDAT\x01", 9};

inline void write_speed_binary(const std::string& path, const SpeedSeries& s) {
  ByteWriter w;
  w.bytes(kSpeedMagic);
  w.u32(static_cast<std::uint32_t>(s.n_nodes));
  w.u32(static_cast<std::uint32_t>(s.n_steps));
  w.u32(s.dt_seconds);
  w.i64(s.start_epoch);
  for (double v : s.values) w.f32(static_cast<float>(v));
  w.save(path);
}

inline SpeedSeries read_speed_binary(const std::string& path) {
  auto in = ByteReader::from_file(path);
  in.expect(kSpeedMagic);
  SpeedSeries s;
  s.n_nodes = in.u32();
  s.n_steps = in.u32();
  s.dt_seconds = in.u32();
  s.start_epoch = in.i64();
  s.values.resize(s.n_nodes * s.n_steps);
  for (auto& v : s.values) v = static_cast<double>(in.f32());
  if (!in.at_end()) throw IoError(path + ": trailing bytes after speed values");
  s.validate();
  return s;
}

// Days since 1970-01-01 for a proleptic Gregorian date.
inline std::int64_t days_from_civil(std::int64_t y, unsigned m, unsigned d) {
  y -= m <= 2;
  const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
  const auto yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

inline void civil_from_days(std::int64_t z, std::int64_t& y, unsigned& m, unsigned& d) {
  z += 719468;
  const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
  const auto doe = static_cast<unsigned>(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  y = static_cast<std::int64_t>(yoe) + era * 400;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  d = doy - (153 * mp + 2) / 5 + 1;
  m = mp < 10 ? mp + 3 : mp - 9;
  y += m <= 2;
}

// "YYYY-MM-DDTHH:MM[:SS]" (a space may replace T; trailing Z or fraction ignored).
inline std::int64_t parse_iso8601(const std::string& s) {
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, sec = 0;
  char sep = 0;
  const int got = std::sscanf(s.c_str(), "%d-%d-%d%c%d:%d:%d", &y, &mo, &d, &sep, &h, &mi, &sec);
  if (got < 3 || (got > 3 && got < 6) || (got >= 4 && sep != 'T' && sep != ' ') || mo < 1 || mo > 12 || d < 1 ||
      d > 31 || h < 0 || h > 23 || mi < 0 || mi > 59 || sec < 0 || sec > 60) {
    throw IoError("cannot parse timestamp '" + s + "'");
  }
  return days_from_civil(y, static_cast<unsigned>(mo), static_cast<unsigned>(d)) * kSecondsPerDay + h * 3600 +
         mi * 60 + sec;
}

inline std::string format_iso8601(std::int64_t epoch) {
  const std::int64_t days = epoch >= 0 ? epoch / kSecondsPerDay : (epoch - kSecondsPerDay + 1) / kSecondsPerDay;
  const std::int64_t rem = epoch - days * kSecondsPerDay;
  std::int64_t y;
  unsigned m, d;
  civil_from_days(days, y, m, d);
  char buf[96];
  std::snprintf(buf, sizeof buf, "%04lld-%02u-%02uT%02lld:%02lld:%02lld", static_cast<long long>(y), m, d,
                static_cast<long long>(rem / 3600), static_cast<long long>(rem % 3600 / 60),
                static_cast<long long>(rem % 60));
  return buf;
}

// Header row, then `timestamp,v0,...,vN-1`. Empty cells and "nan" are
// missing. Zeros are kept as-is; MissingPolicy decides later.
inline SpeedSeries read_speed_csv(std::istream& in, const std::string& origin = "speed csv") {
  std::string line;
  if (!std::getline(in, line)) throw IoError(origin + ": empty file");
  auto split_line = [](const std::string& l) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(l);
    while (std::getline(ls, cell, ',')) {
      if (!cell.empty() && cell.back() == '\r') cell.pop_back();
      cells.push_back(cell);
    }
    if (!l.empty() && l.back() == ',') cells.emplace_back();
    return cells;
  };
  const auto header = split_line(line);
  if (header.size() < 2) throw IoError(origin + ": need a timestamp column and at least one node column");
  SpeedSeries s;
  s.n_nodes = header.size() - 1;
  std::vector<std::int64_t> stamps;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_line(line);
    if (cells.size() != header.size()) {
      throw IoError(origin + ": line " + std::to_string(lineno) + " has " + std::to_string(cells.size()) +
                    " fields, expected " + std::to_string(header.size()));
    }
    stamps.push_back(parse_iso8601(cells[0]));
    for (std::size_t k = 1; k < cells.size(); ++k) {
      const auto& c = cells[k];
      if (c.empty() || c == "nan" || c == "NaN" || c == "NA") {
        s.values.push_back(kMissing);
      } else {
        try {
          s.values.push_back(std::stod(c));
        } catch (const std::exception&) {
          throw IoError(origin + ": bad number '" + c + "' on line " + std::to_string(lineno));
        }
      }
    }
  }
  if (stamps.empty()) throw IoError(origin + ": no data rows");
  s.n_steps = stamps.size();
  s.start_epoch = stamps.front();
  if (stamps.size() > 1) {
    const std::int64_t dt = stamps[1] - stamps[0];
    if (dt <= 0) throw IoError(origin + ": timestamps must increase");
    for (std::size_t i = 1; i < stamps.size(); ++i)
      if (stamps[i] - stamps[i - 1] != dt) throw IoError(origin + ": irregular time step at row " + std::to_string(i + 1));
    s.dt_seconds = static_cast<std::uint32_t>(dt);
  }
  s.validate();
  return s;
}

inline void write_speed_csv(std::ostream& out, const SpeedSeries& s) {
  out << "timestamp";
  for (std::size_t k = 0; k < s.n_nodes; ++k) out << ",n" << k;
  out << '\n';
  char buf[64];
  for (std::size_t t = 0; t < s.n_steps; ++t) {
    out << format_iso8601(s.timestamp(t));
    for (std::size_t k = 0; k < s.n_nodes; ++k) {
      const double v = s.at(t, k);
      if (std::isnan(v)) {
        out << ',';
      } else {
        std::snprintf(buf, sizeof buf, ",%.6g", v);
        out << buf;
      }
    }
    out << '\n';
  }
}

// Dispatches on the binary magic; anything else is parsed as CSV.
inline SpeedSeries read_speed_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open speed file: " + path);
  std::string head(kSpeedMagic.size(), '\0');
  in.read(head.data(), static_cast<std::streamsize>(head.size()));
  if (in.gcount() == static_cast<std::streamsize>(head.size()) && head == kSpeedMagic) return read_speed_binary(path);
  in.clear();
  in.seekg(0);
  return read_speed_csv(in, path);
}

}  // namespace dgcrn
