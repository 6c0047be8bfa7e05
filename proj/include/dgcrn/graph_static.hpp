#pragma once

// Pre-defined adjacency from pairwise distances (thresholded Gaussian kernel)
// and its row-stochastic forward/backward forms.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "dgcrn/error.hpp"
#include "dgcrn/tensor.hpp"

namespace dgcrn {

struct SquareMatrix {
  std::size_t n = 0;
  std::vector<double> v;

  SquareMatrix() = default;
  SquareMatrix(std::size_t size, double fill) : n(size), v(size * size, fill) {}
  SquareMatrix(std::size_t size, std::vector<double> values) : n(size), v(std::move(values)) {
    if (v.size() != n * n) throw DimensionError("square matrix of size " + std::to_string(n) +
                                                " needs " + std::to_string(n * n) + " values");
  }

  double& operator()(std::size_t i, std::size_t j) { return v[i * n + j]; }
  double operator()(std::size_t i, std::size_t j) const { return v[i * n + j]; }

  SquareMatrix transposed() const {
    SquareMatrix t(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) t(j, i) = (*this)(i, j);
    return t;
  }

  bool operator==(const SquareMatrix&) const = default;
};

struct StaticGraph {
  std::size_t n_nodes = 0;
  SquareMatrix adjacency;
  SquareMatrix forward_norm;   // D^-1 A
  SquareMatrix backward_norm;  // D^-1 A^T

  template <class T>
  Tensor<T> forward_tensor() const {
    return Tensor<T>({n_nodes, n_nodes}, std::vector<T>(forward_norm.v.begin(), forward_norm.v.end()));
  }
  template <class T>
  Tensor<T> backward_tensor() const {
    return Tensor<T>({n_nodes, n_nodes}, std::vector<T>(backward_norm.v.begin(), backward_norm.v.end()));
  }
};

inline SquareMatrix normalize_static(const SquareMatrix& a) {
  SquareMatrix out(a.n, 0.0);
  for (std::size_t i = 0; i < a.n; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < a.n; ++j) {
      if (a(i, j) < 0) throw DegenerateInputError("normalize_static: negative entry in row " + std::to_string(i));
      s += a(i, j);
    }
    if (!(s > 0)) throw DegenerateInputError("normalize_static: row " + std::to_string(i) + " sums to zero");
    for (std::size_t j = 0; j < a.n; ++j) out(i, j) = a(i, j) / s;
  }
  return out;
}

inline StaticGraph graph_from_adjacency(SquareMatrix adjacency) {
  StaticGraph g;
  g.n_nodes = adjacency.n;
  g.forward_norm = normalize_static(adjacency);
  g.backward_norm = normalize_static(adjacency.transposed());
  g.adjacency = std::move(adjacency);
  return g;
}

// Population standard deviation of the finite off-diagonal distances.
inline double distance_sigma(const SquareMatrix& d) {
  double s = 0, s2 = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < d.n; ++i)
    for (std::size_t j = 0; j < d.n; ++j) {
      if (i == j || !std::isfinite(d(i, j))) continue;
      s += d(i, j);
      ++count;
    }
  if (count == 0) throw DegenerateInputError("build_adjacency: no finite off-diagonal distances");
  const double mean = s / static_cast<double>(count);
  for (std::size_t i = 0; i < d.n; ++i)
    for (std::size_t j = 0; j < d.n; ++j) {
      if (i == j || !std::isfinite(d(i, j))) continue;
      s2 += (d(i, j) - mean) * (d(i, j) - mean);
    }
  return std::sqrt(s2 / static_cast<double>(count));
}

// A_ij = exp(-d_ij^2 / sigma^2), kept only when that weight is >= kappa.
// Unreachable pairs (+inf) get weight 0.
inline StaticGraph build_adjacency(const SquareMatrix& distances, double kappa) {
  const std::size_t n = distances.n;
  if (distances.v.size() != n * n) throw DimensionError("build_adjacency: distance matrix is not square");
  if (n < 2) throw PreconditionError("build_adjacency: need at least 2 nodes");
  if (!(kappa > 0.0 && kappa < 1.0)) throw ConfigError("build_adjacency: kappa must lie in (0,1)");
  for (std::size_t i = 0; i < n; ++i) {
    if (distances(i, i) != 0.0) {
      throw PreconditionError("build_adjacency: nonzero self-distance at node " + std::to_string(i));
    }
    for (std::size_t j = 0; j < n; ++j) {
      const double d = distances(i, j);
      if (std::isnan(d) || d < 0) {
        throw PreconditionError("build_adjacency: invalid distance at (" + std::to_string(i) + "," +
                                std::to_string(j) + ")");
      }
    }
  }
  const double sigma = distance_sigma(distances);
  if (!(sigma > 0.0)) throw DegenerateInputError("build_adjacency: all distances identical (sigma = 0)");

  SquareMatrix a(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double d = distances(i, j);
      if (!std::isfinite(d)) continue;
      const double w = std::exp(-(d * d) / (sigma * sigma));
      a(i, j) = w >= kappa ? w : 0.0;
    }
  return graph_from_adjacency(std::move(a));
}

// CSV with header `from,to,distance`; 0-based node ids. Pairs not listed are
// unreachable. When n_nodes is 0 it is inferred as max id + 1.
inline SquareMatrix read_distance_csv(std::istream& in, std::size_t n_nodes = 0) {
  std::string line;
  if (!std::getline(in, line)) throw IoError("distance csv: empty input");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
  if (line != "from,to,distance") throw IoError("distance csv: expected header 'from,to,distance', got '" + line + "'");

  struct Edge {
    std::size_t from, to;
    double d;
  };
  std::vector<Edge> edges;
  std::size_t max_id = 0;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string a, b, c;
    if (!std::getline(ls, a, ',') || !std::getline(ls, b, ',') || !std::getline(ls, c)) {
      throw IoError("distance csv: malformed line " + std::to_string(lineno));
    }
    Edge e{};
    try {
      e.from = std::stoul(a);
      e.to = std::stoul(b);
      e.d = std::stod(c);
    } catch (const std::exception&) {
      throw IoError("distance csv: cannot parse line " + std::to_string(lineno));
    }
    max_id = std::max({max_id, e.from, e.to});
    edges.push_back(e);
  }
  const std::size_t n = n_nodes ? n_nodes : max_id + 1;
  if (max_id >= n) throw IoError("distance csv: node id " + std::to_string(max_id) + " exceeds node count");
  SquareMatrix d(n, std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < n; ++i) d(i, i) = 0.0;
  for (const auto& e : edges) {
    if (e.from != e.to) d(e.from, e.to) = e.d;
  }
  return d;
}

inline SquareMatrix read_distance_csv(const std::string& path, std::size_t n_nodes = 0) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open distance file: " + path);
  return read_distance_csv(in, n_nodes);
}

inline void write_distance_csv(std::ostream& out, const SquareMatrix& d) {
  out << "from,to,distance\n";
  out.precision(17);
  for (std::size_t i = 0; i < d.n; ++i)
    for (std::size_t j = 0; j < d.n; ++j)
      if (i != j && std::isfinite(d(i, j))) out << i << ',' << j << ',' << d(i, j) << '\n';
}

}  // namespace dgcrn
