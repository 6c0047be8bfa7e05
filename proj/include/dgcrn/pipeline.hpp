#pragma once

// Glue between configuration and the data/graph modules: split policy,
// dataset preparation and graph caches.

#include <fstream>
#include <string>

#include "dgcrn/config.hpp"
#include "dgcrn/data.hpp"
#include "dgcrn/graph_static.hpp"
#include "dgcrn/io.hpp"

namespace dgcrn {

inline SplitPolicy split_policy(const DataConfig& d) {
  if (d.split == "days") return DaySplit::consecutive(d.train_days, d.val_days, d.test_days);
  return RatioSplit{d.train_ratio, d.val_ratio, d.test_ratio};
}

inline MissingPolicy missing_policy(const DataConfig& d) { return MissingPolicy{d.zero_is_missing}; }

inline WindowedDataset prepare_dataset(const SpeedSeries& s, const Config& c) {
  return prepare_dataset(s, split_policy(c.data), c.model.input_len, c.model.output_len, missing_policy(c.data));
}

// Graph cache: adjacency plus both normalized forms and the threshold used.
inline void save_graph_cache(const std::string& path, const StaticGraph& g, double kappa) {
  Container c;
  c.add_values("meta/kappa", DType::f64, {1}, {kappa});
  c.add_values("graph/adjacency", DType::f64, {g.n_nodes, g.n_nodes}, g.adjacency.v);
  c.add_values("graph/forward", DType::f64, {g.n_nodes, g.n_nodes}, g.forward_norm.v);
  c.add_values("graph/backward", DType::f64, {g.n_nodes, g.n_nodes}, g.backward_norm.v);
  c.save(path);
}

inline StaticGraph load_graph_cache(const std::string& path) {
  const auto c = Container::load(path);
  const auto& a = c.get("graph/adjacency");
  if (a.shape.size() != 2 || a.shape[0] != a.shape[1]) throw IoError(path + ": adjacency must be square");
  // Normalized forms are recomputed so a cache can never disagree with its adjacency.
  return graph_from_adjacency(SquareMatrix(a.shape[0], a.values));
}

inline bool is_container_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string head(kCheckpointMagic.size(), '\0');
  in.read(head.data(), static_cast<std::streamsize>(head.size()));
  return in.gcount() == static_cast<std::streamsize>(head.size()) && head == kCheckpointMagic;
}

// Accepts either a graph cache or a `from,to,distance` CSV (thresholded with kappa).
inline StaticGraph load_graph(const std::string& path, double kappa, std::size_t n_nodes = 0) {
  StaticGraph g = is_container_file(path) ? load_graph_cache(path)
                                          : build_adjacency(read_distance_csv(path, n_nodes), kappa);
  if (n_nodes && g.n_nodes != n_nodes) {
    throw DimensionError("graph " + path + " has " + std::to_string(g.n_nodes) + " nodes, data has " +
                         std::to_string(n_nodes));
  }
  return g;
}

}  // namespace dgcrn
