// Command-line front end: data generation, graph building, training,
// evaluation, gradient checking, benchmarking and dataset analysis.

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dgcrn/dgcrn.hpp"
#include "dgcrn/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "dgcrn 1.0.0";

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::string ablation = "none";
  std::string horizons;
  int precision = 32;
  std::vector<std::string> sets;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "JSON config file (sections model/train/data)");
  app->add_option("--seed", c.seed, "Seed for every random draw of the run");
  app->add_option("--out", c.out, "Output directory")->capture_default_str();
  app->add_option("--ablation", c.ablation, "Variant: none, w/o-dg, w/o-preA, w/o-hypernet, dg2sg, w/o-cl, hypernet-mul2matmul")
      ->capture_default_str();
  app->add_option("--horizons", c.horizons, "Comma-separated report horizons (default 3,6,12)");
  app->add_option("--precision", c.precision, "Floating point width for model math")
      ->check(CLI::IsMember({32, 64}))
      ->capture_default_str();
  app->add_option("--set", c.sets, "Override a config key: --set train.learning_rate=0.01 (repeatable)");
  app->footer(dgcrn::config_help());
}

dgcrn::Config resolve_config(const Common& c) {
  dgcrn::Config cfg = c.config_path.empty() ? dgcrn::Config{} : dgcrn::load_config(c.config_path);
  for (const auto& s : c.sets) dgcrn::set_config_value(cfg, s);
  dgcrn::apply_ablation(cfg, c.ablation);
  if (c.seed) cfg.train.seed = *c.seed;
  dgcrn::validate(cfg);
  return cfg;
}

std::vector<std::size_t> parse_horizons(const std::string& s, std::size_t q) {
  if (s.empty()) return dgcrn::default_horizons(q);
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const long v = std::stol(item, &used);
      if (used != item.size() || v < 1) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw dgcrn::ConfigError("--horizons: '" + item + "' is not a positive integer");
    }
    if (out.back() > q) {
      throw dgcrn::ConfigError("--horizons: " + item + " exceeds the output length " + std::to_string(q));
    }
  }
  if (out.empty()) throw dgcrn::ConfigError("--horizons: empty list");
  return out;
}

std::size_t thread_cap() {
  const char* env = std::getenv("DGCRN_THREADS");
  if (!env || !*env) return 1;
  try {
    std::size_t used = 0;
    const long v = std::stol(env, &used);
    if (used != std::string(env).size() || v < 1) throw std::invalid_argument(env);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw dgcrn::ConfigError(std::string("DGCRN_THREADS must be a positive integer, got '") + env + "'");
  }
}

std::string now_iso() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

class Manifest {
 public:
  Manifest(std::string command, const Common& c) : command_(std::move(command)), out_(c.out) {
    doc_["command"] = command_;
    doc_["version"] = kVersion;
    doc_["started"] = now_iso();
    doc_["precision"] = c.precision;
    doc_["ablation"] = c.ablation;
    doc_["threads"] = thread_cap();
    doc_["inputs"] = json::object();
    doc_["outputs"] = json::object();
  }
  void config(const dgcrn::Config& cfg) {
    doc_["config"] = dgcrn::to_json(cfg);
    doc_["seed"] = cfg.train.seed;
  }
  void seed(std::uint64_t s) { doc_["seed"] = s; }
  void input(const std::string& k, const std::string& path) { doc_["inputs"][k] = path; }
  void output(const std::string& k, const std::string& path) { doc_["outputs"][k] = path; }
  json& extra() { return doc_; }

  void write() {
    doc_["finished"] = now_iso();
    const auto path = (fs::path(out_) / (command_ + "_manifest.json")).string();
    std::ofstream f(path);
    if (!f) throw dgcrn::IoError("cannot write " + path);
    f << doc_.dump(2) << '\n';
  }

 private:
  std::string command_, out_;
  json doc_;
};

std::string out_path(const Common& c, const std::string& name) { return (fs::path(c.out) / name).string(); }

void ensure_out(const Common& c) {
  std::error_code ec;
  fs::create_directories(c.out, ec);
  if (ec) throw dgcrn::IoError("cannot create output directory " + c.out + ": " + ec.message());
}

void require_file(const std::string& flag, const std::string& path) {
  if (path.empty()) throw dgcrn::ConfigError(flag + " is required");
  if (!fs::exists(path)) throw dgcrn::IoError(flag + ": no such file: " + path);
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw dgcrn::IoError("cannot write " + path);
  f << text;
}

// ---------------------------------------------------------------------------

struct GenArgs {
  std::size_t nodes = 20;
  std::size_t days = 20;
  double rate = 0.004;
  double noise = 1.0;
  std::size_t shortcuts = 3;
  std::string format = "bin";
};

int cmd_gen_data(const Common& c, const GenArgs& g) {
  ensure_out(c);
  const std::uint64_t seed = c.seed.value_or(1);
  Manifest m("gen-data", c);
  m.seed(seed);
  const auto net = dgcrn::make_synth_network(g.nodes, seed, g.shortcuts);
  dgcrn::SynthOptions o;
  o.n_days = g.days;
  o.seed = seed;
  o.congestion_rate = g.rate;
  o.noise = g.noise;
  const auto series = dgcrn::synth_generate(net, o);

  const auto speed = out_path(c, g.format == "csv" ? "speed.csv" : "speed.bin");
  if (g.format == "csv") {
    std::ofstream f(speed);
    if (!f) throw dgcrn::IoError("cannot write " + speed);
    dgcrn::write_speed_csv(f, series);
  } else {
    dgcrn::write_speed_binary(speed, series);
  }
  const auto dist = out_path(c, "distances.csv");
  {
    std::ofstream f(dist);
    if (!f) throw dgcrn::IoError("cannot write " + dist);
    dgcrn::write_distance_csv(f, net.distances());
  }
  const auto links = out_path(c, "links.csv");
  {
    std::ofstream f(links);
    if (!f) throw dgcrn::IoError("cannot write " + links);
    f << "from,to\n";
    for (const auto& e : net.edges) f << e.from << ',' << e.to << '\n';
  }
  m.output("speed", speed);
  m.output("distances", dist);
  m.output("links", links);
  m.extra()["synthetic"] = {{"nodes", g.nodes},     {"days", g.days},           {"congestion_rate", g.rate},
                            {"noise", g.noise},     {"shortcuts", g.shortcuts}, {"damping", o.damping}};
  m.write();
  std::cout << "wrote " << series.n_nodes << " nodes x " << series.n_steps << " steps to " << speed << "\n";
  return 0;
}

int cmd_build_graph(const Common& c, const std::string& distances, std::size_t nodes) {
  require_file("--distances", distances);
  ensure_out(c);
  const auto cfg = resolve_config(c);
  Manifest m("build-graph", c);
  m.config(cfg);
  m.input("distances", distances);
  const auto g = dgcrn::build_adjacency(dgcrn::read_distance_csv(distances, nodes), cfg.data.kappa);
  const auto path = out_path(c, "graph.dgcrn");
  dgcrn::save_graph_cache(path, g, cfg.data.kappa);
  std::size_t edges = 0;
  for (std::size_t i = 0; i < g.n_nodes; ++i)
    for (std::size_t j = 0; j < g.n_nodes; ++j) edges += i != j && g.adjacency(i, j) > 0;
  m.output("graph", path);
  m.extra()["edges"] = edges;
  m.write();
  std::cout << "graph: " << g.n_nodes << " nodes, " << edges << " directed off-diagonal edges (kappa "
            << cfg.data.kappa << ") -> " << path << "\n";
  return 0;
}

struct DataArgs {
  std::string data;
  std::string graph;
};

struct Loaded {
  dgcrn::Config cfg;
  dgcrn::SpeedSeries series;
  dgcrn::StaticGraph graph;
  dgcrn::WindowedDataset dataset;
};

Loaded load_inputs(const dgcrn::Config& cfg, const DataArgs& a) {
  require_file("--data", a.data);
  require_file("--graph", a.graph);
  Loaded l;
  l.cfg = cfg;
  l.series = dgcrn::read_speed_file(a.data);
  l.graph = dgcrn::load_graph(a.graph, cfg.data.kappa, l.series.n_nodes);
  l.dataset = dgcrn::prepare_dataset(l.series, cfg);
  for (const auto& w : l.dataset.warnings) std::cerr << "warning: " << w << "\n";
  return l;
}

template <class T>
dgcrn::FitResult<T> run_training(const Loaded& l, dgcrn::ModelParams<T>& params, const std::string& log_path) {
  std::ofstream log(log_path, std::ios::binary);
  if (!log) throw dgcrn::IoError("cannot write " + log_path);
  dgcrn::FitOptions opt;
  opt.log = &log;
  opt.on_epoch = [](const dgcrn::EpochRecord& e) {
    std::cerr << "epoch " << e.epoch << "  train_mae " << e.train_mae << "  val_mae " << e.val_mae << "  horizon "
              << e.horizon << "  ss_prob " << e.ss_prob << "\n";
  };
  const auto gt = dgcrn::GraphTensors<T>::from(l.graph);
  return dgcrn::fit(params, l.dataset, gt, l.cfg.train, opt);
}

template <class T>
int cmd_train_t(const Common& c, const DataArgs& a) {
  ensure_out(c);
  const auto cfg = resolve_config(c);
  Manifest m("train", c);
  m.config(cfg);
  m.input("data", a.data);
  m.input("graph", a.graph);
  const auto l = load_inputs(cfg, a);
  auto params = dgcrn::init_model<T>(cfg.model, l.series.n_nodes, cfg.train.seed);
  const auto log_path = out_path(c, "train_log.csv");
  const auto res = run_training(l, params, log_path);
  const auto ckpt = out_path(c, "checkpoint.dgcrn");
  dgcrn::save_checkpoint(ckpt, cfg, l.dataset.stats, params);
  m.output("checkpoint", ckpt);
  m.output("log", log_path);
  m.extra()["best_epoch"] = res.best_epoch;
  m.extra()["best_val_mae"] = res.best_val;
  m.extra()["iterations"] = res.iterations;
  m.extra()["decoder_cell_steps"] = res.decoder_cell_steps;
  m.extra()["parameters"] = params.parameter_count();
  m.write();
  std::cout << "best epoch " << res.best_epoch << " (val MAE " << res.best_val << "), checkpoint " << ckpt << "\n";
  return 0;
}

void emit_report(const Common& c, const std::vector<dgcrn::MetricReport>& reports, Manifest& m) {
  const auto path = out_path(c, "report.csv");
  std::ostringstream csv;
  dgcrn::write_report_csv(csv, reports);
  write_text(path, csv.str());
  std::cout << dgcrn::format_report_table(reports);
  m.output("report", path);
}

const std::vector<std::size_t>& split_windows(const dgcrn::WindowedDataset& d, const std::string& split) {
  const auto& w = d.windows(split).starts;
  if (w.empty()) throw dgcrn::ConfigError("split '" + split + "' has no windows");
  return w;
}

struct EvalArgs {
  std::string checkpoint;
  std::string forecasts;
  std::string split = "test";
  std::string dump;
};

template <class T>
int cmd_eval_t(const Common& c, const DataArgs& a, const EvalArgs& e) {
  ensure_out(c);
  Manifest m("eval", c);
  if (!e.forecasts.empty()) {
    require_file("--forecasts", e.forecasts);
    std::ifstream in(e.forecasts);
    const auto f = dgcrn::read_forecast_csv(in, e.forecasts);
    const auto cfg = resolve_config(c);
    m.config(cfg);
    m.input("forecasts", e.forecasts);
    auto rep = dgcrn::masked_metrics(f, parse_horizons(c.horizons, f.steps), dgcrn::missing_policy(cfg.data));
    rep.model = "forecast";
    emit_report(c, {rep}, m);
    m.write();
    return 0;
  }
  require_file("--checkpoint", e.checkpoint);
  auto ck = dgcrn::load_checkpoint<T>(e.checkpoint);
  // The checkpoint fixes the model; data handling may still be overridden.
  Common rest = c;
  rest.ablation = "none";
  auto cfg = ck.config;
  for (const auto& s : c.sets) dgcrn::set_config_value(cfg, s);
  cfg.model = ck.config.model;
  dgcrn::validate(cfg);
  m.config(cfg);
  m.input("checkpoint", e.checkpoint);
  m.input("data", a.data);
  m.input("graph", a.graph);
  auto l = load_inputs(cfg, a);
  if (l.series.n_nodes != ck.params.n_nodes) {
    throw dgcrn::DimensionError("checkpoint has " + std::to_string(ck.params.n_nodes) + " nodes, data has " +
                                std::to_string(l.series.n_nodes));
  }
  // Metrics are reported in the units the model was trained on.
  l.dataset.stats = ck.stats;
  const auto& starts = split_windows(l.dataset, e.split);
  const auto gt = dgcrn::GraphTensors<T>::from(l.graph);
  const auto f = dgcrn::predict_model(ck.params, gt, l.dataset, starts, 256);
  if (!e.dump.empty()) {
    std::ofstream out(e.dump);
    if (!out) throw dgcrn::IoError("cannot write " + e.dump);
    dgcrn::write_forecast_csv(out, f);
    m.output("forecasts", e.dump);
  }
  auto rep = dgcrn::masked_metrics(f, parse_horizons(c.horizons, cfg.model.output_len), l.dataset.policy);
  rep.model = "DGCRN";
  m.extra()["split"] = e.split;
  emit_report(c, {rep}, m);
  m.write();
  return 0;
}

int cmd_gradcheck(const Common& c) {
  ensure_out(c);
  const std::uint64_t seed = c.seed.value_or(7);
  Manifest m("gradcheck", c);
  m.seed(seed);
  dgcrn::GradcheckOptions o;
  o.ablation = c.ablation;
  const auto rep = dgcrn::gradcheck_model(seed, o);
  for (const auto& p : rep.parameters) {
    std::printf("  %-36s %6zu  %.3e\n", p.name.c_str(), p.size, p.max_rel_error);
  }
  const double tol = 1e-4;
  std::printf("max relative error: %.3e (tolerance %.0e)\n", rep.max_rel_error, tol);
  m.extra()["max_rel_error"] = rep.max_rel_error;
  m.extra()["tolerance"] = tol;
  m.write();
  if (!(rep.max_rel_error < tol)) {
    throw dgcrn::NumericError("gradient check failed: max relative error " + std::to_string(rep.max_rel_error));
  }
  return 0;
}

template <class T>
int cmd_bench_t(const Common& c, const DataArgs& a) {
  ensure_out(c);
  const auto cfg = resolve_config(c);
  Manifest m("bench", c);
  m.config(cfg);
  m.input("data", a.data);
  m.input("graph", a.graph);
  const auto l = load_inputs(cfg, a);
  const auto horizons = parse_horizons(c.horizons, cfg.model.output_len);
  const auto& test = split_windows(l.dataset, "test");

  auto params = dgcrn::init_model<T>(cfg.model, l.series.n_nodes, cfg.train.seed);
  const auto log_path = out_path(c, "train_log.csv");
  run_training(l, params, log_path);
  const auto ckpt = out_path(c, "checkpoint.dgcrn");
  dgcrn::save_checkpoint(ckpt, cfg, l.dataset.stats, params);

  const auto gt = dgcrn::GraphTensors<T>::from(l.graph);
  auto model = dgcrn::masked_metrics(dgcrn::predict_model(params, gt, l.dataset, test, 256), horizons, l.dataset.policy);
  model.model = c.ablation == "none" ? "DGCRN" : "DGCRN(" + c.ablation + ")";
  auto ha = dgcrn::masked_metrics(dgcrn::baseline_ha(l.dataset, test), horizons, l.dataset.policy);
  ha.model = "HA";
  auto pers = dgcrn::masked_metrics(dgcrn::baseline_persistence(l.dataset, test), horizons, l.dataset.policy);
  pers.model = "persistence";
  m.output("checkpoint", ckpt);
  m.output("log", log_path);
  emit_report(c, {ha, pers, model}, m);
  m.write();
  return 0;
}

int cmd_analyze(const Common& c, const std::string& data) {
  require_file("--data", data);
  ensure_out(c);
  const auto cfg = resolve_config(c);
  Manifest m("analyze", c);
  m.config(cfg);
  m.input("data", data);
  const auto series = dgcrn::read_speed_file(data);
  const auto st = dgcrn::analyze_dataset(series, dgcrn::missing_policy(cfg.data));
  for (auto n : st.excluded_nodes) std::cerr << "notice: node " << n << " has zero variance; excluded from correlations\n";
  const auto path = out_path(c, "stats.csv");
  std::ostringstream csv;
  dgcrn::write_stats_csv(csv, st);
  write_text(path, csv.str());
  m.output("stats", path);
  m.extra()["mean_correlation"] = st.mean_correlation;
  m.extra()["pairs"] = st.pairs;
  m.write();
  std::cout << "nodes " << series.n_nodes << ", steps " << series.n_steps << ", pairs " << st.pairs
            << ", mean pairwise correlation " << st.mean_correlation << "\n"
            << "histograms -> " << path << "\n";
  return 0;
}

template <class F32, class F64>
int by_precision(int precision, F32&& f32, F64&& f64) {
  return precision == 64 ? f64() : f32();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Traffic speed forecasting with dynamic graph convolutional recurrent networks"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  Common common;
  GenArgs gen;
  DataArgs data;
  EvalArgs ev;
  std::string distances;
  std::size_t graph_nodes = 0;

  auto* gen_cmd = app.add_subcommand("gen-data", "Write a synthetic congestion dataset and its distance file");
  add_common(gen_cmd, common);
  gen_cmd->add_option("--nodes", gen.nodes, "Number of sensors")->capture_default_str();
  gen_cmd->add_option("--days", gen.days, "Number of days")->capture_default_str();
  gen_cmd->add_option("--rate", gen.rate, "Congestion events per node and step")->capture_default_str();
  gen_cmd->add_option("--noise", gen.noise, "Additive noise std")->capture_default_str();
  gen_cmd->add_option("--shortcuts", gen.shortcuts, "Long-range directed links")->capture_default_str();
  gen_cmd->add_option("--format", gen.format, "Speed file format")
      ->check(CLI::IsMember({"bin", "csv"}))
      ->capture_default_str();

  auto* graph_cmd = app.add_subcommand("build-graph", "Threshold a distance CSV into a graph cache");
  add_common(graph_cmd, common);
  graph_cmd->add_option("--distances", distances, "CSV with header from,to,distance");
  graph_cmd->add_option("--nodes", graph_nodes, "Node count (default: max id + 1)");

  auto add_data = [&](CLI::App* cmd) {
    cmd->add_option("--data", data.data, "Speed file (binary or CSV)");
    cmd->add_option("--graph", data.graph, "Graph cache or distance CSV");
  };

  auto* train_cmd = app.add_subcommand("train", "Train a model; writes checkpoint and training log");
  add_common(train_cmd, common);
  add_data(train_cmd);

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint (or a forecast file) with masked metrics");
  add_common(eval_cmd, common);
  add_data(eval_cmd);
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint written by train");
  eval_cmd->add_option("--forecasts", ev.forecasts, "CSV sample,horizon,node,pred,truth to score instead");
  eval_cmd->add_option("--split", ev.split, "train, val or test")
      ->check(CLI::IsMember({"train", "val", "test"}))
      ->capture_default_str();
  eval_cmd->add_option("--dump-forecasts", ev.dump, "Also write the model forecasts as CSV");

  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every gradient on a tiny model");
  add_common(gc_cmd, common);

  auto* bench_cmd = app.add_subcommand("bench", "Train, then compare against HA and persistence on the test split");
  add_common(bench_cmd, common);
  add_data(bench_cmd);

  auto* an_cmd = app.add_subcommand("analyze", "Correlation and speed histograms of a dataset");
  add_common(an_cmd, common);
  an_cmd->add_option("--data", data.data, "Speed file (binary or CSV)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    thread_cap();  // validate early
    if (*gen_cmd) return cmd_gen_data(common, gen);
    if (*graph_cmd) return cmd_build_graph(common, distances, graph_nodes);
    if (*train_cmd) {
      return by_precision(common.precision, [&] { return cmd_train_t<float>(common, data); },
                          [&] { return cmd_train_t<double>(common, data); });
    }
    if (*eval_cmd) {
      return by_precision(common.precision, [&] { return cmd_eval_t<float>(common, data, ev); },
                          [&] { return cmd_eval_t<double>(common, data, ev); });
    }
    if (*gc_cmd) return cmd_gradcheck(common);
    if (*bench_cmd) {
      return by_precision(common.precision, [&] { return cmd_bench_t<float>(common, data); },
                          [&] { return cmd_bench_t<double>(common, data); });
    }
    if (*an_cmd) return cmd_analyze(common, data.data);
  } catch (const dgcrn::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 2;
  } catch (const dgcrn::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  std::cerr << app.help();
  return 1;
}
