// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero if any gating criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "dgcrn/dgcrn.hpp"

using namespace dgcrn;
namespace fs = std::filesystem;

namespace {

// Tolerances and budgets.
constexpr double kGradTol = 1e-4;
constexpr double kGradSeconds = 60;
constexpr std::size_t kGeneratorDraws = 1000;
constexpr double kRowSumTol = 1e-9;
constexpr std::size_t kCollapseDraws = 100;
constexpr std::size_t kCurriculumIters = 1000, kCurriculumStep = 50, kHorizon = 12;
constexpr double kCurriculumSaving = 0.20;
constexpr std::size_t kLearnNodes = 20;
constexpr double kLearnGain = 0.02;
constexpr double kLearnSeconds = 30 * 60;
constexpr std::size_t kCoinSteps = 10000, kCoinBucket = 1000, kCoinTau = 2000;
constexpr double kCoinTol = 0.02;
constexpr double kChi2Crit = 29.588;  // chi-square, 10 dof, p = 0.001
constexpr std::size_t kMetricDraws = 100;
constexpr double kMetricTol = 1e-12;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int failures = 0;

void report(int id, bool ok, const std::string& what) {
  std::printf("[%s] %2d %s\n", ok ? "PASS" : "FAIL", id, what.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

void randomize(Tensor<double> t, Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.mutable_data()) v = u(rng);
}

Tensor<double> random_tensor(Shape shape, Rng& rng, double lo, double hi) {
  Tensor<double> t = Tensor<double>::zeros(shape);
  randomize(t, rng, lo, hi);
  return t;
}

GraphTensors<double> random_static_graph(std::size_t n, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  SquareMatrix a(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) a(i, j) = i == j ? 1.0 : (u(rng) < 0.5 ? u(rng) : 0.0);
  return GraphTensors<double>::from(graph_from_adjacency(a));
}

// ---------------------------------------------------------------------------

void gradient_check() {
  const auto t0 = Clock::now();
  const auto r = gradcheck_model(1);
  const double secs = seconds_since(t0);
  report(1, r.max_rel_error < kGradTol && secs < kGradSeconds,
         fmt("gradient check: max rel err %.3e (< %.0e) over %zu tensors in %.1f s (< %.0f s)", r.max_rel_error,
             kGradTol, r.parameters.size(), secs, kGradSeconds));
}

void generator_invariants() {
  Rng rng(2);
  std::uniform_int_distribution<std::size_t> nn(2, 8), dd(1, 5);
  std::size_t bad_diag = 0, bad_pair = 0;
  double worst_row = 0;
  for (std::size_t rep = 0; rep < kGeneratorDraws; ++rep) {
    const std::size_t n = nn(rng), b = 2;
    ModelConfig mc;
    mc.hidden = 3;
    mc.embed_dim = dd(rng);
    mc.hyper_dim = 3;
    auto params = init_model<double>(mc, n, rng());
    const auto& gen = *params.encoder.generator;
    for (const auto& t : {gen.emb_src, gen.emb_tgt, gen.hyper_src.gcn_weights, gen.hyper_src.out_weight,
                          gen.hyper_src.out_bias, gen.hyper_tgt.gcn_weights, gen.hyper_tgt.out_weight,
                          gen.hyper_tgt.out_bias})
      randomize(t, rng, -2, 2);
    const auto input = assemble_hyper_input(random_tensor({b, n, 1}, rng, -3, 3),
                                            random_tensor({b, n, 1}, rng, 0, 1),
                                            random_tensor({b, n, 3}, rng, -1, 1));
    NoGradGuard off;
    const auto g = generate_graph(input, random_static_graph(n, rng), gen);
    for (std::size_t k = 0; k < b; ++k)
      for (std::size_t i = 0; i < n; ++i) {
        double s = 0, st = 0;
        if (g.raw.at({k, i, i}) != 0.0) ++bad_diag;
        for (std::size_t j = 0; j < n; ++j) {
          if (g.raw.at({k, i, j}) * g.raw.at({k, j, i}) != 0.0) ++bad_pair;
          s += g.normalized.at({k, i, j});
          st += g.normalized_t.at({k, i, j});
        }
        worst_row = std::max({worst_row, std::abs(s - 1), std::abs(st - 1)});
      }
  }
  report(2, bad_diag == 0 && bad_pair == 0 && worst_row <= kRowSumTol,
         fmt("dynamic graph invariants on %zu draws: %zu nonzero diagonals, %zu two-way pairs, max |row sum - 1| "
             "%.1e (<= %.0e)",
             kGeneratorDraws, bad_diag, bad_pair, worst_row, kRowSumTol));
}

void static_invariants() {
  Rng rng(3);
  const std::vector<double> kappas{0.05, 0.1, 0.2, 0.5};
  std::uniform_real_distribution<double> dist(0.5, 10.0);
  double worst_row = 0;
  std::size_t appeared = 0, graphs = 0;
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t n = 3 + rep % 10;
    SquareMatrix d(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) d(i, j) = dist(rng);
    std::vector<StaticGraph> gs;
    for (double k : kappas) gs.push_back(build_adjacency(d, k));
    for (const auto& g : gs) {
      ++graphs;
      for (const auto* m : {&g.forward_norm, &g.backward_norm})
        for (std::size_t i = 0; i < n; ++i) {
          double s = 0;
          for (std::size_t j = 0; j < n; ++j) s += (*m)(i, j);
          worst_row = std::max(worst_row, std::abs(s - 1));
        }
    }
    for (std::size_t k = 1; k < gs.size(); ++k)
      for (std::size_t i = 0; i < n * n; ++i)
        if (gs[k].adjacency.v[i] > 0 && !(gs[k - 1].adjacency.v[i] > 0)) ++appeared;
  }
  report(3, worst_row <= kRowSumTol && appeared == 0,
         fmt("static graph: %zu graphs row-stochastic (max dev %.1e), %zu edges gained when raising kappa over "
             "{0.05,0.1,0.2,0.5}",
             graphs, worst_row, appeared));
}

void collapse_oracle() {
  Rng rng(4);
  ModelConfig mc;
  mc.hidden = 4;
  mc.embed_dim = 5;
  mc.hyper_dim = 3;
  mc.fixed_filters = true;
  const std::size_t n = 7;
  std::size_t mismatches = 0;
  for (std::size_t rep = 0; rep < kCollapseDraws; ++rep) {
    auto params = init_model<double>(mc, n, rep + 1);
    auto& gen = *params.decoder.generator;
    randomize(gen.emb_src, rng, -2, 2);
    randomize(gen.emb_tgt, rng, -2, 2);
    NoGradGuard off;
    const auto input = assemble_hyper_input(random_tensor({1, n, 1}, rng, -3, 3),
                                            random_tensor({1, n, 1}, rng, 0, 1),
                                            random_tensor({1, n, 4}, rng, -1, 1));
    const auto step = generate_graph(input, random_static_graph(n, rng), gen);
    const auto direct = static_adaptive_graph(gen);
    if (step.raw.values() != direct.raw.values() || step.normalized.values() != direct.normalized.values() ||
        step.normalized_t.values() != direct.normalized_t.values())
      ++mismatches;
  }
  report(4, mismatches == 0,
         fmt("pinned filters reproduce the static adaptive graph bit for bit: %zu/%zu draws differ", mismatches,
             kCollapseDraws));
}

// Runs the real decoder once per iteration and returns its total cell steps.
std::size_t count_decoder_steps(bool curriculum) {
  ModelConfig mc;
  mc.hidden = 2;
  mc.embed_dim = 2;
  mc.hyper_dim = 2;
  mc.output_len = kHorizon;
  const std::size_t n = 3;
  const auto params = init_model<double>(mc, n, 5);
  const auto graph = GraphTensors<double>::from(graph_from_adjacency(SquareMatrix(n, 1.0)));
  TrainConfig tc;
  tc.curriculum = curriculum;
  tc.step_size = kCurriculumStep;
  const auto h0 = Tensor<double>::zeros({1, n, 2});
  const auto tod = Tensor<double>::zeros({1, kHorizon, n, 1});
  Rng rng(6);
  NoGradGuard off;
  std::size_t total = 0;
  for (std::size_t iter = 1; iter <= kCurriculumIters; ++iter)
    total += decode<double>(h0, tod, graph, params, nullptr, 0.0, step_horizon(iter, tc, kHorizon), rng).cell_steps;
  return total;
}

void curriculum_accounting() {
  std::size_t expected = 0;
  for (std::size_t iter = 1; iter <= kCurriculumIters; ++iter)
    expected += std::min(kHorizon, 1 + iter / kCurriculumStep);
  const std::size_t with = count_decoder_steps(true), without = count_decoder_steps(false);
  const double saving = 1.0 - static_cast<double>(with) / static_cast<double>(without);
  report(5, with == expected && without == kCurriculumIters * kHorizon && saving >= kCurriculumSaving,
         fmt("curriculum: %zu decoder steps (closed form %zu) vs %zu without, %.1f%% fewer (>= %.0f%%)", with,
             expected, without, 100 * saving, 100 * kCurriculumSaving));
}

struct LearnRun {
  double full = 0, wodg = 0, seconds = 0;
};

double train_and_score(Config c, const WindowedDataset& d, const StaticGraph& g) {
  const auto gt = GraphTensors<float>::from(g);
  auto m = init_model<float>(c.model, kLearnNodes, c.train.seed);
  fit(m, d, gt, c.train);
  return masked_metrics(predict_model(m, gt, d, d.test.starts, 256), {3}).at(3).mae;
}

void learning_check() {
  const auto t0 = Clock::now();
  const auto net = make_synth_network(kLearnNodes, 1, 3);
  SynthOptions o;
  o.n_days = 20;
  o.seed = 1;
  o.congestion_rate = 0.004;
  const auto series = synth_generate(net, o);
  Config c;
  c.model.hidden = 16;
  c.model.embed_dim = 8;
  c.model.hyper_dim = 8;
  c.train.batch_size = 64;
  c.train.learning_rate = 0.01;
  c.train.step_size = 50;
  c.train.ss_decay = 300;
  c.train.max_epochs = 10;
  c.train.patience = 10;
  c.data.kappa = 0.1;
  const auto g = build_adjacency(net.distances(), c.data.kappa);
  const auto d = prepare_dataset(series, DaySplit::consecutive(14, 2, 4), 12, 12, {});
  const double ha = masked_metrics(baseline_ha(d, d.test.starts), {3}).at(3).mae;
  const double persist = masked_metrics(baseline_persistence(d, d.test.starts), {3}).at(3).mae;

  double full = 0, gain = 0;
  std::ostringstream seeds;
  for (std::uint64_t seed : {1, 2, 3}) {
    Config cf = c, cw = c;
    cf.train.seed = cw.train.seed = seed;
    apply_ablation(cw, "w/o-dg");
    const double f = train_and_score(cf, d, g), w = train_and_score(cw, d, g);
    full += f / 3;
    gain += (w - f) / w / 3;
    seeds << fmt(" s%llu %.3f/%.3f", static_cast<unsigned long long>(seed), f, w);
    std::cout << "   seed " << seed << ": full " << f << ", w/o-dg " << w << "\n" << std::flush;
  }
  const double secs = seconds_since(t0);
  report(6, full < persist && full < ha && gain >= kLearnGain && secs < kLearnSeconds,
         fmt("learning: h3 MAE full %.4f vs persistence %.4f, HA %.4f; gain over w/o-dg %.2f%% (>= %.0f%%);"
             "%s (full/w/o-dg); %.0f s (< %.0f s)",
             full, persist, ha, 100 * gain, 100 * kLearnGain, seeds.str().c_str(), secs, kLearnSeconds));
}

void scheduled_sampling() {
  ModelConfig mc;
  mc.hidden = 2;
  mc.embed_dim = 2;
  mc.hyper_dim = 2;
  mc.output_len = 1;
  const std::size_t n = 2;
  const auto params = init_model<double>(mc, n, 7);
  const auto graph = GraphTensors<double>::from(graph_from_adjacency(SquareMatrix(n, 1.0)));
  const auto h0 = Tensor<double>::zeros({1, n, 2});
  const auto tod = Tensor<double>::zeros({1, 1, n, 1});
  const auto teacher = Tensor<double>::zeros({1, 1, n});
  Rng rng(8);
  NoGradGuard off;
  double worst = 0, chi2 = 0;
  for (std::size_t b0 = 0; b0 < kCoinSteps; b0 += kCoinBucket) {
    double expected = 0, var = 0;
    std::size_t picks = 0;
    for (std::size_t iter = b0 + 1; iter <= b0 + kCoinBucket; ++iter) {
      const double p = scheduled_sampling_prob(iter, kCoinTau);
      expected += p;
      var += p * (1 - p);
      picks += decode<double>(h0, tod, graph, params, &teacher, p, 1, rng).teacher_picks;
    }
    worst = std::max(worst, std::abs(static_cast<double>(picks) - expected) / kCoinBucket);
    chi2 += (static_cast<double>(picks) - expected) * (static_cast<double>(picks) - expected) / var;
  }
  report(7, worst <= kCoinTol && chi2 < kChi2Crit,
         fmt("scheduled sampling (tau %zu): max bucket |freq - f_ss| %.4f (<= %.2f), chi2 %.2f (< %.2f, 10 dof)",
             kCoinTau, worst, kCoinTol, chi2, kChi2Crit));
}

void metrics_oracle() {
  Rng rng(9);
  std::uniform_real_distribution<double> u(5, 80);
  std::bernoulli_distribution drop(0.2), nan_or_zero(0.5);
  double worst = 0;
  std::size_t rmse_below = 0;
  for (std::size_t rep = 0; rep < kMetricDraws; ++rep) {
    const std::size_t s = 6, q = 4, n = 5;
    Forecast f{s, q, n, std::vector<double>(s * q * n), std::vector<double>(s * q * n)};
    for (std::size_t i = 0; i < f.pred.size(); ++i) {
      f.pred[i] = u(rng);
      f.truth[i] = drop(rng) ? (nan_or_zero(rng) ? std::nan("") : 0.0) : u(rng);
    }
    const auto r = masked_metrics(f, {1, 2, 3, 4});
    for (std::size_t h = 1; h <= q; ++h) {
      double ae = 0, se = 0, pe = 0;
      std::size_t cnt = 0;
      for (std::size_t k = 0; k < s; ++k)
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t i = (k * q + h - 1) * n + j;
          if (std::isnan(f.truth[i]) || f.truth[i] == 0.0) continue;
          const double e = f.pred[i] - f.truth[i];
          ae += std::abs(e);
          se += e * e;
          pe += std::abs(e / f.truth[i]);
          ++cnt;
        }
      const auto& m = r.at(h);
      if (cnt == 0) continue;
      const double c = static_cast<double>(cnt);
      worst = std::max({worst, std::abs(m.mae - ae / c), std::abs(m.rmse - std::sqrt(se / c)),
                        std::abs(m.mape - 100 * pe / c) / 100});
      if (m.rmse < m.mae) ++rmse_below;
    }
  }
  report(8, worst <= kMetricTol && rmse_below == 0,
         fmt("metrics vs brute force on %zu draws: max abs diff %.1e (<= %.0e), %zu cases with RMSE < MAE",
             kMetricDraws, worst, kMetricTol, rmse_below));
}

int shell(const std::string& cmd) {
  const int status = std::system((cmd + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void determinism() {
  const fs::path dir = fs::temp_directory_path() / "dgcrn_acceptance_det";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string cli = std::string("'") + DGCRN_CLI_PATH + "'";
  const std::string d = dir.string();
  bool ran = shell(cli + " gen-data --nodes 6 --days 3 --seed 2 --out " + d + "/data") == 0;
  const std::string train = cli + " train --data " + d + "/data/speed.bin --graph " + d +
                            "/data/distances.csv --seed 5 --set model.hidden=8 --set model.embed_dim=4"
                            " --set model.hyper_dim=4 --set train.max_epochs=2 --set data.split=days"
                            " --set data.train_days=1 --set data.val_days=1 --set data.test_days=1"
                            " --set train.record_timing=false --out ";
  ran = ran && shell(train + d + "/a") == 0 && shell(train + d + "/b") == 0;
  bool same = false;
  if (ran) {
    const auto ca = slurp(dir / "a/checkpoint.dgcrn"), la = slurp(dir / "a/train_log.csv");
    same = !ca.empty() && !la.empty() && ca == slurp(dir / "b/checkpoint.dgcrn") &&
           la == slurp(dir / "b/train_log.csv");
  }
  fs::remove_all(dir);
  report(9, ran && same,
         ran ? fmt("determinism: two train runs give %s checkpoints and logs", same ? "byte-identical" : "DIFFERENT")
             : std::string("determinism: CLI run failed"));
}

}  // namespace

int main() {
  const std::vector<std::function<void()>> checks{gradient_check,      generator_invariants, static_invariants,
                                                  collapse_oracle,     curriculum_accounting, learning_check,
                                                  scheduled_sampling,  metrics_oracle,       determinism};
  for (const auto& c : checks) {
    try {
      c();
    } catch (const std::exception& e) {
      std::printf("[FAIL] check threw: %s\n", e.what());
      ++failures;
    }
  }
  std::printf("[SKIP] 10 HA baseline on real loop-detector data: needs the external dataset, not gating\n");
  std::printf("%s: %d gating criteria failed\n", failures ? "FAILED" : "OK", failures);
  return failures ? 1 : 0;
}
