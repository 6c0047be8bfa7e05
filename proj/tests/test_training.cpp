#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <sstream>

#include "support.hpp"

using namespace dgcrn;
using Td = Tensor<double>;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct Fixture {
  SynthNetwork net = make_synth_network(5, 3, 1);
  WindowedDataset data;
  GraphTensors<double> graph;
  Config cfg;

  Fixture() {
    SynthOptions o;
    o.n_days = 3;
    o.seed = 3;
    o.congestion_rate = 0.01;
    data = prepare_dataset(synth_generate(net, o), DaySplit::consecutive(1, 1, 1), 3, 3, {});
    // Thin the windows so an epoch is a handful of batches.
    auto thin = [](WindowSet& w, std::size_t stride) {
      std::vector<std::size_t> kept;
      for (std::size_t i = 0; i < w.starts.size(); i += stride) kept.push_back(w.starts[i]);
      w.starts = kept;
    };
    thin(data.train, 8);
    thin(data.val, 16);
    graph = GraphTensors<double>::from(build_adjacency(net.distances(), 0.1));
    cfg.model.hidden = 4;
    cfg.model.embed_dim = 3;
    cfg.model.hyper_dim = 3;
    cfg.model.input_len = 3;
    cfg.model.output_len = 3;
    cfg.train.batch_size = 8;
    cfg.train.learning_rate = 0.01;
    cfg.train.step_size = 4;
    cfg.train.ss_decay = 20;
    cfg.train.max_epochs = 3;
    cfg.train.patience = 10;
    cfg.train.record_timing = false;
  }

  ModelParams<double> model() const { return init_model<double>(cfg.model, 5, cfg.train.seed); }
};

std::vector<std::vector<double>> snapshot(const ModelParams<double>& m) {
  std::vector<std::vector<double>> out;
  for (const auto& [name, t] : m.named_parameters()) out.push_back(t.values());
  return out;
}

}  // namespace

TEST(Curriculum, HorizonExamples) {
  EXPECT_EQ(curriculum_horizon(1, 2500, 12), 1u);
  EXPECT_EQ(curriculum_horizon(2499, 2500, 12), 1u);
  EXPECT_EQ(curriculum_horizon(2500, 2500, 12), 2u);
  EXPECT_EQ(curriculum_horizon(27500, 2500, 12), 12u);
  EXPECT_EQ(curriculum_horizon(1000000, 2500, 12), 12u);
  EXPECT_EQ(curriculum_horizon(1, 1, 12), 2u);
  EXPECT_THROW(curriculum_horizon(0, 10, 12), PreconditionError);
  EXPECT_THROW(curriculum_horizon(1, 0, 12), PreconditionError);
}

TEST(Curriculum, MonotoneAndBounded) {
  for (std::size_t s : {1u, 7u, 50u, 2500u})
    for (std::size_t q : {1u, 3u, 12u}) {
      std::size_t prev = 1;
      for (std::size_t it = 1; it < 5000; it += 13) {
        const auto h = curriculum_horizon(it, s, q);
        EXPECT_GE(h, prev);
        EXPECT_GE(h, 1u);
        EXPECT_LE(h, q);
        prev = h;
      }
    }
}

TEST(ScheduledSampling, Examples) {
  EXPECT_DOUBLE_EQ(scheduled_sampling_prob(0, 4000), 4000.0 / 4001.0);
  EXPECT_DOUBLE_EQ(scheduled_sampling_prob(4000, 4000), 4000.0 / (4000.0 + std::exp(1.0)));
  EXPECT_NEAR(scheduled_sampling_prob(40000, 4000), 4000.0 / (4000.0 + std::exp(10.0)), 1e-15);
  EXPECT_LT(scheduled_sampling_prob(100000, 4000), 1e-7);
  EXPECT_THROW(scheduled_sampling_prob(1, 0), PreconditionError);
}

TEST(ScheduledSampling, DecreasingInsideUnitInterval) {
  for (std::size_t tau : {1u, 10u, 300u, 4000u}) {
    double prev = 1.0;
    for (std::size_t it = 0; it < 200000; it += 997) {
      const double p = scheduled_sampling_prob(it, tau);
      EXPECT_GE(p, 0.0);
      EXPECT_LE(p, 1.0);
      EXPECT_LE(p, prev);
      prev = p;
    }
  }
}

TEST(ScheduledSampling, OverflowGivesZero) {
  EXPECT_EQ(scheduled_sampling_prob(std::numeric_limits<std::size_t>::max(), 1), 0.0);
  EXPECT_EQ(scheduled_sampling_prob(1000000, 10), 0.0);
}

TEST(AdamOptimizer, MatchesScalarRecursion) {
  auto w = Td::parameter({2}, {0.5, -1.0});
  Adam<double> opt({w});
  const AdamOptions o{0.01, 0.9, 0.999, 1e-8};
  double m[2] = {0, 0}, v[2] = {0, 0}, x[2] = {0.5, -1.0};
  for (int t = 1; t <= 20; ++t) {
    w.zero_grad();
    // loss = sum(w^3), gradient 3 w^2
    sum(mul(w, mul(w, w))).backward();
    opt.step(o, kInf);
    for (int i = 0; i < 2; ++i) {
      const double g = 3 * x[i] * x[i];
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.999 * v[i] + 0.001 * g * g;
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      x[i] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
      EXPECT_NEAR(w.values()[i], x[i], 1e-12);
    }
  }
  EXPECT_EQ(opt.steps(), 20u);
}

TEST(AdamOptimizer, ClipsByGlobalNorm) {
  auto a = Td::parameter({1}, {0.0}), b = Td::parameter({1}, {0.0});
  Adam<double> opt({a, b});
  // gradients (3, 4): norm 5
  add(scale(a, 3.0), scale(b, 4.0)).backward();
  EXPECT_DOUBLE_EQ(opt.step({0.1, 0.9, 0.999, 1e-8}, 1.0), 5.0);
  EXPECT_NEAR(opt.first_moments()[0][0], 0.1 * 0.6, 1e-15);
  EXPECT_NEAR(opt.first_moments()[1][0], 0.1 * 0.8, 1e-15);
}

TEST(AdamOptimizer, InfiniteClipLeavesGradientsAlone) {
  auto a = Td::parameter({1}, {0.0});
  Adam<double> opt({a});
  scale(a, 300.0).backward();
  opt.step({0.1, 0.9, 0.999, 1e-8}, kInf);
  EXPECT_NEAR(opt.first_moments()[0][0], 30.0, 1e-12);
}

TEST(MaskedMaeLoss, HandExample) {
  // B=1, Q=2, N=2; stats mean 10, std 2.
  const Td pred({1, 2, 2}, {0.0, 1.0, -1.0, 0.5});  // 10, 12, 8, 11
  const std::vector<double> target{11, 12, 4, 0}, mask{1, 1, 1, 0};
  const auto loss = masked_mae_loss(pred, target, mask, 2, NormStats{10, 2});
  EXPECT_DOUBLE_EQ(loss.item(), (1.0 + 0.0 + 4.0) / 3.0);
}

TEST(MaskedMaeLoss, LabelsBeyondHorizonAreIgnored) {
  test::Rng rng(1);
  const Td pred({2, 1, 3}, test::uniform_values(6, rng));
  auto target = test::uniform_values(2 * 3 * 3, rng, 40, 60);
  const std::vector<double> mask(18, 1.0);
  const double before = masked_mae_loss(pred, target, mask, 3, NormStats{50, 5}).item();
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t s = 1; s < 3; ++s)
      for (std::size_t n = 0; n < 3; ++n) target[(b * 3 + s) * 3 + n] = 1e6;
  EXPECT_EQ(masked_mae_loss(pred, target, mask, 3, NormStats{50, 5}).item(), before);
}

TEST(MaskedMaeLoss, AllMaskedIsZero) {
  const Td pred({1, 1, 2}, {1, 2});
  EXPECT_EQ(masked_mae_loss(pred, {5, 5}, {0, 0}, 1, NormStats{}).item(), 0.0);
  EXPECT_THROW(masked_mae_loss(pred, {5, 5, 5, 5}, {1, 1, 1, 1}, 1, NormStats{}), DimensionError);
}

TEST(TrainStep, ZeroLearningRateKeepsParametersBitIdentical) {
  Fixture f;
  auto m = f.model();
  const auto before = snapshot(m);
  f.cfg.train.learning_rate = 0.0;
  f.cfg.train.grad_clip = kInf;
  TrainState<double> st(m, 1);
  auto batch = make_batch<double>(f.data, std::span(f.data.train.starts.data(), 4));
  const auto r = train_step(m, st, batch, f.graph, f.cfg.train, f.data.stats);
  EXPECT_GT(r.grad_norm, 0.0);
  EXPECT_EQ(snapshot(m), before);
}

TEST(TrainStep, FirstIterationUsesOneDecoderStep) {
  Fixture f;
  auto m = f.model();
  TrainState<double> st(m, 1);
  auto batch = make_batch<double>(f.data, std::span(f.data.train.starts.data(), 4));
  const auto r = train_step(m, st, batch, f.graph, f.cfg.train, f.data.stats);
  EXPECT_EQ(r.horizon, 1u);
  EXPECT_EQ(r.cell_steps, 1u);
  EXPECT_DOUBLE_EQ(r.ss_prob, scheduled_sampling_prob(1, 20));
  EXPECT_EQ(st.iter, 1u);

  // Corrupting labels past the horizon does not change the step's loss.
  auto m2 = f.model();
  TrainState<double> st2(m2, 1);
  auto corrupted = batch;
  for (std::size_t b = 0; b < 4; ++b)
    for (std::size_t s = 1; s < 3; ++s)
      for (std::size_t n = 0; n < 5; ++n) corrupted.target[(b * 3 + s) * 5 + n] = 999.0;
  EXPECT_EQ(train_step(m2, st2, corrupted, f.graph, f.cfg.train, f.data.stats).loss, r.loss);
}

TEST(TrainStep, NonFiniteLossNamesTheBatch) {
  Fixture f;
  auto m = f.model();
  TrainState<double> st(m, 1);
  auto batch = make_batch<double>(f.data, std::span(f.data.train.starts.data(), 2));
  batch.target[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    train_step(m, st, batch, f.graph, f.cfg.train, f.data.stats, 17);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("batch 17"), std::string::npos);
  }
}

TEST(Fit, LossDecreasesOnSmallProblem) {
  Fixture f;
  auto m = f.model();
  const auto r = fit(m, f.data, f.graph, f.cfg.train);
  ASSERT_EQ(r.history.size(), 3u);
  EXPECT_LT(r.history.back().train_mae, r.history.front().train_mae);
  // Frozen from a reference run of this fixture.
  EXPECT_NEAR(r.history.front().train_mae, 7.21641061920799, 1e-9);
}

TEST(Fit, DeterministicForFixedSeed) {
  Fixture f;
  auto a = f.model(), b = f.model();
  std::ostringstream la, lb;
  FitOptions oa, ob;
  oa.log = &la;
  ob.log = &lb;
  fit(a, f.data, f.graph, f.cfg.train, oa);
  fit(b, f.data, f.graph, f.cfg.train, ob);
  EXPECT_EQ(la.str(), lb.str());
  EXPECT_EQ(snapshot(a), snapshot(b));
}

TEST(Fit, ZeroPatienceStopsAtFirstStall) {
  Fixture f;
  f.cfg.train.patience = 0;
  f.cfg.train.max_epochs = 8;
  auto m = f.model();
  const auto r = fit(m, f.data, f.graph, f.cfg.train);
  ASSERT_LE(r.history.size(), 8u);
  // Every epoch but the last improved on the best so far.
  double best = kInf;
  for (std::size_t i = 0; i + 1 < r.history.size(); ++i) {
    EXPECT_LT(r.history[i].val_mae, best);
    best = r.history[i].val_mae;
  }
  if (r.history.size() < 8) EXPECT_GE(r.history.back().val_mae, best);
}

TEST(Fit, RestoresBestValidationParameters) {
  Fixture f;
  f.cfg.train.max_epochs = 4;
  auto m = f.model();
  const auto r = fit(m, f.data, f.graph, f.cfg.train);
  ASSERT_GE(r.best_epoch, 1u);
  EXPECT_DOUBLE_EQ(r.best_val, r.history[r.best_epoch - 1].val_mae);
  const auto again = pooled_metrics(predict_model(m, f.graph, f.data, f.data.val.starts, 256), f.data.policy);
  EXPECT_DOUBLE_EQ(again.mae, r.best_val);
}

TEST(Fit, CurriculumRunsFewerDecoderSteps) {
  Fixture f;
  auto a = f.model(), b = f.model();
  const auto with = fit(a, f.data, f.graph, f.cfg.train);
  f.cfg.train.curriculum = false;
  const auto without = fit(b, f.data, f.graph, f.cfg.train);
  EXPECT_EQ(without.decoder_cell_steps, 3 * without.iterations);
  EXPECT_LT(with.decoder_cell_steps, without.decoder_cell_steps);
  std::size_t expect = 0;
  for (std::size_t it = 1; it <= with.iterations; ++it) expect += curriculum_horizon(it, 4, 3);
  EXPECT_EQ(with.decoder_cell_steps, expect);
}

TEST(Fit, RejectsEmptySplits) {
  Fixture f;
  auto m = f.model();
  auto d = f.data;
  d.val.starts.clear();
  EXPECT_THROW(fit(m, d, f.graph, f.cfg.train), ConfigError);
}

TEST(TrainingLog, HeaderAndRowFormat) {
  std::ostringstream out;
  write_training_log_header(out);
  EpochRecord e;
  e.epoch = 3;
  e.train_mae = 2.5;
  e.val_mae = 3.25;
  e.val_rmse = 4;
  e.val_mape = 5.5;
  e.seconds = 0;
  e.horizon = 7;
  e.ss_prob = 0.5;
  write_training_log_row(out, e);
  EXPECT_EQ(out.str(),
            "epoch,train_mae,val_mae,val_rmse,val_mape,seconds,horizon_i,ss_prob\n"
            "3,2.500000,3.250000,4.000000,5.5000,0.000,7,0.500000\n");
}

TEST(Checkpoint, RoundTrip) {
  Fixture f;
  auto m = f.model();
  const auto path = (std::filesystem::temp_directory_path() / "dgcrn_test_ckpt.bin").string();
  save_checkpoint(path, f.cfg, NormStats{51.5, 9.25}, m);
  const auto ck = load_checkpoint<double>(path);
  std::filesystem::remove(path);
  EXPECT_EQ(to_json(ck.config), to_json(f.cfg));
  EXPECT_EQ(ck.stats.mean, 51.5);
  EXPECT_EQ(ck.stats.std, 9.25);
  EXPECT_EQ(ck.params.n_nodes, 5u);
  EXPECT_EQ(snapshot(ck.params), snapshot(m));
}

TEST(Checkpoint, FloatPrecisionRoundTrip) {
  Fixture f;
  auto m = init_model<float>(f.cfg.model, 5, 2);
  ByteReader in(checkpoint_container(f.cfg, {}, m).encode());
  const auto c = checkpoint_from_container<float>(Container::decode(in));
  const auto a = m.named_parameters(), b = c.params.named_parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].second.values(), b[i].second.values());
}

TEST(Checkpoint, RejectsMismatchedModel) {
  Fixture f;
  auto m = f.model();
  auto c = checkpoint_container(f.cfg, {}, m);
  Config other = f.cfg;
  other.model.hidden = 6;
  Container swapped;
  swapped.add_text("meta/config", to_json(other).dump());
  for (const auto& r : c.records)
    if (r.name != "meta/config") swapped.records.push_back(r);
  EXPECT_THROW(checkpoint_from_container<double>(swapped), Error);
  EXPECT_THROW(load_checkpoint<double>("/nonexistent/ckpt"), IoError);
}
