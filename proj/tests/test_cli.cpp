#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string output;
};

Run run(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + (env.empty() ? "" : " ") + "'" DGCRN_CLI_PATH "' " + args + " 2>&1";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  while (std::fgets(buf, sizeof buf, p)) r.output += buf;
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Small, fast model and a three-day split on a tiny synthetic network.
const std::string kTiny =
    " --set model.hidden=6 --set model.embed_dim=3 --set model.hyper_dim=3 --set model.input_len=4"
    " --set model.output_len=4 --set train.max_epochs=2 --set train.batch_size=64 --set data.split=days"
    " --set data.train_days=1 --set data.val_days=1 --set data.test_days=1 --set train.record_timing=false"
    " --horizons 1,4";

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() / ("dgcrn_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  std::string p(const std::string& rel) const { return (dir / rel).string(); }

  void make_data() {
    ASSERT_EQ(run("gen-data --nodes 6 --days 3 --seed 4 --out " + p("data")).code, 0);
    ASSERT_EQ(run("build-graph --distances " + p("data/distances.csv") + " --out " + p("graph")).code, 0);
  }

  std::string data_args() const {
    return " --data " + p("data/speed.bin") + " --graph " + p("graph/graph.dgcrn");
  }

  fs::path dir;
};

}  // namespace

TEST_F(Cli, NoOrUnknownCommandFails) {
  EXPECT_EQ(run("").code, 1);
  const auto r = run("frobnicate");
  EXPECT_EQ(r.code, 1);
  EXPECT_FALSE(r.output.empty());
}

TEST_F(Cli, HelpListsSubcommandsAndConfigKeys) {
  const auto top = run("--help");
  EXPECT_EQ(top.code, 0);
  for (const char* sub : {"gen-data", "build-graph", "train", "eval", "gradcheck", "bench", "analyze"})
    EXPECT_NE(top.output.find(sub), std::string::npos) << sub;
  const auto train = run("train --help");
  EXPECT_EQ(train.code, 0);
  for (const char* key : {"model.hidden", "model.beta_mix", "train.ss_decay", "data.kappa", "--ablation"})
    EXPECT_NE(train.output.find(key), std::string::npos) << key;
}

TEST_F(Cli, MissingInputFileFails) {
  const auto r = run("train --data " + p("nope.bin") + " --graph " + p("nope.csv") + " --out " + p("o"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("nope"), std::string::npos) << r.output;
}

TEST_F(Cli, BadOptionsFail) {
  make_data();
  EXPECT_EQ(run("train" + data_args() + " --set model.size=3 --out " + p("o")).code, 1);
  EXPECT_EQ(run("train" + data_args() + " --ablation w/o-all --out " + p("o")).code, 1);
  EXPECT_EQ(run("train" + data_args() + " --precision 16 --out " + p("o")).code, 1);
  EXPECT_EQ(run("train" + data_args() + kTiny + " --out " + p("o"), "DGCRN_THREADS=many").code, 1);
}

TEST_F(Cli, GradcheckPasses) {
  const auto r = run("gradcheck --seed 7 --out " + p("gc"));
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("max"), std::string::npos);
}

TEST_F(Cli, GenDataWritesFilesAndManifest) {
  make_data();
  for (const char* f : {"speed.bin", "distances.csv", "links.csv", "gen-data_manifest.json"})
    EXPECT_TRUE(fs::exists(dir / "data" / f)) << f;
  const auto m = nlohmann::json::parse(slurp(dir / "data/gen-data_manifest.json"));
  EXPECT_EQ(m["command"], "gen-data");
  EXPECT_EQ(m["seed"], 4);
  EXPECT_TRUE(m.contains("started"));
  EXPECT_TRUE(m.contains("finished"));
  EXPECT_TRUE(m.contains("outputs"));
  EXPECT_EQ(run("gen-data --nodes 5 --days 1 --format csv --out " + p("csv")).code, 0);
  EXPECT_EQ(slurp(dir / "csv/speed.csv").rfind("timestamp,", 0), 0u);
}

TEST_F(Cli, TrainThenEval) {
  make_data();
  const auto tr = run("train" + data_args() + kTiny + " --seed 3 --out " + p("t"));
  ASSERT_EQ(tr.code, 0) << tr.output;
  EXPECT_TRUE(fs::exists(dir / "t/checkpoint.dgcrn"));
  const auto log = slurp(dir / "t/train_log.csv");
  EXPECT_EQ(log.rfind("epoch,train_mae,val_mae,val_rmse,val_mape,seconds,horizon_i,ss_prob\n", 0), 0u);
  const auto manifest = nlohmann::json::parse(slurp(dir / "t/train_manifest.json"));
  EXPECT_EQ(manifest["command"], "train");
  EXPECT_EQ(manifest["config"]["model"]["hidden"], 6);

  const auto ev = run("eval --checkpoint " + p("t/checkpoint.dgcrn") + data_args() +
                      " --horizons 1,4 --dump-forecasts " + p("e/f.csv") + " --out " + p("e"));
  ASSERT_EQ(ev.code, 0) << ev.output;
  const auto report = slurp(dir / "e/report.csv");
  EXPECT_EQ(report.rfind("model,horizon,mae,rmse,mape,n_observed\nDGCRN,1,", 0), 0u) << report;
  EXPECT_TRUE(fs::exists(dir / "e/f.csv"));

  // Scoring the dumped forecasts reproduces the report.
  const auto again = run("eval --forecasts " + p("e/f.csv") + " --horizons 1,4 --out " + p("e2"));
  ASSERT_EQ(again.code, 0) << again.output;
  auto relabel = [](std::string s) {
    for (std::size_t at; (at = s.find("\nforecast,")) != std::string::npos;) s.replace(at, 10, "\nDGCRN,");
    return s;
  };
  EXPECT_EQ(relabel(slurp(dir / "e2/report.csv")), report);
}

TEST_F(Cli, EvalOfPerfectForecastIsZero) {
  std::ofstream(p("perfect.csv")) << "sample,horizon,node,pred,truth\n"
                                     "0,1,0,50,50\n0,1,1,42.5,42.5\n1,1,0,61,61\n1,1,1,30,30\n";
  const auto r = run("eval --forecasts " + p("perfect.csv") + " --horizons 1 --out " + p("e"));
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(slurp(dir / "e/report.csv"),
            "model,horizon,mae,rmse,mape,n_observed\nforecast,1,0.000000,0.000000,0.00,4\n");
}

TEST_F(Cli, EvalRejectsNodeMismatch) {
  make_data();
  ASSERT_EQ(run("train" + data_args() + kTiny + " --out " + p("t")).code, 0);
  ASSERT_EQ(run("gen-data --nodes 7 --days 3 --out " + p("other")).code, 0);
  const auto r = run("eval --checkpoint " + p("t/checkpoint.dgcrn") + " --data " + p("other/speed.bin") +
                     " --graph " + p("other/distances.csv") + " --out " + p("e"));
  EXPECT_EQ(r.code, 1);
}

TEST_F(Cli, AblationFlagEqualsConfigOverride) {
  make_data();
  ASSERT_EQ(run("train" + data_args() + kTiny + " --ablation w/o-dg --out " + p("a")).code, 0);
  ASSERT_EQ(run("train" + data_args() + kTiny + " --set model.beta_mix=0 --out " + p("b")).code, 0);
  EXPECT_EQ(slurp(dir / "a/checkpoint.dgcrn"), slurp(dir / "b/checkpoint.dgcrn"));
  EXPECT_EQ(slurp(dir / "a/train_log.csv"), slurp(dir / "b/train_log.csv"));
}

TEST_F(Cli, BenchAndAnalyze) {
  make_data();
  const auto b = run("bench" + data_args() + kTiny + " --out " + p("b"));
  ASSERT_EQ(b.code, 0) << b.output;
  const auto report = slurp(dir / "b/report.csv");
  for (const char* m : {"\nHA,", "\npersistence,", "\nDGCRN,"}) EXPECT_NE(report.find(m), std::string::npos) << m;
  const auto a = run("analyze --data " + p("data/speed.bin") + " --out " + p("s"));
  ASSERT_EQ(a.code, 0) << a.output;
  EXPECT_EQ(slurp(dir / "s/stats.csv").rfind("statistic,bin_low,bin_high,count\n", 0), 0u);
}
