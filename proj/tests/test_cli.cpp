// Drives the krona_cli binary end to end and checks exit codes and outputs.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "krona/checkpoint.hpp"
#include "krona/config.hpp"

using namespace krona;
namespace fs = std::filesystem;

namespace {

const std::string kCli = KRONA_CLI;
const fs::path kConfigs = fs::path(KRONA_SOURCE_DIR) / "configs";

struct Result {
  int code = -1;
  std::string out;
};

Result run(const std::string& args) {
  const std::string cmd = kCli + " " + args + " 2>&1";
  FILE* p = ::popen(cmd.c_str(), "r");
  Result r;
  char buf[512];
  while (std::fgets(buf, sizeof buf, p)) r.out += buf;
  const int status = ::pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() /
          (std::string("krona_cli_") + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  std::string smoke() const { return "--config " + (kConfigs / "smoke.json").string(); }
  std::string out(const std::string& sub) const { return "--out " + (dir / sub).string(); }
  fs::path write_config(const std::string& text) const {
    const fs::path p = dir / "cfg.json";
    std::ofstream(p) << text;
    return p;
  }

  fs::path dir;
};

}  // namespace

TEST_F(Cli, ShapesTables) {
  const Result a = run("shapes 64 64");
  EXPECT_EQ(a.code, 0);
  EXPECT_NE(a.out.find("49 shapes"), std::string::npos);
  const Result b = run("shapes 1 1");
  EXPECT_EQ(b.code, 0);
  EXPECT_NE(b.out.find("1 shapes"), std::string::npos);
  EXPECT_EQ(run("shapes 0 4").code, 2);
  EXPECT_EQ(run("shapes 4").code, 2);
}

TEST_F(Cli, UsageErrors) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("--precision f16 shapes 2 2").code, 2);
  EXPECT_EQ(run("--help").code, 0);
}

TEST_F(Cli, TrainWritesCheckpointMetricsAndResolvedConfig) {
  const Result r = run(smoke() + " " + out("run") + " train");
  ASSERT_EQ(r.code, 0) << r.out;
  for (const char* f : {"adapter.krad", "backbone.krbb", "metrics.jsonl", "pretrain.jsonl", "config.json"})
    EXPECT_TRUE(fs::exists(dir / "run" / f)) << f;
  EXPECT_FALSE(fs::exists(dir / "run" / ".lock"));

  const RunConfig resolved = load_run_config(dir / "run" / "config.json");
  EXPECT_EQ(resolved.out_dir, (dir / "run").string());
  EXPECT_EQ(resolved.finetune.epochs, 15u);

  std::ifstream metrics(dir / "run" / "metrics.jsonl");
  std::string line;
  std::size_t n = 0;
  double best = -1.0;
  while (std::getline(metrics, line)) {
    const Json j = Json::parse(line);
    EXPECT_EQ(j.size(), 4u);
    EXPECT_EQ(j.at("epoch").get<std::size_t>(), n);
    best = std::max(best, j.at("eval_metric").get<double>());
    ++n;
  }
  EXPECT_EQ(n, 16u);  // epoch 0 plus 15
  const Checkpoint ck = load_checkpoint(dir / "run" / "adapter.krad");
  EXPECT_EQ(ck.best_metric, best);
  EXPECT_EQ(ck.spec.kind, AdapterKind::krona);
}

TEST_F(Cli, SeedOverrideIsDeterministic) {
  ASSERT_EQ(run(smoke() + " --seed 7 " + out("a") + " train").code, 0);
  ASSERT_EQ(run(smoke() + " --seed 7 " + out("b") + " train").code, 0);
  ASSERT_EQ(run(smoke() + " --seed 8 " + out("c") + " train").code, 0);
  const std::string a = slurp(dir / "a" / "metrics.jsonl");
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, slurp(dir / "b" / "metrics.jsonl"));
  EXPECT_EQ(slurp(dir / "a" / "adapter.krad"), slurp(dir / "b" / "adapter.krad"));
  EXPECT_NE(a, slurp(dir / "c" / "metrics.jsonl"));
  EXPECT_EQ(load_run_config(dir / "a" / "config.json").task.seed, 7u);
}

TEST_F(Cli, MalformedAndUnknownConfigsExitTwo) {
  const fs::path bad = write_config("{\n  \"model\": {\n    \"d_h\": 16,,\n  }\n}\n");
  Result r = run("--config " + bad.string() + " train");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("cfg.json:3:"), std::string::npos) << r.out;

  const fs::path typo = write_config("{\n  \"finetune\": {\n    \"epoch\": 3\n  }\n}\n");
  r = run("--config " + typo.string() + " train");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("finetune.epoch: unknown key"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("cfg.json:3"), std::string::npos) << r.out;

  EXPECT_EQ(run("--config " + (dir / "nope.json").string() + " train").code, 2);
}

TEST_F(Cli, DivergenceExitsThree) {
  const fs::path cfg = write_config(R"({
    "model": {"vocab_size": 8, "max_seq_len": 6, "d_h": 16, "n_layers": 1, "n_heads": 2, "ffn_hidden": 32},
    "task": {"vocab": 8, "seq_len": 6, "n_train": 64, "n_eval": 16},
    "pretrain": {"learning_rate": 1e300, "epochs": 3}
  })");
  const Result r = run("--config " + cfg.string() + " " + out("div") + " train");
  EXPECT_EQ(r.code, 3) << r.out;
  EXPECT_NE(r.out.find("diverged at step"), std::string::npos) << r.out;
}

TEST_F(Cli, LockedRunDirectoryIsRefused) {
  fs::create_directories(dir / "locked");
  std::ofstream(dir / "locked" / ".lock") << "1\n";
  const Result r = run(smoke() + " " + out("locked") + " train");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("locked"), std::string::npos);
}

TEST_F(Cli, MergeReproducesTheTrainingMetric) {
  ASSERT_EQ(run(smoke() + " " + out("run") + " train").code, 0);
  const std::string bb = (dir / "run" / "backbone.krbb").string(), ad = (dir / "run" / "adapter.krad").string();
  const std::string merged = (dir / "merged.krbb").string();
  const Result m = run(smoke() + " merge " + bb + " " + ad + " " + merged);
  ASSERT_EQ(m.code, 0) << m.out;
  EXPECT_NE(m.out.find("max forward deviation"), std::string::npos);

  const Result e1 = run(smoke() + " eval --backbone " + bb + " --adapter " + ad);
  const Result e2 = run(smoke() + " eval --backbone " + merged);
  ASSERT_EQ(e1.code, 0) << e1.out;
  ASSERT_EQ(e2.code, 0) << e2.out;
  const Json j1 = Json::parse(e1.out), j2 = Json::parse(e2.out);
  const double best = load_checkpoint(ad).best_metric;
  EXPECT_NEAR(j1.at("eval_metric").get<double>(), best, 1e-12);
  EXPECT_NEAR(j2.at("eval_metric").get<double>(), best, 1e-12);
  EXPECT_NEAR(j2.at("eval_loss").get<double>(), j1.at("eval_loss").get<double>(), 1e-10);
}

TEST_F(Cli, ZeroInitMergeLeavesWeightsUntouched) {
  const RunConfig c = load_run_config(kConfigs / "smoke.json");
  auto model = build_model<double>(c.model);
  save_backbone(model, dir / "bb.krbb");
  attach_adapters(model, c.adapter);
  save_checkpoint(make_checkpoint(model), dir / "zero.krad");
  const Result r = run(smoke() + " merge " + (dir / "bb.krbb").string() + " " + (dir / "zero.krad").string() +
                       " " + (dir / "merged.krbb").string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(slurp(dir / "merged.krbb"), slurp(dir / "bb.krbb"));
}

TEST_F(Cli, NonMergeableKindExitsFourWithSites) {
  const fs::path cfg = write_config(R"({
    "model": {"vocab_size": 8, "max_seq_len": 6, "d_h": 16, "n_layers": 1, "n_heads": 2, "ffn_hidden": 32},
    "task": {"vocab": 8, "seq_len": 6, "n_train": 64, "n_eval": 16},
    "pretrain": {"epochs": 1}, "finetune": {"epochs": 1},
    "adapter": {"kind": "krona_b"}
  })");
  ASSERT_EQ(run("--config " + cfg.string() + " " + out("kb") + " train").code, 0);
  const Result r = run("merge " + (dir / "kb" / "backbone.krbb").string() + " " +
                       (dir / "kb" / "adapter.krad").string() + " " + (dir / "m.krbb").string());
  EXPECT_EQ(r.code, 4) << r.out;
  EXPECT_NE(r.out.find("sites: L0."), std::string::npos) << r.out;
  EXPECT_FALSE(fs::exists(dir / "m.krbb"));
}

TEST_F(Cli, BenchMethodsAreValidated) {
  const Result ok = run(smoke() + " " + out("bench") + " bench");
  ASSERT_EQ(ok.code, 0) << ok.out;
  EXPECT_NE(ok.out.find("krona_merged"), std::string::npos);
  const Json reports = Json::parse(slurp(dir / "bench" / "bench.json"));
  ASSERT_EQ(reports.size(), 3u);
  EXPECT_EQ(reports[0].at("normalized").get<double>(), 100.0);

  const fs::path empty = write_config(R"({"bench": {"methods": []}})");
  EXPECT_EQ(run("--config " + empty.string() + " " + out("e") + " bench").code, 2);
  const fs::path unknown = write_config(R"({"bench": {"methods": ["ft", "warp"]}})");
  const Result u = run("--config " + unknown.string() + " " + out("u") + " bench");
  EXPECT_EQ(u.code, 2);
  EXPECT_NE(u.out.find("warp"), std::string::npos);
}

TEST_F(Cli, GradcheckPassesFailsAndRefuses) {
  const std::string gc = "--config " + (kConfigs / "gradcheck.json").string();
  const Result pass = run(gc + " gradcheck");
  EXPECT_EQ(pass.code, 0) << pass.out;
  EXPECT_NE(pass.out.find("PASS"), std::string::npos);
  EXPECT_EQ(run(gc + " gradcheck --corrupt").code, 5);
  const Result big = run("gradcheck");
  EXPECT_EQ(big.code, 2);
  EXPECT_NE(big.out.find("too large"), std::string::npos);
}

TEST_F(Cli, SinglePrecisionRuns) {
  const Result r = run(smoke() + " --precision f32 " + out("f32") + " train");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(load_run_config(dir / "f32" / "config.json").precision, "f32");
}
