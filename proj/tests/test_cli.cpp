#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

class CliTest : public ::testing::Test {
 protected:
  fs::path dir;

  void SetUp() override {
    dir = fs::temp_directory_path() /
          (std::string("bayesnas_cli_") + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  Result run(const std::string& args, const std::string& env = "") {
    const fs::path o = dir / "stdout.txt", e = dir / "stderr.txt";
    const std::string cmd = "cd '" + dir.string() + "' && " + env + " '" + BAYESNAS_CLI + "' " + args + " >'" +
                            o.string() + "' 2>'" + e.string() + "'";
    const int status = std::system(cmd.c_str());
    Result r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(o);
    r.err = slurp(e);
    return r;
  }

  void write(const std::string& name, const std::string& text) { std::ofstream(dir / name) << text; }

  void write_config(const std::string& name, const std::string& output_dir, const std::string& extra = "") {
    write(name, R"({"seed": 5, "backbone": "mlp", "dataset": "synth:gaussians:200:2:4", "output_dir": ")" +
                    output_dir + R"(",
 "search": {"epochs": 3, "batch_size": 32, "lr_t": 0.003, "lr_arch": 0.01, "noise": {"warmup_epochs": 1})" +
                    extra + R"(},
 "vae": {"hidden": 8, "latent": 2, "epochs": 2, "lr": 0.001},
 "baseline": {"epochs": 2, "batch_size": 32, "ensemble_size": 2}})");
  }
};

// Exactly one line on stderr, parseable JSON naming the error kind.
void expect_error_line(const Result& r, const std::string& kind) {
  ASSERT_FALSE(r.err.empty());
  EXPECT_EQ(r.err.find('\n'), r.err.size() - 1) << r.err;
  const auto j = nlohmann::json::parse(r.err, nullptr, false);
  ASSERT_FALSE(j.is_discarded()) << r.err;
  EXPECT_EQ(j.value("error", ""), kind) << r.err;
  EXPECT_FALSE(j.value("message", "").empty());
}

}  // namespace

TEST_F(CliTest, HelpSucceedsAndMissingCommandIsAConfigError) {
  EXPECT_EQ(run("--help").code, 0);
  const Result r = run("");
  EXPECT_EQ(r.code, 2);
  expect_error_line(r, "config_error");
  EXPECT_EQ(run("frobnicate").code, 2);
}

TEST_F(CliTest, ConfigErrorsExitTwo) {
  Result r = run("vae-train --config missing.json");
  EXPECT_EQ(r.code, 2);
  expect_error_line(r, "config_error");

  write("bad.json", R"({"seed": 1, "dataset": "synth:gaussians:100:1", "lr": 0.1})");
  r = run("vae-train --config bad.json");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("unknown key 'lr'"), std::string::npos) << r.err;

  write("neg.json", R"({"dataset": "synth:gaussians:100:1", "search": {"epochs": 0}})");
  EXPECT_EQ(run("vae-train --config neg.json").code, 2);

  write_config("ok.json", "out");
  r = run("vae-train --config ok.json", "BAYESNAS_SEED=abc");
  EXPECT_EQ(r.code, 2);
  expect_error_line(r, "config_error");
  EXPECT_FALSE(fs::exists(dir / "out" / "vae.ckpt"));
}

TEST_F(CliTest, DataErrorsExitThree) {
  write("csv.json", R"({"dataset": "csv:nowhere.csv", "output_dir": "out"})");
  Result r = run("vae-train --config csv.json");
  EXPECT_EQ(r.code, 3);
  expect_error_line(r, "data_error");

  write("model.ckpt", "{not json");
  r = run("eval --model model.ckpt --dataset synth:gaussians:50:1");
  EXPECT_EQ(r.code, 3);
  expect_error_line(r, "data_error");

  write("table.csv", "a,b,label\n1,2,0\n3,x,1\n");
  write("tab.json", R"({"dataset": "csv:table.csv", "output_dir": "out2"})");
  r = run("vae-train --config tab.json");
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("row"), std::string::npos) << r.err;
}

TEST_F(CliTest, NumericDivergenceExitsFour) {
  write_config("c.json", "out", R"(, "lr_t": 1e300)");
  ASSERT_EQ(run("vae-train --config c.json").code, 0);
  const Result r = run("search --config c.json --vae out/vae.ckpt");
  EXPECT_EQ(r.code, 4) << r.err;
  expect_error_line(r, "numeric_error");
}

TEST_F(CliTest, LockedOutputDirectoryIsRefused) {
  write_config("c.json", "out");
  fs::create_directories(dir / "out");
  write("out/.bayesnas.lock", "123\n");
  const Result r = run("vae-train --config c.json");
  EXPECT_NE(r.code, 0);
  expect_error_line(r, "usage_error");
  fs::remove(dir / "out" / ".bayesnas.lock");
  EXPECT_EQ(run("vae-train --config c.json").code, 0);
  EXPECT_FALSE(fs::exists(dir / "out" / ".bayesnas.lock"));
}

TEST_F(CliTest, SearchIsByteReproducible) {
  write_config("a.json", "run_a");
  write_config("b.json", "run_b");
  ASSERT_EQ(run("vae-train --config a.json --out vae.ckpt").code, 0);
  ASSERT_EQ(run("search --config a.json --vae vae.ckpt").code, 0);
  ASSERT_EQ(run("search --config b.json --vae vae.ckpt").code, 0);
  for (const char* f : {"selection.json", "trajectory.jsonl"}) {
    const std::string a = slurp(dir / "run_a" / f), b = slurp(dir / "run_b" / f);
    EXPECT_FALSE(a.empty());
    EXPECT_EQ(a, b) << f;
  }
  write_config("c.json", "run_c");
  ASSERT_EQ(run("search --config c.json --vae vae.ckpt", "BAYESNAS_SEED=6").code, 0);
  EXPECT_NE(slurp(dir / "run_a" / "trajectory.jsonl"), slurp(dir / "run_c" / "trajectory.jsonl"));
}

TEST_F(CliTest, FullPipelineProducesMetricsAndReport) {
  write_config("c.json", "out");
  ASSERT_EQ(run("vae-train --config c.json").code, 0);
  ASSERT_EQ(run("search --config c.json --vae out/vae.ckpt").code, 0);
  ASSERT_EQ(run("retrain --config c.json --selection out/selection.json").code, 0);
  Result r = run("eval --model out/model.ckpt --dataset synth:gaussians:100:7:4 --ood white_noise --mc-samples 10 "
                 "--out metrics/nas.json --csv metrics/nas.csv");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(slurp(dir / "metrics" / "nas.json"));
  for (const char* k : {"accuracy", "certainty", "delta_certainty", "nll", "f1", "auroc", "flops_full"})
    EXPECT_TRUE(j.contains(k)) << k;
  EXPECT_EQ(nlohmann::json::parse(r.out), j);

  r = run("eval --model out/model.ckpt --dataset synth:gaussians:100:7:4 --ood rotate:30");
  EXPECT_EQ(r.code, 2);
  r = run("eval --model out/model.ckpt --dataset synth:gaussians:100:7:4 --ood white_noise --ood-dataset x");
  EXPECT_EQ(r.code, 2);
  r = run("eval --model out/model.ckpt --dataset synth:gaussians:100:7:4 --ood-dataset synth:moons:100:3");
  EXPECT_EQ(r.code, 0) << r.err;

  write_config("b.json", "metrics");
  ASSERT_EQ(run("baseline --config b.json --kind mcdropout").code, 0);
  EXPECT_TRUE(fs::exists(dir / "metrics" / "metrics_mcdropout_seed5.json"));
  EXPECT_EQ(run("baseline --config b.json --kind gp").code, 2);

  r = run("report --dir metrics");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("| Metric | mcdropout | nas |"), std::string::npos) << r.out;
  const std::string first = slurp(dir / "metrics" / "report.md");
  ASSERT_EQ(run("report --dir metrics").code, 0);
  EXPECT_EQ(slurp(dir / "metrics" / "report.md"), first);
}

TEST_F(CliTest, SweepWritesOneRowPerDepth) {
  write_config("c.json", "out");
  const Result r = run("sweep-nlast --config c.json --backbone mlp");
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string csv = slurp(dir / "out" / "sweep_nlast_mlp.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 6);
  EXPECT_EQ(csv, r.out);
}
