#include <gtest/gtest.h>

#include <algorithm>

#include "cli_support.hpp"
#include "support.hpp"

using namespace sdream;
using namespace sdream::testing;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char* kSmallConfig = R"({
  "dataset": {"per_cell": 3, "size": 8, "domains": ["flat", "stripes", "noise"],
              "classes": ["disk", "square", "ring"]},
  "model": {"widths": [4, 6]},
  "train": {"epochs": 2, "batch_size": 8, "lr": 0.05},
  "experiment": {"seeds": [0], "alphas": [0.03, 0.3], "taus": [1, 5, 20]}
})";

// One dataset shared by every test in this file.
class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("cli");
    write(config(), kSmallConfig);
    const CliRun r = run_cli("gen-data --config " + config().string() + " --out " + data().string());
    ASSERT_EQ(r.code, 0) << r.out;
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static fs::path config() { return *dir_ / "small.json"; }
  static fs::path data() { return *dir_ / "data"; }
  static fs::path path(const std::string& name) { return *dir_ / name; }

  static TempDir* dir_;
};

TempDir* CliTest::dir_ = nullptr;

}  // namespace

TEST_F(CliTest, HelpForEveryCommand) {
  for (const std::string cmd : {"", "gen-data", "dream", "train", "experiment"}) {
    const CliRun r = run_cli(cmd + " --help");
    EXPECT_EQ(r.code, 0) << cmd;
    EXPECT_NE(r.out.find("--"), std::string::npos) << cmd;
  }
  const CliRun train = run_cli("train --help");
  for (const char* flag : {"--config", "--data", "--out", "--mode", "--threads"}) {
    EXPECT_NE(train.out.find(flag), std::string::npos) << flag;
  }
  const CliRun dream = run_cli("dream --help");
  for (const char* flag : {"--checkpoint", "--content", "--style", "--iterations", "--alpha", "--no-standardize"}) {
    EXPECT_NE(dream.out.find(flag), std::string::npos) << flag;
  }
}

TEST_F(CliTest, GenDataLayoutAndDeterminism) {
  std::size_t files = 0;
  for (const auto& d : {"flat", "stripes", "noise"})
    for (const auto& c : {"disk", "square", "ring"})
      for (const auto& e : fs::directory_iterator(data() / d / c)) files += e.path().extension() == ".ppm";
  EXPECT_EQ(files, 3u * 3u * 3u);

  const CliRun again = run_cli("gen-data --config " + config().string() + " --out " + path("data2").string());
  ASSERT_EQ(again.code, 0);
  EXPECT_EQ(result_of(again)["manifest"], (path("data2") / "manifest.json").string());
  for (const auto& e : fs::recursive_directory_iterator(data())) {
    if (!e.is_regular_file()) continue;
    EXPECT_EQ(slurp(e.path()), slurp(path("data2") / fs::relative(e.path(), data())));
  }
}

TEST_F(CliTest, DefaultDatasetCounts) {
  // Default domains and classes at a reduced per_cell.
  write(path("default.json"), R"({"dataset": {"per_cell": 2}})");
  const CliRun r = run_cli("gen-data --config " + path("default.json").string() + " --out " + path("dflt").string());
  ASSERT_EQ(r.code, 0);
  const auto manifest = json::parse(slurp(path("dflt") / "manifest.json"));
  EXPECT_EQ(manifest["domains"].size(), 4u);
  EXPECT_EQ(manifest["classes"].size(), 5u);
  for (const auto& [domain, classes] : manifest["counts"].items()) {
    for (const auto& [cls, count] : classes.items()) {
      EXPECT_EQ(count.get<std::size_t>(), 2u);
      EXPECT_TRUE(fs::exists(path("dflt") / domain / cls / "1.ppm"));
    }
  }
}

TEST_F(CliTest, ExitCodes) {
  write(path("bad_key.json"), R"({"train": {"epoch": 3}})");
  EXPECT_EQ(run_cli("gen-data --config " + path("bad_key.json").string() + " --out " + path("x").string()).code, 2);
  EXPECT_EQ(run_cli("gen-data --config " + path("absent.json").string() + " --out " + path("x").string()).code, 3);
  EXPECT_EQ(run_cli("train --config " + config().string() + " --data " + path("no_data").string() + " --out " +
                    path("x").string())
                .code,
            3);
  EXPECT_EQ(run_cli("experiment --config " + config().string() + " --data " + data().string() +
                    " --protocol bogus --out " + path("x").string())
                .code,
            2);
  EXPECT_EQ(run_cli("train --data " + data().string()).code, 2);
  EXPECT_EQ(run_cli("frobnicate").code, 2);
  write(path("out_file"), "occupied");
  EXPECT_EQ(run_cli("gen-data --config " + config().string() + " --out " + path("out_file").string()).code, 3);
}

TEST_F(CliTest, TrainModesAndReproducibility) {
  for (const std::string mode : {"erm", "sd_consistency"}) {
    const fs::path out = path("train_" + mode);
    const CliRun r = run_cli("train --config " + config().string() + " --data " + data().string() + " --mode " + mode +
                          " --out " + out.string());
    ASSERT_EQ(r.code, 0) << mode;
    EXPECT_EQ(std::count(r.out.begin(), r.out.end(), '\n'), 1) << r.out;
    const auto report = json::parse(slurp(out / "report.json"));
    EXPECT_EQ(report["epochs"].size(), 2u);
    EXPECT_EQ(report["config"]["train"]["mode"], mode);
    EXPECT_TRUE(fs::exists(out / "checkpoint.bin"));
  }
  const fs::path again = path("train_again");
  ASSERT_EQ(run_cli("train --config " + config().string() + " --data " + data().string() +
                    " --mode sd_consistency --out " + again.string())
                .code,
            0);
  EXPECT_EQ(slurp(again / "report.json"), slurp(path("train_sd_consistency") / "report.json"));
  EXPECT_EQ(slurp(again / "checkpoint.bin"), slurp(path("train_sd_consistency") / "checkpoint.bin"));

  // Re-running from the embedded effective config reproduces the artifacts.
  const auto report = json::parse(slurp(again / "report.json"));
  write(path("embedded.json"), report["config"].dump());
  const fs::path replay = path("train_replay");
  ASSERT_EQ(run_cli("train --config " + path("embedded.json").string() + " --data " + data().string() + " --out " +
                    replay.string())
                .code,
            0);
  EXPECT_EQ(slurp(replay / "report.json"), slurp(again / "report.json"));
  EXPECT_EQ(slurp(replay / "checkpoint.bin"), slurp(again / "checkpoint.bin"));
}

TEST_F(CliTest, Dream) {
  const fs::path train_out = path("dream_model");
  ASSERT_EQ(run_cli("train --config " + config().string() + " --data " + data().string() + " --mode erm --out " +
                    train_out.string())
                .code,
            0);
  const std::string base = "dream --config " + config().string() + " --checkpoint " +
                           (train_out / "checkpoint.bin").string() + " --content " +
                           (data() / "noise" / "disk" / "0.ppm").string() + " --style " +
                           (data() / "stripes" / "disk" / "1.ppm").string();

  CliRun r = run_cli(base + " --iterations 0 --out " + path("k0.ppm").string());
  ASSERT_EQ(r.code, 0);
  EXPECT_EQ(read_ppm(path("k0.ppm")), read_ppm(data() / "noise" / "disk" / "0.ppm"));

  r = run_cli(base + " --out " + path("k10.ppm").string());
  ASSERT_EQ(r.code, 0);
  const auto res = result_of(r);
  EXPECT_EQ(res["trajectory"].size(), 11u);
  EXPECT_DOUBLE_EQ(res["config"]["dream"]["alpha"].get<double>(), 0.09);
  const Image img = read_ppm(path("k10.ppm"));
  EXPECT_EQ(img.width, 8u);
  EXPECT_EQ(slurp(path("k10.ppm")).substr(0, 3), "P6\n");

  r = run_cli(base + " --no-standardize --alpha 0.001 --out " + path("raw.ppm").string());
  ASSERT_EQ(r.code, 0);
  const auto raw = result_of(r);
  EXPECT_GE(raw["final_loss"].get<double>(), raw["initial_loss"].get<double>());

  // A checkpoint with enormous weights overflows during the ascent.
  Model m = load_checkpoint(train_out / "checkpoint.bin");
  for (auto& p : m.parameters()) {
    for (double& v : p.mutable_data()) v *= 1e100;
  }
  save_checkpoint(m, path("huge.bin"));
  r = run_cli("dream --checkpoint " + path("huge.bin").string() + " --content " +
              (data() / "noise" / "disk" / "0.ppm").string() + " --style " +
              (data() / "noise" / "disk" / "1.ppm").string() + " --out " + path("nan.ppm").string());
  EXPECT_EQ(r.code, 4);

  EXPECT_EQ(run_cli(base + " --out " + path("x.ppm").string() + " --alpha -1").code, 2);
  write(path("broken.ppm"), "P6\n8 8\n255\n");
  EXPECT_EQ(run_cli("dream --checkpoint " + (train_out / "checkpoint.bin").string() + " --content " +
                    path("broken.ppm").string() + " --style " + path("broken.ppm").string() + " --out " +
                    path("x.ppm").string())
                .code,
            3);
}

TEST_F(CliTest, ExperimentProtocols) {
  const std::string base = "experiment --config " + config().string() + " --data " + data().string();
  CliRun r = run_cli(base + " --protocol ablation --out " + path("abl").string());
  ASSERT_EQ(r.code, 0);
  auto metrics = json::parse(slurp(path("abl") / "metrics.json"));
  EXPECT_EQ(metrics["configs"].size(), 4u);
  EXPECT_EQ(metrics["runs"].size(), 4u * 3u);
  EXPECT_EQ(metrics["config"]["experiment"]["protocol"], "ablation");

  r = run_cli(base + " --protocol alpha_sweep --csv --out " + path("alpha").string());
  ASSERT_EQ(r.code, 0);
  metrics = json::parse(slurp(path("alpha") / "metrics.json"));
  ASSERT_EQ(metrics["sweep"].size(), 2u);
  EXPECT_EQ(metrics["sweep"][0]["alpha"], "0.03");
  const std::string csv = slurp(path("alpha") / "metrics.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);

  r = run_cli(base + " --protocol tau_sweep --out " + path("tau").string());
  ASSERT_EQ(r.code, 0);
  metrics = json::parse(slurp(path("tau") / "metrics.json"));
  EXPECT_EQ(metrics["sweep"].size(), 3u);
  EXPECT_FALSE(fs::exists(path("tau") / "metrics.csv"));
}

TEST_F(CliTest, ExperimentIsThreadInvariant) {
  const std::string base =
      "experiment --config " + config().string() + " --data " + data().string() + " --protocol leave_one_out";
  ASSERT_EQ(run_cli(base + " --threads 1 --out " + path("t1").string()).code, 0);
  ASSERT_EQ(run_cli(base + " --threads 1 --out " + path("t1b").string()).code, 0);
  ASSERT_EQ(run_cli(base + " --threads 3 --out " + path("t3").string()).code, 0);
  EXPECT_EQ(slurp(path("t1") / "metrics.json"), slurp(path("t1b") / "metrics.json"));
  EXPECT_EQ(slurp(path("t1") / "metrics.json"), slurp(path("t3") / "metrics.json"));
}
