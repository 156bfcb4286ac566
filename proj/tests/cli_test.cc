#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "tmal/neuralnet.h"
#include "tmal/splitter.h"

namespace {

namespace fs = std::filesystem;

struct RunResult {
  int code = -1;
  std::string output;
};

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("tmal_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  RunResult run(const std::string& args) const {
    const std::string log = path("out.log");
    const std::string cmd = "cd '" + dir_.string() + "' && '" TMAL_CLI_PATH "' " + args + " > '" + log + "' 2>&1";
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream in(log);
    std::stringstream ss;
    ss << in.rdbuf();
    r.output = ss.str();
    return r;
  }

  fs::path dir_;
};

TEST_F(CliTest, MissingInputNamesPath) {
  const RunResult r = run("split --records missing.tsv --out m.tsv");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("missing.tsv"), std::string::npos);
}

TEST_F(CliTest, UsageErrors) {
  EXPECT_EQ(run("train --no-such-flag").code, 1);
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("split --out m.tsv").code, 1);
  std::ofstream(path("cfg.json")) << R"({"not_an_option": 1})";
  EXPECT_EQ(run("split --config cfg.json").code, 1);
}

TEST_F(CliTest, SingletonCorpusIsAllExcluded) {
  ASSERT_EQ(run("generate --out rec.tsv --species 6 --per-species 1").code, 0);
  const RunResult r = run("split --records rec.tsv --out man.tsv");
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("warning"), std::string::npos);
  const auto m = tmal::SplitManifest::load(path("man.tsv"));
  EXPECT_EQ(m.counts()[static_cast<std::size_t>(tmal::Partition::kExcluded)], 6u);
}

TEST_F(CliTest, LargeCatalogSplitValidates) {
  ASSERT_EQ(run("generate --out rec.tsv --species 1000 --per-species 10 --d-img 4 --barcode-length 30").code, 0);
  const RunResult r = run("split --records rec.tsv --out man.tsv --seed 5");
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(tmal::SplitManifest::load(path("man.tsv")).size(), 10000u);
}

TEST_F(CliTest, SeedFallsBackToEnvironmentAndConfigFlagsWin) {
  ASSERT_EQ(run("generate --out rec.tsv --species 4 --per-species 10").code, 0);
  ASSERT_EQ(run("split --records rec.tsv --out a.tsv").code, 0);
  EXPECT_EQ(tmal::SplitManifest::load(path("a.tsv")).seed(), 1u);
  ASSERT_EQ(run("split --records rec.tsv --out b.tsv").code, 0);
  setenv("TMAL_SEED", "17", 1);
  const RunResult env = run("split --records rec.tsv --out c.tsv");
  unsetenv("TMAL_SEED");
  ASSERT_EQ(env.code, 0);
  EXPECT_EQ(tmal::SplitManifest::load(path("c.tsv")).seed(), 17u);
  std::ofstream(path("cfg.json")) << R"({"seed": 23, "records": "rec.tsv"})";
  ASSERT_EQ(run("split --config cfg.json --out d.tsv").code, 0);
  EXPECT_EQ(tmal::SplitManifest::load(path("d.tsv")).seed(), 23u);
  const RunResult flag = run("split --config cfg.json --out e.tsv --seed 29");
  ASSERT_EQ(flag.code, 0);
  EXPECT_EQ(tmal::SplitManifest::load(path("e.tsv")).seed(), 29u);
  EXPECT_NE(flag.output.find("\"seed\":\"29\""), std::string::npos);
}

TEST_F(CliTest, PipelineReachesSeenAccuracyAndDumpMatchesCheckpoint) {
  ASSERT_EQ(run("generate --out rec.tsv --seed 2").code, 0);
  ASSERT_EQ(run("split --records rec.tsv --out man.tsv --seed 2").code, 0);
  const RunResult tr = run("train --records rec.tsv --manifest man.tsv --out model.tmck --log train.jsonl --seed 2");
  ASSERT_EQ(tr.code, 0) << tr.output;
  std::ifstream log(path("train.jsonl"));
  std::string line;
  std::size_t epochs = 0;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_TRUE(j.contains("mean_loss") && j.contains("wall_ms"));
    ++epochs;
  }
  EXPECT_EQ(epochs, 30u);

  ASSERT_EQ(run("embed --records rec.tsv --checkpoint model.tmck --modality image --manifest man.tsv "
                "--partitions test_seen_query,test_unseen_query --out q.tmaf")
                .code,
            0);
  ASSERT_EQ(run("embed --records rec.tsv --checkpoint model.tmck --modality dna --manifest man.tsv "
                "--partitions key_seen,test_unseen_key --out k.tmaf")
                .code,
            0);
  EXPECT_EQ(run("classify --records rec.tsv --queries q.tmaf --keys k.tmaf --strategy dna --k 100000 --out p.tsv").code, 1);
  EXPECT_EQ(run("classify --records rec.tsv --queries q.tmaf --keys k.tmaf --strategy image --out p.tsv").code, 1);
  ASSERT_EQ(run("classify --records rec.tsv --queries q.tmaf --keys k.tmaf --strategy dna --out p.tsv").code, 0);
  ASSERT_EQ(run("classify --records rec.tsv --queries q.tmaf --keys k.tmaf --strategy dna --threads 4 --out p4.tsv").code, 0);
  std::ifstream p1(path("p.tsv")), p4(path("p4.tsv"));
  std::stringstream s1, s4;
  s1 << p1.rdbuf();
  s4 << p4.rdbuf();
  EXPECT_EQ(s1.str(), s4.str());

  ASSERT_EQ(run("eval --records rec.tsv --manifest man.tsv --predictions p.tsv --out report.json").code, 0);
  std::ifstream rep(path("report.json"));
  const auto report = nlohmann::json::parse(rep);
  EXPECT_GE(report["ranks"]["species"]["micro_seen"].get<double>(), 80.0);

  const RunResult dump = run("dump model.tmck");
  ASSERT_EQ(dump.code, 0);
  std::ifstream ck_in(path("model.tmck"), std::ios::binary);
  const tmal::nn::Checkpoint ck = tmal::nn::read_checkpoint(ck_in);
  for (const auto& t : ck.tensors) {
    std::string shape;
    for (std::size_t i = 0; i < t.shape.size(); ++i) shape += (i ? "x" : "") + std::to_string(t.shape[i]);
    EXPECT_NE(dump.output.find(t.name + "\t" + shape + "\n"), std::string::npos) << t.name;
  }
}

}  // namespace
