#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <sys/wait.h>

#include "test_util.hpp"

using namespace attrvr;
using attrvr::testing::TempDir;
using attrvr::testing::fixtures;
namespace fs = std::filesystem;

namespace {

struct Cli {
  int code = -1;
  std::string out;
};

/// Runs the CLI with `args`; stdout goes to a file in `dir`, stderr is discarded.
Cli run_cli(const std::string& args, const fs::path& dir, const std::string& env = "") {
  const fs::path out = dir / "stdout.txt";
  const std::string cmd = env + " \"" + std::string(ATTRVR_CLI) + "\" " + args + " > \"" + out.string() + "\" 2> \"" +
                          (dir / "stderr.txt").string() + "\"";
  const int status = std::system(cmd.c_str());
  Cli r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(out, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  r.out = ss.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path write_file(const fs::path& p, const std::string& text) {
  std::ofstream(p, std::ios::trunc) << text;
  return p;
}

const char* kSmallRun =
    "epochs = 3\nshots = 2\nval_per_class = 1\nper_class = 6\nhidden_dim = 32\nseed = 1\n";

}  // namespace

TEST(Cli, TrainTwiceIsBitIdentical) {
  TempDir tmp("cli_train");
  const auto cfg = write_file(tmp.path() / "run.toml", kSmallRun);
  const std::string bank = (fixtures() / "shapes7_bank.json").string();
  for (const char* name : {"a", "b"}) {
    const auto r = run_cli("train --config \"" + cfg.string() + "\" --bank \"" + bank + "\" --out \"" +
                               (tmp.path() / name).string() + "\"",
                           tmp.path());
    ASSERT_EQ(r.code, 0) << slurp(tmp.path() / "stderr.txt");
  }
  const std::string pa = slurp(tmp.path() / "a" / "pattern.bin");
  ASSERT_FALSE(pa.empty());
  EXPECT_EQ(pa, slurp(tmp.path() / "b" / "pattern.bin"));
  EXPECT_EQ(slurp(tmp.path() / "a" / "results.jsonl"), slurp(tmp.path() / "b" / "results.jsonl"));
  EXPECT_EQ(slurp(tmp.path() / "a" / "history.jsonl"), slurp(tmp.path() / "b" / "history.jsonl"));
  EXPECT_TRUE(fs::exists(tmp.path() / "a" / "summary.json"));
  EXPECT_TRUE(fs::exists(tmp.path() / "a" / "trace_first.jsonl"));
  EXPECT_TRUE(fs::exists(tmp.path() / "a" / "trace_final.jsonl"));

  // eval reproduces the stored test accuracy
  const auto rows = read_results(tmp.path() / "a" / "results.jsonl");
  double stored = -1.0;
  for (const auto& row : rows) {
    if (row.metric == "test_accuracy") stored = *row.value;
  }
  const auto ev = run_cli("eval --pattern \"" + (tmp.path() / "a" / "pattern.bin").string() + "\" --bank \"" + bank +
                              "\" --config \"" + cfg.string() + "\" --split test",
                          tmp.path());
  ASSERT_EQ(ev.code, 0) << slurp(tmp.path() / "stderr.txt");
  EXPECT_EQ(nlohmann::json::parse(ev.out)["accuracy"].get<double>(), stored);

  const auto rp = run_cli("report --results \"" + (tmp.path() / "a").string() + "\"", tmp.path());
  ASSERT_EQ(rp.code, 0);
  EXPECT_NE(rp.out.find("| single | attrvr | test_accuracy |"), std::string::npos) << rp.out;

  const auto csv = run_cli("report --format csv --results \"" + (tmp.path() / "a").string() + "\"", tmp.path());
  ASSERT_EQ(csv.code, 0);
  EXPECT_EQ(csv.out.substr(0, 6), "study,");
}

TEST(Cli, GenerateAttrsFromFixtureMatchesCommittedBank) {
  TempDir tmp("cli_gen");
  const std::string args = "generate-attrs --task-info shape --classes-file \"" +
                           (fixtures() / "shapes7_classes.txt").string() + "\" --fixture \"" +
                           (fixtures() / "shapes7_llm").string() + "\" -m 20 --seed 0";
  auto r = run_cli(args + " --out \"" + (tmp.path() / "bank.json").string() + "\"", tmp.path());
  ASSERT_EQ(r.code, 0) << slurp(tmp.path() / "stderr.txt");
  EXPECT_EQ(slurp(tmp.path() / "bank.json"), slurp(fixtures() / "shapes7_bank.json"));

  // cache dir default
  r = run_cli(args, tmp.path(), "ATTRVR_CACHE_DIR=\"" + (tmp.path() / "cache").string() + "\"");
  ASSERT_EQ(r.code, 0) << slurp(tmp.path() / "stderr.txt");
  EXPECT_EQ(slurp(tmp.path() / "cache" / "bank.json"), slurp(fixtures() / "shapes7_bank.json"));

  r = run_cli(args, tmp.path(), "env -u ATTRVR_CACHE_DIR");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(slurp(tmp.path() / "stderr.txt").find("ATTRVR_CACHE_DIR"), std::string::npos);
}

TEST(Cli, LemmaCheckReportsAndExitCodes) {
  TempDir tmp("cli_lemma");
  const auto report = tmp.path() / "lemma.json";
  auto r = run_cli("lemma-check --seed 0 --out \"" + report.string() + "\" --export \"" +
                       (tmp.path() / "emb").string() + "\"",
                   tmp.path());
  ASSERT_EQ(r.code, 0) << slurp(tmp.path() / "stderr.txt");
  EXPECT_NE(r.out.find("lemma1: holds (strict)"), std::string::npos) << r.out;
  const auto j = nlohmann::json::parse(slurp(report));
  const auto ref = nlohmann::json::parse(slurp(fixtures() / "lemma_reference.json"));
  EXPECT_NEAR(j["checks"]["lemma1"]["margin"].get<double>(), ref["runs"][0]["lemma1"].get<double>(), 1e-12);
  EXPECT_TRUE(fs::exists(tmp.path() / "emb"));

  const auto unmet = write_file(tmp.path() / "unmet.toml", "n_dist = 2\n");
  r = run_cli("lemma-check --config \"" + unmet.string() + "\"", tmp.path());
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("hypothesis_unmet"), std::string::npos) << r.out;

  const auto bad = write_file(tmp.path() / "bad.toml", "n_dsit = 2\n");
  r = run_cli("lemma-check --config \"" + bad.string() + "\"", tmp.path());
  EXPECT_EQ(r.code, 1);
}

TEST(Cli, UsageAndInputErrors) {
  TempDir tmp("cli_err");
  EXPECT_NE(run_cli("", tmp.path()).code, 0);
  EXPECT_NE(run_cli("train --bank /nonexistent.json --out x", tmp.path()).code, 0);
  const auto cfg = write_file(tmp.path() / "run.toml", "epochs = -2\n");
  const auto r = run_cli("train --config \"" + cfg.string() + "\" --bank \"" +
                             (fixtures() / "shapes7_bank.json").string() + "\" --out \"" +
                             (tmp.path() / "o").string() + "\"",
                         tmp.path());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(slurp(tmp.path() / "stderr.txt").find("/epochs"), std::string::npos);
}
