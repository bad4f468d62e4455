// Copyright 2026 The grle Authors
// SPDX-License-Identifier: Apache-2.0

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <json.hpp>

namespace {

namespace fs = std::filesystem;

struct Run {
  int status = -1;
  std::string out;
  std::string err;
};

Run run(const std::string& args) {
  const auto errfile = fs::temp_directory_path() / "grle_cli_stderr.txt";
  const std::string cmd = std::string(GRLE_CLI_PATH) + " " + args + " 2>" + errfile.string();
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  while (std::size_t n = fread(buf, 1, sizeof buf, p)) r.out.append(buf, n);
  const int st = pclose(p);
  r.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  std::ifstream e(errfile);
  std::stringstream ss;
  ss << e.rdbuf();
  r.err = ss.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const char* kSmall =
    " --set model.d_model=16 --set model.n_heads=2 --set model.n_layers=1 --set model.d_ff=32"
    " --set data.n_train=40 --set data.n_eval_queries=5 --set data.n_eval_docs=20 --set data.n_keys=60"
    " --set train.batch_size=8 --set train.micro_batch_size=4 --set train.checkpoint_every=2";

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / "grle_cli_run";
    fs::remove_all(dir_);
    const auto r = run("train --strategy grl --seed 3 --output " + dir_.string() + kSmall);
    ASSERT_EQ(r.status, 0) << r.err;
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }
  static fs::path dir_;
};

fs::path Cli::dir_;

TEST(CliUsage, MissingOrUnknownSubcommandExitsTwo) {
  EXPECT_EQ(run("").status, 2);
  EXPECT_EQ(run("frobnicate").status, 2);
  EXPECT_EQ(run("train --nope").status, 2);
  EXPECT_EQ(run("--help").status, 0);
}

TEST(CliUsage, BadConfigExitsTwoAndNamesTheKey) {
  const auto cfg = fs::temp_directory_path() / "grle_cli_bad.ini";
  std::ofstream(cfg) << "[train]\nlerning_rate = 0.1\n";
  auto r = run("train --config " + cfg.string() + " --output /tmp/grle_never");
  EXPECT_EQ(r.status, 2);
  EXPECT_NE(r.err.find("lerning_rate"), std::string::npos) << r.err;
  r = run("train --strategy nonsense --output /tmp/grle_never");
  EXPECT_EQ(r.status, 2);
  EXPECT_NE(r.err.find("nonsense"), std::string::npos);
  r = run("train --set train.batch_size --output /tmp/grle_never");
  EXPECT_EQ(r.status, 2);
  r = run("train --config /nonexistent.ini");
  EXPECT_EQ(r.status, 2);
  EXPECT_FALSE(fs::exists("/tmp/grle_never"));
  fs::remove(cfg);
}

TEST_F(Cli, TrainWritesLogsCheckpointsAndResolvedConfig) {
  std::ifstream log(dir_ / "metrics.jsonl");
  std::size_t lines = 0;
  for (std::string line; std::getline(log, line); ++lines) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("step").get<std::size_t>(), lines + 1);
    for (const char* k : {"loss_total", "loss_cl", "loss_sft", "loss_dpo", "loss_kl", "grad_norm", "lr"})
      EXPECT_TRUE(j.contains(k)) << k;
  }
  EXPECT_EQ(lines, 5u);
  EXPECT_TRUE(fs::exists(dir_ / "checkpoint" / "manifest.json"));
  EXPECT_TRUE(fs::exists(dir_ / "checkpoints" / "step-000002" / "weights.bin"));
  EXPECT_TRUE(fs::exists(dir_ / "checkpoints" / "step-000004" / "weights.bin"));
  EXPECT_TRUE(fs::exists(dir_ / "checkpoints" / "epoch-1" / "weights.bin"));
  const auto resolved = slurp(dir_ / "resolved_config.ini");
  EXPECT_NE(resolved.find("strategy = grl"), std::string::npos);
  EXPECT_NE(resolved.find("d_model = 16"), std::string::npos);
}

TEST_F(Cli, ResolvedConfigReproducesTheRun) {
  const auto again = fs::temp_directory_path() / "grle_cli_again";
  fs::remove_all(again);
  const auto r = run("train --config " + (dir_ / "resolved_config.ini").string() + " --output " + again.string());
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_EQ(slurp(again / "metrics.jsonl"), slurp(dir_ / "metrics.jsonl"));
  fs::remove_all(again);
}

TEST_F(Cli, EvalPrintsOneNumberAndWritesReport) {
  const auto ck = (dir_ / "checkpoint").string(), corpus = (dir_ / "eval_corpus").string();
  const auto r = run("eval --checkpoint " + ck + " --corpus " + corpus);
  ASSERT_EQ(r.status, 0) << r.err;
  std::istringstream in(r.out);
  double v = -1;
  std::string rest;
  in >> v >> rest;
  EXPECT_TRUE(rest.empty()) << r.out;
  EXPECT_GE(v, 0.0);
  EXPECT_LE(v, 1.0);
  const auto report = nlohmann::json::parse(slurp(dir_ / "checkpoint" / "eval_report.json"));
  EXPECT_EQ(report.at("main_metric"), "ndcg@10");
  EXPECT_EQ(report.at("main_score").get<double>(), v);
  EXPECT_TRUE(report.at("metrics").contains("map"));
  EXPECT_EQ(report.at("per_query").at("ndcg@10").size(), 5u);
  const auto cached = run("eval --checkpoint " + ck + " --corpus " + corpus);
  EXPECT_EQ(cached.out, r.out);
  const auto uncached = run("eval --no-cache --checkpoint " + ck + " --corpus " + corpus + " --metrics ndcg@10");
  EXPECT_EQ(uncached.out, r.out);
}

TEST_F(Cli, EvalErrors) {
  const auto ck = (dir_ / "checkpoint").string(), corpus = (dir_ / "eval_corpus").string();
  EXPECT_EQ(run("eval --checkpoint " + ck + " --corpus " + corpus + " --metrics mrr").status, 2);
  EXPECT_EQ(run("eval --checkpoint " + ck).status, 2);
  const auto r = run("eval --checkpoint /nonexistent --corpus " + corpus);
  EXPECT_EQ(r.status, 1);
  EXPECT_FALSE(r.err.empty());
}

TEST_F(Cli, EmbedWritesOneVectorPerRecord) {
  const auto in = fs::temp_directory_path() / "grle_cli_in.jsonl";
  const auto out = fs::temp_directory_path() / "grle_cli_out.jsonl";
  std::ofstream(in) << R"({"id": "a", "text": "hello"})" << '\n' << R"({"id": 7, "text": "find ABCD"})" << '\n';
  const auto r = run("embed --checkpoint " + (dir_ / "checkpoint").string() + " --input " + in.string() +
                     " --output " + out.string());
  ASSERT_EQ(r.status, 0) << r.err;
  std::ifstream f(out);
  std::vector<std::string> ids;
  for (std::string line; std::getline(f, line);) {
    const auto j = nlohmann::json::parse(line);
    ids.push_back(j.at("id").get<std::string>());
    EXPECT_EQ(j.at("embedding").size(), 16u);
  }
  EXPECT_EQ(ids, (std::vector<std::string>{"a", "7"}));
  EXPECT_TRUE(fs::exists(out.string() + ".config.json"));
  fs::remove(in);
  fs::remove(out);
  fs::remove(out.string() + ".config.json");
}

TEST(CliGradcheck, SmallModelPasses) {
  const auto cfg = fs::temp_directory_path() / "grle_cli_gc.ini";
  std::ofstream(cfg) << "[model]\nd_model = 8\nn_heads = 2\nn_layers = 1\nd_ff = 16\nmax_seq_len = 96\n"
                        "[lora]\nr = 2\nalpha = 4\n";
  const auto r = run("gradcheck --entries 3 --config " + cfg.string());
  EXPECT_EQ(r.status, 0) << r.out << r.err;
  std::istringstream lines(r.out);
  std::size_t n = 0;
  for (std::string line; std::getline(lines, line); ++n) EXPECT_EQ(line.rfind("PASS ", 0), 0u) << line;
  EXPECT_EQ(n, 5u + 25u);
  fs::remove(cfg);
}

}  // namespace
