// Copyright 2026 The grle Authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "grle/checkpoint.hpp"
#include "grle/eval.hpp"

namespace grle {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("grle_test_" + name);
  fs::remove_all(p);
  return p;
}

ModelConfig tiny() {
  ModelConfig c;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 32;
  c.max_seq_len = 96;
  c.seed = 3;
  return c;
}

TEST(Checkpoint, RoundTripPreservesEveryTensorAndScore) {
  const auto dir = scratch("ckpt_roundtrip");
  auto m = init_model<float>(tiny(), 3);
  add_adapters(m, LoraConfig{4, 8.0, 0.1, attention_projections()}, 4);
  std::mt19937_64 rng(1);
  std::normal_distribution<float> n(0, 0.1f);
  for (auto& p : m.named_parameters())
    if (p.name.ends_with("lora_b"))
      for (auto& v : p.tensor.data()) v = n(rng);
  save_checkpoint(m, dir);
  const auto back = load_checkpoint<float>(dir);
  EXPECT_EQ(back.config.d_model, 16u);
  ASSERT_TRUE(back.lora.has_value());
  EXPECT_EQ(back.lora->r, 4u);
  const auto a = m.named_parameters(), b = back.named_parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_EQ(a[i].tensor.requires_grad(), b[i].tensor.requires_grad()) << a[i].name;
    EXPECT_TRUE(std::equal(a[i].tensor.data().begin(), a[i].tensor.data().end(), b[i].tensor.data().begin()));
  }
  SyntheticTaskConfig sc;
  sc.n_train = 2;
  sc.n_eval_queries = 5;
  sc.n_eval_docs = 20;
  sc.n_keys = 50;
  const auto corpus = make_synthetic_task(sc).eval;
  const std::vector<std::string> metric{"ndcg@10"};
  EXPECT_EQ(evaluate(m, corpus, metric).main_score(), evaluate(back, corpus, metric).main_score());
  fs::remove_all(dir);
}

TEST(Checkpoint, OptimizerStateRoundTrip) {
  const auto dir = scratch("ckpt_opt");
  auto m = init_model<float>(tiny(), 3);
  auto s = make_optimizer_state(m.trainable_parameters());
  s.t = 7;
  s.m[1][2] = 0.25;
  s.v[3][0] = 1e-9;
  save_checkpoint(m, dir, &s);
  const auto back = load_optimizer_state(dir, m);
  ASSERT_TRUE(back.has_value());
  EXPECT_EQ(back->t, 7);
  EXPECT_EQ(back->m, s.m);
  EXPECT_EQ(back->v, s.v);
  save_checkpoint(m, dir);
  EXPECT_FALSE(load_optimizer_state(dir, m).has_value());
  fs::remove_all(dir);
}

void edit_manifest(const fs::path& dir, const std::function<void(nlohmann::ordered_json&)>& f) {
  auto j = read_manifest(dir);
  f(j);
  std::ofstream(dir / "manifest.json") << j.dump(2);
}

TEST(Checkpoint, MismatchesAreRejected) {
  const auto dir = scratch("ckpt_bad");
  const auto m = init_model<float>(tiny(), 3);
  save_checkpoint(m, dir);
  edit_manifest(dir, [](auto& j) { j["tensors"][2]["shape"] = Shape{3, 3}; });
  try {
    load_checkpoint<float>(dir);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("shape"), std::string::npos) << e.what();
  }
  save_checkpoint(m, dir);
  edit_manifest(dir, [](auto& j) { j["model"]["n_layers"] = 3; });
  EXPECT_THROW(load_checkpoint<float>(dir), CheckpointError);
  save_checkpoint(m, dir);
  fs::resize_file(dir / "weights.bin", fs::file_size(dir / "weights.bin") - 4);
  EXPECT_THROW(load_checkpoint<float>(dir), CheckpointError);
  save_checkpoint(m, dir);
  edit_manifest(dir, [](auto& j) { j["format"] = "other"; });
  EXPECT_THROW(load_checkpoint<float>(dir), CheckpointError);
  EXPECT_THROW(load_checkpoint<float>(dir / "missing"), std::exception);
  fs::remove_all(dir);
}

TEST(Checkpoint, HashTracksWeights) {
  const auto d1 = scratch("ckpt_h1"), d2 = scratch("ckpt_h2");
  save_checkpoint(init_model<float>(tiny(), 3), d1);
  save_checkpoint(init_model<float>(tiny(), 3), d2);
  EXPECT_EQ(checkpoint_hash(d1), checkpoint_hash(d2));
  save_checkpoint(init_model<float>(tiny(), 4), d2);
  EXPECT_NE(checkpoint_hash(d1), checkpoint_hash(d2));
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST(RunConfig, KeyValueParsing) {
  std::istringstream in(
      "# comment\n[model]\nd_model = 32\nn_heads=2\n\n[train]\nstrategy = cl_dpo\nlearning_rate = 1e-3\n"
      "[lora]\nenabled = false\ntargets = wq, wv\n[eval]\nmetrics = ndcg@5,map\n");
  RunConfig c;
  merge_json(parse_key_value(in), c);
  EXPECT_EQ(c.model.d_model, 32u);
  EXPECT_EQ(c.model.n_heads, 2u);
  EXPECT_EQ(c.train.strategy, Strategy::kClDpo);
  EXPECT_DOUBLE_EQ(c.train.learning_rate, 1e-3);
  EXPECT_FALSE(c.use_lora);
  EXPECT_EQ(c.lora.targets, (std::vector<std::string>{"wq", "wv"}));
  EXPECT_EQ(c.eval.metrics, (std::vector<std::string>{"ndcg@5", "map"}));
}

TEST(RunConfig, ErrorsNameTheKey) {
  auto expect_error = [](const std::string& text, const std::string& needle) {
    std::istringstream in(text);
    RunConfig c;
    try {
      merge_json(parse_key_value(in, "cfg"), c);
      c.validate();
      FAIL() << text;
    } catch (const std::exception& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  expect_error("[model]\nd_modle = 3\n", "d_modle");
  expect_error("[train]\nlearning_rate = fast\n", "train.learning_rate");
  expect_error("[train]\nbatch_size = -4\n", "train.batch_size");
  expect_error("[nosuch]\nx = 1\n", "nosuch");
  expect_error("orphan = 1\n", "cfg:1");
  expect_error("[model]\nn_heads\n", "cfg:2");
  expect_error("[train]\nstrategy = dpo\n", "dpo");
  expect_error("[data]\ntrain_path = /nonexistent/file.jsonl\n", "data.train_path");
}

TEST(RunConfig, ResolvedEchoRoundTrips) {
  RunConfig c;
  c.model.d_model = 48;
  c.model.n_heads = 3;
  c.train.strategy = Strategy::kGrlSft;
  c.train.weights.kl_tau = 0.2;
  c.train.learning_rate = 3.0000000000000001e-4;
  c.use_lora = false;
  c.lora.targets = {"wq", "w_down"};
  c.output_dir = "out/x";
  c.data.train_path = "";
  const std::string text = to_key_value(c);
  std::istringstream in(text);
  RunConfig back;
  merge_json(parse_key_value(in), back);
  EXPECT_EQ(to_key_value(back), text);
  EXPECT_EQ(to_json(back).dump(), to_json(c).dump());
}

TEST(RunConfig, JsonFileMatchesKeyValueFile) {
  const auto dir = scratch("cfg");
  fs::create_directories(dir);
  std::ofstream(dir / "a.ini") << "[train]\nbatch_size = 64\nmicro_batch_size = 8\n[weights]\nbeta = 0.2\n";
  std::ofstream(dir / "a.json") << R"({"train": {"batch_size": 64, "micro_batch_size": 8}, "weights": {"beta": 0.2}})";
  const auto a = load_run_config(dir / "a.ini"), b = load_run_config(dir / "a.json");
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
  EXPECT_EQ(a.train.batch_size, 64u);
  EXPECT_DOUBLE_EQ(a.train.weights.beta, 0.2);
  std::ofstream(dir / "bad.json") << "{ not json";
  EXPECT_THROW(load_run_config(dir / "bad.json"), ConfigError);
  fs::remove_all(dir);
}

}  // namespace
}  // namespace grle
