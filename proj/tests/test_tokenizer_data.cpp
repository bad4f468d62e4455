// Copyright 2026 The grle Authors
// SPDX-License-Identifier: Apache-2.0

#include <cctype>
#include <filesystem>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "grle/data.hpp"
#include "grle/metrics.hpp"

namespace grle {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("grle_data_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
}

// Random valid UTF-8: code points from all four encoding lengths, skipping surrogates.
std::string random_utf8(std::mt19937_64& rng) {
  std::string s;
  const std::size_t n = std::uniform_int_distribution<std::size_t>(0, 24)(rng);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t cp = 0;
    switch (std::uniform_int_distribution<int>(0, 3)(rng)) {
      case 0: cp = std::uniform_int_distribution<std::uint32_t>(0, 0x7f)(rng); break;
      case 1: cp = std::uniform_int_distribution<std::uint32_t>(0x80, 0x7ff)(rng); break;
      case 2:
        do cp = std::uniform_int_distribution<std::uint32_t>(0x800, 0xffff)(rng);
        while (cp >= 0xd800 && cp <= 0xdfff);
        break;
      default: cp = std::uniform_int_distribution<std::uint32_t>(0x10000, 0x10ffff)(rng);
    }
    if (cp < 0x80) {
      s.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
      s.push_back(static_cast<char>(0xc0 | (cp >> 6)));
      s.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
    } else if (cp < 0x10000) {
      s.push_back(static_cast<char>(0xe0 | (cp >> 12)));
      s.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3f)));
      s.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
    } else {
      s.push_back(static_cast<char>(0xf0 | (cp >> 18)));
      s.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3f)));
      s.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3f)));
      s.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
    }
  }
  return s;
}

TEST(Tokenizer, Examples) {
  EXPECT_EQ(tokenize("abc"), (std::vector<std::int32_t>{97, 98, 99}));
  EXPECT_TRUE(tokenize("").empty());
  EXPECT_EQ(tokenize("\xc3\xa9"), (std::vector<std::int32_t>{195, 169}));
}

TEST(Tokenizer, DetokenizeDropsSpecialsAndRejectsOutOfRange) {
  std::vector<std::int32_t> ids{tokens::kBos, 104, 105, tokens::kEos, tokens::kPad};
  EXPECT_EQ(detokenize(ids), "hi");
  std::vector<std::int32_t> bad{97, 259};
  EXPECT_THROW(detokenize(bad), ValidationError);
  std::vector<std::int32_t> neg{-1};
  EXPECT_THROW(detokenize(neg), ValidationError);
}

TEST(Tokenizer, RoundTripRandomUtf8) {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 2000; ++t) {
    const auto s = random_utf8(rng);
    auto ids = tokenize(s);
    for (auto id : ids) ASSERT_LT(id, 256);
    EXPECT_EQ(detokenize(ids), s);
    EXPECT_EQ(detokenize(frame(ids)), s);
  }
}

TEST(LoadExamples, ReadsInFileOrder) {
  const auto dir = scratch("order");
  write(dir / "d.jsonl",
        R"({"query": "q1", "positive": "p1", "negatives": ["n1"]}
{"query": "q2", "positive": "p2", "negatives": []}

{"query": "q3", "positive": "p3"}
)");
  const auto ex = load_examples(dir / "d.jsonl");
  ASSERT_EQ(ex.size(), 3u);
  EXPECT_EQ(ex[0].query, "q1");
  EXPECT_EQ(ex[0].negatives, std::vector<std::string>{"n1"});
  EXPECT_EQ(ex[2].positive, "p3");
  EXPECT_TRUE(ex[2].negatives.empty());
  fs::remove_all(dir);
}

TEST(LoadExamples, MissingPositiveNamesLine) {
  const auto dir = scratch("missing");
  write(dir / "d.jsonl", "{\"query\": \"a\", \"positive\": \"b\"}\n{\"query\": \"a\"}\n");
  try {
    load_examples(dir / "d.jsonl");
    FAIL();
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(":2:"), std::string::npos) << msg;
    EXPECT_NE(msg.find("positive"), std::string::npos) << msg;
  }
  fs::remove_all(dir);
}

TEST(LoadExamples, MalformedAndEmptyFields) {
  const auto dir = scratch("bad");
  write(dir / "a.jsonl", "{\"query\": \"a\", \"positive\": \n");
  EXPECT_THROW(load_examples(dir / "a.jsonl"), ValidationError);
  write(dir / "b.jsonl", "{\"query\": \"\", \"positive\": \"x\"}\n");
  EXPECT_THROW(load_examples(dir / "b.jsonl"), ValidationError);
  write(dir / "c.jsonl", "{\"query\": \"q\", \"positive\": \"x\", \"negatives\": [\"\"]}\n");
  EXPECT_THROW(load_examples(dir / "c.jsonl"), ValidationError);
  EXPECT_THROW(load_examples(dir / "absent.jsonl"), std::runtime_error);
  fs::remove_all(dir);
}

TEST(LoadExamples, EightNegativesRoundTrip) {
  const auto dir = scratch("eight");
  SyntheticTaskConfig sc;
  sc.n_train = 5;
  sc.negatives_per_example = 8;
  const auto task = make_synthetic_task(sc);
  save_examples(dir / "t.jsonl", task.train);
  const auto back = load_examples(dir / "t.jsonl");
  ASSERT_EQ(back.size(), 5u);
  for (const auto& e : back) EXPECT_EQ(e.negatives.size(), 8u);
  EXPECT_EQ(back, task.train);
  fs::remove_all(dir);
}

TEST(Collate, PadsPerGroupWithFraming) {
  std::vector<TrainExample> ex{{"abc", "p", {}}, {"abcde", "pq", {}}};
  const Batch b = collate(ex, 64);
  EXPECT_EQ(b.queries.width, 7u);
  EXPECT_EQ(b.positives.width, 4u);
  EXPECT_EQ(b.queries.ids[0], tokens::kBos);
  EXPECT_EQ(b.queries.ids[4], tokens::kEos);
  EXPECT_EQ(b.queries.ids[5], tokens::kPad);
  EXPECT_EQ(b.queries.mask, (std::vector<std::uint8_t>{1, 1, 1, 1, 1, 0, 0, 1, 1, 1, 1, 1, 1, 1}));
  EXPECT_FALSE(b.negatives.has_value());
}

TEST(Collate, SingleExampleHasNoPadding) {
  std::vector<TrainExample> ex{{"hello", "world!", {"x"}}};
  const Batch b = collate(ex, 64);
  EXPECT_EQ(b.queries.width, 7u);
  for (auto m : b.queries.mask) EXPECT_EQ(m, 1);
  for (auto m : b.positives.mask) EXPECT_EQ(m, 1);
}

TEST(Collate, OverLengthNamesExample) {
  std::vector<TrainExample> ex{{"q", "ok", {}}, {"q", std::string(20, 'x'), {}}};
  try {
    collate(ex, 10);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("example 1 positive"), std::string::npos) << e.what();
  }
}

TEST(Collate, RaggedNegativesRejected) {
  std::vector<TrainExample> ex{{"q", "p", {"a"}}, {"q", "p", {}}};
  EXPECT_THROW(collate(ex, 32), ValidationError);
}

TEST(Collate, DecollationRecoversTokens) {
  SyntheticTaskConfig sc;
  sc.seed = 4;
  sc.n_train = 40;
  sc.negatives_per_example = 3;
  const auto task = make_synthetic_task(sc);
  const Batch b = collate(task.train, 128);
  const auto qs = b.queries.sequences();
  const auto ns = b.negatives->sequences();
  for (std::size_t e = 0; e < task.train.size(); ++e) {
    EXPECT_EQ(detokenize(qs[e]), task.train[e].query);
    EXPECT_EQ(qs[e], frame(tokenize(task.train[e].query)));
    for (std::size_t h = 0; h < 3; ++h) EXPECT_EQ(detokenize(ns[e * 3 + h]), task.train[e].negatives[h]);
  }
  for (std::size_t r = 0; r < b.queries.rows; ++r) {
    const std::size_t len = b.queries.length(r);
    EXPECT_EQ(b.queries.ids[r * b.queries.width + len - 1], tokens::kEos);
    for (std::size_t c = 0; c < b.queries.width; ++c)
      EXPECT_EQ(b.queries.mask[r * b.queries.width + c] == 1, b.queries.ids[r * b.queries.width + c] != tokens::kPad);
  }
}

TEST(Collate, RowKeysIdentifyExamplesAcrossSplits) {
  std::vector<TrainExample> ex{{"a", "b", {"c"}}, {"d", "e", {"f"}}, {"g", "h", {"i"}}};
  const Batch whole = collate(ex, 16);
  const Batch tail = collate(std::span<const TrainExample>(ex).subspan(1), 16, 1);
  EXPECT_EQ(tail.queries.keys[0], whole.queries.keys[1]);
  EXPECT_EQ(tail.negatives->keys[1], whole.negatives->keys[2]);
}

std::string key_of(const std::string& query) {
  std::string k;
  for (char c : query)
    if (std::isupper(static_cast<unsigned char>(c))) k.push_back(c);
  return k;
}

TEST(SyntheticTask, PureInSeed) {
  SyntheticTaskConfig sc;
  sc.seed = 9;
  sc.n_train = 50;
  const auto a = make_synthetic_task(sc), b = make_synthetic_task(sc);
  EXPECT_EQ(a.train, b.train);
  ASSERT_EQ(a.eval.documents.size(), b.eval.documents.size());
  for (std::size_t i = 0; i < a.eval.documents.size(); ++i) EXPECT_EQ(a.eval.documents[i].text, b.eval.documents[i].text);
  sc.seed = 10;
  EXPECT_NE(make_synthetic_task(sc).train, a.train);
}

TEST(SyntheticTask, ConstructionInvariants) {
  SyntheticTaskConfig sc;
  sc.seed = 2;
  const auto task = make_synthetic_task(sc);
  ASSERT_EQ(task.train.size(), 2000u);
  EXPECT_EQ(task.eval.queries.size(), 100u);
  EXPECT_EQ(task.eval.documents.size(), 500u);
  EXPECT_EQ(task.eval.qrels.size(), 100u);
  std::set<std::string> train_texts;
  for (const auto& ex : task.train) {
    const auto key = key_of(ex.query);
    ASSERT_EQ(key.size(), 4u);
    EXPECT_NE(ex.positive.find(key), std::string::npos);
    EXPECT_EQ(ex.negatives.size(), 8u);
    for (const auto& n : ex.negatives) EXPECT_EQ(n.find(key), std::string::npos);
    train_texts.insert(ex.positive);
    train_texts.insert(ex.negatives.begin(), ex.negatives.end());
  }
  for (const auto& d : task.eval.documents) EXPECT_EQ(train_texts.count(d.text), 0u);
  std::map<std::string, int> per_query;
  for (const auto& r : task.eval.qrels) per_query[r.query_id] += r.relevance;
  for (const auto& [q, n] : per_query) EXPECT_EQ(n, 1) << q;
}

TEST(SyntheticTask, SubstringRankerIsPerfect) {
  SyntheticTaskConfig sc;
  sc.seed = 3;
  const auto task = make_synthetic_task(sc);
  const auto qrels = qrel_map(task.eval.qrels);
  std::vector<std::string> ids;
  for (const auto& d : task.eval.documents) ids.push_back(d.id);
  double total = 0;
  for (const auto& q : task.eval.queries) {
    const auto key = key_of(q.text);
    std::vector<double> scores;
    for (const auto& d : task.eval.documents) scores.push_back(d.text.find(key) != std::string::npos ? 1.0 : 0.0);
    total += ndcg_at_k(rank(q.id, ids, scores), qrels.at(q.id), 10);
  }
  EXPECT_DOUBLE_EQ(total / static_cast<double>(task.eval.queries.size()), 1.0);
}

TEST(SyntheticTask, RejectsUnrepresentableKeys) {
  SyntheticTaskConfig sc;
  sc.key_length = 1;
  sc.n_keys = 27;
  EXPECT_THROW(make_synthetic_task(sc), ValidationError);
  sc.n_keys = 1;
  EXPECT_THROW(make_synthetic_task(sc), ValidationError);
}

TEST(Corpus, SaveLoadRoundTrip) {
  const auto dir = scratch("corpus");
  SyntheticTaskConfig sc;
  sc.n_train = 1;
  sc.n_eval_queries = 5;
  sc.n_eval_docs = 12;
  auto task = make_synthetic_task(sc);
  save_corpus(task.eval, dir / "syn");
  const auto back = load_corpus(dir / "syn");
  EXPECT_EQ(back.name, "syn");
  ASSERT_EQ(back.documents.size(), 12u);
  EXPECT_EQ(back.documents[3].text, task.eval.documents[3].text);
  EXPECT_EQ(back.qrels.size(), 5u);
  write(dir / "syn" / "qrels.jsonl", "{\"query_id\": \"q0\", \"doc_id\": \"d0\", \"relevance\": -1}\n");
  EXPECT_THROW(load_corpus(dir / "syn"), ValidationError);
  fs::remove_all(dir);
}

}  // namespace
}  // namespace grle
