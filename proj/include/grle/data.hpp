// Copyright 2026 The grle Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "grle/tokenizer.hpp"

namespace grle {

/// A query with its relevant passage and zero or more hard negatives.
struct TrainExample {
  std::string query;
  std::string positive;
  std::vector<std::string> negatives;

  bool operator==(const TrainExample&) const = default;
};

/// Reads one JSON object per line: {"query", "positive", "negatives": [...]}.
/// Blank lines are skipped; line numbers in errors are 1-based.
inline std::vector<TrainExample> load_examples(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open training data " + path.string());
  std::vector<TrainExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto where = path.string() + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ValidationError(where + ": malformed JSON (" + e.what() + ")");
    }
    if (!j.is_object()) throw ValidationError(where + ": expected a JSON object");
    TrainExample ex;
    for (const char* field : {"query", "positive"}) {
      if (!j.contains(field) || !j[field].is_string()) {
        throw ValidationError(where + ": missing string field \"" + field + "\"");
      }
    }
    ex.query = j["query"].get<std::string>();
    ex.positive = j["positive"].get<std::string>();
    if (ex.query.empty()) throw ValidationError(where + ": \"query\" is empty");
    if (ex.positive.empty()) throw ValidationError(where + ": \"positive\" is empty");
    if (j.contains("negatives")) {
      if (!j["negatives"].is_array()) throw ValidationError(where + ": \"negatives\" must be an array");
      for (const auto& n : j["negatives"]) {
        if (!n.is_string() || n.get<std::string>().empty()) {
          throw ValidationError(where + ": every negative must be a non-empty string");
        }
        ex.negatives.push_back(n.get<std::string>());
      }
    }
    out.push_back(std::move(ex));
  }
  return out;
}

inline void save_examples(const std::filesystem::path& path, std::span<const TrainExample> examples) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& ex : examples) {
    out << nlohmann::json{{"query", ex.query}, {"positive", ex.positive}, {"negatives", ex.negatives}}.dump() << '\n';
  }
}

enum class RowGroup : std::uint64_t { kQuery = 0, kPositive = 1, kNegative = 2, kGeneration = 3 };

inline std::uint64_t row_key(RowGroup group, std::size_t index) {
  return (static_cast<std::uint64_t>(group) << 48) | static_cast<std::uint64_t>(index);
}

/// Collated examples. Negatives are flattened: example e owns rows
/// [e*H, (e+1)*H) of `negatives`.
struct Batch {
  std::size_t size = 0;
  std::size_t negatives_per_example = 0;
  /// Position of example 0 inside the enclosing training batch.
  std::size_t first_example = 0;
  TokenMatrix queries;
  TokenMatrix positives;
  std::optional<TokenMatrix> negatives;
  // Unframed byte tokens, kept for query-conditioned passage scoring.
  std::vector<std::vector<std::int32_t>> query_tokens;
  std::vector<std::vector<std::int32_t>> positive_tokens;
  std::vector<std::vector<std::int32_t>> negative_tokens;
};

/// Frames every text as [BOS, bytes, EOS] and pads each group to its longest
/// row. Over-length texts are rejected, never truncated.
inline Batch collate(std::span<const TrainExample> examples, std::size_t max_len, std::size_t first_example = 0) {
  if (examples.empty()) throw ValidationError("collate: no examples");
  Batch b;
  b.size = examples.size();
  b.first_example = first_example;
  b.negatives_per_example = examples.front().negatives.size();
  std::vector<std::vector<std::int32_t>> q, p, n;
  std::vector<std::uint64_t> qk, pk, nk;
  auto framed = [&](const std::string& text, std::size_t index, const char* what) {
    auto body = tokenize(text);
    if (body.size() + 2 > max_len) {
      throw ValidationError("collate: example " + std::to_string(first_example + index) + " " + what + " has " +
                            std::to_string(body.size() + 2) + " tokens after framing, max_len is " +
                            std::to_string(max_len));
    }
    return body;
  };
  for (std::size_t e = 0; e < examples.size(); ++e) {
    const auto& ex = examples[e];
    if (ex.negatives.size() != b.negatives_per_example) {
      throw ValidationError("collate: example " + std::to_string(first_example + e) + " has " +
                            std::to_string(ex.negatives.size()) + " negatives, expected " +
                            std::to_string(b.negatives_per_example));
    }
    const std::size_t g = first_example + e;
    b.query_tokens.push_back(framed(ex.query, e, "query"));
    b.positive_tokens.push_back(framed(ex.positive, e, "positive"));
    q.push_back(frame(b.query_tokens.back()));
    p.push_back(frame(b.positive_tokens.back()));
    qk.push_back(row_key(RowGroup::kQuery, g));
    pk.push_back(row_key(RowGroup::kPositive, g));
    for (std::size_t h = 0; h < ex.negatives.size(); ++h) {
      b.negative_tokens.push_back(framed(ex.negatives[h], e, "negative"));
      n.push_back(frame(b.negative_tokens.back()));
      nk.push_back(row_key(RowGroup::kNegative, g * b.negatives_per_example + h));
    }
  }
  b.queries = TokenMatrix::from_sequences(q, std::move(qk));
  b.positives = TokenMatrix::from_sequences(p, std::move(pk));
  if (!n.empty()) b.negatives = TokenMatrix::from_sequences(n, std::move(nk));
  return b;
}

// ---------------------------------------------------------------------------
// Evaluation corpora

struct Document {
  std::string id;
  std::string text;
};

struct Query {
  std::string id;
  std::string text;
};

struct Qrel {
  std::string query_id;
  std::string doc_id;
  int relevance = 0;
};

/// Sentence pair with a gold similarity score (for rank-correlation tasks).
struct ScoredPair {
  std::string text1;
  std::string text2;
  double score = 0.0;
};

struct EvalCorpus {
  std::string name = "corpus";
  std::vector<Document> documents;
  std::vector<Query> queries;
  std::vector<Qrel> qrels;
  std::vector<ScoredPair> pairs;
};

namespace detail {

template <class Fn>
void for_each_json_line(const std::filesystem::path& path, Fn&& fn) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto where = path.string() + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ValidationError(where + ": malformed JSON (" + e.what() + ")");
    }
    try {
      fn(j);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(where + ": " + e.what());
    }
  }
}

inline std::string id_string(const nlohmann::json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  throw ValidationError("id must be a string or integer");
}

}  // namespace detail

/// Reads documents.jsonl, queries.jsonl, qrels.jsonl and, if present, pairs.jsonl.
inline EvalCorpus load_corpus(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw std::runtime_error("corpus directory not found: " + dir.string());
  EvalCorpus c;
  c.name = dir.filename().string();
  if (c.name.empty()) c.name = dir.parent_path().filename().string();
  if (std::filesystem::exists(dir / "documents.jsonl")) {
    detail::for_each_json_line(dir / "documents.jsonl", [&](const nlohmann::json& j) {
      c.documents.push_back({detail::id_string(j.at("id")), j.at("text").get<std::string>()});
    });
    detail::for_each_json_line(dir / "queries.jsonl", [&](const nlohmann::json& j) {
      c.queries.push_back({detail::id_string(j.at("id")), j.at("text").get<std::string>()});
    });
    detail::for_each_json_line(dir / "qrels.jsonl", [&](const nlohmann::json& j) {
      const int rel = j.at("relevance").get<int>();
      if (rel < 0) throw ValidationError("relevance must be >= 0");
      c.qrels.push_back({detail::id_string(j.at("query_id")), detail::id_string(j.at("doc_id")), rel});
    });
  }
  if (std::filesystem::exists(dir / "pairs.jsonl")) {
    detail::for_each_json_line(dir / "pairs.jsonl", [&](const nlohmann::json& j) {
      c.pairs.push_back({j.at("text1").get<std::string>(), j.at("text2").get<std::string>(), j.at("score").get<double>()});
    });
  }
  if (c.documents.empty() && c.pairs.empty()) {
    throw ValidationError("corpus " + dir.string() + " has neither documents nor pairs");
  }
  return c;
}

inline void save_corpus(const EvalCorpus& c, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "documents.jsonl");
    for (const auto& d : c.documents) out << nlohmann::json{{"id", d.id}, {"text", d.text}}.dump() << '\n';
  }
  {
    std::ofstream out(dir / "queries.jsonl");
    for (const auto& q : c.queries) out << nlohmann::json{{"id", q.id}, {"text", q.text}}.dump() << '\n';
  }
  {
    std::ofstream out(dir / "qrels.jsonl");
    for (const auto& r : c.qrels)
      out << nlohmann::json{{"query_id", r.query_id}, {"doc_id", r.doc_id}, {"relevance", r.relevance}}.dump() << '\n';
  }
  if (!c.pairs.empty()) {
    std::ofstream out(dir / "pairs.jsonl");
    for (const auto& p : c.pairs)
      out << nlohmann::json{{"text1", p.text1}, {"text2", p.text2}, {"score", p.score}}.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------
// Synthetic retrieval task

struct SyntheticTaskConfig {
  std::uint64_t seed = 0;
  std::size_t n_train = 2000;
  std::size_t n_eval_queries = 100;
  std::size_t n_eval_docs = 500;
  std::size_t n_keys = 1000;
  std::size_t negatives_per_example = 8;
  std::size_t key_length = 4;

  bool operator==(const SyntheticTaskConfig&) const = default;
};

struct SyntheticTask {
  std::vector<TrainExample> train;
  EvalCorpus eval;
};

namespace synthetic {

inline const std::vector<std::string>& query_templates() {
  static const std::vector<std::string> t = {"find {}",      "where is {}",   "look up {}",
                                             "what is {}",   "show me {}",    "tell me about {}",
                                             "search for {}", "details on {}"};
  return t;
}

inline const std::vector<std::string>& filler_words() {
  static const std::vector<std::string> w = {
      "the",   "old",   "river", "runs",  "past",  "a",     "quiet", "mill",  "near",  "green", "hills",
      "where", "birds", "sing",  "over",  "cold",  "stone", "walls", "and",   "small", "boats", "drift",
      "under", "grey",  "skies", "while", "tall",  "trees", "bend",  "in",    "slow",  "wind",  "of",
      "late",  "autumn", "every", "road", "leads", "to",    "market"};
  return w;
}

inline std::size_t representable_keys(std::size_t key_length) {
  std::size_t n = 1;
  for (std::size_t i = 0; i < key_length; ++i) {
    if (n > (std::size_t{1} << 40)) return n;
    n *= 26;
  }
  return n;
}

inline std::string decode_key(std::size_t index, std::size_t key_length) {
  std::string key(key_length, 'A');
  for (std::size_t i = key_length; i-- > 0;) {
    key[i] = static_cast<char>('A' + index % 26);
    index /= 26;
  }
  return key;
}

/// A filler sentence of 5-8 words with `key` inserted at a random word slot.
inline std::string passage(std::mt19937_64& rng, const std::string& key) {
  const auto& words = filler_words();
  std::uniform_int_distribution<std::size_t> len(5, 8), pick(0, words.size() - 1);
  std::vector<std::string> parts(len(rng));
  for (auto& p : parts) p = words[pick(rng)];
  std::uniform_int_distribution<std::size_t> slot(0, parts.size());
  parts.insert(parts.begin() + static_cast<std::ptrdiff_t>(slot(rng)), key);
  std::string out;
  for (const auto& p : parts) {
    if (!out.empty()) out.push_back(' ');
    out += p;
  }
  return out;
}

inline std::string query(std::mt19937_64& rng, const std::string& key) {
  const auto& t = query_templates();
  std::string q = t[std::uniform_int_distribution<std::size_t>(0, t.size() - 1)(rng)];
  q.replace(q.find("{}"), 2, key);
  return q;
}

inline std::string replace_key(std::string text, const std::string& from, const std::string& to) {
  text.replace(text.find(from), from.size(), to);
  return text;
}

}  // namespace synthetic

/// Seeded key-lookup retrieval task. Each query mentions one key; its positive
/// passage contains that key among filler words. Hard negatives are passages on
/// other keys (half are the positive with its key swapped out). The eval split
/// has exactly one relevant document per query, and its document texts never
/// occur in the training split.
inline SyntheticTask make_synthetic_task(const SyntheticTaskConfig& cfg) {
  const std::size_t representable = synthetic::representable_keys(cfg.key_length);
  if (cfg.n_keys < 2) throw ValidationError("make_synthetic_task: n_keys must be >= 2");
  if (cfg.n_keys > representable) {
    throw ValidationError("make_synthetic_task: n_keys " + std::to_string(cfg.n_keys) + " exceeds the " +
                          std::to_string(representable) + " representable keys of length " +
                          std::to_string(cfg.key_length));
  }
  if (cfg.n_eval_queries + 1 > cfg.n_keys) {
    throw ValidationError("make_synthetic_task: n_keys must exceed the number of eval queries");
  }
  if (cfg.n_eval_docs < cfg.n_eval_queries) {
    throw ValidationError("make_synthetic_task: need at least one document per eval query");
  }

  std::mt19937_64 rng(cfg.seed);
  // Draw n_keys distinct key indices.
  std::vector<std::string> keys;
  {
    std::unordered_set<std::size_t> seen;
    std::uniform_int_distribution<std::size_t> draw(0, representable - 1);
    while (keys.size() < cfg.n_keys) {
      const auto k = draw(rng);
      if (seen.insert(k).second) keys.push_back(synthetic::decode_key(k, cfg.key_length));
    }
  }
  std::uniform_int_distribution<std::size_t> any_key(0, keys.size() - 1);

  SyntheticTask task;
  std::unordered_set<std::string> train_texts;
  for (std::size_t i = 0; i < cfg.n_train; ++i) {
    const std::size_t k = any_key(rng);
    TrainExample ex;
    ex.query = synthetic::query(rng, keys[k]);
    ex.positive = synthetic::passage(rng, keys[k]);
    for (std::size_t h = 0; h < cfg.negatives_per_example; ++h) {
      std::size_t other = any_key(rng);
      while (other == k) other = any_key(rng);
      ex.negatives.push_back(h % 2 == 0 ? synthetic::replace_key(ex.positive, keys[k], keys[other])
                                        : synthetic::passage(rng, keys[other]));
    }
    train_texts.insert(ex.positive);
    for (const auto& n : ex.negatives) train_texts.insert(n);
    task.train.push_back(std::move(ex));
  }

  auto fresh_passage = [&](const std::string& key) {
    std::string text;
    do {
      text = synthetic::passage(rng, key);
    } while (train_texts.count(text) != 0);
    train_texts.insert(text);  // also keeps eval documents pairwise distinct
    return text;
  };

  std::vector<std::size_t> order(keys.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t nq = cfg.n_eval_queries;
  std::vector<Document> docs;
  for (std::size_t q = 0; q < nq; ++q) {
    const auto& key = keys[order[q]];
    const std::string qid = "q" + std::to_string(q);
    const std::string did = "d" + std::to_string(q);
    task.eval.queries.push_back({qid, synthetic::query(rng, key)});
    docs.push_back({did, fresh_passage(key)});
    task.eval.qrels.push_back({qid, did, 1});
  }
  // Distractor documents only use keys that no eval query mentions.
  std::uniform_int_distribution<std::size_t> distractor(nq, order.size() - 1);
  for (std::size_t d = nq; d < cfg.n_eval_docs; ++d) {
    docs.push_back({"d" + std::to_string(d), fresh_passage(keys[order[distractor(rng)]])});
  }
  std::shuffle(docs.begin(), docs.end(), rng);
  task.eval.documents = std::move(docs);
  task.eval.name = "synthetic-keys";
  return task;
}

inline SyntheticTask make_synthetic_task(std::uint64_t seed, std::size_t n_train, std::size_t n_eval, std::size_t n_keys) {
  SyntheticTaskConfig cfg;
  cfg.seed = seed;
  cfg.n_train = n_train;
  cfg.n_eval_queries = n_eval;
  cfg.n_eval_docs = 5 * n_eval;
  cfg.n_keys = n_keys;
  return make_synthetic_task(cfg);
}

}  // namespace grle
