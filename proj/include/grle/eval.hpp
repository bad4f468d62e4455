// Copyright 2026 The grle Authors
// SPDX-License-Identifier: Apache-2.0

// Embedding, exhaustive cosine ranking and report generation.

#pragma once

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "grle/checkpoint.hpp"
#include "grle/data.hpp"
#include "grle/metrics.hpp"
#include "grle/model.hpp"

namespace grle {

/// Row-major [n x dim] embeddings.
struct EmbeddingMatrix {
  std::size_t rows = 0;
  std::size_t dim = 0;
  std::vector<double> values;

  std::span<const double> row(std::size_t i) const { return {values.data() + i * dim, dim}; }
};

/// Gradient-free embeddings of `texts`. Rows are grouped by length to limit
/// padding; a row's embedding does not depend on its batch-mates.
template <class T>
EmbeddingMatrix embed_texts(const Model<T>& model, std::span<const std::string> texts,
                            std::span<const std::string> ids = {}, std::size_t batch_size = 64) {
  NoGradScope<T> no_grad;
  EmbeddingMatrix out;
  out.rows = texts.size();
  out.dim = model.config.d_model;
  out.values.resize(out.rows * out.dim);
  auto name = [&](std::size_t i) { return ids.empty() ? "#" + std::to_string(i) : ids[i]; };
  for (std::size_t i = 0; i < texts.size(); ++i) {
    if (texts[i].size() + 2 > model.config.max_seq_len) {
      throw ValidationError("cannot embed text " + name(i) + ": " + std::to_string(texts[i].size() + 2) +
                            " tokens exceed max_seq_len " + std::to_string(model.config.max_seq_len));
    }
  }
  std::vector<std::size_t> order(texts.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return texts[a].size() < texts[b].size(); });
  for (std::size_t lo = 0; lo < order.size(); lo += batch_size) {
    const std::size_t hi = std::min(order.size(), lo + batch_size);
    std::vector<std::vector<std::int32_t>> seqs;
    for (std::size_t k = lo; k < hi; ++k) seqs.push_back(frame(tokenize(texts[order[k]])));
    Tensor<T> e;
    try {
      e = encode(model, TokenMatrix::from_sequences(seqs));
    } catch (const std::exception& ex) {
      throw std::runtime_error("embedding failed for text " + name(order[lo]) + ": " + ex.what());
    }
    for (std::size_t k = lo; k < hi; ++k)
      for (std::size_t c = 0; c < out.dim; ++c)
        out.values[order[k] * out.dim + c] = static_cast<double>(e[(k - lo) * out.dim + c]);
  }
  return out;
}

inline void normalize_rows(EmbeddingMatrix& m) {
  for (std::size_t i = 0; i < m.rows; ++i) {
    double s = 0;
    for (std::size_t c = 0; c < m.dim; ++c) s += m.values[i * m.dim + c] * m.values[i * m.dim + c];
    const double inv = s > 0 ? 1.0 / std::sqrt(s) : 0.0;
    for (std::size_t c = 0; c < m.dim; ++c) m.values[i * m.dim + c] *= inv;
  }
}

/// Identity of a model's parameters and architecture.
template <class T>
std::string model_fingerprint(const Model<T>& model) {
  std::uint64_t h = fnv1a(to_json(model.config).dump());
  h = fnv1a(model.lora ? to_json(*model.lora).dump() : "null", h);
  for (const auto& p : model.named_parameters()) {
    h = fnv1a(p.name, h);
    for (auto v : p.tensor.data()) {
      const auto d = static_cast<double>(v);
      h = fnv1a(std::string_view(reinterpret_cast<const char*>(&d), sizeof(d)), h);
    }
  }
  return hex64(h);
}

inline std::string corpus_fingerprint(std::span<const Document> docs) {
  std::uint64_t h = fnv1a("documents");
  for (const auto& d : docs) {
    h = fnv1a(d.id, h);
    h = fnv1a(std::string_view("\0", 1), h);
    h = fnv1a(d.text, h);
    h = fnv1a(std::string_view("\0", 1), h);
  }
  return hex64(h);
}

struct RankOptions {
  /// Directory for cached document embeddings; empty disables caching.
  std::filesystem::path cache_dir;
};

namespace detail {

inline std::optional<EmbeddingMatrix> read_embedding_cache(const std::filesystem::path& file, std::size_t rows,
                                                           std::size_t dim) {
  std::ifstream in(file, std::ios::binary);
  if (!in) return std::nullopt;
  std::uint64_t r = 0, d = 0;
  in.read(reinterpret_cast<char*>(&r), sizeof r);
  in.read(reinterpret_cast<char*>(&d), sizeof d);
  if (!in || r != rows || d != dim) return std::nullopt;
  EmbeddingMatrix m{rows, dim, std::vector<double>(rows * dim)};
  in.read(reinterpret_cast<char*>(m.values.data()), static_cast<std::streamsize>(m.values.size() * sizeof(double)));
  if (!in) return std::nullopt;
  return m;
}

inline void write_embedding_cache(const std::filesystem::path& file, const EmbeddingMatrix& m) {
  std::filesystem::create_directories(file.parent_path());
  const auto tmp = file.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    const std::uint64_t r = m.rows, d = m.dim;
    out.write(reinterpret_cast<const char*>(&r), sizeof r);
    out.write(reinterpret_cast<const char*>(&d), sizeof d);
    out.write(reinterpret_cast<const char*>(m.values.data()),
              static_cast<std::streamsize>(m.values.size() * sizeof(double)));
  }
  std::filesystem::rename(tmp, file);
}

}  // namespace detail

template <class T>
EmbeddingMatrix document_embeddings(const Model<T>& model, std::span<const Document> documents,
                                    const RankOptions& opt = {}) {
  std::vector<std::string> texts, ids;
  for (const auto& d : documents) {
    texts.push_back(d.text);
    ids.push_back(d.id);
  }
  std::filesystem::path file;
  if (!opt.cache_dir.empty()) {
    file = opt.cache_dir / (model_fingerprint(model) + "-" + corpus_fingerprint(documents) + ".emb");
    if (auto hit = detail::read_embedding_cache(file, documents.size(), model.config.d_model)) return *hit;
  }
  EmbeddingMatrix m = embed_texts(model, texts, ids);
  if (!file.empty()) detail::write_embedding_cache(file, m);
  return m;
}

/// Every query scored against every document by cosine similarity.
template <class T>
std::vector<RankedList> rank_corpus(const Model<T>& model, std::span<const Query> queries,
                                    std::span<const Document> documents, const RankOptions& opt = {}) {
  if (documents.empty()) throw ValidationError("rank_corpus: empty corpus");
  EmbeddingMatrix docs = document_embeddings(model, documents, opt);
  normalize_rows(docs);
  std::vector<std::string> qtexts, qids, dids;
  for (const auto& q : queries) {
    qtexts.push_back(q.text);
    qids.push_back(q.id);
  }
  for (const auto& d : documents) dids.push_back(d.id);
  EmbeddingMatrix qs = embed_texts(model, qtexts, qids);
  normalize_rows(qs);
  std::vector<RankedList> out;
  std::vector<double> scores(documents.size());
  for (std::size_t i = 0; i < queries.size(); ++i) {
    for (std::size_t j = 0; j < documents.size(); ++j) {
      double s = 0;
      for (std::size_t c = 0; c < docs.dim; ++c) s += qs.values[i * docs.dim + c] * docs.values[j * docs.dim + c];
      scores[j] = s;
    }
    out.push_back(rank(queries[i].id, dids, scores));
  }
  return out;
}

struct EvalReport {
  std::string dataset;
  std::string checkpoint;
  std::string timestamp;
  std::string main_metric;
  std::map<std::string, double> metrics;
  /// metric -> query id -> value
  std::map<std::string, std::map<std::string, double>> per_query;

  double main_score() const { return metrics.at(main_metric); }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["dataset"] = dataset;
    j["checkpoint"] = checkpoint;
    j["timestamp"] = timestamp;
    j["main_metric"] = main_metric;
    j["main_score"] = main_score();
    j["metrics"] = metrics;
    j["per_query"] = per_query;
    return j;
  }
};

/// "ndcg@K" -> K; nullopt for other names.
inline std::optional<std::size_t> ndcg_cutoff(const std::string& metric) {
  if (metric.rfind("ndcg@", 0) != 0) return std::nullopt;
  try {
    std::size_t used = 0;
    const auto k = std::stoul(metric.substr(5), &used);
    if (used == metric.size() - 5 && k >= 1) return k;
  } catch (const std::exception&) {
  }
  throw ValidationError("bad metric \"" + metric + "\" (expected ndcg@K with K >= 1)");
}

inline void validate_metrics(std::span<const std::string> metrics) {
  if (metrics.empty()) throw ValidationError("no metrics requested");
  for (const auto& m : metrics) {
    if (m == "map" || m == "spearman" || ndcg_cutoff(m)) continue;
    throw ValidationError("unknown metric \"" + m + "\" (expected ndcg@K, map or spearman)");
  }
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct EvalOptions {
  std::string checkpoint_id;
  RankOptions rank;
};

/// Runs the requested metrics; the first one is the main score.
template <class T>
EvalReport evaluate(const Model<T>& model, const EvalCorpus& corpus, std::span<const std::string> metrics,
                    const EvalOptions& opt = {}) {
  validate_metrics(metrics);
  EvalReport report;
  report.dataset = corpus.name;
  report.checkpoint = opt.checkpoint_id.empty() ? model_fingerprint(model) : opt.checkpoint_id;
  report.timestamp = utc_timestamp();
  report.main_metric = metrics.front();

  const bool retrieval =
      std::any_of(metrics.begin(), metrics.end(), [](const std::string& m) { return m != "spearman"; });
  std::vector<RankedList> ranked;
  QrelMap qrels;
  if (retrieval) {
    if (corpus.documents.empty() || corpus.queries.empty()) {
      throw ValidationError("corpus " + corpus.name + ": retrieval metrics need documents and queries");
    }
    ranked = rank_corpus(model, corpus.queries, corpus.documents, opt.rank);
    qrels = qrel_map(corpus.qrels);
  }
  static const Judgments none;
  for (const auto& m : metrics) {
    if (m == "spearman") {
      if (corpus.pairs.size() < 2) throw ValidationError("corpus " + corpus.name + ": spearman needs scored pairs");
      std::vector<std::string> a, b;
      std::vector<double> gold;
      for (const auto& p : corpus.pairs) {
        a.push_back(p.text1);
        b.push_back(p.text2);
        gold.push_back(p.score);
      }
      auto ea = embed_texts(model, a), eb = embed_texts(model, b);
      normalize_rows(ea);
      normalize_rows(eb);
      std::vector<double> pred(a.size());
      for (std::size_t i = 0; i < a.size(); ++i)
        pred[i] = std::inner_product(ea.row(i).begin(), ea.row(i).end(), eb.row(i).begin(), 0.0);
      report.metrics[m] = spearman(pred, gold);
      continue;
    }
    auto& per = report.per_query[m];
    double total = 0;
    for (const auto& r : ranked) {
      auto it = qrels.find(r.query_id);
      const Judgments& rel = it == qrels.end() ? none : it->second;
      const double v = m == "map" ? average_precision(r, rel) : ndcg_at_k(r, rel, *ndcg_cutoff(m));
      per[r.query_id] = v;
      total += v;
    }
    report.metrics[m] = total / static_cast<double>(ranked.size());
  }
  return report;
}

}  // namespace grle
