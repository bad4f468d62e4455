// Copyright 2026 The grle Authors
// SPDX-License-Identifier: Apache-2.0

// Ranking and correlation metrics over plain values.

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "grle/data.hpp"

namespace grle {

struct RankedList {
  std::string query_id;
  std::vector<std::string> doc_ids;  // best first
  std::vector<double> scores;
};

/// doc id -> graded relevance for one query.
using Judgments = std::map<std::string, int>;
/// query id -> judgments.
using QrelMap = std::map<std::string, Judgments>;

inline QrelMap qrel_map(std::span<const Qrel> qrels) {
  QrelMap m;
  for (const auto& q : qrels) m[q.query_id][q.doc_id] = q.relevance;
  return m;
}

/// Sorts by descending score; equal scores fall back to ascending doc id.
inline RankedList rank(std::string query_id, std::span<const std::string> doc_ids, std::span<const double> scores) {
  if (doc_ids.size() != scores.size()) throw DimensionError("rank: one score per document required");
  std::vector<std::size_t> order(doc_ids.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return doc_ids[a] < doc_ids[b];
  });
  RankedList r;
  r.query_id = std::move(query_id);
  for (auto i : order) {
    r.doc_ids.push_back(doc_ids[i]);
    r.scores.push_back(scores[i]);
  }
  return r;
}

namespace detail {
inline int relevance_of(const Judgments& rel, const std::string& doc) {
  auto it = rel.find(doc);
  return it == rel.end() ? 0 : it->second;
}
}  // namespace detail

/// Gain 2^rel - 1, discount log2(rank + 1) with 1-based ranks, normalised by the
/// ideal ordering of all judged documents. 0 when nothing is relevant.
inline double ndcg_at_k(const RankedList& ranked, const Judgments& rel, std::size_t k = 10) {
  if (k == 0) throw ValidationError("ndcg_at_k: k must be >= 1");
  double dcg = 0;
  for (std::size_t i = 0; i < std::min(k, ranked.doc_ids.size()); ++i) {
    const int r = detail::relevance_of(rel, ranked.doc_ids[i]);
    if (r > 0) dcg += (std::exp2(r) - 1.0) / std::log2(static_cast<double>(i) + 2.0);
  }
  std::vector<int> ideal;
  for (const auto& [doc, r] : rel)
    if (r > 0) ideal.push_back(r);
  std::sort(ideal.rbegin(), ideal.rend());
  double idcg = 0;
  for (std::size_t i = 0; i < std::min(k, ideal.size()); ++i) {
    idcg += (std::exp2(ideal[i]) - 1.0) / std::log2(static_cast<double>(i) + 2.0);
  }
  return idcg > 0 ? dcg / idcg : 0.0;
}

/// Mean of precision@rank over the ranks holding relevant documents, divided
/// by the number of relevant documents (judged relevant but unretrieved ones
/// count as misses).
inline double average_precision(const RankedList& ranked, const Judgments& rel) {
  std::size_t total = 0;
  for (const auto& [doc, r] : rel) total += r > 0;
  if (total == 0) return 0.0;
  double sum = 0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < ranked.doc_ids.size(); ++i) {
    if (detail::relevance_of(rel, ranked.doc_ids[i]) > 0) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(i + 1);
    }
  }
  return sum / static_cast<double>(total);
}

inline double mean_average_precision(std::span<const RankedList> lists, const QrelMap& qrels) {
  if (lists.empty()) throw ValidationError("mean_average_precision: no queries");
  static const Judgments none;
  double s = 0;
  for (const auto& l : lists) {
    auto it = qrels.find(l.query_id);
    s += average_precision(l, it == qrels.end() ? none : it->second);
  }
  return s / static_cast<double>(lists.size());
}

/// 1-based ranks; tied values share the mean of the ranks they span.
inline std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("pearson: inputs differ in length");
  if (a.size() < 2) throw ValidationError("pearson: need at least two values");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) throw NumericError("correlation undefined: an input has zero variance");
  return sab / std::sqrt(saa * sbb);
}

/// Spearman rank correlation: Pearson over tie-averaged ranks.
inline double spearman(std::span<const double> pred, std::span<const double> gold) {
  if (pred.size() != gold.size()) throw DimensionError("spearman: inputs differ in length");
  if (pred.size() < 2) throw ValidationError("spearman: need at least two values");
  const auto rp = average_ranks(pred);
  const auto rg = average_ranks(gold);
  return pearson(rp, rg);
}

}  // namespace grle
