// Copyright 2026 The grle Authors
// SPDX-License-Identifier: Apache-2.0

// Fine-tuning objectives. Scalar helpers operate on plain values; the tensor
// versions return one loss per query so callers can average over any grouping
// of a batch and still reproduce the full-batch mean.

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "grle/ops.hpp"

namespace grle {

struct LossWeights {
  double lambda_cl = 1.0;
  double lambda_dpo = 0.5;
  double lambda_kl = 1.0;
  /// Weight of the next-token term in the cl_sft and grl_sft strategies.
  double lambda_sft = 1.0;
  /// Contrastive temperature; 1 gives raw cosine logits.
  double tau = 0.05;
  /// Temperature applied to cosine scores inside the representation distribution.
  double kl_tau = 0.05;
  double beta = 0.1;

  void validate() const {
    if (!(tau > 0.0)) throw ValidationError("weights.tau must be positive");
    if (!(kl_tau > 0.0)) throw ValidationError("weights.kl_tau must be positive");
    if (!(beta > 0.0)) throw ValidationError("weights.beta must be positive");
    for (auto [v, name] : {std::pair{lambda_cl, "lambda_cl"}, std::pair{lambda_dpo, "lambda_dpo"},
                           std::pair{lambda_kl, "lambda_kl"}, std::pair{lambda_sft, "lambda_sft"}}) {
      if (!(v >= 0.0)) throw ValidationError(std::string("weights.") + name + " must be >= 0");
    }
  }

  bool operator==(const LossWeights&) const = default;
};

// ---------------------------------------------------------------------------
// Scalar forms

template <class U, class V>
double cosine_score(std::span<const U> u, std::span<const V> v) {
  if (u.size() != v.size() || u.empty()) throw DimensionError("cosine_score: vectors differ in length");
  double dot = 0, nu = 0, nv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += static_cast<double>(u[i]) * static_cast<double>(v[i]);
    nu += static_cast<double>(u[i]) * static_cast<double>(u[i]);
    nv += static_cast<double>(v[i]) * static_cast<double>(v[i]);
  }
  if (nu == 0.0 || nv == 0.0) throw ValidationError("cosine_score: zero-norm vector");
  return dot / (std::sqrt(nu) * std::sqrt(nv));
}

inline double cosine_score(const std::vector<double>& u, const std::vector<double>& v) {
  return cosine_score(std::span<const double>(u), std::span<const double>(v));
}

/// -(1/N) sum log p over the positive passage's tokens.
inline double sft_loss(std::span<const double> token_logps) {
  if (token_logps.empty()) throw ValidationError("sft_loss: empty passage");
  return -std::accumulate(token_logps.begin(), token_logps.end(), 0.0) / static_cast<double>(token_logps.size());
}

/// Length-normalised generation relevance: mean token log-probability.
inline double generation_score(std::span<const double> token_logps) {
  if (token_logps.empty()) throw ValidationError("generation_score: empty passage");
  return std::accumulate(token_logps.begin(), token_logps.end(), 0.0) / static_cast<double>(token_logps.size());
}

namespace detail {
inline double log_sigmoid(double x) { return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }
}  // namespace detail

/// Mean over negatives of -log sigmoid(beta * [(pi_pos - ref_pos) - (pi_neg - ref_neg)]).
/// Inputs are summed sequence log-likelihoods.
inline double dpo_loss(double policy_pos, double ref_pos, std::span<const double> policy_negs,
                       std::span<const double> ref_negs, double beta) {
  if (policy_negs.empty()) throw ValidationError("dpo_loss: empty negative list");
  if (policy_negs.size() != ref_negs.size()) throw DimensionError("dpo_loss: negative lists differ in length");
  if (!(beta > 0.0)) throw ValidationError("dpo_loss: beta must be positive");
  double total = 0;
  for (std::size_t i = 0; i < policy_negs.size(); ++i) {
    const double margin = (policy_pos - ref_pos) - (policy_negs[i] - ref_negs[i]);
    total += -detail::log_sigmoid(beta * margin);
  }
  return total / static_cast<double>(policy_negs.size());
}

struct RelevanceDistributions {
  std::vector<double> p_rt;
  std::vector<double> p_gen;
};

namespace detail {
inline std::vector<double> softmax(std::span<const double> x, double temperature) {
  double mx = -std::numeric_limits<double>::infinity();
  for (auto v : x) mx = std::max(mx, v / temperature);
  std::vector<double> out(x.size());
  double z = 0;
  for (std::size_t i = 0; i < x.size(); ++i) z += (out[i] = std::exp(x[i] / temperature - mx));
  for (auto& v : out) v /= z;
  return out;
}
}  // namespace detail

/// Softmax of s_rt / tau and of s_gen over one candidate set.
inline RelevanceDistributions relevance_distributions(std::span<const double> s_rt, std::span<const double> s_gen,
                                                      double tau) {
  if (s_rt.size() != s_gen.size()) throw DimensionError("relevance_distributions: score lists differ in length");
  if (s_rt.size() < 2) throw ValidationError("relevance_distributions: need at least two candidates");
  if (!(tau > 0.0)) throw ValidationError("relevance_distributions: tau must be positive");
  return {detail::softmax(s_rt, tau), detail::softmax(s_gen, 1.0)};
}

inline constexpr double kProbabilityFloor = 1e-12;

/// KL(P_rt || P_gen). Terms with P_rt = 0 contribute nothing; P_gen is floored
/// at 1e-12 before the log.
inline double kl_consistency_loss(std::span<const double> p_rt, std::span<const double> p_gen) {
  if (p_rt.size() != p_gen.size() || p_rt.empty()) throw DimensionError("kl_consistency_loss: support sizes differ");
  for (auto [p, name] : {std::pair{p_rt, "P_rt"}, std::pair{p_gen, "P_gen"}}) {
    const double s = std::accumulate(p.begin(), p.end(), 0.0);
    if (std::abs(s - 1.0) > 1e-6) {
      throw ValidationError(std::string("kl_consistency_loss: ") + name + " sums to " + std::to_string(s));
    }
  }
  double kl = 0;
  for (std::size_t i = 0; i < p_rt.size(); ++i) {
    if (p_rt[i] == 0.0) continue;
    kl += p_rt[i] * (std::log(p_rt[i]) - std::log(std::max(p_gen[i], kProbabilityFloor)));
  }
  return kl;
}

struct LossComponents {
  double cl = 0, sft = 0, dpo = 0, kl = 0;
};

/// lambda_cl * L_CL + lambda_dpo * L_DPO + lambda_kl * L_KL.
inline double grl_total_loss(double l_cl, double l_dpo, double l_kl, const LossWeights& w) {
  for (auto [v, name] : {std::pair{l_cl, "L_CL"}, std::pair{l_dpo, "L_DPO"}, std::pair{l_kl, "L_KL"}}) {
    if (!std::isfinite(v)) throw NumericError(std::string("grl_total_loss: ") + name + " is not finite");
  }
  return w.lambda_cl * l_cl + w.lambda_dpo * l_dpo + w.lambda_kl * l_kl;
}

// ---------------------------------------------------------------------------
// Tensor forms (differentiable, one value per query)

/// InfoNCE over cosine/tau logits. Each query's candidates are its positive,
/// its own hard negatives, and every other query's positive; with
/// `cross_query_negatives` all hard negatives of the batch are used instead of
/// only the query's own. Returns [B].
template <class T>
Tensor<T> contrastive_loss_per_query(const Tensor<T>& queries, const Tensor<T>& positives, const Tensor<T>* negatives,
                                     double tau, bool cross_query_negatives = false) {
  if (!(tau > 0.0)) throw ValidationError("contrastive_loss: tau must be positive");
  if (queries.rank() != 2 || positives.shape() != queries.shape()) {
    throw DimensionError("contrastive_loss: query " + shape_str(queries.shape()) + " vs positive " +
                         shape_str(positives.shape()));
  }
  const std::size_t B = queries.dim(0), d = queries.dim(1);
  Tensor<T> qn = l2_normalize_rows(queries);
  Tensor<T> logits = matmul_bt(qn, l2_normalize_rows(positives));
  if (negatives != nullptr) {
    if (negatives->rank() != 2 || negatives->dim(1) != d || negatives->dim(0) % B != 0) {
      throw DimensionError("contrastive_loss: negatives " + shape_str(negatives->shape()) + " do not split over " +
                           std::to_string(B) + " queries");
    }
    const std::size_t H = negatives->dim(0) / B;
    Tensor<T> nn = l2_normalize_rows(*negatives);
    Tensor<T> neg_scores = cross_query_negatives
                               ? matmul_bt(qn, nn)
                               : reshape(matmul_bt(reshape(qn, {B, 1, d}), reshape(nn, {B, H, d})), {B, H});
    logits = concat_cols(logits, neg_scores);
  }
  std::vector<std::int32_t> target(B);
  for (std::size_t i = 0; i < B; ++i) target[i] = static_cast<std::int32_t>(i);
  return scale(pick(log_softmax(scale(logits, static_cast<T>(1.0 / tau)), 1), target), T(-1));
}

template <class T>
Tensor<T> contrastive_loss(const Tensor<T>& queries, const Tensor<T>& positives, const Tensor<T>* negatives, double tau,
                           bool cross_query_negatives = false) {
  return mean(contrastive_loss_per_query(queries, positives, negatives, tau, cross_query_negatives));
}

/// Cosine between each query and its m candidates: query [B x d], candidates
/// [B*m x d] grouped by query. Returns [B x m].
template <class T>
Tensor<T> cosine_scores(const Tensor<T>& queries, const Tensor<T>& candidates) {
  const std::size_t B = queries.dim(0), d = queries.dim(1);
  if (candidates.rank() != 2 || candidates.dim(1) != d || candidates.dim(0) % B != 0) {
    throw DimensionError("cosine_scores: candidates " + shape_str(candidates.shape()) + " vs queries " +
                         shape_str(queries.shape()));
  }
  const std::size_t m = candidates.dim(0) / B;
  return reshape(matmul_bt(reshape(l2_normalize_rows(queries), {B, 1, d}),
                           reshape(l2_normalize_rows(candidates), {B, m, d})),
                 {B, m});
}

/// KL(P_rt || P_gen) per query from score matrices [B x m]:
/// P_rt = softmax(s_rt / tau), P_gen = softmax(s_gen), P_gen floored at 1e-12.
template <class T>
Tensor<T> kl_consistency_per_query(const Tensor<T>& s_rt, const Tensor<T>& s_gen, double tau) {
  if (s_rt.shape() != s_gen.shape() || s_rt.rank() != 2) {
    throw DimensionError("kl_consistency: s_rt " + shape_str(s_rt.shape()) + " vs s_gen " + shape_str(s_gen.shape()));
  }
  if (s_rt.dim(1) < 2) throw ValidationError("kl_consistency: need at least two candidates");
  Tensor<T> log_p_rt = log_softmax(scale(s_rt, static_cast<T>(1.0 / tau)), 1);
  Tensor<T> log_p_gen = clamp_min(log_softmax(s_gen, 1), static_cast<T>(std::log(kProbabilityFloor)));
  return sum_axis(mul(exp(log_p_rt), sub(log_p_rt, log_p_gen)), 1);
}

/// Per-query DPO loss averaged over that query's negatives. policy_* carry
/// gradients; ref_* are constants. Shapes: pos [B], negs [B x H].
template <class T>
Tensor<T> dpo_loss_per_query(const Tensor<T>& policy_pos, const Tensor<T>& ref_pos, const Tensor<T>& policy_negs,
                             const Tensor<T>& ref_negs, double beta) {
  if (policy_negs.rank() != 2 || policy_negs.shape() != ref_negs.shape() || policy_pos.numel() != policy_negs.dim(0) ||
      ref_pos.numel() != policy_pos.numel()) {
    throw DimensionError("dpo_loss: inconsistent shapes");
  }
  const std::size_t B = policy_negs.dim(0), H = policy_negs.dim(1);
  Tensor<T> pos_adv = expand_cols(reshape(sub(policy_pos, ref_pos), {B}), H);
  Tensor<T> margin = sub(pos_adv, sub(policy_negs, ref_negs));
  Tensor<T> per_pair = scale(log_sigmoid(scale(margin, static_cast<T>(beta))), T(-1));
  return scale(sum_axis(per_pair, 1), T(1) / static_cast<T>(H));
}

}  // namespace grle
