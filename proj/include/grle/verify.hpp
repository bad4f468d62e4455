// Copyright 2026 The grle Authors
// SPDX-License-Identifier: Apache-2.0

// Self-check suites run by `grle gradcheck`: finite differences for every
// objective and cached-gradient equivalence for every strategy, in 64-bit.

#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "grle/gradcheck.hpp"
#include "grle/trainer.hpp"

namespace grle {

struct CheckOutcome {
  std::string name;
  double value = 0;
  double tolerance = 0;
  bool passed = false;
  std::string detail;
};

struct VerifyOptions {
  ModelConfig model;
  LoraConfig lora;
  std::uint64_t seed = 7;
  double fd_eps = 1e-4;
  double fd_tolerance = 1e-4;
  /// Probed entries per parameter tensor; 0 checks every entry.
  std::size_t fd_entries_per_param = 24;
  std::size_t fd_batch = 3;
  std::size_t gc_batch = 16;
  std::vector<std::size_t> gc_micro_batches = {1, 2, 4, 8, 16};
  double gc_tolerance = 1e-8;
  std::size_t negatives = 2;

  /// Small 2-layer, d_model=32 model used by default.
  static VerifyOptions small() {
    VerifyOptions o;
    o.model.d_model = 32;
    o.model.n_layers = 2;
    o.model.n_heads = 4;
    o.model.d_ff = 64;
    o.model.max_seq_len = 96;
    o.lora.r = 4;
    o.lora.alpha = 8;
    return o;
  }
};

namespace verify_detail {

/// Short synthetic examples that fit the verification model.
inline std::vector<TrainExample> examples(std::size_t n, std::size_t negatives, std::uint64_t seed) {
  SyntheticTaskConfig sc;
  sc.seed = seed;
  sc.n_train = n;
  sc.n_eval_queries = 2;
  sc.n_eval_docs = 10;
  sc.n_keys = 200;
  sc.negatives_per_example = negatives;
  auto task = make_synthetic_task(sc);
  return task.train;
}

/// Adapted double model with non-zero B so every adapter tensor gets signal.
inline Model<double> model(const VerifyOptions& o, bool train_base) {
  Model<double> m = init_model<double>(o.model, o.seed);
  add_adapters(m, o.lora, o.seed + 1);
  std::mt19937_64 rng(o.seed + 2);
  std::normal_distribution<double> normal(0.0, 0.05);
  for (auto& p : m.named_parameters()) {
    Tensor<double> t = p.tensor;
    if (p.name.ends_with("lora_b"))
      for (auto& v : t.data()) v = normal(rng);
    if (train_base && p.name.find(".lora_") == std::string::npos) t.set_requires_grad(true);
  }
  return m;
}

struct Objective {
  std::string name;
  Strategy strategy;
  double lambda_cl, lambda_dpo, lambda_kl, lambda_sft;
};

inline std::vector<Objective> objectives() {
  return {{"L_CL", Strategy::kCl, 1, 0, 0, 0},
          {"L_SFT", Strategy::kClSft, 0, 0, 0, 1},
          {"L_DPO", Strategy::kClDpo, 0, 1, 0, 0},
          {"L_KL", Strategy::kGrl, 0, 0, 1, 0},
          {"L_GRL", Strategy::kGrl, 1, 0.5, 1, 0}};
}

inline std::vector<double> flat_grads(const Model<double>& m) {
  std::vector<double> g;
  for (const auto& p : m.trainable_parameters()) {
    if (p.tensor.has_grad()) {
      g.insert(g.end(), p.tensor.grad().begin(), p.tensor.grad().end());
    } else {
      g.insert(g.end(), p.tensor.numel(), 0.0);
    }
  }
  return g;
}

}  // namespace verify_detail

/// Finite-difference check of every objective over all parameters (base and
/// adapters), dropout active.
inline std::vector<CheckOutcome> run_gradient_suite(const VerifyOptions& o) {
  std::vector<CheckOutcome> out;
  const auto data = verify_detail::examples(o.fd_batch, o.negatives, o.seed);
  for (const auto& obj : verify_detail::objectives()) {
    Model<double> m = verify_detail::model(o, true);
    const ReferenceScorer<double> ref(m);
    TrainConfig cfg;
    cfg.strategy = obj.strategy;
    cfg.batch_size = cfg.micro_batch_size = data.size();
    cfg.seed = o.seed;
    cfg.weights.lambda_cl = obj.lambda_cl;
    cfg.weights.lambda_dpo = obj.lambda_dpo;
    cfg.weights.lambda_kl = obj.lambda_kl;
    cfg.weights.lambda_sft = obj.lambda_sft;
    std::vector<std::pair<std::string, Tensor<double>>> params;
    for (const auto& p : m.trainable_parameters()) params.emplace_back(p.name, p.tensor);
    GradCheckOptions go;
    go.eps = o.fd_eps;
    go.max_entries_per_param = o.fd_entries_per_param;
    go.seed = o.seed;
    const auto report = finite_difference_check(
        [&] { return batch_objective(m, std::span<const TrainExample>(data), cfg, &ref, 0).total; }, params, go);
    CheckOutcome c{"gradient " + obj.name, report.max_rel_error, o.fd_tolerance, report.passed(o.fd_tolerance), ""};
    std::string worst;
    double worst_err = -1;
    for (const auto& e : report.params)
      if (e.max_rel_error > worst_err) {
        worst_err = e.max_rel_error;
        worst = e.name;
      }
    c.detail = std::to_string(report.checked) + " entries, worst in " + worst;
    out.push_back(std::move(c));
  }
  return out;
}

/// Cached-gradient steps against the naive full-batch oracle for every
/// strategy and micro-batch size. Also requires bitwise-equal loss values.
inline std::vector<CheckOutcome> run_gradcache_suite(const VerifyOptions& o) {
  std::vector<CheckOutcome> out;
  const auto data = verify_detail::examples(o.gc_batch, o.negatives, o.seed + 11);
  const std::span<const TrainExample> batch(data);
  for (auto strategy : {Strategy::kCl, Strategy::kClSft, Strategy::kClDpo, Strategy::kGrl, Strategy::kGrlSft}) {
    Model<double> m = verify_detail::model(o, false);
    const ReferenceScorer<double> ref(m);
    TrainConfig cfg;
    cfg.strategy = strategy;
    cfg.batch_size = data.size();
    cfg.micro_batch_size = data.size();
    cfg.seed = o.seed;
    m.zero_grad();
    const StepResult base = naive_step(m, batch, cfg, &ref, 3);
    const auto g0 = verify_detail::flat_grads(m);
    for (auto mbs : o.gc_micro_batches) {
      cfg.micro_batch_size = mbs;
      m.zero_grad();
      const StepResult r = gradcache_step(m, batch, cfg, &ref, 3, /*force_cache=*/true);
      const auto g = verify_detail::flat_grads(m);
      double diff = 0;
      for (std::size_t i = 0; i < g.size(); ++i) diff = std::max(diff, std::abs(g[i] - g0[i]));
      const bool same_loss = r.loss_total == base.loss_total && r.loss_cl == base.loss_cl &&
                             r.loss_sft == base.loss_sft && r.loss_dpo == base.loss_dpo && r.loss_kl == base.loss_kl;
      CheckOutcome c{"gradcache " + to_string(strategy) + " micro_batch=" + std::to_string(mbs), diff, o.gc_tolerance,
                     diff < o.gc_tolerance && same_loss, same_loss ? "loss identical" : "loss values differ"};
      out.push_back(std::move(c));
    }
  }
  return out;
}

}  // namespace grle
