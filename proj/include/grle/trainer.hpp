// Copyright 2026 The grle Authors
// SPDX-License-Identifier: Apache-2.0

// Training steps and the epoch loop.
//
// Two step implementations produce the same parameter gradients:
//   naive_step      one forward/backward over the whole batch;
//   gradcache_step  embeds micro-batches without a tape, differentiates the
//                   batch-level contrastive loss with respect to the cached
//                   embeddings, then re-forwards each micro-batch and pushes
//                   the cached embedding gradients (plus that micro-batch's
//                   generation losses) into the parameters.
// Reported loss components are per-example values summed in example order,
// so they do not depend on how the batch was split.

#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "grle/data.hpp"
#include "grle/losses.hpp"
#include "grle/model.hpp"
#include "grle/optim.hpp"

namespace grle {

enum class Strategy { kCl, kClSft, kClDpo, kGrl, kGrlSft };

inline std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::kCl: return "cl";
    case Strategy::kClSft: return "cl_sft";
    case Strategy::kClDpo: return "cl_dpo";
    case Strategy::kGrl: return "grl";
    case Strategy::kGrlSft: return "grl_sft";
  }
  return "?";
}

inline Strategy parse_strategy(const std::string& s) {
  for (auto v : {Strategy::kCl, Strategy::kClSft, Strategy::kClDpo, Strategy::kGrl, Strategy::kGrlSft})
    if (to_string(v) == s) return v;
  throw ValidationError("unknown strategy \"" + s + "\" (expected cl, cl_sft, cl_dpo, grl or grl_sft)");
}

struct TrainConfig {
  Strategy strategy = Strategy::kGrl;
  double learning_rate = 2e-4;
  std::size_t batch_size = 512;
  std::size_t micro_batch_size = 32;
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
  LossWeights weights;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;
  std::size_t checkpoint_every = 100;
  /// Treat s_gen as a constant inside the KL term.
  bool stop_gen_grad = false;
  /// Score every query against all hard negatives of the batch, not just its own.
  bool cross_query_negatives = false;

  void validate() const {
    if (batch_size == 0) throw ValidationError("train.batch_size must be positive");
    if (micro_batch_size == 0) throw ValidationError("train.micro_batch_size must be positive");
    if (micro_batch_size > batch_size) throw ValidationError("train.micro_batch_size must not exceed train.batch_size");
    if (!(learning_rate > 0.0)) throw ValidationError("train.learning_rate must be positive");
    if (epochs == 0) throw ValidationError("train.epochs must be positive");
    if (!(weight_decay >= 0.0)) throw ValidationError("train.weight_decay must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ValidationError("train.beta1 must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ValidationError("train.beta2 must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw ValidationError("train.adam_eps must be positive");
    weights.validate();
  }

  AdamWConfig adamw() const { return {learning_rate, weight_decay, beta1, beta2, adam_eps}; }
};

/// Which generation-side terms a strategy trains. Zero-weighted terms are
/// dropped entirely.
struct LossTerms {
  bool cl = true;
  bool sft = false;
  bool dpo = false;
  bool kl = false;

  bool generation() const { return sft || dpo || kl; }
  bool needs_negatives() const { return dpo || kl; }
};

inline LossTerms loss_terms(const TrainConfig& cfg) {
  LossTerms t;
  const auto s = cfg.strategy;
  t.sft = s == Strategy::kClSft || s == Strategy::kGrlSft;
  t.dpo = s == Strategy::kClDpo || s == Strategy::kGrl;
  t.kl = s == Strategy::kGrl || s == Strategy::kGrlSft;
  t.cl = cfg.weights.lambda_cl > 0;
  t.sft = t.sft && cfg.weights.lambda_sft > 0;
  t.dpo = t.dpo && cfg.weights.lambda_dpo > 0;
  t.kl = t.kl && cfg.weights.lambda_kl > 0;
  return t;
}

// ---------------------------------------------------------------------------
// Reference policy for DPO

/// Frozen pi_ref. With adapters present and the base frozen it evaluates the
/// live model with adapters bypassed, which is exactly the step-0 policy. Any
/// other model is deep-copied once (one extra copy of every weight).
template <class T>
class ReferenceScorer {
 public:
  explicit ReferenceScorer(const Model<T>& model) {
    bool base_frozen = true;
    for (const auto& p : model.named_parameters())
      if (p.name.find(".lora_") == std::string::npos && p.tensor.requires_grad()) base_frozen = false;
    if (model.has_adapters() && base_frozen) {
      live_ = &model;
    } else {
      auto copy = std::make_shared<Model<T>>(model.clone());
      for (auto& p : copy->named_parameters()) {
        Tensor<T> t = p.tensor;
        t.set_requires_grad(false);
      }
      snapshot_ = std::move(copy);
    }
  }

  bool uses_snapshot() const { return snapshot_ != nullptr; }

  /// Causal log-probabilities of every scored passage token, as a constant.
  Tensor<T> token_log_probs(const ScoringBatch& sb) const {
    NoGradScope<T> no_grad;
    ForwardOptions opt;
    opt.use_adapters = false;
    return passage_log_probs(snapshot_ ? *snapshot_ : *live_, sb, opt);
  }

  /// Summed log-likelihood per scoring row.
  Tensor<T> sequence_sums(const ScoringBatch& sb) const {
    NoGradScope<T> no_grad;
    return segment_sum(token_log_probs(sb), sb.lengths);
  }

 private:
  const Model<T>* live_ = nullptr;
  std::shared_ptr<const Model<T>> snapshot_;
};

template <class T>
ReferenceScorer<T> make_reference_scorer(const Model<T>& model) {
  return ReferenceScorer<T>(model);
}

// ---------------------------------------------------------------------------
// Per-batch loss pieces

template <class T>
struct Embeddings {
  Tensor<T> q;  // [n x d]
  Tensor<T> p;  // [n x d]
  Tensor<T> n;  // [n*H x d], undefined without hard negatives
};

template <class T>
Embeddings<T> embed_batch(const Model<T>& model, const Batch& b, const ForwardOptions& opt) {
  Embeddings<T> e;
  e.q = encode(model, b.queries, opt);
  e.p = encode(model, b.positives, opt);
  if (b.negatives) e.n = encode(model, *b.negatives, opt);
  return e;
}

/// Per-example generation losses; members are undefined for inactive terms.
template <class T>
struct GenerationLosses {
  Tensor<T> sft;
  Tensor<T> dpo;
  Tensor<T> kl;
};

template <class T>
GenerationLosses<T> generation_losses(const Model<T>& model, const Batch& b, const Embeddings<T>& emb,
                                      const ReferenceScorer<T>* ref, const LossTerms& terms, const TrainConfig& cfg,
                                      const ForwardOptions& opt) {
  GenerationLosses<T> out;
  if (!terms.generation()) return out;
  const std::size_t n = b.size, H = b.negatives_per_example;
  const std::size_t m = terms.needs_negatives() ? 1 + H : 1;
  if (m < 2 && terms.needs_negatives()) throw ValidationError(to_string(cfg.strategy) + " needs hard negatives");

  std::vector<std::vector<std::int32_t>> qs, ps;
  std::vector<std::uint64_t> keys;
  for (std::size_t e = 0; e < n; ++e) {
    for (std::size_t c = 0; c < m; ++c) {
      qs.push_back(b.query_tokens[e]);
      ps.push_back(c == 0 ? b.positive_tokens[e] : b.negative_tokens[e * H + c - 1]);
      keys.push_back(row_key(RowGroup::kGeneration, (b.first_example + e) * m + c));
    }
  }
  const ScoringBatch sb = make_scoring_batch(qs, ps, keys, model.config.max_seq_len);
  Tensor<T> sums = segment_sum(passage_log_probs(model, sb, opt), sb.lengths);  // [n*m]
  std::vector<T> inv_len(sb.lengths.size());
  for (std::size_t i = 0; i < inv_len.size(); ++i) inv_len[i] = T(1) / static_cast<T>(sb.lengths[i]);
  Tensor<T> s_gen = reshape(mul(sums, constant<T>({n * m}, std::move(inv_len))), {n, m});

  if (terms.sft) out.sft = scale(reshape(slice_cols(s_gen, 0, 1), {n}), T(-1));
  if (terms.dpo) {
    if (ref == nullptr) throw ValidationError("dpo term requires a reference scorer");
    Tensor<T> pol = reshape(sums, {n, m});
    Tensor<T> refs = reshape(ref->sequence_sums(sb), {n, m});
    out.dpo = dpo_loss_per_query(reshape(slice_cols(pol, 0, 1), {n}), reshape(slice_cols(refs, 0, 1), {n}),
                                 slice_cols(pol, 1, m), slice_cols(refs, 1, m), cfg.weights.beta);
  }
  if (terms.kl) {
    const std::size_t d = emb.q.dim(1);
    Tensor<T> cands = reshape(concat_cols(emb.p, reshape(emb.n, {n, H * d})), {n * m, d});
    Tensor<T> s_rt = cosine_scores(emb.q, cands);
    Tensor<T> target = cfg.stop_gen_grad ? s_gen.detach() : s_gen;
    out.kl = kl_consistency_per_query(s_rt, target, cfg.weights.kl_tau);
  }
  return out;
}

struct StepResult {
  double loss_total = 0;
  double loss_cl = 0;
  double loss_sft = 0;
  double loss_dpo = 0;
  double loss_kl = 0;
};

namespace detail {

/// Per-example loss values in batch order.
struct ExampleLosses {
  std::vector<double> cl, sft, dpo, kl;

  explicit ExampleLosses(std::size_t n) : cl(n, 0.0), sft(n, 0.0), dpo(n, 0.0), kl(n, 0.0) {}

  template <class T>
  static void store(std::vector<double>& dst, std::size_t offset, const Tensor<T>& v) {
    if (!v.defined()) return;
    for (std::size_t i = 0; i < v.numel(); ++i) dst[offset + i] = static_cast<double>(v[i]);
  }

  StepResult summarize(const LossWeights& w) const {
    auto avg = [](const std::vector<double>& v) {
      double s = 0;
      for (double x : v) s += x;
      return s / static_cast<double>(v.size());
    };
    StepResult r;
    r.loss_cl = avg(cl);
    r.loss_sft = avg(sft);
    r.loss_dpo = avg(dpo);
    r.loss_kl = avg(kl);
    r.loss_total = grl_total_loss(r.loss_cl, r.loss_dpo, r.loss_kl, w) + w.lambda_sft * r.loss_sft;
    if (!std::isfinite(r.loss_total)) throw NumericError("non-finite training loss");
    return r;
  }
};

/// lambda / batch * sum(v), or undefined when v is.
template <class T>
Tensor<T> weighted_sum(const Tensor<T>& v, double lambda, std::size_t batch) {
  if (!v.defined()) return {};
  return scale(sum(v), static_cast<T>(lambda / static_cast<double>(batch)));
}

template <class T>
Tensor<T> add_defined(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.defined()) return b;
  if (!b.defined()) return a;
  return add(a, b);
}

template <class T>
std::optional<DropoutStream> step_dropout(const Model<T>& model, const TrainConfig& cfg, std::uint64_t step) {
  if (!model.lora || model.lora->dropout <= 0.0) return std::nullopt;
  return DropoutStream{detail::mix64(cfg.seed ^ detail::mix64(0xd5a61266f0c9392cULL + step)), model.lora->dropout};
}

template <class T>
Tensor<T> generation_objective(const GenerationLosses<T>& g, const LossWeights& w, std::size_t batch) {
  Tensor<T> total = weighted_sum(g.sft, w.lambda_sft, batch);
  total = add_defined(total, weighted_sum(g.dpo, w.lambda_dpo, batch));
  return add_defined(total, weighted_sum(g.kl, w.lambda_kl, batch));
}

}  // namespace detail

/// Differentiable objective of one whole batch, built on the active tape,
/// with the per-example component values it was assembled from.
template <class T>
struct BatchObjective {
  Tensor<T> total;  // undefined when every active weight is zero
  StepResult values;
};

template <class T>
BatchObjective<T> batch_objective(const Model<T>& model, std::span<const TrainExample> batch, const TrainConfig& cfg,
                                  const ReferenceScorer<T>* ref, std::uint64_t step = 0) {
  const LossTerms terms = loss_terms(cfg);
  ForwardOptions opt;
  opt.dropout = detail::step_dropout(model, cfg, step);
  const Batch b = collate(batch, model.config.max_seq_len);
  const std::size_t B = b.size;

  const Embeddings<T> emb = embed_batch(model, b, opt);
  Tensor<T> cl = contrastive_loss_per_query(emb.q, emb.p, emb.n.defined() ? &emb.n : nullptr, cfg.weights.tau,
                                            cfg.cross_query_negatives);
  const GenerationLosses<T> gen = generation_losses(model, b, emb, ref, terms, cfg, opt);

  detail::ExampleLosses values(B);
  values.store(values.cl, 0, cl);
  values.store(values.sft, 0, gen.sft);
  values.store(values.dpo, 0, gen.dpo);
  values.store(values.kl, 0, gen.kl);

  Tensor<T> total = detail::generation_objective(gen, cfg.weights, B);
  if (terms.cl) total = detail::add_defined(detail::weighted_sum(cl, cfg.weights.lambda_cl, B), total);
  return {total, values.summarize(cfg.weights)};
}

/// Full-batch forward and backward. Gradients are accumulated into the
/// model's trainable parameters (callers zero them first).
template <class T>
StepResult naive_step(const Model<T>& model, std::span<const TrainExample> batch, const TrainConfig& cfg,
                      const ReferenceScorer<T>* ref, std::uint64_t step = 0) {
  Tape<T> tape;
  TapeScope<T> scope(&tape);
  auto obj = batch_objective(model, batch, cfg, ref, step);
  if (obj.total.defined() && obj.total.requires_grad()) tape.backward(obj.total);
  return obj.values;
}

/// Three-phase cached-gradient step; see the file comment. When the micro
/// batch covers the whole batch this is the naive step unless `force_cache`.
template <class T>
StepResult gradcache_step(const Model<T>& model, std::span<const TrainExample> batch, const TrainConfig& cfg,
                          const ReferenceScorer<T>* ref, std::uint64_t step = 0, bool force_cache = false) {
  const std::size_t B = batch.size();
  if (B == 0) throw ValidationError("gradcache_step: empty batch");
  const std::size_t mbs = std::min(cfg.micro_batch_size, B);
  if (mbs == B && !force_cache) return naive_step(model, batch, cfg, ref, step);

  const LossTerms terms = loss_terms(cfg);
  ForwardOptions opt;
  opt.dropout = detail::step_dropout(model, cfg, step);
  const std::size_t d = model.config.d_model;
  const std::size_t max_len = model.config.max_seq_len;

  std::vector<Batch> micro;
  for (std::size_t lo = 0; lo < B; lo += mbs) {
    const std::size_t hi = std::min(B, lo + mbs);
    micro.push_back(collate(batch.subspan(lo, hi - lo), max_len, lo));
  }
  const std::size_t H = micro.front().negatives_per_example;
  for (const auto& mb : micro) {
    if (mb.negatives_per_example != H) throw ValidationError("gradcache_step: ragged hard-negative counts in batch");
  }

  // Phase 1: embeddings of every row, no graph retained.
  std::vector<T> q_all(B * d), p_all(B * d), n_all(B * H * d);
  {
    NoGradScope<T> no_grad;
    for (const auto& mb : micro) {
      const Embeddings<T> e = embed_batch(model, mb, opt);
      std::copy(e.q.data().begin(), e.q.data().end(), q_all.begin() + mb.first_example * d);
      std::copy(e.p.data().begin(), e.p.data().end(), p_all.begin() + mb.first_example * d);
      if (H > 0) std::copy(e.n.data().begin(), e.n.data().end(), n_all.begin() + mb.first_example * H * d);
    }
  }

  // Phase 2: batch-level contrastive loss, differentiated to the embeddings only.
  detail::ExampleLosses values(B);
  std::vector<T> gq, gp, gn;
  {
    Tape<T> tape;
    TapeScope<T> scope(&tape);
    Tensor<T> eq({B, d}, q_all, true), ep({B, d}, p_all, true);
    Tensor<T> en;
    if (H > 0) en = Tensor<T>({B * H, d}, n_all, true);
    Tensor<T> cl = contrastive_loss_per_query(eq, ep, H > 0 ? &en : nullptr, cfg.weights.tau,
                                              cfg.cross_query_negatives);
    values.store(values.cl, 0, cl);
    if (terms.cl) {
      tape.backward(detail::weighted_sum(cl, cfg.weights.lambda_cl, B));
      gq.assign(eq.grad().begin(), eq.grad().end());
      gp.assign(ep.grad().begin(), ep.grad().end());
      if (H > 0) gn.assign(en.grad().begin(), en.grad().end());
    }
  }

  // Phase 3: re-forward each micro-batch with the cached gradients injected.
  for (const auto& mb : micro) {
    if (!terms.cl && !terms.generation()) break;
    const std::size_t lo = mb.first_example, n = mb.size;
    Tape<T> tape;
    TapeScope<T> scope(&tape);
    const Embeddings<T> e = embed_batch(model, mb, opt);
    Tensor<T> total;
    if (terms.cl) {
      auto cached = [&](const std::vector<T>& g, std::size_t rows, std::size_t row0, const Tensor<T>& live) {
        if (live.rank() != 2 || live.dim(0) != rows || live.dim(1) != d) {
          throw DimensionError("gradcache_step: re-forward produced " + shape_str(live.shape()) +
                               " but the cache holds [" + std::to_string(rows) + " x " + std::to_string(d) + "]");
        }
        std::vector<T> slice(g.begin() + row0 * d, g.begin() + (row0 + rows) * d);
        return sum(mul(live, constant<T>({rows, d}, std::move(slice))));
      };
      total = cached(gq, n, lo, e.q);
      total = add(total, cached(gp, n, lo, e.p));
      if (H > 0) total = add(total, cached(gn, n * H, lo * H, e.n));
    }
    const GenerationLosses<T> gen = generation_losses(model, mb, e, ref, terms, cfg, opt);
    values.store(values.sft, lo, gen.sft);
    values.store(values.dpo, lo, gen.dpo);
    values.store(values.kl, lo, gen.kl);
    total = detail::add_defined(total, detail::generation_objective(gen, cfg.weights, B));
    if (total.defined() && total.requires_grad()) tape.backward(total);
  }
  return values.summarize(cfg.weights);
}

// ---------------------------------------------------------------------------
// Epoch loop

struct StepMetrics {
  std::size_t step = 0;
  double loss_total = 0;
  double loss_cl = 0;
  double loss_sft = 0;
  double loss_dpo = 0;
  double loss_kl = 0;
  double grad_norm = 0;
  double lr = 0;

  std::string to_json() const {
    nlohmann::ordered_json j;
    j["step"] = step;
    j["loss_total"] = loss_total;
    j["loss_cl"] = loss_cl;
    j["loss_sft"] = loss_sft;
    j["loss_dpo"] = loss_dpo;
    j["loss_kl"] = loss_kl;
    j["grad_norm"] = grad_norm;
    j["lr"] = lr;
    return j.dump();
  }
};

/// Checks every example up front so a bad row fails before step 1.
inline void validate_dataset(std::span<const TrainExample> data, const ModelConfig& model, const TrainConfig& cfg) {
  if (data.empty()) throw ValidationError("training data is empty");
  const LossTerms terms = loss_terms(cfg);
  const std::size_t H = data.front().negatives.size();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& ex = data[i];
    if (ex.negatives.size() != H) {
      throw ValidationError("example " + std::to_string(i) + " has " + std::to_string(ex.negatives.size()) +
                            " hard negatives, expected " + std::to_string(H) + " like example 0");
    }
    (void)collate(std::span<const TrainExample>(&ex, 1), model.max_seq_len, i);
    if (!terms.generation()) continue;
    const std::size_t qlen = ex.query.size();
    auto check = [&](const std::string& passage) {
      if (qlen + passage.size() + 3 > model.max_seq_len) {
        throw ValidationError("example " + std::to_string(i) + ": query+passage scoring sequence needs " +
                              std::to_string(qlen + passage.size() + 3) + " tokens, max_seq_len is " +
                              std::to_string(model.max_seq_len));
      }
    };
    check(ex.positive);
    if (terms.needs_negatives())
      for (const auto& n : ex.negatives) check(n);
  }
  if (terms.needs_negatives() && H == 0) {
    throw ValidationError("strategy " + to_string(cfg.strategy) + " needs at least one hard negative per example");
  }
}

/// Owns the optimizer state and the frozen reference policy for one run.
template <class T>
class Trainer {
 public:
  Trainer(Model<T>& model, TrainConfig cfg)
      : model_(model), cfg_(std::move(cfg)), ref_(model), state_(make_optimizer_state(model.trainable_parameters())) {
    cfg_.validate();
  }

  const TrainConfig& config() const { return cfg_; }
  OptimizerState& optimizer_state() { return state_; }
  const ReferenceScorer<T>& reference() const { return ref_; }
  std::size_t steps_done() const { return step_; }

  /// One optimizer step on `batch`.
  StepMetrics step(std::span<const TrainExample> batch) {
    auto params = model_.trainable_parameters();
    for (auto& p : params) p.tensor.zero_grad();
    StepResult r;
    try {
      r = gradcache_step(model_, batch, cfg_, &ref_, step_);
    } catch (const std::exception& e) {
      throw std::runtime_error("step " + std::to_string(step_ + 1) + ": " + e.what());
    }
    const double norm = clip_grad_norm(params, cfg_.grad_clip);
    try {
      adamw_step(params, state_, cfg_.adamw());
    } catch (const std::exception& e) {
      throw std::runtime_error("step " + std::to_string(step_ + 1) + ": " + e.what());
    }
    ++step_;
    return {step_, r.loss_total, r.loss_cl, r.loss_sft, r.loss_dpo, r.loss_kl, norm, cfg_.learning_rate};
  }

  /// Seeded shuffle, then ceil(n / batch_size) steps; the last batch may be short.
  std::vector<StepMetrics> fit_epoch(std::span<const TrainExample> data, std::size_t epoch = 0,
                                     const std::function<void(const StepMetrics&)>& on_step = {}) {
    validate_dataset(data, model_.config, cfg_);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(detail::mix64(cfg_.seed) ^ detail::mix64(0x5eed0000ULL + epoch));
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<StepMetrics> log;
    for (std::size_t lo = 0; lo < order.size(); lo += cfg_.batch_size) {
      const std::size_t hi = std::min(order.size(), lo + cfg_.batch_size);
      std::vector<TrainExample> batch;
      batch.reserve(hi - lo);
      for (std::size_t i = lo; i < hi; ++i) batch.push_back(data[order[i]]);
      log.push_back(step(batch));
      if (on_step) on_step(log.back());
    }
    return log;
  }

 private:
  Model<T>& model_;
  TrainConfig cfg_;
  ReferenceScorer<T> ref_;
  OptimizerState state_;
  std::size_t step_ = 0;
};

/// Convenience wrapper: a fresh trainer, one epoch.
template <class T>
std::vector<StepMetrics> train_epoch(Model<T>& model, std::span<const TrainExample> data, const TrainConfig& cfg) {
  Trainer<T> trainer(model, cfg);
  return trainer.fit_epoch(data);
}

}  // namespace grle
