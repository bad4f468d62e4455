// Copyright 2026 The grle Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "grle/ops.hpp"
#include "grle/tokenizer.hpp"

namespace grle {

/// is_generate=true in the reference API corresponds to kCausal.
enum class AttentionMode { kCausal, kBidirectional };

enum class Pooling { kFirst, kLast, kMean, kWeightedMean };

inline std::string to_string(AttentionMode m) { return m == AttentionMode::kCausal ? "causal" : "bidirectional"; }

inline AttentionMode parse_attention_mode(const std::string& s) {
  if (s == "causal") return AttentionMode::kCausal;
  if (s == "bidirectional") return AttentionMode::kBidirectional;
  throw ValidationError("unknown attention mode \"" + s + "\" (expected causal|bidirectional)");
}

inline std::string to_string(Pooling p) {
  switch (p) {
    case Pooling::kFirst: return "first";
    case Pooling::kLast: return "last";
    case Pooling::kMean: return "mean";
    case Pooling::kWeightedMean: return "weighted_mean";
  }
  return "mean";
}

inline Pooling parse_pooling(const std::string& s) {
  if (s == "first") return Pooling::kFirst;
  if (s == "last") return Pooling::kLast;
  if (s == "mean") return Pooling::kMean;
  if (s == "weighted_mean") return Pooling::kWeightedMean;
  throw ValidationError("unknown pooling \"" + s + "\" (expected first|last|mean|weighted_mean)");
}

struct ModelConfig {
  std::size_t vocab_size = static_cast<std::size_t>(tokens::kVocabSize);
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t max_seq_len = 128;
  Pooling pooling = Pooling::kMean;
  /// Mask used when producing embeddings. Causal here gives the "Causal + CL" baseline.
  AttentionMode embedding_attention = AttentionMode::kBidirectional;
  std::uint64_t seed = 0;

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ValidationError(std::string("model.") + name + " must be positive");
    };
    positive(vocab_size, "vocab_size");
    positive(d_model, "d_model");
    positive(n_layers, "n_layers");
    positive(n_heads, "n_heads");
    positive(d_ff, "d_ff");
    if (d_model % n_heads != 0) {
      throw ValidationError("model.d_model (" + std::to_string(d_model) + ") must be divisible by model.n_heads (" +
                            std::to_string(n_heads) + ")");
    }
    if (max_seq_len < 2) throw ValidationError("model.max_seq_len must be >= 2");
  }

  bool operator==(const ModelConfig&) const = default;
};

inline const std::vector<std::string>& attention_projections() {
  static const std::vector<std::string> names = {"wq", "wk", "wv", "wo"};
  return names;
}

struct LoraConfig {
  std::size_t r = 16;
  double alpha = 32.0;
  double dropout = 0.2;
  std::vector<std::string> targets = attention_projections();

  double scaling() const { return alpha / static_cast<double>(r); }

  void validate() const {
    if (r == 0) throw ValidationError("lora.r must be positive");
    if (!(alpha > 0.0)) throw ValidationError("lora.alpha must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("lora.dropout must be in [0, 1)");
    if (targets.empty()) throw ValidationError("lora.targets must name at least one projection");
    for (const auto& t : targets) {
      if (t != "wq" && t != "wk" && t != "wv" && t != "wo" && t != "w_up" && t != "w_down") {
        throw ValidationError("lora.targets: unknown projection \"" + t + "\"");
      }
    }
  }

  bool operator==(const LoraConfig&) const = default;
};

/// Dense projection y = x * weight with an optional low-rank adapter
/// y += scaling * (x * A^T) * B^T. weight is [in x out], A is [r x in], B is [out x r].
template <class T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> lora_a;
  Tensor<T> lora_b;

  bool has_adapter() const { return lora_a.defined(); }
  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
};

template <class T>
struct Block {
  Tensor<T> attn_norm;
  Linear<T> wq, wk, wv, wo;
  Tensor<T> mlp_norm;
  Linear<T> w_up, w_down;

  Linear<T>* projection(const std::string& name) {
    if (name == "wq") return &wq;
    if (name == "wk") return &wk;
    if (name == "wv") return &wv;
    if (name == "wo") return &wo;
    if (name == "w_up") return &w_up;
    if (name == "w_down") return &w_down;
    return nullptr;
  }
  const Linear<T>* projection(const std::string& name) const {
    return const_cast<Block*>(this)->projection(name);
  }
};

template <class T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

/// Decoder-only transformer: learned absolute positions, pre-RMSNorm blocks,
/// GELU MLP, output projection tied to the token embeddings.
/// Move-only; use clone() for an independent copy of the parameters.
template <class T>
class Model {
 public:
  ModelConfig config;
  std::optional<LoraConfig> lora;
  Tensor<T> tok_emb;  // [V x d]
  Tensor<T> pos_emb;  // [max_seq_len x d]
  std::vector<Block<T>> blocks;
  Tensor<T> final_norm;

  Model() = default;
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  bool has_adapters() const { return lora.has_value(); }

  /// Every tensor in checkpoint order: base weights, then adapters.
  std::vector<NamedTensor<T>> named_parameters() const {
    std::vector<NamedTensor<T>> out;
    out.push_back({"tok_emb", tok_emb});
    out.push_back({"pos_emb", pos_emb});
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const auto& b = blocks[i];
      const std::string p = "blocks." + std::to_string(i) + ".";
      out.push_back({p + "attn_norm", b.attn_norm});
      out.push_back({p + "wq", b.wq.weight});
      out.push_back({p + "wk", b.wk.weight});
      out.push_back({p + "wv", b.wv.weight});
      out.push_back({p + "wo", b.wo.weight});
      out.push_back({p + "mlp_norm", b.mlp_norm});
      out.push_back({p + "w_up", b.w_up.weight});
      out.push_back({p + "w_down", b.w_down.weight});
    }
    out.push_back({"final_norm", final_norm});
    if (lora) {
      for (std::size_t i = 0; i < blocks.size(); ++i) {
        const auto& b = blocks[i];
        for (const auto& t : lora->targets) {
          const auto* lin = b.projection(t);
          const std::string p = "blocks." + std::to_string(i) + "." + t + ".";
          out.push_back({p + "lora_a", lin->lora_a});
          out.push_back({p + "lora_b", lin->lora_b});
        }
      }
    }
    return out;
  }

  std::vector<NamedTensor<T>> trainable_parameters() const {
    std::vector<NamedTensor<T>> out;
    for (auto& p : named_parameters())
      if (p.tensor.requires_grad()) out.push_back(std::move(p));
    return out;
  }

  void zero_grad() const {
    for (auto& p : named_parameters()) {
      Tensor<T> t = p.tensor;
      t.zero_grad();
    }
  }

  std::size_t base_parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : named_parameters())
      if (p.name.find(".lora_") == std::string::npos) n += p.tensor.numel();
    return n;
  }

  std::size_t trainable_parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : trainable_parameters()) n += p.tensor.numel();
    return n;
  }

  /// Deep copy; gradient flags are preserved, gradients are not.
  Model clone() const { return cast<T>(); }

  template <class U>
  Model<U> cast() const {
    Model<U> m;
    m.config = config;
    m.lora = lora;
    auto conv = [](const Tensor<T>& t) {
      if (!t.defined()) return Tensor<U>();
      std::vector<U> d(t.data().begin(), t.data().end());
      return Tensor<U>(t.shape(), std::move(d), t.requires_grad());
    };
    auto conv_lin = [&](const Linear<T>& l) { return Linear<U>{conv(l.weight), conv(l.lora_a), conv(l.lora_b)}; };
    m.tok_emb = conv(tok_emb);
    m.pos_emb = conv(pos_emb);
    for (const auto& b : blocks) {
      m.blocks.push_back(Block<U>{conv(b.attn_norm), conv_lin(b.wq), conv_lin(b.wk), conv_lin(b.wv), conv_lin(b.wo),
                                  conv(b.mlp_norm), conv_lin(b.w_up), conv_lin(b.w_down)});
    }
    m.final_norm = conv(final_norm);
    return m;
  }
};

/// Parameter count of a base model, evaluated from the configuration alone.
inline std::size_t expected_parameter_count(const ModelConfig& c) {
  const std::size_t per_block = 4 * c.d_model * c.d_model + 2 * c.d_model * c.d_ff + 2 * c.d_model;
  return c.vocab_size * c.d_model + c.max_seq_len * c.d_model + c.n_layers * per_block + c.d_model;
}

/// Weights ~ N(0, 0.02^2), normalisation gains at 1. Deterministic in (config, seed).
template <class T>
Model<T> init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  auto randn = [&](Shape shape) {
    std::vector<T> d(shape_numel(shape));
    for (auto& v : d) v = static_cast<T>(normal(rng));
    return Tensor<T>(std::move(shape), std::move(d), true);
  };
  auto ones = [](std::size_t n) { return Tensor<T>(Shape{n}, T(1), true); };
  const std::size_t d = config.d_model;
  Model<T> m;
  m.config = config;
  m.config.seed = seed;
  m.tok_emb = randn({config.vocab_size, d});
  m.pos_emb = randn({config.max_seq_len, d});
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    Block<T> b;
    b.attn_norm = ones(d);
    b.wq.weight = randn({d, d});
    b.wk.weight = randn({d, d});
    b.wv.weight = randn({d, d});
    b.wo.weight = randn({d, d});
    b.mlp_norm = ones(d);
    b.w_up.weight = randn({d, config.d_ff});
    b.w_down.weight = randn({config.d_ff, d});
    m.blocks.push_back(std::move(b));
  }
  m.final_norm = ones(d);
  return m;
}

/// Attaches adapters in place: A ~ N(0, 1/in), B = 0, base weights frozen.
template <class T>
void add_adapters(Model<T>& model, const LoraConfig& lora, std::uint64_t seed) {
  lora.validate();
  if (model.lora) throw ValidationError("apply_lora: model already has adapters");
  for (auto& b : model.blocks) {
    for (const auto& t : lora.targets) {
      const auto* lin = b.projection(t);
      const std::size_t lim = std::min(lin->in_features(), lin->out_features());
      if (lora.r > lim) {
        throw ValidationError("apply_lora: r=" + std::to_string(lora.r) + " exceeds min dimension " +
                              std::to_string(lim) + " of target " + t);
      }
    }
  }
  for (auto& p : model.named_parameters()) p.tensor.set_requires_grad(false);
  std::mt19937_64 rng(seed);
  for (auto& b : model.blocks) {
    for (const auto& t : lora.targets) {
      auto* lin = b.projection(t);
      const std::size_t in = lin->in_features(), out = lin->out_features();
      std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(in)));
      std::vector<T> a(lora.r * in);
      for (auto& v : a) v = static_cast<T>(normal(rng));
      lin->lora_a = Tensor<T>(Shape{lora.r, in}, std::move(a), true);
      lin->lora_b = Tensor<T>(Shape{out, lora.r}, T(0), true);
    }
  }
  model.lora = lora;
}

template <class T>
Model<T> apply_lora(Model<T> model, const LoraConfig& lora, std::uint64_t seed) {
  add_adapters(model, lora, seed);
  return model;
}

/// Dense weight W + scaling * (B*A)^T, i.e. the adapter folded into [in x out] form.
template <class T>
Tensor<T> merged_weight(const Linear<T>& lin, double scaling) {
  Tensor<T> w = lin.weight.detach();
  if (!lin.has_adapter()) return w;
  const std::size_t in = lin.in_features(), out = lin.out_features(), r = lin.lora_a.dim(0);
  for (std::size_t i = 0; i < in; ++i)
    for (std::size_t o = 0; o < out; ++o) {
      T acc = 0;
      for (std::size_t k = 0; k < r; ++k) acc += lin.lora_b[o * r + k] * lin.lora_a[k * in + i];
      w[i * out + o] += static_cast<T>(scaling) * acc;
    }
  return w;
}

// ---------------------------------------------------------------------------
// Forward pass

namespace detail {

inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

/// Counter-based dropout masks: each element's keep/drop decision is a pure
/// function of (seed, site, row key, position, feature). Re-running a forward
/// over any regrouping of the same rows reproduces the same masks.
struct DropoutStream {
  std::uint64_t seed = 0;
  double p = 0.0;

  bool keep(std::uint64_t site, std::uint64_t row_key, std::size_t pos, std::size_t feature) const {
    std::uint64_t h = detail::mix64(seed ^ detail::mix64(site));
    h = detail::mix64(h ^ row_key);
    h = detail::mix64(h ^ (static_cast<std::uint64_t>(pos) << 20 ^ feature));
    const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
    return u >= p;
  }
};

struct ForwardOptions {
  AttentionMode mode = AttentionMode::kBidirectional;
  bool use_adapters = true;
  std::optional<DropoutStream> dropout;
};

namespace detail {

template <class T>
Tensor<T> apply_linear(const Linear<T>& lin, const Tensor<T>& x, const std::optional<LoraConfig>& lora,
                       const ForwardOptions& opt, const TokenMatrix& tm, std::uint64_t site) {
  Tensor<T> y = matmul(x, lin.weight);
  if (!lin.has_adapter() || !opt.use_adapters || !lora) return y;
  Tensor<T> xin = x;
  if (opt.dropout && opt.dropout->p > 0.0) {
    const std::size_t in = lin.in_features();
    std::vector<T> mask(x.numel());
    const T keep_scale = static_cast<T>(1.0 / (1.0 - opt.dropout->p));
    for (std::size_t r = 0; r < tm.rows; ++r)
      for (std::size_t l = 0; l < tm.width; ++l) {
        T* m = mask.data() + (r * tm.width + l) * in;
        for (std::size_t f = 0; f < in; ++f) m[f] = opt.dropout->keep(site, tm.keys[r], l, f) ? keep_scale : T(0);
      }
    xin = mul(x, constant<T>(x.shape(), std::move(mask)));
  }
  Tensor<T> low = matmul_bt(matmul_bt(xin, lin.lora_a), lin.lora_b);
  return add(y, scale(low, static_cast<T>(lora->scaling())));
}

inline std::shared_ptr<const std::vector<std::uint8_t>> attention_mask(const TokenMatrix& tm, std::size_t heads,
                                                                        AttentionMode mode) {
  const std::size_t B = tm.rows, L = tm.width;
  auto mask = std::make_shared<std::vector<std::uint8_t>>(B * heads * L * L, 0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < L; ++i) {
        std::uint8_t* row = mask->data() + ((b * heads + h) * L + i) * L;
        for (std::size_t j = 0; j < L; ++j) {
          const bool pad = tm.mask[b * L + j] == 0;
          const bool future = mode == AttentionMode::kCausal && j > i;
          row[j] = (pad || future) ? 1 : 0;
        }
      }
  return mask;
}

}  // namespace detail

/// Final-layer hidden states [B x L x d]. Padding keys are masked in both modes;
/// causal mode additionally masks future positions.
template <class T>
Tensor<T> hidden_states(const Model<T>& model, const TokenMatrix& tm, const ForwardOptions& opt = {}) {
  const auto& c = model.config;
  if (tm.width > c.max_seq_len) {
    throw ValidationError("forward: sequence length " + std::to_string(tm.width) + " exceeds max_seq_len " +
                          std::to_string(c.max_seq_len));
  }
  for (auto id : tm.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= c.vocab_size) {
      throw ValidationError("forward: token id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(c.vocab_size));
    }
  }
  const std::size_t B = tm.rows, L = tm.width, d = c.d_model, H = c.n_heads, dh = d / H;
  std::vector<std::int32_t> positions(B * L);
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<std::int32_t>(i % L);

  Tensor<T> x = add(embedding(model.tok_emb, tm.ids), embedding(model.pos_emb, positions));
  const auto mask = detail::attention_mask(tm, H, opt.mode);
  const T att_scale = T(1) / std::sqrt(static_cast<T>(dh));
  auto heads = [&](const Tensor<T>& t) { return reshape(swap_axes12(reshape(t, {B, L, H, dh})), {B * H, L, dh}); };

  for (std::size_t li = 0; li < model.blocks.size(); ++li) {
    const auto& blk = model.blocks[li];
    auto lin = [&](const Linear<T>& l, const Tensor<T>& in, std::uint64_t which) {
      return detail::apply_linear(l, in, model.lora, opt, tm, li * 16 + which);
    };
    Tensor<T> h = rms_norm(x, blk.attn_norm);
    Tensor<T> q = heads(lin(blk.wq, h, 0));
    Tensor<T> k = heads(lin(blk.wk, h, 1));
    Tensor<T> v = heads(lin(blk.wv, h, 2));
    Tensor<T> scores = masked_fill(scale(matmul_bt(q, k), att_scale), mask, -std::numeric_limits<T>::infinity());
    Tensor<T> ctx = matmul(softmax(scores, -1), v);
    ctx = reshape(swap_axes12(reshape(ctx, {B, H, L, dh})), {B * L, d});
    x = add(x, lin(blk.wo, ctx, 3));
    Tensor<T> h2 = rms_norm(x, blk.mlp_norm);
    x = add(x, lin(blk.w_down, gelu(lin(blk.w_up, h2, 4)), 5));
  }
  return reshape(rms_norm(x, model.final_norm), {B, L, d});
}

template <class T>
struct ForwardOutput {
  Tensor<T> hidden;  // [B x L x d]
  Tensor<T> logits;  // [B x L x V]
};

template <class T>
ForwardOutput<T> forward(const Model<T>& model, const TokenMatrix& tm, AttentionMode mode,
                         const ForwardOptions& base = {}) {
  ForwardOptions opt = base;
  opt.mode = mode;
  ForwardOutput<T> out;
  out.hidden = hidden_states(model, tm, opt);
  const std::size_t N = tm.rows * tm.width;
  Tensor<T> flat = reshape(out.hidden, {N, model.config.d_model});
  out.logits = reshape(matmul_bt(flat, model.tok_emb), {tm.rows, tm.width, model.config.vocab_size});
  return out;
}

/// Per-row pooling weights [B x L] implementing each strategy.
inline std::vector<double> pooling_weights(std::span<const std::uint8_t> mask, std::size_t rows, std::size_t width,
                                           Pooling strategy) {
  std::vector<double> w(rows * width, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::uint8_t* m = mask.data() + r * width;
    std::size_t valid = 0, last = 0;
    for (std::size_t l = 0; l < width; ++l)
      if (m[l]) {
        ++valid;
        last = l;
      }
    if (valid == 0) throw ValidationError("pool: row " + std::to_string(r) + " has no valid tokens");
    double* wr = w.data() + r * width;
    switch (strategy) {
      case Pooling::kFirst: wr[0] = 1.0; break;
      case Pooling::kLast: wr[last] = 1.0; break;
      case Pooling::kMean:
        for (std::size_t l = 0; l < width; ++l)
          if (m[l]) wr[l] = 1.0 / static_cast<double>(valid);
        break;
      case Pooling::kWeightedMean: {
        // w_i = i / sum_j j over valid positions, 1-indexed.
        const double denom = static_cast<double>(valid) * static_cast<double>(valid + 1) / 2.0;
        std::size_t rank = 0;
        for (std::size_t l = 0; l < width; ++l)
          if (m[l]) wr[l] = static_cast<double>(++rank) / denom;
        break;
      }
    }
  }
  return w;
}

/// Reduces hidden [B x L x d] to [B x d].
template <class T>
Tensor<T> pool(const Tensor<T>& hidden, std::span<const std::uint8_t> mask, Pooling strategy) {
  if (hidden.rank() != 3 || mask.size() != hidden.dim(0) * hidden.dim(1)) {
    throw DimensionError("pool: hidden " + shape_str(hidden.shape()) + " does not match a mask of " +
                         std::to_string(mask.size()) + " entries");
  }
  const std::size_t B = hidden.dim(0), L = hidden.dim(1), d = hidden.dim(2);
  const auto w = pooling_weights(mask, B, L, strategy);
  Tensor<T> weights = constant<T>({B, 1, L}, std::vector<T>(w.begin(), w.end()));
  return reshape(matmul(weights, hidden), {B, d});
}

/// Sequence embeddings [B x d]: forward under the configured embedding mask
/// (bidirectional unless overridden), then the configured pooling.
template <class T>
Tensor<T> encode(const Model<T>& model, const TokenMatrix& tm, const ForwardOptions& base = {}) {
  ForwardOptions opt = base;
  opt.mode = model.config.embedding_attention;
  return pool(hidden_states(model, tm, opt), tm.mask, model.config.pooling);
}

// ---------------------------------------------------------------------------
// Query-conditioned passage scoring

/// Rows laid out as [BOS, query, EOS, passage, EOS]. For each row, the scored
/// targets are the passage tokens; the logits predicting target t sit one
/// position earlier.
struct ScoringBatch {
  TokenMatrix tokens;
  std::vector<std::size_t> source_rows;  // flat index b*L + pos of each predicting position
  std::vector<std::int32_t> targets;
  std::vector<std::size_t> lengths;  // passage tokens per row
};

inline ScoringBatch make_scoring_batch(std::span<const std::vector<std::int32_t>> queries,
                                       std::span<const std::vector<std::int32_t>> passages,
                                       std::span<const std::uint64_t> row_keys, std::size_t max_seq_len) {
  if (queries.size() != passages.size() || queries.size() != row_keys.size() || queries.empty()) {
    throw DimensionError("make_scoring_batch: need one query, passage and key per row");
  }
  std::vector<std::vector<std::int32_t>> seqs;
  ScoringBatch sb;
  for (std::size_t r = 0; r < queries.size(); ++r) {
    const auto& q = queries[r];
    const auto& p = passages[r];
    if (p.empty()) throw ValidationError("sequence_log_probs: passage " + std::to_string(r) + " is empty");
    const std::size_t total = q.size() + p.size() + 3;
    if (total > max_seq_len) {
      throw ValidationError("sequence_log_probs: row " + std::to_string(r) + " needs " + std::to_string(total) +
                            " tokens, exceeding max_seq_len " + std::to_string(max_seq_len) +
                            " (inputs are never truncated)");
    }
    std::vector<std::int32_t> s;
    s.reserve(total);
    s.push_back(tokens::kBos);
    s.insert(s.end(), q.begin(), q.end());
    s.push_back(tokens::kEos);
    s.insert(s.end(), p.begin(), p.end());
    s.push_back(tokens::kEos);
    seqs.push_back(std::move(s));
    sb.lengths.push_back(p.size());
  }
  sb.tokens = TokenMatrix::from_sequences(seqs, std::vector<std::uint64_t>(row_keys.begin(), row_keys.end()));
  const std::size_t L = sb.tokens.width;
  for (std::size_t r = 0; r < queries.size(); ++r) {
    const std::size_t start = queries[r].size() + 2;  // position of the first passage token
    for (std::size_t i = 0; i < passages[r].size(); ++i) {
      sb.source_rows.push_back(r * L + start + i - 1);
      sb.targets.push_back(passages[r][i]);
    }
  }
  return sb;
}

/// Causal log pi(w_i | w_<i, query) for every passage token, concatenated row by row.
template <class T>
Tensor<T> passage_log_probs(const Model<T>& model, const ScoringBatch& sb, const ForwardOptions& base = {}) {
  ForwardOptions opt = base;
  opt.mode = AttentionMode::kCausal;
  Tensor<T> hidden = hidden_states(model, sb.tokens, opt);
  Tensor<T> flat = reshape(hidden, {sb.tokens.rows * sb.tokens.width, model.config.d_model});
  Tensor<T> logits = matmul_bt(gather_rows(flat, sb.source_rows), model.tok_emb);
  return pick(log_softmax(logits, -1), sb.targets);
}

/// Single-pair convenience wrapper around passage_log_probs.
template <class T>
std::vector<T> sequence_log_probs(const Model<T>& model, std::span<const std::int32_t> query_ids,
                                  std::span<const std::int32_t> passage_ids, const ForwardOptions& opt = {}) {
  const std::vector<std::vector<std::int32_t>> q{{query_ids.begin(), query_ids.end()}};
  const std::vector<std::vector<std::int32_t>> p{{passage_ids.begin(), passage_ids.end()}};
  const std::vector<std::uint64_t> keys{0};
  NoGradScope<T> no_grad;
  auto lp = passage_log_probs(model, make_scoring_batch(q, p, keys, model.config.max_seq_len), opt);
  return {lp.data().begin(), lp.data().end()};
}

}  // namespace grle
