// Copyright 2026 The grle Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "grle/model.hpp"

namespace grle {

struct AdamWConfig {
  double learning_rate = 2e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moments per trainable parameter, kept in double.
struct OptimizerState {
  std::vector<std::string> names;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::int64_t t = 0;
};

template <class T>
OptimizerState make_optimizer_state(const std::vector<NamedTensor<T>>& params) {
  OptimizerState s;
  for (const auto& p : params) {
    s.names.push_back(p.name);
    s.m.emplace_back(p.tensor.numel(), 0.0);
    s.v.emplace_back(p.tensor.numel(), 0.0);
  }
  return s;
}

/// Euclidean norm over all gradients; missing gradients count as zero.
template <class T>
double global_grad_norm(const std::vector<NamedTensor<T>>& params) {
  double sq = 0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (auto g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(sq);
}

/// Scales every gradient so the global norm is at most max_norm. Returns the
/// pre-clip norm. max_norm <= 0 disables clipping.
template <class T>
double clip_grad_norm(std::vector<NamedTensor<T>>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (max_norm > 0 && norm > max_norm) {
    const T f = static_cast<T>(max_norm / (norm + 1e-12));
    for (auto& p : params)
      if (p.tensor.has_grad())
        for (auto& g : p.tensor.mutable_grad()) g *= f;
  }
  return norm;
}

/// One AdamW update. Weight decay is decoupled: param *= (1 - lr*wd) before the
/// bias-corrected Adam step. The whole step is rejected if any gradient is not
/// finite.
template <class T>
void adamw_step(std::vector<NamedTensor<T>>& params, OptimizerState& state, const AdamWConfig& cfg) {
  if (state.m.size() != params.size()) throw DimensionError("adamw_step: optimizer state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].tensor.numel() || state.names[i] != params[i].name) {
      throw DimensionError("adamw_step: state for " + state.names[i] + " does not match parameter " + params[i].name);
    }
    if (!params[i].tensor.has_grad()) continue;
    for (auto g : params[i].tensor.grad()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw NumericError("adamw_step: non-finite gradient in " + params[i].name);
      }
    }
  }
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  const double decay = 1.0 - cfg.learning_rate * cfg.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].tensor;
    auto w = p.data();
    const bool has_grad = p.has_grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double g = has_grad ? static_cast<double>(p.grad()[k]) : 0.0;
      m[k] = cfg.beta1 * m[k] + (1 - cfg.beta1) * g;
      v[k] = cfg.beta2 * v[k] + (1 - cfg.beta2) * g * g;
      double x = static_cast<double>(w[k]) * decay;
      x -= cfg.learning_rate * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + cfg.eps);
      w[k] = static_cast<T>(x);
    }
  }
}

}  // namespace grle
