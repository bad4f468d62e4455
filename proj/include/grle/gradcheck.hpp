// Copyright 2026 The grle Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "grle/tensor.hpp"

namespace grle {

struct GradCheckEntry {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> params;
  double max_rel_error = 0.0;
  std::size_t checked = 0;

  bool passed(double tolerance) const { return max_rel_error < tolerance; }
};

struct GradCheckOptions {
  double eps = 1e-4;
  /// When nonzero, at most this many seeded-random entries per parameter are
  /// probed instead of every entry.
  std::size_t max_entries_per_param = 0;
  std::uint64_t seed = 0;
};

/// Compares reverse-mode gradients of `loss_fn` against central differences.
/// `loss_fn` must build its graph from `params` on whichever tape is active
/// and return a scalar. Relative error is |analytic - numeric| / max(1, |analytic|).
template <class F>
GradCheckReport finite_difference_check(F&& loss_fn, std::vector<std::pair<std::string, Tensor<double>>> params,
                                        const GradCheckOptions& options = {}) {
  if (!(options.eps > 0.0)) throw ValidationError("finite_difference_check: eps must be positive");

  for (auto& [name, p] : params) {
    if (!p.requires_grad()) throw ValidationError("finite_difference_check: parameter " + name + " does not require grad");
    p.zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    TapeScope<double> scope(&tape);
    Tensor<double> loss = loss_fn();
    if (!std::isfinite(loss.item())) throw NumericError("finite_difference_check: loss is not finite");
    tape.backward(loss);
  }
  for (auto& [name, p] : params) {
    if (p.has_grad()) {
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    } else {
      analytic.emplace_back(p.numel(), 0.0);
    }
  }

  auto evaluate = [&] {
    NoGradScope<double> no_grad;
    const double v = loss_fn().item();
    if (!std::isfinite(v)) throw NumericError("finite_difference_check: loss is not finite at a perturbed point");
    return v;
  };

  GradCheckReport report;
  std::mt19937_64 rng(options.seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& [name, p] = params[pi];
    std::vector<std::size_t> entries(p.numel());
    for (std::size_t i = 0; i < entries.size(); ++i) entries[i] = i;
    if (options.max_entries_per_param > 0 && entries.size() > options.max_entries_per_param) {
      std::shuffle(entries.begin(), entries.end(), rng);
      entries.resize(options.max_entries_per_param);
    }
    GradCheckEntry entry{name, entries.size(), 0.0, 0};
    auto data = p.data();
    for (auto i : entries) {
      const double saved = data[i];
      data[i] = saved + options.eps;
      const double up = evaluate();
      data[i] = saved - options.eps;
      const double down = evaluate();
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * options.eps);
      const double a = analytic[pi][i];
      const double rel = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      if (rel > entry.max_rel_error) {
        entry.max_rel_error = rel;
        entry.worst_index = i;
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.checked += entry.checked;
    report.params.push_back(std::move(entry));
  }
  return report;
}

}  // namespace grle
