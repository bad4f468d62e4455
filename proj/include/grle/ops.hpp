// Copyright 2026 The grle Authors
// SPDX-License-Identifier: Apache-2.0

// Differentiable primitives. Every function computes its result eagerly and,
// when a tape is active and some input requires grad, records a backward rule
// that accumulates into the inputs' grad slots.

#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "grle/parallel.hpp"
#include "grle/tensor.hpp"

namespace grle {

namespace kernels {

// C[MxN] += A[MxK] * B[KxN]
template <class T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  parallel_for(M, N * K, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      T* c = C + i * N;
      const T* a = A + i * K;
      for (std::size_t k = 0; k < K; ++k) {
        const T av = a[k];
        if (av == T(0)) continue;
        const T* b = B + k * N;
        for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
      }
    }
  });
}

// C[MxN] += A[MxK] * B[NxK]^T
template <class T>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  std::vector<T> bt(K * N);
  for (std::size_t j = 0; j < N; ++j) {
    for (std::size_t k = 0; k < K; ++k) bt[k * N + j] = B[j * K + k];
  }
  gemm_nn(M, N, K, A, bt.data(), C);
}

// C[MxN] += A[KxM]^T * B[KxN]
template <class T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  parallel_for(M, N * K, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t k = 0; k < K; ++k) {
      const T* b = B + k * N;
      for (std::size_t i = lo; i < hi; ++i) {
        const T av = A[k * M + i];
        if (av == T(0)) continue;
        T* c = C + i * N;
        for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
      }
    }
  });
}

}  // namespace kernels

namespace detail {

template <class T>
Tape<T>* recording(std::initializer_list<const Tensor<T>*> inputs) {
  Tape<T>* tape = grle::active_tape<T>();
  if (tape == nullptr) return nullptr;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return tape;
  }
  return nullptr;
}

template <class T>
void require_same_shape(std::string_view op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

// Splits a shape around `axis` into (outer, extent, inner) strides.
struct AxisView {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisView axis_view(const Shape& shape, int axis, std::string_view op) {
  const int rank = static_cast<int>(shape.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw DimensionError(std::string(op) + ": axis out of range for shape " + shape_str(shape));
  }
  AxisView v;
  for (int i = 0; i < axis; ++i) v.outer *= shape[i];
  v.extent = shape[axis];
  for (int i = axis + 1; i < rank; ++i) v.inner *= shape[i];
  return v;
}

}  // namespace detail

/// Matrix product. Accepts [m x k]*[k x n] or batched [b x m x k]*[b x k x n].
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const bool batched = a.rank() == 3;
  if (a.rank() != b.rank() || (a.rank() != 2 && a.rank() != 3) ||
      (batched && a.dim(0) != b.dim(0)) || a.dim(a.rank() - 1) != b.dim(b.rank() - 2)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t nb = batched ? a.dim(0) : 1;
  const std::size_t M = a.dim(a.rank() - 2), K = a.dim(a.rank() - 1), N = b.dim(b.rank() - 1);
  Tensor<T> out(batched ? Shape{nb, M, N} : Shape{M, N});
  for (std::size_t s = 0; s < nb; ++s) {
    kernels::gemm_nn(M, N, K, a.data().data() + s * M * K, b.data().data() + s * K * N,
                     out.data().data() + s * M * N);
  }
  if (auto* tape = detail::recording({&a, &b})) {
    tape->record("matmul", {a.impl(), b.impl()}, out.impl(),
                 [ai = a.impl(), bi = b.impl(), oi = out.impl(), nb, M, N, K] {
                   const T* dc = oi->grad.data();
                   if (ai->requires_grad) {
                     T* da = ai->grad_buffer().data();
                     for (std::size_t s = 0; s < nb; ++s)
                       kernels::gemm_nt(M, K, N, dc + s * M * N, bi->data.data() + s * K * N, da + s * M * K);
                   }
                   if (bi->requires_grad) {
                     T* db = bi->grad_buffer().data();
                     for (std::size_t s = 0; s < nb; ++s)
                       kernels::gemm_tn(K, N, M, ai->data.data() + s * M * K, dc + s * M * N, db + s * K * N);
                   }
                 });
  }
  return out;
}

/// a * b^T for [m x k],[n x k] or batched [b x m x k],[b x n x k].
template <class T>
Tensor<T> matmul_bt(const Tensor<T>& a, const Tensor<T>& b) {
  const bool batched = a.rank() == 3;
  if (a.rank() != b.rank() || (a.rank() != 2 && a.rank() != 3) ||
      (batched && a.dim(0) != b.dim(0)) || a.dim(a.rank() - 1) != b.dim(b.rank() - 1)) {
    throw DimensionError("matmul_bt: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t nb = batched ? a.dim(0) : 1;
  const std::size_t M = a.dim(a.rank() - 2), K = a.dim(a.rank() - 1), N = b.dim(b.rank() - 2);
  Tensor<T> out(batched ? Shape{nb, M, N} : Shape{M, N});
  for (std::size_t s = 0; s < nb; ++s) {
    kernels::gemm_nt(M, N, K, a.data().data() + s * M * K, b.data().data() + s * N * K,
                     out.data().data() + s * M * N);
  }
  if (auto* tape = detail::recording({&a, &b})) {
    tape->record("matmul_bt", {a.impl(), b.impl()}, out.impl(),
                 [ai = a.impl(), bi = b.impl(), oi = out.impl(), nb, M, N, K] {
                   const T* dc = oi->grad.data();
                   if (ai->requires_grad) {
                     T* da = ai->grad_buffer().data();
                     for (std::size_t s = 0; s < nb; ++s)
                       kernels::gemm_nn(M, K, N, dc + s * M * N, bi->data.data() + s * N * K, da + s * M * K);
                   }
                   if (bi->requires_grad) {
                     T* db = bi->grad_buffer().data();
                     for (std::size_t s = 0; s < nb; ++s)
                       kernels::gemm_tn(N, K, M, dc + s * M * N, ai->data.data() + s * M * K, db + s * N * K);
                   }
                 });
  }
  return out;
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("add", a, b);
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  if (auto* tape = detail::recording({&a, &b})) {
    tape->record("add", {a.impl(), b.impl()}, out.impl(), [ai = a.impl(), bi = b.impl(), oi = out.impl()] {
      for (auto* in : {ai.get(), bi.get()}) {
        if (!in->requires_grad) continue;
        auto& g = in->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("sub", a, b);
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i];
  if (auto* tape = detail::recording({&a, &b})) {
    tape->record("sub", {a.impl(), b.impl()}, out.impl(), [ai = a.impl(), bi = b.impl(), oi = out.impl()] {
      if (ai->requires_grad) {
        auto& g = ai->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i];
      }
      if (bi->requires_grad) {
        auto& g = bi->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= oi->grad[i];
      }
    });
  }
  return out;
}

/// Elementwise product.
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mul", a, b);
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  if (auto* tape = detail::recording({&a, &b})) {
    tape->record("mul", {a.impl(), b.impl()}, out.impl(), [ai = a.impl(), bi = b.impl(), oi = out.impl()] {
      if (ai->requires_grad) {
        auto& g = ai->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i] * bi->data[i];
      }
      if (bi->requires_grad) {
        auto& g = bi->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i] * ai->data[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * factor;
  if (auto* tape = detail::recording({&a})) {
    tape->record("scale", {a.impl()}, out.impl(), [ai = a.impl(), oi = out.impl(), factor] {
      auto& g = ai->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i] * factor;
    });
  }
  return out;
}

/// Copies `a` into a new shape with the same element count.
template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  Tensor<T> out(std::move(shape), std::vector<T>(a.data().begin(), a.data().end()));
  if (auto* tape = detail::recording({&a})) {
    tape->record("reshape", {a.impl()}, out.impl(), [ai = a.impl(), oi = out.impl()] {
      auto& g = ai->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i];
    });
  }
  return out;
}

/// [a x b x c x d] -> [a x c x b x d]; used to split and merge attention heads.
template <class T>
Tensor<T> swap_axes12(const Tensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("swap_axes12: expected rank 4, got " + shape_str(x.shape()));
  const std::size_t A = x.dim(0), B = x.dim(1), C = x.dim(2), D = x.dim(3);
  Tensor<T> out(Shape{A, C, B, D});
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t a = 0; a < A; ++a)
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        const T* s = src.data() + ((a * B + b) * C + c) * D;
        T* d = dst.data() + ((a * C + c) * B + b) * D;
        std::copy(s, s + D, d);
      }
  if (auto* tape = detail::recording({&x})) {
    tape->record("swap_axes12", {x.impl()}, out.impl(), [xi = x.impl(), oi = out.impl(), A, B, C, D] {
      auto& g = xi->grad_buffer();
      for (std::size_t a = 0; a < A; ++a)
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < C; ++c) {
            T* d = g.data() + ((a * B + b) * C + c) * D;
            const T* s = oi->grad.data() + ((a * C + c) * B + b) * D;
            for (std::size_t k = 0; k < D; ++k) d[k] += s[k];
          }
    });
  }
  return out;
}

/// Row lookup: table [V x d], ids -> [n x d].
template <class T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids) {
  if (table.rank() != 2) throw DimensionError("embedding: table must be 2-D, got " + shape_str(table.shape()));
  if (ids.empty()) throw DimensionError("embedding: empty id list");
  const std::size_t V = table.dim(0), d = table.dim(1);
  for (auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= V) {
      throw ValidationError("embedding: id " + std::to_string(id) + " outside [0, " + std::to_string(V) + ")");
    }
  }
  Tensor<T> out(Shape{ids.size(), d});
  auto src = table.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(src.data() + static_cast<std::size_t>(ids[i]) * d, d, dst.data() + i * d);
  }
  if (auto* tape = detail::recording({&table})) {
    tape->record("embedding", {table.impl()}, out.impl(),
                 [ti = table.impl(), oi = out.impl(), idv = std::vector<std::int32_t>(ids.begin(), ids.end()), d] {
                   auto& g = ti->grad_buffer();
                   for (std::size_t i = 0; i < idv.size(); ++i) {
                     T* row = g.data() + static_cast<std::size_t>(idv[i]) * d;
                     const T* src = oi->grad.data() + i * d;
                     for (std::size_t k = 0; k < d; ++k) row[k] += src[k];
                   }
                 });
  }
  return out;
}

/// Selects rows of a 2-D tensor: x [N x d], rows -> [n x d].
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows) {
  if (x.rank() != 2) throw DimensionError("gather_rows: expected 2-D, got " + shape_str(x.shape()));
  const std::size_t N = x.dim(0), d = x.dim(1);
  for (auto r : rows) {
    if (r >= N) throw DimensionError("gather_rows: row " + std::to_string(r) + " out of " + std::to_string(N));
  }
  Tensor<T> out(Shape{rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(x.data().data() + rows[i] * d, d, out.data().data() + i * d);
  }
  if (auto* tape = detail::recording({&x})) {
    tape->record("gather_rows", {x.impl()}, out.impl(),
                 [xi = x.impl(), oi = out.impl(), rv = std::vector<std::size_t>(rows.begin(), rows.end()), d] {
                   auto& g = xi->grad_buffer();
                   for (std::size_t i = 0; i < rv.size(); ++i) {
                     T* dst = g.data() + rv[i] * d;
                     const T* src = oi->grad.data() + i * d;
                     for (std::size_t k = 0; k < d; ++k) dst[k] += src[k];
                   }
                 });
  }
  return out;
}

/// out[i] = x[i, index[i]] for x [N x V].
template <class T>
Tensor<T> pick(const Tensor<T>& x, std::span<const std::int32_t> index) {
  if (x.rank() != 2 || x.dim(0) != index.size()) {
    throw DimensionError("pick: expected [" + std::to_string(index.size()) + " x V], got " + shape_str(x.shape()));
  }
  const std::size_t V = x.dim(1);
  Tensor<T> out(Shape{index.size()});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || static_cast<std::size_t>(index[i]) >= V) {
      throw DimensionError("pick: index " + std::to_string(index[i]) + " outside [0, " + std::to_string(V) + ")");
    }
    out[i] = x[i * V + static_cast<std::size_t>(index[i])];
  }
  if (auto* tape = detail::recording({&x})) {
    tape->record("pick", {x.impl()}, out.impl(),
                 [xi = x.impl(), oi = out.impl(), iv = std::vector<std::int32_t>(index.begin(), index.end()), V] {
                   auto& g = xi->grad_buffer();
                   for (std::size_t i = 0; i < iv.size(); ++i) g[i * V + static_cast<std::size_t>(iv[i])] += oi->grad[i];
                 });
  }
  return out;
}

/// Column concatenation of [B x m] and [B x n].
template <class T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0)) {
    throw DimensionError("concat_cols: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t R = a.dim(0), m = a.dim(1), n = b.dim(1);
  Tensor<T> out(Shape{R, m + n});
  for (std::size_t r = 0; r < R; ++r) {
    std::copy_n(a.data().data() + r * m, m, out.data().data() + r * (m + n));
    std::copy_n(b.data().data() + r * n, n, out.data().data() + r * (m + n) + m);
  }
  if (auto* tape = detail::recording({&a, &b})) {
    tape->record("concat_cols", {a.impl(), b.impl()}, out.impl(), [ai = a.impl(), bi = b.impl(), oi = out.impl(), R, m, n] {
      for (std::size_t r = 0; r < R; ++r) {
        const T* src = oi->grad.data() + r * (m + n);
        if (ai->requires_grad) {
          T* g = ai->grad_buffer().data() + r * m;
          for (std::size_t k = 0; k < m; ++k) g[k] += src[k];
        }
        if (bi->requires_grad) {
          T* g = bi->grad_buffer().data() + r * n;
          for (std::size_t k = 0; k < n; ++k) g[k] += src[m + k];
        }
      }
    });
  }
  return out;
}

/// Columns [begin, end) of a 2-D tensor.
template <class T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  if (x.rank() != 2 || begin >= end || end > x.dim(1)) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid for " +
                         shape_str(x.shape()));
  }
  const std::size_t R = x.dim(0), C = x.dim(1), n = end - begin;
  Tensor<T> out(Shape{R, n});
  for (std::size_t r = 0; r < R; ++r) std::copy_n(x.data().data() + r * C + begin, n, out.data().data() + r * n);
  if (auto* tape = detail::recording({&x})) {
    tape->record("slice_cols", {x.impl()}, out.impl(), [xi = x.impl(), oi = out.impl(), R, C, n, begin] {
      auto& g = xi->grad_buffer();
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t k = 0; k < n; ++k) g[r * C + begin + k] += oi->grad[r * n + k];
    });
  }
  return out;
}

/// Broadcasts a per-row value x [B] (or [B x 1]) across n columns.
template <class T>
Tensor<T> expand_cols(const Tensor<T>& x, std::size_t n) {
  if (!(x.rank() == 1 || (x.rank() == 2 && x.dim(1) == 1))) {
    throw DimensionError("expand_cols: expected [B] or [B x 1], got " + shape_str(x.shape()));
  }
  const std::size_t B = x.dim(0);
  Tensor<T> out(Shape{B, n});
  for (std::size_t r = 0; r < B; ++r) std::fill_n(out.data().data() + r * n, n, x[r]);
  if (auto* tape = detail::recording({&x})) {
    tape->record("expand_cols", {x.impl()}, out.impl(), [xi = x.impl(), oi = out.impl(), B, n] {
      auto& g = xi->grad_buffer();
      for (std::size_t r = 0; r < B; ++r)
        for (std::size_t k = 0; k < n; ++k) g[r] += oi->grad[r * n + k];
    });
  }
  return out;
}

/// Sums consecutive runs of a 1-D tensor: lengths must add up to x.numel().
template <class T>
Tensor<T> segment_sum(const Tensor<T>& x, std::span<const std::size_t> lengths) {
  std::size_t total = 0;
  for (auto len : lengths) {
    if (len == 0) throw DimensionError("segment_sum: empty segment");
    total += len;
  }
  if (x.rank() != 1 || total != x.numel() || lengths.empty()) {
    throw DimensionError("segment_sum: segments cover " + std::to_string(total) + " of " + shape_str(x.shape()));
  }
  Tensor<T> out(Shape{lengths.size()});
  std::size_t pos = 0;
  for (std::size_t s = 0; s < lengths.size(); ++s) {
    T acc = 0;
    for (std::size_t k = 0; k < lengths[s]; ++k) acc += x[pos++];
    out[s] = acc;
  }
  if (auto* tape = detail::recording({&x})) {
    tape->record("segment_sum", {x.impl()}, out.impl(),
                 [xi = x.impl(), oi = out.impl(), lv = std::vector<std::size_t>(lengths.begin(), lengths.end())] {
                   auto& g = xi->grad_buffer();
                   std::size_t pos = 0;
                   for (std::size_t s = 0; s < lv.size(); ++s)
                     for (std::size_t k = 0; k < lv[s]; ++k) g[pos++] += oi->grad[s];
                 });
  }
  return out;
}

/// Sum of all elements, returned as shape [1].
template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (auto v : x.data()) acc += v;
  auto out = Tensor<T>::scalar(acc);
  if (auto* tape = detail::recording({&x})) {
    tape->record("sum", {x.impl()}, out.impl(), [xi = x.impl(), oi = out.impl()] {
      auto& g = xi->grad_buffer();
      const T d = oi->grad[0];
      for (auto& v : g) v += d;
    });
  }
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Sum along one axis; the axis is removed (a rank-1 input yields shape [1]).
template <class T>
Tensor<T> sum_axis(const Tensor<T>& x, int axis) {
  const auto v = detail::axis_view(x.shape(), axis, "sum_axis");
  Shape shape = x.shape();
  shape.erase(shape.begin() + (axis < 0 ? axis + static_cast<int>(shape.size()) : axis));
  if (shape.empty()) shape = {1};
  Tensor<T> out(shape);
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t k = 0; k < v.extent; ++k)
      for (std::size_t i = 0; i < v.inner; ++i) out[o * v.inner + i] += x[(o * v.extent + k) * v.inner + i];
  if (auto* tape = detail::recording({&x})) {
    tape->record("sum_axis", {x.impl()}, out.impl(), [xi = x.impl(), oi = out.impl(), v] {
      auto& g = xi->grad_buffer();
      for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t k = 0; k < v.extent; ++k)
          for (std::size_t i = 0; i < v.inner; ++i) g[(o * v.extent + k) * v.inner + i] += oi->grad[o * v.inner + i];
    });
  }
  return out;
}

/// Scale-only RMS normalisation over the last axis: x / rms(x) * gain.
template <class T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain, T eps = T(1e-6)) {
  const std::size_t d = x.dim(x.rank() - 1);
  if (gain.rank() != 1 || gain.dim(0) != d) {
    throw DimensionError("rms_norm: gain " + shape_str(gain.shape()) + " does not match " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  Tensor<T> out(x.shape());
  std::vector<T> inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * d;
    T ss = 0;
    for (std::size_t k = 0; k < d; ++k) ss += xr[k] * xr[k];
    inv[r] = T(1) / std::sqrt(ss / static_cast<T>(d) + eps);
    T* o = out.data().data() + r * d;
    for (std::size_t k = 0; k < d; ++k) o[k] = xr[k] * inv[r] * gain[k];
  }
  if (auto* tape = detail::recording({&x, &gain})) {
    tape->record("rms_norm", {x.impl(), gain.impl()}, out.impl(),
                 [xi = x.impl(), gi = gain.impl(), oi = out.impl(), inv = std::move(inv), rows, d] {
                   for (std::size_t r = 0; r < rows; ++r) {
                     const T* xr = xi->data.data() + r * d;
                     const T* dy = oi->grad.data() + r * d;
                     if (gi->requires_grad) {
                       auto& gg = gi->grad_buffer();
                       for (std::size_t k = 0; k < d; ++k) gg[k] += dy[k] * xr[k] * inv[r];
                     }
                     if (xi->requires_grad) {
                       T dot = 0;
                       for (std::size_t k = 0; k < d; ++k) dot += dy[k] * gi->data[k] * xr[k];
                       const T c = inv[r] * inv[r] * inv[r] * dot / static_cast<T>(d);
                       T* dx = xi->grad_buffer().data() + r * d;
                       for (std::size_t k = 0; k < d; ++k) dx[k] += inv[r] * dy[k] * gi->data[k] - c * xr[k];
                     }
                   }
                 });
  }
  return out;
}

/// Exact (erf-based) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const T rs2 = T(1) / std::sqrt(T(2));
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = T(0.5) * x[i] * (T(1) + std::erf(x[i] * rs2));
  if (auto* tape = detail::recording({&x})) {
    tape->record("gelu", {x.impl()}, out.impl(), [xi = x.impl(), oi = out.impl(), rs2] {
      auto& g = xi->grad_buffer();
      const T norm = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T v = xi->data[i];
        const T cdf = T(0.5) * (T(1) + std::erf(v * rs2));
        const T pdf = norm * std::exp(T(-0.5) * v * v);
        g[i] += oi->grad[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = std::exp(x[i]);
  if (auto* tape = detail::recording({&x})) {
    tape->record("exp", {x.impl()}, out.impl(), [xi = x.impl(), oi = out.impl()] {
      auto& g = xi->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i] * oi->data[i];
    });
  }
  return out;
}

/// max(x, lo); the gradient is zero where the floor is active.
template <class T>
Tensor<T> clamp_min(const Tensor<T>& x, T lo) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] < lo ? lo : x[i];
  if (auto* tape = detail::recording({&x})) {
    tape->record("clamp_min", {x.impl()}, out.impl(), [xi = x.impl(), oi = out.impl(), lo] {
      auto& g = xi->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (!(xi->data[i] < lo)) g[i] += oi->grad[i];
    });
  }
  return out;
}

/// log(sigmoid(x)) evaluated without overflow.
template <class T>
Tensor<T> log_sigmoid(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const T v = x[i];
    out[i] = v >= 0 ? -std::log1p(std::exp(-v)) : v - std::log1p(std::exp(v));
  }
  if (auto* tape = detail::recording({&x})) {
    tape->record("log_sigmoid", {x.impl()}, out.impl(), [xi = x.impl(), oi = out.impl()] {
      auto& g = xi->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T v = xi->data[i];
        // d/dx log sigmoid(x) = sigmoid(-x)
        const T s = v >= 0 ? std::exp(-v) / (T(1) + std::exp(-v)) : T(1) / (T(1) + std::exp(v));
        g[i] += oi->grad[i] * s;
      }
    });
  }
  return out;
}

/// Replaces entries where mask != 0 with `value`; those entries get no gradient.
template <class T>
Tensor<T> masked_fill(const Tensor<T>& x, std::shared_ptr<const std::vector<std::uint8_t>> mask, T value) {
  if (!mask || mask->size() != x.numel()) {
    throw DimensionError("masked_fill: mask size does not match " + shape_str(x.shape()));
  }
  Tensor<T> out(x.shape());
  const auto& m = *mask;
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = m[i] ? value : x[i];
  if (auto* tape = detail::recording({&x})) {
    tape->record("masked_fill", {x.impl()}, out.impl(), [xi = x.impl(), oi = out.impl(), mask] {
      auto& g = xi->grad_buffer();
      const auto& m = *mask;
      for (std::size_t i = 0; i < g.size(); ++i)
        if (!m[i]) g[i] += oi->grad[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> masked_fill(const Tensor<T>& x, std::vector<std::uint8_t> mask, T value) {
  return masked_fill(x, std::make_shared<const std::vector<std::uint8_t>>(std::move(mask)), value);
}

/// Numerically stable softmax along `axis` (max subtraction).
template <class T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1) {
  const auto v = detail::axis_view(x.shape(), axis, "softmax");
  Tensor<T> out(x.shape());
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.extent * v.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < v.extent; ++k) mx = std::max(mx, x[base + k * v.inner]);
      if (mx == -std::numeric_limits<T>::infinity()) throw NumericError("softmax: slice is entirely -inf");
      T z = 0;
      for (std::size_t k = 0; k < v.extent; ++k) {
        const T e = std::exp(x[base + k * v.inner] - mx);
        out[base + k * v.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < v.extent; ++k) out[base + k * v.inner] /= z;
    }
  if (auto* tape = detail::recording({&x})) {
    tape->record("softmax", {x.impl()}, out.impl(), [xi = x.impl(), oi = out.impl(), v] {
      auto& g = xi->grad_buffer();
      const auto& y = oi->data;
      const auto& dy = oi->grad;
      for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t i = 0; i < v.inner; ++i) {
          const std::size_t base = o * v.extent * v.inner + i;
          T dot = 0;
          for (std::size_t k = 0; k < v.extent; ++k) dot += dy[base + k * v.inner] * y[base + k * v.inner];
          for (std::size_t k = 0; k < v.extent; ++k) {
            const std::size_t j = base + k * v.inner;
            g[j] += y[j] * (dy[j] - dot);
          }
        }
    });
  }
  return out;
}

/// Numerically stable log-softmax along `axis` (log-sum-exp with max subtraction).
template <class T>
Tensor<T> log_softmax(const Tensor<T>& x, int axis = -1) {
  const auto v = detail::axis_view(x.shape(), axis, "log_softmax");
  Tensor<T> out(x.shape());
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.extent * v.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < v.extent; ++k) mx = std::max(mx, x[base + k * v.inner]);
      if (mx == -std::numeric_limits<T>::infinity()) throw NumericError("log_softmax: slice is entirely -inf");
      T z = 0;
      for (std::size_t k = 0; k < v.extent; ++k) z += std::exp(x[base + k * v.inner] - mx);
      const T lse = mx + std::log(z);
      for (std::size_t k = 0; k < v.extent; ++k) out[base + k * v.inner] = x[base + k * v.inner] - lse;
    }
  if (auto* tape = detail::recording({&x})) {
    tape->record("log_softmax", {x.impl()}, out.impl(), [xi = x.impl(), oi = out.impl(), v] {
      auto& g = xi->grad_buffer();
      const auto& y = oi->data;
      const auto& dy = oi->grad;
      for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t i = 0; i < v.inner; ++i) {
          const std::size_t base = o * v.extent * v.inner + i;
          T total = 0;
          for (std::size_t k = 0; k < v.extent; ++k) total += dy[base + k * v.inner];
          for (std::size_t k = 0; k < v.extent; ++k) {
            const std::size_t j = base + k * v.inner;
            g[j] += dy[j] - std::exp(y[j]) * total;
          }
        }
    });
  }
  return out;
}

/// Divides each row of x [B x d] by its Euclidean norm.
template <class T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x) {
  if (x.rank() != 2) throw DimensionError("l2_normalize_rows: expected 2-D, got " + shape_str(x.shape()));
  const std::size_t R = x.dim(0), d = x.dim(1);
  Tensor<T> out(x.shape());
  std::vector<T> norms(R);
  for (std::size_t r = 0; r < R; ++r) {
    const T* xr = x.data().data() + r * d;
    T ss = 0;
    for (std::size_t k = 0; k < d; ++k) ss += xr[k] * xr[k];
    norms[r] = std::sqrt(ss);
    if (!(norms[r] > T(0))) throw ValidationError("l2_normalize_rows: row " + std::to_string(r) + " has zero norm");
    for (std::size_t k = 0; k < d; ++k) out[r * d + k] = xr[k] / norms[r];
  }
  if (auto* tape = detail::recording({&x})) {
    tape->record("l2_normalize_rows", {x.impl()}, out.impl(), [xi = x.impl(), oi = out.impl(), norms = std::move(norms), R, d] {
      auto& g = xi->grad_buffer();
      for (std::size_t r = 0; r < R; ++r) {
        const T* y = oi->data.data() + r * d;
        const T* dy = oi->grad.data() + r * d;
        T dot = 0;
        for (std::size_t k = 0; k < d; ++k) dot += y[k] * dy[k];
        for (std::size_t k = 0; k < d; ++k) g[r * d + k] += (dy[k] - y[k] * dot) / norms[r];
      }
    });
  }
  return out;
}

/// A constant (non-trainable) tensor built from data.
template <class T>
Tensor<T> constant(Shape shape, std::vector<T> data) {
  return Tensor<T>(std::move(shape), std::move(data), false);
}

}  // namespace grle
