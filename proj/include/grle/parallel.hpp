// Copyright 2026 The grle Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace grle {

namespace detail {
inline std::size_t& thread_cap() {
  static std::size_t cap = [] {
    std::size_t n = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("GRLE_THREADS")) {
      try {
        const long v = std::stol(env);
        if (v >= 1) n = static_cast<std::size_t>(v);
      } catch (...) {
      }
    }
    return n;
  }();
  return cap;
}
inline bool& deterministic_flag() {
  static bool on = false;
  return on;
}
}  // namespace detail

/// Worker cap; initialised from GRLE_THREADS, defaulting to the core count.
inline std::size_t num_threads() { return detail::deterministic_flag() ? 1 : detail::thread_cap(); }
inline void set_num_threads(std::size_t n) { detail::thread_cap() = std::max<std::size_t>(1, n); }

/// Forces every kernel onto the calling thread.
inline void set_deterministic(bool on) { detail::deterministic_flag() = on; }
inline bool deterministic() { return detail::deterministic_flag(); }

/// Splits [0, n) into contiguous chunks. Each index is handled by exactly one
/// worker, so per-index results do not depend on the thread count.
template <class Fn>
void parallel_for(std::size_t n, std::size_t work_per_item, Fn&& fn) {
  constexpr std::size_t kMinWork = 1 << 16;
  const std::size_t threads = std::min(num_threads(), n);
  if (threads <= 1 || n * work_per_item < kMinWork) {
    fn(std::size_t{0}, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads - 1);
  const std::size_t chunk = (n + threads - 1) / threads;
  for (std::size_t t = 1; t < threads; ++t) {
    const std::size_t lo = t * chunk;
    const std::size_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
  }
  fn(std::size_t{0}, std::min(n, chunk));
  for (auto& th : pool) th.join();
}

}  // namespace grle
