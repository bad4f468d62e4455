// Copyright 2026 The grle Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "grle/tensor.hpp"

namespace grle {

// Byte-level vocabulary: ids 0-255 are raw bytes, followed by three specials.
namespace tokens {
inline constexpr std::int32_t kBos = 256;
inline constexpr std::int32_t kEos = 257;
inline constexpr std::int32_t kPad = 258;
inline constexpr std::int32_t kVocabSize = 259;

inline bool is_special(std::int32_t id) { return id >= kBos; }
}  // namespace tokens

/// One id per UTF-8 byte. BOS/EOS framing is added at collation time.
inline std::vector<std::int32_t> tokenize(std::string_view text) {
  std::vector<std::int32_t> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(static_cast<std::int32_t>(c));
  return ids;
}

/// Inverse of tokenize(); special ids are dropped.
inline std::string detokenize(std::span<const std::int32_t> ids) {
  std::string out;
  out.reserve(ids.size());
  for (auto id : ids) {
    if (id < 0 || id >= tokens::kVocabSize) {
      throw ValidationError("detokenize: id " + std::to_string(id) + " outside [0, " +
                            std::to_string(tokens::kVocabSize - 1) + "]");
    }
    if (!tokens::is_special(id)) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return out;
}

/// Right-padded id matrix with a 0/1 validity mask.
struct TokenMatrix {
  std::size_t rows = 0;
  std::size_t width = 0;
  std::vector<std::int32_t> ids;
  std::vector<std::uint8_t> mask;
  /// Stable identity of each row; seeds per-row dropout streams.
  std::vector<std::uint64_t> keys;

  std::size_t length(std::size_t row) const {
    std::size_t n = 0;
    for (std::size_t c = 0; c < width; ++c) n += mask[row * width + c];
    return n;
  }

  /// Pads each sequence to the longest one. Sequences must be non-empty.
  static TokenMatrix from_sequences(const std::vector<std::vector<std::int32_t>>& seqs,
                                    std::vector<std::uint64_t> row_keys = {}) {
    if (seqs.empty()) throw ValidationError("TokenMatrix: no sequences");
    TokenMatrix m;
    m.rows = seqs.size();
    for (const auto& s : seqs) {
      if (s.empty()) throw ValidationError("TokenMatrix: empty sequence");
      m.width = std::max(m.width, s.size());
    }
    m.ids.assign(m.rows * m.width, tokens::kPad);
    m.mask.assign(m.rows * m.width, 0);
    for (std::size_t r = 0; r < m.rows; ++r) {
      for (std::size_t c = 0; c < seqs[r].size(); ++c) {
        m.ids[r * m.width + c] = seqs[r][c];
        m.mask[r * m.width + c] = 1;
      }
    }
    if (row_keys.empty()) {
      row_keys.resize(m.rows);
      for (std::size_t r = 0; r < m.rows; ++r) row_keys[r] = r;
    }
    if (row_keys.size() != m.rows) throw DimensionError("TokenMatrix: one key per row required");
    m.keys = std::move(row_keys);
    return m;
  }

  /// Mask-aware de-collation back to per-row token lists.
  std::vector<std::vector<std::int32_t>> sequences() const {
    std::vector<std::vector<std::int32_t>> out(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < width; ++c)
        if (mask[r * width + c]) out[r].push_back(ids[r * width + c]);
    return out;
  }
};

/// [BOS, bytes..., EOS]
inline std::vector<std::int32_t> frame(std::span<const std::int32_t> body) {
  std::vector<std::int32_t> out;
  out.reserve(body.size() + 2);
  out.push_back(tokens::kBos);
  out.insert(out.end(), body.begin(), body.end());
  out.push_back(tokens::kEos);
  return out;
}

}  // namespace grle
