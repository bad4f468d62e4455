// Copyright 2026 The grle Authors
// SPDX-License-Identifier: Apache-2.0

// Checkpoint directory layout:
//   manifest.json  model and adapter config, one entry per tensor
//                  {name, shape, dtype: "float32", offset (bytes into weights.bin)}
//   weights.bin    little-endian float32, row-major, tensors in manifest order
//   optimizer.bin  optional: step counter then AdamW moments (float64) in
//                  trainable-parameter order; described by manifest "optimizer"

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "grle/model.hpp"
#include "grle/optim.hpp"
#include "grle/run_config.hpp"

namespace grle {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace ckpt_detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class U>
void write_le(std::ostream& out, U v) {
  static_assert(std::is_trivially_copyable_v<U>);
  unsigned char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
  out.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <class U>
U read_le(std::istream& in) {
  unsigned char b[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(b), sizeof(U))) throw CheckpointError("unexpected end of checkpoint data");
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
  U v;
  std::memcpy(&v, b, sizeof(U));
  return v;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace ckpt_detail

/// 64-bit FNV-1a; used to fingerprint checkpoints and corpora.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 15];
  return s;
}

template <class T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& dir, const OptimizerState* opt = nullptr) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json manifest;
  manifest["format"] = "grle-checkpoint";
  manifest["version"] = 1;
  manifest["model"] = to_json(model.config);
  manifest["lora"] = model.lora ? to_json(*model.lora) : nlohmann::ordered_json(nullptr);
  nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
  {
    std::ofstream w(dir / "weights.bin", std::ios::binary | std::ios::trunc);
    if (!w) throw CheckpointError("cannot write " + (dir / "weights.bin").string());
    std::uint64_t offset = 0;
    for (const auto& p : model.named_parameters()) {
      tensors.push_back({{"name", p.name},
                         {"shape", p.tensor.shape()},
                         {"dtype", "float32"},
                         {"offset", offset},
                         {"trainable", p.tensor.requires_grad()}});
      for (auto v : p.tensor.data()) ckpt_detail::write_le(w, static_cast<float>(v));
      offset += p.tensor.numel() * sizeof(float);
    }
    if (!w) throw CheckpointError("write failed: " + (dir / "weights.bin").string());
  }
  manifest["tensors"] = tensors;
  if (opt) {
    std::ofstream o(dir / "optimizer.bin", std::ios::binary | std::ios::trunc);
    if (!o) throw CheckpointError("cannot write " + (dir / "optimizer.bin").string());
    ckpt_detail::write_le(o, static_cast<std::int64_t>(opt->t));
    nlohmann::ordered_json entries = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < opt->names.size(); ++i) {
      entries.push_back({{"name", opt->names[i]}, {"numel", opt->m[i].size()}});
      for (double v : opt->m[i]) ckpt_detail::write_le(o, v);
      for (double v : opt->v[i]) ckpt_detail::write_le(o, v);
    }
    manifest["optimizer"] = {{"file", "optimizer.bin"}, {"step", opt->t}, {"tensors", entries}};
  } else {
    std::filesystem::remove(dir / "optimizer.bin");
  }
  std::ofstream m(dir / "manifest.json", std::ios::trunc);
  if (!m) throw CheckpointError("cannot write " + (dir / "manifest.json").string());
  m << manifest.dump(2) << '\n';
}

inline nlohmann::ordered_json read_manifest(const std::filesystem::path& dir) {
  try {
    return nlohmann::ordered_json::parse(ckpt_detail::read_file(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError((dir / "manifest.json").string() + ": " + e.what());
  }
}

/// Rebuilds the model described by the manifest. Any disagreement between
/// manifest entries and the architecture the config implies is an error.
template <class T>
Model<T> load_checkpoint(const std::filesystem::path& dir) {
  const auto manifest = read_manifest(dir);
  if (manifest.value("format", "") != "grle-checkpoint") throw CheckpointError(dir.string() + ": not a checkpoint");
  ModelConfig mc;
  std::optional<LoraConfig> lc;
  try {
    from_json(manifest.at("model"), mc);
    if (!manifest.at("lora").is_null()) {
      LoraConfig l;
      from_json(manifest.at("lora"), l);
      lc = l;
    }
  } catch (const std::exception& e) {
    throw CheckpointError(dir.string() + ": bad manifest config: " + e.what());
  }
  Model<T> model = init_model<T>(mc, mc.seed);
  if (lc) add_adapters(model, *lc, 0);
  const auto params = model.named_parameters();
  const auto& entries = manifest.at("tensors");
  if (entries.size() != params.size()) {
    throw CheckpointError(dir.string() + ": manifest lists " + std::to_string(entries.size()) +
                          " tensors, the configured model has " + std::to_string(params.size()));
  }
  const std::string blob = ckpt_detail::read_file(dir / "weights.bin");
  std::uint64_t expected_offset = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = entries[i];
    auto t = params[i].tensor;
    const auto name = e.at("name").get<std::string>();
    if (name != params[i].name) {
      throw CheckpointError("manifest tensor " + std::to_string(i) + " is " + name + ", expected " + params[i].name);
    }
    if (e.at("shape").get<Shape>() != t.shape()) {
      throw CheckpointError("tensor " + name + ": manifest shape " + shape_str(e.at("shape").get<Shape>()) +
                            " does not match model shape " + shape_str(t.shape()));
    }
    if (e.at("dtype").get<std::string>() != "float32") throw CheckpointError("tensor " + name + ": unsupported dtype");
    const auto offset = e.at("offset").get<std::uint64_t>();
    if (offset != expected_offset || offset + t.numel() * sizeof(float) > blob.size()) {
      throw CheckpointError("tensor " + name + ": offset " + std::to_string(offset) + " inconsistent with weights.bin");
    }
    for (std::size_t k = 0; k < t.numel(); ++k) {
      float f;
      std::memcpy(&f, blob.data() + offset + k * sizeof(float), sizeof(float));
      if constexpr (std::endian::native == std::endian::big) {
        auto* b = reinterpret_cast<unsigned char*>(&f);
        std::reverse(b, b + sizeof(float));
      }
      t[k] = static_cast<T>(f);
    }
    expected_offset += t.numel() * sizeof(float);
    if (e.contains("trainable")) t.set_requires_grad(e.at("trainable").get<bool>());
  }
  if (expected_offset != blob.size()) {
    throw CheckpointError("weights.bin holds " + std::to_string(blob.size()) + " bytes, manifest describes " +
                          std::to_string(expected_offset));
  }
  return model;
}

/// Restores AdamW state saved alongside `dir`; nullopt if none was saved.
template <class T>
std::optional<OptimizerState> load_optimizer_state(const std::filesystem::path& dir, const Model<T>& model) {
  const auto manifest = read_manifest(dir);
  if (!manifest.contains("optimizer")) return std::nullopt;
  OptimizerState s = make_optimizer_state(model.trainable_parameters());
  std::ifstream in(dir / "optimizer.bin", std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + (dir / "optimizer.bin").string());
  s.t = ckpt_detail::read_le<std::int64_t>(in);
  const auto& entries = manifest["optimizer"].at("tensors");
  if (entries.size() != s.names.size()) throw CheckpointError("optimizer state does not match trainable parameters");
  for (std::size_t i = 0; i < s.names.size(); ++i) {
    if (entries[i].at("name").get<std::string>() != s.names[i] ||
        entries[i].at("numel").get<std::size_t>() != s.m[i].size()) {
      throw CheckpointError("optimizer entry " + std::to_string(i) + " does not match parameter " + s.names[i]);
    }
    for (auto& v : s.m[i]) v = ckpt_detail::read_le<double>(in);
    for (auto& v : s.v[i]) v = ckpt_detail::read_le<double>(in);
  }
  return s;
}

/// Fingerprint of the stored parameters and config.
inline std::string checkpoint_hash(const std::filesystem::path& dir) {
  std::uint64_t h = fnv1a(ckpt_detail::read_file(dir / "weights.bin"));
  const auto manifest = read_manifest(dir);
  h = fnv1a(manifest.at("model").dump(), h);
  h = fnv1a(manifest.at("lora").dump(), h);
  return hex64(h);
}

}  // namespace grle
