// Copyright 2026 The grle Authors
// SPDX-License-Identifier: Apache-2.0

// Run configuration: JSON (de)serialization of every config struct and the
// sectioned key=value file format.
//
// key=value grammar:
//   file    := { line }
//   line    := blank | comment | section | entry
//   comment := ('#' | ';') any
//   section := '[' name ']'            -- model, lora, train, weights, data, eval, output
//   entry   := key '=' value           -- key may also be written "section.key"
//   value   := integer | real | true | false | none | text
// Lists (lora.targets, eval.metrics) are comma-separated text. Whitespace
// around keys and values is ignored. Unknown sections and keys are errors.

#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "grle/model.hpp"
#include "grle/trainer.hpp"

namespace grle {

/// Usage or configuration problem; the CLI maps it to exit status 2.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DataConfig {
  /// JSON-lines training file; empty selects the built-in synthetic task.
  std::string train_path;
  SyntheticTaskConfig synthetic;

  bool operator==(const DataConfig&) const = default;
};

struct EvalConfig {
  std::string corpus_dir;
  std::vector<std::string> metrics = {"ndcg@10", "map"};

  bool operator==(const EvalConfig&) const = default;
};

struct RunConfig {
  ModelConfig model;
  bool use_lora = true;
  LoraConfig lora;
  TrainConfig train;
  DataConfig data;
  EvalConfig eval;
  std::string output_dir = "run";

  void validate() const {
    model.validate();
    if (use_lora) lora.validate();
    train.validate();
    if (!data.train_path.empty() && !std::filesystem::exists(data.train_path)) {
      throw ConfigError("data.train_path: file not found: " + data.train_path);
    }
    if (!eval.corpus_dir.empty() && !std::filesystem::is_directory(eval.corpus_dir)) {
      throw ConfigError("eval.corpus_dir: directory not found: " + eval.corpus_dir);
    }
    if (output_dir.empty()) throw ConfigError("output.dir must not be empty");
  }
};

namespace config_detail {

using json = nlohmann::ordered_json;

/// Reads object members into typed fields, rejecting unknown and mistyped keys.
class Reader {
 public:
  Reader(const json& j, std::string section) : j_(j), section_(std::move(section)) {
    if (!j.is_object()) throw ConfigError(section_ + ": expected an object");
  }

  template <class V>
  void get(const char* key, V& out) {
    seen_.push_back(key);
    if (!j_.contains(key)) return;
    const json& v = j_.at(key);
    const std::string name = section_ + "." + key;
    try {
      if constexpr (std::is_same_v<V, bool>) {
        if (!v.is_boolean()) throw ConfigError(name + ": expected true or false");
        out = v.get<bool>();
      } else if constexpr (std::is_integral_v<V>) {
        if (!v.is_number_integer()) throw ConfigError(name + ": expected an integer");
        if constexpr (std::is_unsigned_v<V>) {
          if (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0) {
            throw ConfigError(name + ": must be non-negative");
          }
        }
        out = v.get<V>();
      } else if constexpr (std::is_floating_point_v<V>) {
        if (!v.is_number()) throw ConfigError(name + ": expected a number");
        out = v.get<V>();
      } else if constexpr (std::is_same_v<V, std::string>) {
        if (!v.is_string()) throw ConfigError(name + ": expected a string");
        out = v.get<std::string>();
      } else if constexpr (std::is_same_v<V, std::vector<std::string>>) {
        out.clear();
        if (v.is_string()) {
          std::stringstream ss(v.get<std::string>());
          std::string item;
          while (std::getline(ss, item, ',')) {
            const auto b = item.find_first_not_of(" \t"), e = item.find_last_not_of(" \t");
            if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
          }
        } else if (v.is_array()) {
          for (const auto& s : v) {
            if (!s.is_string()) throw ConfigError(name + ": expected a list of strings");
            out.push_back(s.get<std::string>());
          }
        } else {
          throw ConfigError(name + ": expected a list of strings");
        }
      }
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(name + ": " + e.what());
    }
  }

  template <class Fn>
  void get_with(const char* key, Fn&& fn) {
    seen_.push_back(key);
    if (!j_.contains(key)) return;
    if (!j_.at(key).is_string()) throw ConfigError(section_ + "." + key + ": expected a string");
    try {
      fn(j_.at(key).get<std::string>());
    } catch (const ValidationError& e) {
      throw ConfigError(section_ + "." + key + ": " + e.what());
    }
  }

  void section(const char* key, const std::function<void(const json&, const std::string&)>& fn) {
    seen_.push_back(key);
    if (j_.contains(key)) fn(j_.at(key), section_.empty() ? key : section_ + "." + key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (std::find(seen_.begin(), seen_.end(), k) == seen_.end()) {
        throw ConfigError("unknown config key \"" + (section_.empty() ? k : section_ + "." + k) + "\"");
      }
    }
  }

 private:
  const json& j_;
  std::string section_;
  std::vector<std::string> seen_;
};

}  // namespace config_detail

inline nlohmann::ordered_json to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size},   {"d_model", c.d_model},
          {"n_layers", c.n_layers},       {"n_heads", c.n_heads},
          {"d_ff", c.d_ff},               {"max_seq_len", c.max_seq_len},
          {"pooling", to_string(c.pooling)}, {"embedding_attention", to_string(c.embedding_attention)},
          {"seed", c.seed}};
}

inline void from_json(const nlohmann::ordered_json& j, ModelConfig& c, const std::string& section = "model") {
  config_detail::Reader r(j, section);
  r.get("vocab_size", c.vocab_size);
  r.get("d_model", c.d_model);
  r.get("n_layers", c.n_layers);
  r.get("n_heads", c.n_heads);
  r.get("d_ff", c.d_ff);
  r.get("max_seq_len", c.max_seq_len);
  r.get_with("pooling", [&](const std::string& s) { c.pooling = parse_pooling(s); });
  r.get_with("embedding_attention", [&](const std::string& s) { c.embedding_attention = parse_attention_mode(s); });
  r.get("seed", c.seed);
  r.finish();
}

inline nlohmann::ordered_json to_json(const LoraConfig& c) {
  return {{"r", c.r}, {"alpha", c.alpha}, {"dropout", c.dropout}, {"targets", c.targets}};
}

inline void from_json(const nlohmann::ordered_json& j, LoraConfig& c, const std::string& section = "lora") {
  config_detail::Reader r(j, section);
  r.get("r", c.r);
  r.get("alpha", c.alpha);
  r.get("dropout", c.dropout);
  r.get("targets", c.targets);
  r.finish();
}

inline nlohmann::ordered_json to_json(const LossWeights& w) {
  return {{"lambda_cl", w.lambda_cl}, {"lambda_dpo", w.lambda_dpo}, {"lambda_kl", w.lambda_kl},
          {"lambda_sft", w.lambda_sft}, {"tau", w.tau},             {"kl_tau", w.kl_tau},
          {"beta", w.beta}};
}

inline void from_json(const nlohmann::ordered_json& j, LossWeights& w, const std::string& section = "weights") {
  config_detail::Reader r(j, section);
  r.get("lambda_cl", w.lambda_cl);
  r.get("lambda_dpo", w.lambda_dpo);
  r.get("lambda_kl", w.lambda_kl);
  r.get("lambda_sft", w.lambda_sft);
  r.get("tau", w.tau);
  r.get("kl_tau", w.kl_tau);
  r.get("beta", w.beta);
  r.finish();
}

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
  return {{"strategy", to_string(c.strategy)},
          {"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"micro_batch_size", c.micro_batch_size},
          {"epochs", c.epochs},
          {"seed", c.seed},
          {"weight_decay", c.weight_decay},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"grad_clip", c.grad_clip},
          {"checkpoint_every", c.checkpoint_every},
          {"stop_gen_grad", c.stop_gen_grad},
          {"cross_query_negatives", c.cross_query_negatives}};
}

inline void from_json(const nlohmann::ordered_json& j, TrainConfig& c, const std::string& section = "train") {
  config_detail::Reader r(j, section);
  r.get_with("strategy", [&](const std::string& s) { c.strategy = parse_strategy(s); });
  r.get("learning_rate", c.learning_rate);
  r.get("batch_size", c.batch_size);
  r.get("micro_batch_size", c.micro_batch_size);
  r.get("epochs", c.epochs);
  r.get("seed", c.seed);
  r.get("weight_decay", c.weight_decay);
  r.get("beta1", c.beta1);
  r.get("beta2", c.beta2);
  r.get("adam_eps", c.adam_eps);
  r.get("grad_clip", c.grad_clip);
  r.get("checkpoint_every", c.checkpoint_every);
  r.get("stop_gen_grad", c.stop_gen_grad);
  r.get("cross_query_negatives", c.cross_query_negatives);
  r.finish();
}

inline nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["model"] = to_json(c.model);
  auto lora = to_json(c.lora);
  lora["enabled"] = c.use_lora;
  j["lora"] = lora;
  j["train"] = to_json(c.train);
  j["weights"] = to_json(c.train.weights);
  const auto& s = c.data.synthetic;
  j["data"] = {{"train_path", c.data.train_path},
               {"synthetic_seed", s.seed},
               {"n_train", s.n_train},
               {"n_eval_queries", s.n_eval_queries},
               {"n_eval_docs", s.n_eval_docs},
               {"n_keys", s.n_keys},
               {"negatives_per_example", s.negatives_per_example}};
  j["eval"] = {{"corpus_dir", c.eval.corpus_dir}, {"metrics", c.eval.metrics}};
  j["output"] = {{"dir", c.output_dir}};
  return j;
}

/// Applies the members present in `j` on top of `c`.
inline void merge_json(const nlohmann::ordered_json& j, RunConfig& c) {
  config_detail::Reader top(j, "");
  top.section("model", [&](const auto& v, const auto& s) { from_json(v, c.model, s); });
  top.section("lora", [&](const auto& v, const auto& s) {
    auto rest = v;
    if (rest.is_object() && rest.contains("enabled")) {
      if (!rest["enabled"].is_boolean()) throw ConfigError("lora.enabled: expected true or false");
      c.use_lora = rest["enabled"].template get<bool>();
      rest.erase("enabled");
    }
    from_json(rest, c.lora, s);
  });
  top.section("train", [&](const auto& v, const auto& s) { from_json(v, c.train, s); });
  top.section("weights", [&](const auto& v, const auto& s) { from_json(v, c.train.weights, s); });
  top.section("data", [&](const auto& v, const auto& s) {
    config_detail::Reader r(v, s);
    r.get("train_path", c.data.train_path);
    r.get("synthetic_seed", c.data.synthetic.seed);
    r.get("n_train", c.data.synthetic.n_train);
    r.get("n_eval_queries", c.data.synthetic.n_eval_queries);
    r.get("n_eval_docs", c.data.synthetic.n_eval_docs);
    r.get("n_keys", c.data.synthetic.n_keys);
    r.get("negatives_per_example", c.data.synthetic.negatives_per_example);
    r.finish();
  });
  top.section("eval", [&](const auto& v, const auto& s) {
    config_detail::Reader r(v, s);
    r.get("corpus_dir", c.eval.corpus_dir);
    r.get("metrics", c.eval.metrics);
    r.finish();
  });
  top.section("output", [&](const auto& v, const auto& s) {
    config_detail::Reader r(v, s);
    r.get("dir", c.output_dir);
    r.finish();
  });
  top.finish();
}

/// Parses the key=value format into the same nested object JSON input uses.
inline nlohmann::ordered_json parse_key_value(std::istream& in, const std::string& origin = "config") {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  std::string line, section;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r"), e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = origin + ":" + std::to_string(lineno);
    line = trim(line);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty()) throw ConfigError(where + ": empty section name");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    const std::string raw = trim(line.substr(eq + 1));
    std::string sec = section;
    if (const auto dot = key.find('.'); dot != std::string::npos) {
      sec = key.substr(0, dot);
      key = key.substr(dot + 1);
    }
    if (sec.empty()) throw ConfigError(where + ": key \"" + key + "\" outside any section");
    if (key.empty()) throw ConfigError(where + ": empty key");
    nlohmann::ordered_json value;
    if (raw == "true" || raw == "false") {
      value = raw == "true";
    } else if (raw == "none") {
      value = "";
    } else {
      std::size_t used = 0;
      bool parsed = false;
      if (!raw.empty() && (std::isdigit(static_cast<unsigned char>(raw[0])) || raw[0] == '-' || raw[0] == '+' ||
                           raw[0] == '.')) {
        try {
          if (raw.find_first_of(".eE") == std::string::npos) {
            const long long v = std::stoll(raw, &used);
            if (used == raw.size()) {
              value = v >= 0 ? nlohmann::ordered_json(static_cast<std::uint64_t>(v)) : nlohmann::ordered_json(v);
              parsed = true;
            }
          }
          if (!parsed) {
            const double v = std::stod(raw, &used);
            if (used == raw.size()) {
              value = v;
              parsed = true;
            }
          }
        } catch (const std::exception&) {
        }
      }
      if (!parsed) value = raw;
    }
    j[sec][key] = value;
  }
  return j;
}

inline nlohmann::ordered_json read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  if (path.extension() == ".json") {
    try {
      return nlohmann::ordered_json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(path.string() + ": " + e.what());
    }
  }
  return parse_key_value(in, path.string());
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  RunConfig c;
  merge_json(read_config_file(path), c);
  return c;
}

/// Inverse of parse_key_value for a resolved config.
inline std::string to_key_value(const RunConfig& c) {
  std::ostringstream out;
  out << "# resolved configuration\n";
  const auto j = to_json(c);
  for (const auto& [sec, body] : j.items()) {
    out << "\n[" << sec << "]\n";
    for (const auto& [k, v] : body.items()) {
      out << k << " = ";
      if (v.is_string()) {
        const auto s = v.get<std::string>();
        out << (s.empty() ? "none" : s);
      } else if (v.is_array()) {
        for (std::size_t i = 0; i < v.size(); ++i) out << (i ? "," : "") << v[i].get<std::string>();
      } else if (v.is_number_float()) {
        std::ostringstream num;
        num.precision(17);
        num << v.get<double>();
        std::string s = num.str();
        if (s.find_first_of(".eE") == std::string::npos) s += ".0";
        out << s;
      } else {
        out << v.dump();
      }
      out << '\n';
    }
  }
  return out.str();
}

}  // namespace grle
