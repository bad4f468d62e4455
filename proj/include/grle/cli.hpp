// Copyright 2026 The grle Authors
// SPDX-License-Identifier: Apache-2.0

// `grle` command line: train, embed, eval, gradcheck.
// Exit status: 0 success, 1 runtime failure (or failed checks), 2 usage or
// configuration error.

#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "grle/checkpoint.hpp"
#include "grle/eval.hpp"
#include "grle/run_config.hpp"
#include "grle/trainer.hpp"
#include "grle/verify.hpp"

namespace grle {

/// Shortest decimal text that reads back as the same double.
inline std::string format_real(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace cli_detail {

struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

/// Applies repeated "section.key=value" overrides.
inline void apply_overrides(RunConfig& c, const std::vector<std::string>& sets) {
  if (sets.empty()) return;
  std::string text;
  for (const auto& s : sets) {
    if (s.find('=') == std::string::npos || s.find('.') == std::string::npos || s.find('.') > s.find('=')) {
      throw ConfigError("--set expects section.key=value, got \"" + s + "\"");
    }
    text += s + "\n";
  }
  std::istringstream in(text);
  merge_json(parse_key_value(in, "--set"), c);
}

inline std::vector<TrainExample> training_data(const RunConfig& c, const std::filesystem::path& out_dir) {
  if (!c.data.train_path.empty()) return load_examples(c.data.train_path);
  auto task = make_synthetic_task(c.data.synthetic);
  task.eval.name = "synthetic";
  save_corpus(task.eval, out_dir / "eval_corpus");
  return task.train;
}

inline std::string step_dir(std::size_t step) {
  std::string s = std::to_string(step);
  return "step-" + std::string(s.size() < 6 ? 6 - s.size() : 0, '0') + s;
}

inline int train(const RunConfig& c, std::ostream& out) {
  const std::filesystem::path dir = c.output_dir;
  std::filesystem::create_directories(dir);
  write_text(dir / "resolved_config.ini", to_key_value(c));
  const auto data = training_data(c, dir);

  Model<float> model = init_model<float>(c.model, c.model.seed);
  if (c.use_lora) add_adapters(model, c.lora, c.model.seed + 1);
  Trainer<float> trainer(model, c.train);

  std::ofstream metrics(dir / "metrics.jsonl", std::ios::trunc);
  if (!metrics) throw std::runtime_error("cannot write " + (dir / "metrics.jsonl").string());
  for (std::size_t epoch = 0; epoch < c.train.epochs; ++epoch) {
    trainer.fit_epoch(data, epoch, [&](const StepMetrics& m) {
      metrics << m.to_json() << '\n';
      metrics.flush();
      if (c.train.checkpoint_every > 0 && m.step % c.train.checkpoint_every == 0) {
        save_checkpoint(model, dir / "checkpoints" / step_dir(m.step), &trainer.optimizer_state());
      }
    });
    save_checkpoint(model, dir / "checkpoints" / ("epoch-" + std::to_string(epoch + 1)), &trainer.optimizer_state());
  }
  save_checkpoint(model, dir / "checkpoint", &trainer.optimizer_state());
  out << "trained " << trainer.steps_done() << " steps; checkpoint " << (dir / "checkpoint").string() << '\n';
  return 0;
}

struct TextItem {
  std::string id;
  std::string text;
};

inline std::vector<TextItem> read_texts(const std::filesystem::path& path) {
  std::vector<TextItem> items;
  detail::for_each_json_line(path, [&](const nlohmann::json& j) {
    items.push_back({detail::id_string(j.at("id")), j.at("text").get<std::string>()});
  });
  return items;
}

}  // namespace cli_detail

/// Entry point; returns the process exit status.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"grle: fine-tune and evaluate small decoder-only text embedding models", "grle"};
  app.require_subcommand(1);

  std::string config_path, strategy, output;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;
  auto* train_cmd = app.add_subcommand("train", "train a model and write checkpoints plus metrics.jsonl");
  train_cmd->add_option("--config", config_path, "config file (key=value or .json)");
  train_cmd->add_option("--strategy", strategy, "cl | cl_sft | cl_dpo | grl | grl_sft");
  train_cmd->add_option("--seed", seed, "seed for initialisation, shuffling and dropout");
  train_cmd->add_option("--output", output, "output directory (overrides output.dir)");
  train_cmd->add_option("--set", sets, "override any config key: section.key=value (repeatable)");

  std::string checkpoint, input, emb_output;
  auto* embed_cmd = app.add_subcommand("embed", "embed JSON-lines {id, text} records");
  embed_cmd->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  embed_cmd->add_option("--input", input, "input JSON-lines file")->required();
  embed_cmd->add_option("--output", emb_output, "output JSON-lines file")->required();

  std::string corpus, metrics_arg = "ndcg@10,map", report_path, cache_dir;
  bool no_cache = false;
  auto* eval_cmd = app.add_subcommand("eval", "rank a corpus and print the main score");
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  eval_cmd->add_option("--corpus", corpus, "corpus directory (documents/queries/qrels.jsonl)")->required();
  eval_cmd->add_option("--metrics", metrics_arg, "comma-separated: ndcg@K, map, spearman");
  eval_cmd->add_option("--report", report_path, "report path (default <checkpoint>/eval_report.json)");
  eval_cmd->add_option("--cache-dir", cache_dir, "document-embedding cache (default <checkpoint>/embedding_cache)");
  eval_cmd->add_flag("--no-cache", no_cache, "disable the document-embedding cache");

  std::string gc_config;
  std::size_t gc_entries = 24;
  auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference and cached-gradient equivalence checks");
  gc_cmd->add_option("--config", gc_config, "config file; model and lora sections select the checked model");
  gc_cmd->add_option("--entries", gc_entries, "probed entries per parameter tensor (0 = all)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  if (*train_cmd) {
    RunConfig c;
    try {
      if (!config_path.empty()) merge_json(read_config_file(config_path), c);
      cli_detail::apply_overrides(c, sets);
      if (!strategy.empty()) {
        try {
          c.train.strategy = parse_strategy(strategy);
        } catch (const ValidationError& e) {
          throw ConfigError(std::string("--strategy: ") + e.what());
        }
      }
      if (seed) {
        c.train.seed = *seed;
        c.model.seed = *seed;
      }
      if (!output.empty()) c.output_dir = output;
      c.validate();
    } catch (const std::exception& e) {
      err << "config error: " << e.what() << '\n';
      return 2;
    }
    try {
      return cli_detail::train(c, out);
    } catch (const std::exception& e) {
      err << "error: " << e.what() << '\n';
      return 1;
    }
  }

  if (*embed_cmd) {
    try {
      const auto items = cli_detail::read_texts(input);
      const Model<float> model = load_checkpoint<float>(checkpoint);
      std::vector<std::string> texts, ids;
      for (const auto& it : items) {
        texts.push_back(it.text);
        ids.push_back(it.id);
      }
      const auto emb = embed_texts(model, texts, ids);
      std::ostringstream lines;
      for (std::size_t i = 0; i < items.size(); ++i) {
        nlohmann::ordered_json j;
        j["id"] = items[i].id;
        std::vector<float> v(emb.row(i).begin(), emb.row(i).end());
        j["embedding"] = v;
        lines << j.dump() << '\n';
      }
      cli_detail::write_text(emb_output, lines.str());
      nlohmann::ordered_json resolved{{"command", "embed"},
                                      {"checkpoint", checkpoint},
                                      {"checkpoint_hash", checkpoint_hash(checkpoint)},
                                      {"input", input},
                                      {"output", emb_output}};
      cli_detail::write_text(emb_output + ".config.json", resolved.dump(2) + "\n");
      return 0;
    } catch (const std::exception& e) {
      err << "error: " << e.what() << '\n';
      return 1;
    }
  }

  if (*eval_cmd) {
    std::vector<std::string> metrics;
    try {
      std::stringstream ss(metrics_arg);
      for (std::string m; std::getline(ss, m, ',');)
        if (!m.empty()) metrics.push_back(m);
      validate_metrics(metrics);
    } catch (const std::exception& e) {
      err << "config error: --metrics: " << e.what() << '\n';
      return 2;
    }
    try {
      const Model<float> model = load_checkpoint<float>(checkpoint);
      const EvalCorpus c = load_corpus(corpus);
      EvalOptions opt;
      opt.checkpoint_id = checkpoint_hash(checkpoint);
      if (!no_cache) {
        opt.rank.cache_dir = cache_dir.empty() ? std::filesystem::path(checkpoint) / "embedding_cache"
                                               : std::filesystem::path(cache_dir);
      }
      const EvalReport report = evaluate(model, c, metrics, opt);
      const std::filesystem::path rp =
          report_path.empty() ? std::filesystem::path(checkpoint) / "eval_report.json" : std::filesystem::path(report_path);
      cli_detail::write_text(rp, report.to_json().dump(2) + "\n");
      nlohmann::ordered_json resolved{{"command", "eval"},
                                      {"checkpoint", checkpoint},
                                      {"corpus", corpus},
                                      {"metrics", metrics},
                                      {"report", rp.string()},
                                      {"cache_dir", opt.rank.cache_dir.string()}};
      cli_detail::write_text(rp.string() + ".config.json", resolved.dump(2) + "\n");
      out << format_real(report.main_score()) << '\n';
      return 0;
    } catch (const std::exception& e) {
      err << "error: " << e.what() << '\n';
      return 1;
    }
  }

  if (*gc_cmd) {
    VerifyOptions o = VerifyOptions::small();
    try {
      if (!gc_config.empty()) {
        const RunConfig c = load_run_config(gc_config);
        c.model.validate();
        c.lora.validate();
        o.model = c.model;
        o.lora = c.lora;
        o.seed = c.train.seed;
      }
      o.fd_entries_per_param = gc_entries;
    } catch (const std::exception& e) {
      err << "config error: " << e.what() << '\n';
      return 2;
    }
    try {
      bool ok = true;
      auto report = [&](const std::vector<CheckOutcome>& checks) {
        for (const auto& c : checks) {
          out << (c.passed ? "PASS " : "FAIL ") << c.name << ": " << format_real(c.value) << " (tolerance "
              << format_real(c.tolerance) << "; " << c.detail << ")\n";
          ok = ok && c.passed;
        }
      };
      report(run_gradient_suite(o));
      report(run_gradcache_suite(o));
      return ok ? 0 : 1;
    } catch (const std::exception& e) {
      err << "error: " << e.what() << '\n';
      return 1;
    }
  }
  return 2;
}

}  // namespace grle
