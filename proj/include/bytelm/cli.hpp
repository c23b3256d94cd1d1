#pragma once

// Command-line front end. Needs CLI11.hpp and json.hpp on the include path.

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "bytelm/checkpoint.hpp"
#include "bytelm/config.hpp"
#include "bytelm/corpus.hpp"
#include "bytelm/error.hpp"
#include "bytelm/evaluation.hpp"
#include "bytelm/parameters.hpp"
#include "bytelm/probe.hpp"
#include "bytelm/training.hpp"

namespace bytelm::cli {

enum class Verb { stats, train, eval, probe };

struct Command {
  Verb verb = Verb::stats;
  std::optional<std::string> help;  // set when --help was requested
  unsigned threads = 1;

  std::vector<std::string> data;
  std::string config_path;
  std::vector<std::string> overrides;  // key=value
  std::optional<std::uint64_t> steps;
  std::optional<std::uint64_t> seed;
  std::string out;

  std::string checkpoint;
  std::size_t stride = 1;
  std::optional<std::size_t> context;

  std::vector<std::string> pairs;
  std::string layers = "all";
};

/// Settings the train verb accepts beyond the two configs.
struct RunSettings {
  std::uint64_t log_every = 10;
  std::uint64_t checkpoint_every = 100;  // 0 disables periodic checkpoints
};

inline Command parse_args(int argc, const char* const* argv) {
  CLI::App app{"Byte-level language model toolkit", "bytelm"};
  app.require_subcommand(1, 1);
  app.fallthrough();
  Command cmd;
  app.add_option("--threads", cmd.threads, "Worker threads for scoring (1 = reproducible)")
      ->check(CLI::PositiveNumber);

  auto* stats = app.add_subcommand("stats", "Sentence, word and byte counts of a corpus");
  stats->add_option("--data", cmd.data, "Corpus files")->required();

  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--config", cmd.config_path, "key=value config file");
  train->add_option("--data", cmd.data, "Training corpus files");
  train->add_option("--set", cmd.overrides, "Override a config key (key=value)");
  train->add_option("--steps", cmd.steps, "Total optimizer steps");
  train->add_option("--seed", cmd.seed, "Seed for init, sampling and dropout");
  train->add_option("--out", cmd.out, "Final checkpoint path")->default_val("model.ckpt");

  auto* eval = app.add_subcommand("eval", "Windowed scoring of a corpus");
  eval->add_option("--checkpoint", cmd.checkpoint, "Checkpoint file")->required();
  eval->add_option("--data", cmd.data, "Corpus files")->required();
  eval->add_option("--stride", cmd.stride, "Bytes scored per window")->default_val(1);
  eval->add_option("--context", cmd.context, "Window length (default: model context)");

  auto* probe = app.add_subcommand("probe", "Word-similarity probe over layers");
  probe->add_option("--checkpoint", cmd.checkpoint, "Checkpoint file")->required();
  probe->add_option("--pairs", cmd.pairs, "Word-pair files")->required();
  probe->add_option("--layers", cmd.layers, "all or i,j,k")->default_val("all");
  probe->add_option("--out", cmd.out, "CSV output path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    cmd.help = app.help();
    return cmd;
  } catch (const CLI::CallForAllHelp&) {
    cmd.help = app.help("", CLI::AppFormatMode::All);
    return cmd;
  } catch (const CLI::ParseError& e) {
    fail(ErrorKind::usage, e.what());
  }
  if (stats->parsed()) cmd.verb = Verb::stats;
  if (train->parsed()) cmd.verb = Verb::train;
  if (eval->parsed()) cmd.verb = Verb::eval;
  if (probe->parsed()) cmd.verb = Verb::probe;
  return cmd;
}

inline Command parse_args(const std::vector<std::string>& args) {
  std::vector<const char*> argv{"bytelm"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return parse_args(static_cast<int>(argv.size()), argv.data());
}

/// Built-in defaults, then the config file, then --set overrides, then the
/// dedicated flags. Unknown keys are rejected.
inline void resolve_train_config(const Command& cmd, ModelConfig& model, TrainConfig& train,
                                 RunSettings& run) {
  model = ModelConfig::desk();
  train = TrainConfig::desk();
  run = RunSettings{};
  Settings merged;
  if (!cmd.config_path.empty()) {
    const auto bytes = read_file_bytes(cmd.config_path);
    merged = parse_settings(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()),
                            cmd.config_path);
  }
  for (const auto& kv : cmd.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) fail(ErrorKind::usage, "--set expects key=value, got '" + kv + "'");
    merged[std::string(trim(std::string_view(kv).substr(0, eq)))] =
        std::string(trim(std::string_view(kv).substr(eq + 1)));
  }
  for (const auto& [key, value] : merged) {
    const auto& mk = model_config_keys();
    const auto& tk = train_config_keys();
    const bool known = std::find(mk.begin(), mk.end(), key) != mk.end() ||
                       std::find(tk.begin(), tk.end(), key) != tk.end() || key == "log_every" ||
                       key == "checkpoint_every";
    if (!known) fail(ErrorKind::config, "unknown config key '" + key + "'");
  }
  apply_settings(merged, model, train);
  if (auto it = merged.find("log_every"); it != merged.end())
    run.log_every = bytelm::detail::parse_number<std::uint64_t>("log_every", it->second);
  if (auto it = merged.find("checkpoint_every"); it != merged.end())
    run.checkpoint_every = bytelm::detail::parse_number<std::uint64_t>("checkpoint_every", it->second);
  if (cmd.steps) train.total_steps = *cmd.steps;
  if (cmd.seed) train.seed = *cmd.seed;
  model.validate();
  train.validate();
  require(run.log_every >= 1, ErrorKind::config, "log_every must be >= 1");
  if (train.window_len - 1 > model.context_len) {
    fail(ErrorKind::config, "window_len " + std::to_string(train.window_len) +
                                " needs context_len >= " + std::to_string(train.window_len - 1));
  }
}

/// Path of the periodic checkpoint written after `step` steps.
inline std::filesystem::path periodic_checkpoint_path(const std::filesystem::path& out, std::uint64_t step) {
  auto p = out;
  p.replace_filename(out.stem().string() + "-step" + std::to_string(step) + out.extension().string());
  return p;
}

inline std::string fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

namespace detail {

inline RawCorpus load_data(const std::vector<std::string>& data) {
  std::vector<std::filesystem::path> paths(data.begin(), data.end());
  return load_corpus(paths);
}

inline int run_stats(const Command& cmd, std::ostream& out) {
  const CorpusStats s = corpus_stats(load_data(cmd.data));
  out << format_stats(s) << "\n";
  nlohmann::json j{{"sentences", s.sentence_count}, {"words", s.word_count}, {"bytes", s.byte_count}};
  out << j.dump() << "\n";
  return 0;
}

inline int run_train(const Command& cmd, std::ostream& out) {
  ModelConfig model;
  TrainConfig train;
  RunSettings run;
  resolve_train_config(cmd, model, train, run);
  if (cmd.data.empty()) fail(ErrorKind::usage, "train needs --data");
  const RawCorpus corpus = load_data(cmd.data);
  const std::filesystem::path out_path = cmd.out.empty() ? "model.ckpt" : cmd.out;

  Checkpoint ckpt;
  ckpt.model = model;
  ckpt.train = train;
  ckpt.params = init_parameters<float>(model, train.seed);
  ckpt.optimizer = OptimizerState<float>::fresh(model);
  const auto start = std::chrono::steady_clock::now();
  for (std::uint64_t step = 0; step < train.total_steps; ++step) {
    const WindowBatch batch = training_batch(corpus, train, step);
    const StepResult r = train_step(ckpt.params, *ckpt.optimizer, batch, train);
    ckpt.step = step + 1;
    if (step % run.log_every == 0 || step + 1 == train.total_steps) {
      const double elapsed =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      out << "step=" << step << " lr=" << bytelm::detail::format_double(r.learning_rate)
          << " bpb=" << fixed(r.loss_bits) << " elapsed_s=" << fixed(elapsed, 3) << std::endl;
    }
    if (run.checkpoint_every > 0 && ckpt.step % run.checkpoint_every == 0 &&
        ckpt.step != train.total_steps) {
      save_checkpoint(ckpt, periodic_checkpoint_path(out_path, ckpt.step));
    }
  }
  save_checkpoint(ckpt, out_path);
  out << "checkpoint=" << out_path.string() << " step=" << ckpt.step << "\n";
  return 0;
}

inline int run_eval(const Command& cmd, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(cmd.checkpoint);
  const RawCorpus corpus = load_data(cmd.data);
  const std::size_t context = cmd.context.value_or(ckpt.model.context_len);
  const CorpusStats stats = corpus_stats(corpus);
  ScoreReport r = windowed_score(ckpt.params, corpus.stream(), context, cmd.stride, cmd.threads);
  if (stats.word_count > 0) r = with_word_count(r, stats.word_count);
  out << "bpb=" << fixed(r.bpb) << " ppl=" << fixed(r.perplexity, 4) << " bytes=" << r.scored_bytes
      << " words=" << r.word_count << " stride=" << r.stride << " context=" << r.context_len << "\n";
  nlohmann::json j{{"bpb", r.bpb},
                   {"ppl", std::isfinite(r.perplexity) ? nlohmann::json(r.perplexity) : nlohmann::json()},
                   {"bytes", r.scored_bytes},
                   {"words", r.word_count},
                   {"stride", r.stride},
                   {"context", r.context_len},
                   {"total_bits", r.total_bits},
                   {"windows", r.windows},
                   {"summation_order", r.summation_order}};
  out << j.dump() << "\n";
  return 0;
}

inline int run_probe(const Command& cmd, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(cmd.checkpoint);
  std::vector<WordSimDataset> datasets;
  for (const auto& p : cmd.pairs) datasets.push_back(load_word_pairs(p));
  const LayerSweepTable table = layer_sweep(ckpt.params, datasets, std::string_view(cmd.layers));
  write_sweep_csv(table, cmd.out);
  out << format_sweep_csv(table);
  out << "words_embedded=" << table.extractions << " out=" << cmd.out << "\n";
  return 0;
}

}  // namespace detail

inline int run(const Command& cmd, std::ostream& out = std::cout) {
  if (cmd.help) {
    out << *cmd.help;
    return 0;
  }
  switch (cmd.verb) {
    case Verb::stats: return detail::run_stats(cmd, out);
    case Verb::train: return detail::run_train(cmd, out);
    case Verb::eval: return detail::run_eval(cmd, out);
    case Verb::probe: return detail::run_probe(cmd, out);
  }
  return 1;
}

inline int exit_status(ErrorKind kind) { return kind == ErrorKind::usage ? 2 : 1; }

/// One line: `error kind=<kind> message=<json string>`.
inline std::string error_line(ErrorKind kind, std::string_view message) {
  return "error kind=" + std::string(to_string(kind)) + " message=" +
         nlohmann::json(message).dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
}

/// parse_args + run with every failure turned into a cause line on `err`.
inline int main(int argc, const char* const* argv, std::ostream& out = std::cout,
                std::ostream& err = std::cerr) {
  try {
    return run(parse_args(argc, argv), out);
  } catch (const Error& e) {
    err << error_line(e.kind(), e.what()) << std::endl;
    return exit_status(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    err << error_line(ErrorKind::io, e.what()) << std::endl;
    return 1;
  } catch (const std::exception& e) {
    err << "error kind=internal message="
        << nlohmann::json(std::string_view(e.what()))
               .dump(-1, ' ', false, nlohmann::json::error_handler_t::replace)
        << std::endl;
    return 1;
  }
}

}  // namespace bytelm::cli
