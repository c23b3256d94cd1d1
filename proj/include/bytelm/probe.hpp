#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <regex>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "bytelm/config.hpp"
#include "bytelm/corpus.hpp"
#include "bytelm/error.hpp"
#include "bytelm/model.hpp"
#include "bytelm/parameters.hpp"

namespace bytelm {

struct WordPair {
  std::string word_a;
  std::string word_b;
  double human_score = 0.0;
};

struct WordSimDataset {
  std::string name;
  std::vector<WordPair> pairs;
};

/// The bytes fed to the model for `word`: its utf-8 encoding plus a space.
inline ByteSequence probe_input_bytes(std::string_view word) {
  require(!word.empty(), ErrorKind::argument, "cannot probe an empty word");
  if (word.find(' ') != std::string_view::npos) {
    fail(ErrorKind::argument, "probe word '" + std::string(word) + "' contains a space");
  }
  ByteSequence bytes = to_bytes(word);
  bytes.push_back(0x20);
  return bytes;
}

namespace detail {

inline ByteSequence checked_probe_input(std::string_view word, const ModelConfig& cfg) {
  ByteSequence bytes = probe_input_bytes(word);
  if (bytes.size() > cfg.context_len) {
    fail(ErrorKind::length, "word '" + std::string(word) + "' needs " + std::to_string(bytes.size()) +
                                " bytes with its space; context_len is " +
                                std::to_string(cfg.context_len));
  }
  return bytes;
}

}  // namespace detail

/// Activation at the appended space after layer `layer_index` (1-based).
template <class T>
std::vector<T> extract_word_representation(const Parameters<T>& params, std::string_view word,
                                           std::size_t layer_index) {
  const ByteSequence bytes = detail::checked_probe_input(word, params.config());
  const ActivationTrace<T> trace = hidden_activation(params, bytes, layer_index);
  const auto row = trace.vectors.row(bytes.size() - 1);
  return std::vector<T>(row.begin(), row.end());
}

template <class T>
double cosine_similarity(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) {
    fail(ErrorKind::argument, "cosine_similarity: dimensions " + std::to_string(a.size()) + " and " +
                                  std::to_string(b.size()) + " differ");
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = static_cast<double>(a[i]), y = static_cast<double>(b[i]);
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  require(na > 0.0 && nb > 0.0, ErrorKind::degenerate, "cosine_similarity of a zero vector");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

template <class T>
double cosine_similarity(const std::vector<T>& a, const std::vector<T>& b) {
  return cosine_similarity(std::span<const T>(a), std::span<const T>(b));
}

/// 1-based ranks; tied values share the mean of the ranks they span.
inline std::vector<double> fractional_ranks(std::span<const double> xs) {
  std::vector<std::size_t> order(xs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return xs[i] < xs[j]; });
  std::vector<double> ranks(xs.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && xs[order[j + 1]] == xs[order[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

inline double pearson(std::span<const double> xs, std::span<const double> ys) {
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  require(sxx > 0.0 && syy > 0.0, ErrorKind::degenerate, "correlation undefined for constant input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

inline double spearman_rho(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) {
    fail(ErrorKind::argument, "spearman_rho: lengths " + std::to_string(xs.size()) + " and " +
                                  std::to_string(ys.size()) + " differ");
  }
  require(xs.size() >= 2, ErrorKind::degenerate, "spearman_rho needs at least two observations");
  for (const double v : xs) require(std::isfinite(v), ErrorKind::numeric, "spearman_rho: non-finite x");
  for (const double v : ys) require(std::isfinite(v), ErrorKind::numeric, "spearman_rho: non-finite y");
  const auto rx = fractional_ranks(xs);
  const auto ry = fractional_ranks(ys);
  return pearson(rx, ry);
}

inline double spearman_rho(const std::vector<double>& xs, const std::vector<double>& ys) {
  return spearman_rho(std::span<const double>(xs), std::span<const double>(ys));
}

/// Parses `word_a SEP word_b SEP score` lines, SEP being a tab or a comma.
/// Blank lines and lines starting with '#' are skipped, as is one header
/// line whose score field is not a number when it precedes every pair.
inline WordSimDataset parse_word_pairs(std::string_view text, std::string name) {
  WordSimDataset ds{std::move(name), {}};
  static const std::regex sep("[\t,]");
  std::size_t line_no = 0;
  bool header_allowed = true;
  std::istringstream in{std::string(text)};
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty() || line.front() == '#') continue;
    std::vector<std::string> fields(std::sregex_token_iterator(line.begin(), line.end(), sep, -1),
                                    std::sregex_token_iterator());
    if (!line.empty() && (line.back() == '\t' || line.back() == ',')) fields.emplace_back();
    auto bad = [&](const std::string& why) {
      fail(ErrorKind::parse, ds.name + " line " + std::to_string(line_no) + ": " + why);
    };
    if (fields.size() != 3) bad("expected 3 fields, found " + std::to_string(fields.size()));
    for (auto& f : fields) f = std::string(trim(f));
    double score = 0.0;
    bool numeric = true;
    try {
      score = detail::parse_number<double>("score", fields[2]);
    } catch (const Error&) {
      numeric = false;
    }
    if (!numeric) {
      if (header_allowed) {
        header_allowed = false;
        continue;
      }
      bad("score '" + fields[2] + "' is not a number");
    }
    header_allowed = false;
    if (!std::isfinite(score)) bad("score is not finite");
    if (fields[0].empty() || fields[1].empty()) bad("empty word");
    ds.pairs.push_back({fields[0], fields[1], score});
  }
  if (ds.pairs.size() < 2) {
    fail(ErrorKind::dataset, "dataset '" + ds.name + "' has " + std::to_string(ds.pairs.size()) +
                                 " pairs; at least 2 are needed");
  }
  return ds;
}

inline WordSimDataset load_word_pairs(const std::filesystem::path& path, std::string name = {}) {
  if (!std::filesystem::is_regular_file(path)) fail(ErrorKind::io, "missing word-pair file: " + path.string());
  if (name.empty()) name = path.stem().string();
  const ByteSequence bytes = read_file_bytes(path);
  return parse_word_pairs(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()),
                          std::move(name));
}

struct DatasetScore {
  double rho = 0.0;
  std::size_t pairs_used = 0;
};

namespace detail {

// Spearman rho between per-pair cosines and human scores; `vec(word)` yields
// the representation of a word.
template <class GetVector>
DatasetScore score_pairs(const WordSimDataset& ds, GetVector&& vec) {
  std::vector<double> model, human;
  for (const auto& p : ds.pairs) {
    try {
      model.push_back(cosine_similarity(vec(p.word_a), vec(p.word_b)));
    } catch (const Error& e) {
      fail(e.kind(), "pair ('" + p.word_a + "', '" + p.word_b + "') in '" + ds.name + "': " + e.what());
    }
    human.push_back(p.human_score);
  }
  return DatasetScore{spearman_rho(model, human), model.size()};
}

}  // namespace detail

/// Spearman rho of the model's cosines against the human scores, over every
/// pair of the dataset.
template <class T>
DatasetScore evaluate_dataset(const Parameters<T>& params, const WordSimDataset& ds,
                              std::size_t layer_index) {
  std::map<std::string, std::vector<T>, std::less<>> cache;
  return detail::score_pairs(ds, [&](const std::string& w) -> const std::vector<T>& {
    auto it = cache.find(w);
    if (it == cache.end()) it = cache.emplace(w, extract_word_representation(params, w, layer_index)).first;
    return it->second;
  });
}

struct SweepRow {
  std::size_t layer = 0;
  std::string dataset;
  double rho = 0.0;
  std::size_t pairs_used = 0;
};

struct LayerSweepTable {
  std::vector<SweepRow> rows;  // sorted by (layer, dataset)
  std::size_t extractions = 0;  // forward passes, one per unique word
};

/// "all" or a comma-separated list of 1-based layer indices.
inline std::vector<std::size_t> parse_layers(std::string_view spec, std::size_t num_layers) {
  std::vector<std::size_t> layers;
  if (trim(spec) == "all") {
    for (std::size_t l = 1; l <= num_layers; ++l) layers.push_back(l);
    return layers;
  }
  std::size_t start = 0;
  while (start <= spec.size()) {
    const std::size_t comma = std::min(spec.find(',', start), spec.size());
    const auto item = trim(spec.substr(start, comma - start));
    const auto l = detail::parse_number<std::size_t>("layers", item);
    if (l < 1 || l > num_layers) {
      fail(ErrorKind::index, "layer " + std::to_string(l) + " outside [1, " + std::to_string(num_layers) + "]");
    }
    layers.push_back(l);
    start = comma + 1;
  }
  std::sort(layers.begin(), layers.end());
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
  return layers;
}

/// evaluate_dataset for every (layer, dataset). Each unique word gets one
/// forward pass that yields its representation at every layer.
template <class T>
LayerSweepTable layer_sweep(const Parameters<T>& params, const std::vector<WordSimDataset>& datasets,
                            std::vector<std::size_t> layers) {
  const std::size_t num_layers = params.config().num_layers;
  for (const std::size_t l : layers) {
    if (l < 1 || l > num_layers) {
      fail(ErrorKind::index, "layer " + std::to_string(l) + " outside [1, " + std::to_string(num_layers) + "]");
    }
  }
  std::sort(layers.begin(), layers.end());
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());

  LayerSweepTable table;
  std::map<std::string, std::vector<std::vector<T>>, std::less<>> reps;  // word -> per-layer vector
  for (const auto& ds : datasets) {
    for (const auto& p : ds.pairs) {
      for (const std::string* w : {&p.word_a, &p.word_b}) {
        if (reps.contains(*w)) continue;
        const ByteSequence bytes = detail::checked_probe_input(*w, params.config());
        const auto taps = all_hidden_activations(params, bytes);
        ++table.extractions;
        std::vector<std::vector<T>> per_layer;
        for (const auto& m : taps) {
          const auto row = m.row(bytes.size() - 1);
          per_layer.emplace_back(row.begin(), row.end());
        }
        reps.emplace(*w, std::move(per_layer));
      }
    }
  }

  std::vector<const WordSimDataset*> sorted;
  for (const auto& ds : datasets) sorted.push_back(&ds);
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const auto* a, const auto* b) { return a->name < b->name; });
  for (const std::size_t l : layers) {
    for (const auto* ds : sorted) {
      const auto score = detail::score_pairs(*ds, [&](const std::string& w) -> const std::vector<T>& {
        return reps.find(w)->second[l - 1];
      });
      table.rows.push_back({l, ds->name, score.rho, score.pairs_used});
    }
  }
  return table;
}

template <class T>
LayerSweepTable layer_sweep(const Parameters<T>& params, const std::vector<WordSimDataset>& datasets,
                            std::string_view layers = "all") {
  return layer_sweep(params, datasets, parse_layers(layers, params.config().num_layers));
}

inline std::string format_sweep_csv(const LayerSweepTable& table) {
  std::string out = "layer,dataset,rho\n";
  for (const auto& r : table.rows) {
    out += std::to_string(r.layer) + "," + r.dataset + "," + detail::format_double(r.rho) + "\n";
  }
  return out;
}

inline void write_sweep_csv(const LayerSweepTable& table, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
  out << format_sweep_csv(table);
  if (!out) fail(ErrorKind::io, "error while writing " + path.string());
}

}  // namespace bytelm
