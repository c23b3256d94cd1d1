#pragma once

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "bytelm/error.hpp"

namespace bytelm {

inline constexpr std::size_t kVocabSize = 256;

struct ModelConfig {
  std::size_t num_layers = 4;
  std::size_t hidden_size = 128;
  std::size_t filter_size = 512;
  std::size_t num_heads = 4;
  std::size_t embed_dim = 64;
  std::size_t context_len = 256;
  double dropout_rate = 0.0;

  /// 40 layers, hidden 1024, filter 8192, 16 heads, 256-wide byte embeddings.
  static ModelConfig full_scale() {
    return ModelConfig{40, 1024, 8192, 16, 256, 512, 0.3};
  }
  static ModelConfig desk() { return ModelConfig{}; }

  std::size_t head_dim() const { return hidden_size / num_heads; }

  void validate() const {
    require(hidden_size >= 1 && filter_size >= 1 && embed_dim >= 1, ErrorKind::config,
            "hidden_size, filter_size and embed_dim must be >= 1");
    require(num_heads >= 1 && hidden_size % num_heads == 0, ErrorKind::config,
            "hidden_size " + std::to_string(hidden_size) + " is not divisible by num_heads " +
                std::to_string(num_heads));
    require(context_len >= 1, ErrorKind::config, "context_len must be >= 1");
    require(dropout_rate >= 0.0 && dropout_rate < 1.0, ErrorKind::config,
            "dropout_rate must lie in [0, 1)");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct TrainConfig {
  double initial_lr = 1e-3;
  double decay_factor = 0.99;
  std::uint64_t decay_every = 10'000;
  std::uint64_t total_steps = 1'000;
  std::size_t batch_size = 32;
  std::size_t window_len = 256;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::uint64_t seed = 1;

  static TrainConfig full_scale() {
    TrainConfig c;
    c.initial_lr = 1e-4;
    c.total_steps = 2'000'000;
    c.batch_size = 1024;
    c.window_len = 512;
    return c;
  }
  static TrainConfig desk() { return TrainConfig{}; }

  void validate() const {
    require(initial_lr > 0.0, ErrorKind::config, "initial_lr must be > 0");
    require(decay_factor > 0.0 && decay_factor <= 1.0, ErrorKind::config,
            "decay_factor must lie in (0, 1]");
    require(decay_every >= 1, ErrorKind::config, "decay_every must be >= 1");
    require(batch_size >= 1, ErrorKind::config, "batch_size must be >= 1");
    require(window_len >= 2, ErrorKind::config, "window_len must be >= 2");
    require(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0,
            ErrorKind::config, "adam betas must lie in [0, 1)");
    require(adam_epsilon > 0.0, ErrorKind::config, "adam_epsilon must be > 0");
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// ---------------------------------------------------------------------------
// key=value text

/// Ordered key=value settings. Later assignments replace earlier ones.
using Settings = std::map<std::string, std::string, std::less<>>;

inline std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

/// Parses `key=value` lines; blank lines and `#` comments are ignored.
inline Settings parse_settings(std::string_view text, std::string_view origin = "config") {
  Settings out;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos || trim(line.substr(0, eq)).empty()) {
      fail(ErrorKind::parse, std::string(origin) + ":" + std::to_string(line_no) +
                                 ": expected key=value, got '" + std::string(line) + "'");
    }
    out[std::string(trim(line.substr(0, eq)))] = std::string(trim(line.substr(eq + 1)));
  }
  return out;
}

namespace detail {

template <class T>
T parse_number(std::string_view key, std::string_view value) {
  T out{};
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc{} || ptr != end) {
    fail(ErrorKind::config, "invalid value for " + std::string(key) + ": '" + std::string(value) + "'");
  }
  return out;
}

inline std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace detail

inline const std::vector<std::string_view>& model_config_keys() {
  static const std::vector<std::string_view> keys = {
      "num_layers", "hidden_size", "filter_size", "num_heads",
      "embed_dim",  "context_len", "dropout_rate"};
  return keys;
}

inline const std::vector<std::string_view>& train_config_keys() {
  static const std::vector<std::string_view> keys = {
      "initial_lr", "decay_factor", "decay_every", "total_steps", "batch_size",
      "window_len", "adam_beta1",   "adam_beta2",  "adam_epsilon", "seed"};
  return keys;
}

/// Applies the recognised keys in `settings` onto the configs. Keys that
/// belong to neither config are left alone for the caller to check.
inline void apply_settings(const Settings& settings, ModelConfig& model, TrainConfig& train) {
  using detail::parse_number;
  for (const auto& [key, value] : settings) {
    if (key == "num_layers") model.num_layers = parse_number<std::size_t>(key, value);
    else if (key == "hidden_size") model.hidden_size = parse_number<std::size_t>(key, value);
    else if (key == "filter_size") model.filter_size = parse_number<std::size_t>(key, value);
    else if (key == "num_heads") model.num_heads = parse_number<std::size_t>(key, value);
    else if (key == "embed_dim") model.embed_dim = parse_number<std::size_t>(key, value);
    else if (key == "context_len") model.context_len = parse_number<std::size_t>(key, value);
    else if (key == "dropout_rate") model.dropout_rate = parse_number<double>(key, value);
    else if (key == "initial_lr") train.initial_lr = parse_number<double>(key, value);
    else if (key == "decay_factor") train.decay_factor = parse_number<double>(key, value);
    else if (key == "decay_every") train.decay_every = parse_number<std::uint64_t>(key, value);
    else if (key == "total_steps") train.total_steps = parse_number<std::uint64_t>(key, value);
    else if (key == "batch_size") train.batch_size = parse_number<std::size_t>(key, value);
    else if (key == "window_len") train.window_len = parse_number<std::size_t>(key, value);
    else if (key == "adam_beta1") train.adam_beta1 = parse_number<double>(key, value);
    else if (key == "adam_beta2") train.adam_beta2 = parse_number<double>(key, value);
    else if (key == "adam_epsilon") train.adam_epsilon = parse_number<double>(key, value);
    else if (key == "seed") train.seed = parse_number<std::uint64_t>(key, value);
  }
}

inline Settings to_settings(const ModelConfig& m) {
  using detail::format_double;
  return {{"num_layers", std::to_string(m.num_layers)},
          {"hidden_size", std::to_string(m.hidden_size)},
          {"filter_size", std::to_string(m.filter_size)},
          {"num_heads", std::to_string(m.num_heads)},
          {"embed_dim", std::to_string(m.embed_dim)},
          {"context_len", std::to_string(m.context_len)},
          {"dropout_rate", format_double(m.dropout_rate)}};
}

inline Settings to_settings(const TrainConfig& t) {
  using detail::format_double;
  return {{"initial_lr", format_double(t.initial_lr)},
          {"decay_factor", format_double(t.decay_factor)},
          {"decay_every", std::to_string(t.decay_every)},
          {"total_steps", std::to_string(t.total_steps)},
          {"batch_size", std::to_string(t.batch_size)},
          {"window_len", std::to_string(t.window_len)},
          {"adam_beta1", format_double(t.adam_beta1)},
          {"adam_beta2", format_double(t.adam_beta2)},
          {"adam_epsilon", format_double(t.adam_epsilon)},
          {"seed", std::to_string(t.seed)}};
}

inline std::string format_settings(const Settings& settings) {
  std::string out;
  for (const auto& [k, v] : settings) out += k + "=" + v + "\n";
  return out;
}

}  // namespace bytelm
