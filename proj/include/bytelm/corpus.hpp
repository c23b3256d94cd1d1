#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <random>
#include <regex>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "bytelm/error.hpp"
#include "bytelm/random.hpp"

namespace bytelm {

using Byte = std::uint8_t;
using ByteSequence = std::vector<Byte>;
using ByteView = std::span<const Byte>;

inline ByteSequence to_bytes(std::string_view text) {
  return ByteSequence(text.begin(), text.end());
}

struct Shard {
  std::string id;
  std::size_t offset = 0;  // into RawCorpus::stream()
  std::size_t length = 0;
};

/// Text shards held verbatim. Shards are stored back to back in one buffer
/// with a single '\n' between neighbours, which is the stream the window
/// sampler reads.
class RawCorpus {
 public:
  RawCorpus() = default;

  static RawCorpus from_shards(std::vector<std::pair<std::string, ByteSequence>> shards) {
    RawCorpus corpus;
    for (auto& [id, bytes] : shards) corpus.append(std::move(id), bytes);
    return corpus;
  }

  void append(std::string id, ByteView bytes) {
    if (!shards_.empty()) stream_.push_back('\n');
    shards_.push_back(Shard{std::move(id), stream_.size(), bytes.size()});
    stream_.insert(stream_.end(), bytes.begin(), bytes.end());
    total_bytes_ += bytes.size();
  }

  const std::vector<Shard>& shards() const noexcept { return shards_; }

  ByteView shard_bytes(std::size_t index) const {
    const Shard& s = shards_.at(index);
    return ByteView(stream_).subspan(s.offset, s.length);
  }

  /// Concatenation of all shards with the joining newlines.
  ByteView stream() const noexcept { return stream_; }

  /// Sum of shard lengths, excluding joining newlines.
  std::size_t total_bytes() const noexcept { return total_bytes_; }

 private:
  std::vector<Shard> shards_;
  ByteSequence stream_;
  std::size_t total_bytes_ = 0;
};

inline ByteSequence read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open file: " + path.string());
  ByteSequence bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) fail(ErrorKind::io, "error while reading file: " + path.string());
  return bytes;
}

inline RawCorpus load_corpus(const std::vector<std::filesystem::path>& paths) {
  require(!paths.empty(), ErrorKind::argument, "load_corpus: no input files given");
  RawCorpus corpus;
  for (const auto& path : paths) {
    if (!std::filesystem::is_regular_file(path)) {
      fail(ErrorKind::io, "missing or unreadable corpus file: " + path.string());
    }
    corpus.append(path.string(), read_file_bytes(path));
  }
  return corpus;
}

struct CorpusStats {
  std::uint64_t sentence_count = 0;
  std::uint64_t word_count = 0;  // includes one end-of-sentence token per line
  std::uint64_t byte_count = 0;  // includes newline bytes

  CorpusStats& operator+=(const CorpusStats& o) {
    sentence_count += o.sentence_count;
    word_count += o.word_count;
    byte_count += o.byte_count;
    return *this;
  }
  friend CorpusStats operator+(CorpusStats a, const CorpusStats& b) { return a += b; }
  friend bool operator==(const CorpusStats&, const CorpusStats&) = default;
};

/// Counts lines, whitespace-separated tokens plus one EOS token per line,
/// and raw bytes. An unterminated final line still counts as a sentence.
inline CorpusStats corpus_stats(ByteView text) {
  CorpusStats stats;
  stats.byte_count = text.size();
  bool in_token = false;
  bool line_open = false;
  for (const Byte b : text) {
    if (b == '\n') {
      if (in_token) ++stats.word_count;
      ++stats.word_count;  // EOS
      ++stats.sentence_count;
      in_token = false;
      line_open = false;
      continue;
    }
    line_open = true;
    if (b == ' ' || b == '\t') {
      if (in_token) ++stats.word_count;
      in_token = false;
    } else {
      in_token = true;
    }
  }
  if (line_open) {
    if (in_token) ++stats.word_count;
    ++stats.word_count;
    ++stats.sentence_count;
  }
  return stats;
}

inline CorpusStats corpus_stats(const RawCorpus& corpus) {
  CorpusStats total;
  for (std::size_t i = 0; i < corpus.shards().size(); ++i) total += corpus_stats(corpus.shard_bytes(i));
  return total;
}

inline std::string format_stats(const CorpusStats& s) {
  return "sentences=" + std::to_string(s.sentence_count) + " words=" + std::to_string(s.word_count) +
         " bytes=" + std::to_string(s.byte_count);
}

struct WindowBatch {
  std::vector<ByteSequence> windows;
  std::vector<std::size_t> source_offsets;
  std::uint64_t seed = 0;
};

/// Draws `batch_size` windows of `window_len` bytes with replacement, start
/// offsets uniform over [0, len - window_len] of the given stream.
inline WindowBatch sample_windows(ByteView stream, std::size_t window_len, std::size_t batch_size,
                                  std::uint64_t seed) {
  require(window_len >= 1, ErrorKind::argument, "sample_windows: window_len must be >= 1");
  require(batch_size >= 1, ErrorKind::argument, "sample_windows: batch_size must be >= 1");
  if (stream.size() < window_len) {
    fail(ErrorKind::size, "corpus of " + std::to_string(stream.size()) +
                              " bytes is shorter than window_len " + std::to_string(window_len));
  }
  WindowBatch batch;
  batch.seed = seed;
  batch.windows.reserve(batch_size);
  batch.source_offsets.reserve(batch_size);
  std::mt19937_64 rng(seed);
  const std::uint64_t positions = stream.size() - window_len + 1;
  for (std::size_t i = 0; i < batch_size; ++i) {
    const auto offset = static_cast<std::size_t>(uniform_below(rng, positions));
    batch.source_offsets.push_back(offset);
    auto window = stream.subspan(offset, window_len);
    batch.windows.emplace_back(window.begin(), window.end());
  }
  return batch;
}

inline WindowBatch sample_windows(const RawCorpus& corpus, std::size_t window_len,
                                  std::size_t batch_size, std::uint64_t seed) {
  return sample_windows(corpus.stream(), window_len, batch_size, seed);
}

enum class Split { train, dev, test };

namespace detail {

struct ShardName {
  bool holdout = false;
  int index = -1;
  int of = -1;
};

// lm1b names: news.en-00001-of-00100 and news.en.heldout-00000-of-00050
inline std::optional<ShardName> parse_shard_name(std::string_view id) {
  static const std::regex pattern(R"((heldout)?-(\d+)-of-(\d+)$)");
  const std::string name = std::filesystem::path(std::string(id)).filename().string();
  std::smatch m;
  if (!std::regex_search(name, m, pattern)) return std::nullopt;
  ShardName parsed;
  parsed.holdout = m[1].matched;
  parsed.index = std::stoi(m[2].str());
  parsed.of = std::stoi(m[3].str());
  return parsed;
}

}  // namespace detail

/// Sub-corpus for a split under the lm1b layout: train is training shards
/// 01-99, test is holdout piece 00, dev is holdout piece 01.
inline RawCorpus select_split(const RawCorpus& corpus, Split split) {
  RawCorpus selected;
  for (std::size_t i = 0; i < corpus.shards().size(); ++i) {
    const auto name = detail::parse_shard_name(corpus.shards()[i].id);
    if (!name) continue;
    bool keep = false;
    switch (split) {
      case Split::train: keep = !name->holdout && name->index >= 1 && name->index <= 99; break;
      case Split::test: keep = name->holdout && name->index == 0; break;
      case Split::dev: keep = name->holdout && name->index == 1; break;
    }
    if (keep) selected.append(corpus.shards()[i].id, corpus.shard_bytes(i));
  }
  if (selected.shards().empty()) {
    std::string available;
    for (const auto& s : corpus.shards()) available += (available.empty() ? "" : ", ") + s.id;
    const char* wanted = split == Split::train ? "train" : split == Split::dev ? "dev" : "test";
    fail(ErrorKind::structure, std::string("no shard for split '") + wanted +
                                   "'; available shards: [" + available + "]");
  }
  return selected;
}

}  // namespace bytelm
