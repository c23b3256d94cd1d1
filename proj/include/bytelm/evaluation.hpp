#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <limits>
#include <mutex>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <string>
#include <thread>
#include <vector>

#include "bytelm/corpus.hpp"
#include "bytelm/error.hpp"
#include "bytelm/model.hpp"
#include "bytelm/parameters.hpp"

namespace bytelm {

/// Byte that conditions the very first corpus byte.
inline constexpr Byte kFirstByteContext = '\n';

/// Neumaier-compensated running sum.
class CompensatedSum {
 public:
  void add(double x) {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x)) {
      compensation_ += (sum_ - t) + x;
    } else {
      compensation_ += (x - t) + sum_;
    }
    sum_ = t;
  }
  double value() const { return sum_ + compensation_; }

 private:
  double sum_ = 0.0;
  double compensation_ = 0.0;
};

/// One model invocation of the strided scorer. Positions refer to the
/// scoring stream, which is the corpus with kFirstByteContext prepended:
/// the window reads stream[begin, begin + length) and row r predicts
/// stream[begin + r + 1]. Rows [score_from, length) are scored.
struct ScoringWindow {
  std::size_t begin = 0;
  std::size_t length = 0;
  std::size_t score_from = 0;

  std::size_t scored() const { return length - score_from; }
};

/// Windows for a corpus of `corpus_len` bytes with context c and stride s.
/// Windows start at 0, s, 2s, ...; the first scores every row and later
/// ones their last s rows. A final window that would run past the end is
/// right-aligned and scores only what is still unscored.
inline std::vector<ScoringWindow> plan_windows(std::size_t corpus_len, std::size_t context,
                                               std::size_t stride) {
  require(corpus_len >= 1, ErrorKind::argument, "cannot score an empty corpus");
  require(context >= 1, ErrorKind::argument, "context must be >= 1");
  if (stride < 1 || stride > context) {
    fail(ErrorKind::argument, "stride " + std::to_string(stride) + " must lie in [1, context=" +
                                  std::to_string(context) + "]");
  }
  std::vector<ScoringWindow> plan;
  if (corpus_len <= context) {
    plan.push_back({0, corpus_len, 0});
    return plan;
  }
  plan.push_back({0, context, 0});
  std::size_t scored_through = context;  // last scored stream position
  for (std::size_t k = 1; scored_through < corpus_len; ++k) {
    std::size_t begin = k * stride;
    if (begin + context > corpus_len) begin = corpus_len - context;
    plan.push_back({begin, context, scored_through - begin});
    scored_through = begin + context;
  }
  return plan;
}

struct ScoreReport {
  double total_bits = 0.0;
  std::uint64_t scored_bytes = 0;
  std::size_t stride = 0;
  std::size_t context_len = 0;
  double bpb = 0.0;
  std::uint64_t word_count = 0;
  double perplexity = std::numeric_limits<double>::quiet_NaN();
  std::size_t windows = 0;
  std::string summation_order = "compensated, per window then in window order";
};

/// 2 ^ ((bytes / words) * bpb)
inline double bpb_to_ppl(double bpb, std::uint64_t byte_count, std::uint64_t word_count) {
  require(word_count >= 1, ErrorKind::argument, "bpb_to_ppl: word_count must be >= 1");
  require(bpb >= 0.0, ErrorKind::argument, "bpb_to_ppl: bpb must be >= 0");
  return std::exp2(static_cast<double>(byte_count) / static_cast<double>(word_count) * bpb);
}

/// Same information counted per byte instead of per word.
inline double bits_per_word_to_bpb(double bits_per_word, std::uint64_t byte_count,
                                   std::uint64_t word_count) {
  require(byte_count >= 1, ErrorKind::argument, "bits_per_word_to_bpb: byte_count must be >= 1");
  return bits_per_word * static_cast<double>(word_count) / static_cast<double>(byte_count);
}

inline double bpb_to_bits_per_word(double bpb, std::uint64_t byte_count, std::uint64_t word_count) {
  require(word_count >= 1, ErrorKind::argument, "bpb_to_bits_per_word: word_count must be >= 1");
  return bpb * static_cast<double>(byte_count) / static_cast<double>(word_count);
}

/// Fills word_count and perplexity.
inline ScoreReport with_word_count(ScoreReport report, std::uint64_t word_count) {
  report.word_count = word_count;
  report.perplexity = bpb_to_ppl(report.bpb, report.scored_bytes, word_count);
  return report;
}

/// -log2 P(target | row) for one logits row.
template <class T>
double information_bits(std::span<const T> logits, Byte target) {
  double mx = static_cast<double>(logits[0]);
  for (const T v : logits) mx = std::max(mx, static_cast<double>(v));
  double sum = 0.0;
  for (const T v : logits) sum += std::exp(static_cast<double>(v) - mx);
  return (mx + std::log(sum) - static_cast<double>(logits[target])) / std::numbers::ln2;
}

/// Strided windowed scoring of every corpus byte exactly once. Windows may
/// be scored on `threads` workers; the total is the same for any count.
template <class T>
ScoreReport windowed_score(const Parameters<T>& params, ByteView corpus, std::size_t context,
                           std::size_t stride, unsigned threads = 1) {
  if (context > params.config().context_len) {
    fail(ErrorKind::argument, "context " + std::to_string(context) + " exceeds the model's context_len " +
                                  std::to_string(params.config().context_len));
  }
  const auto plan = plan_windows(corpus.size(), context, stride);
  ByteSequence stream;
  stream.reserve(corpus.size() + 1);
  stream.push_back(kFirstByteContext);
  stream.insert(stream.end(), corpus.begin(), corpus.end());

  std::vector<double> partial(plan.size(), 0.0);
  auto score_window = [&](std::size_t w) {
    const ScoringWindow& win = plan[w];
    const Matrix<T> logits = forward(params, ByteView(stream).subspan(win.begin, win.length));
    CompensatedSum sum;
    for (std::size_t r = win.score_from; r < win.length; ++r) {
      sum.add(information_bits<T>(logits.row(r), stream[win.begin + r + 1]));
    }
    partial[w] = sum.value();
  };

  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(plan.size())));
  if (threads == 1) {
    for (std::size_t w = 0; w < plan.size(); ++w) score_window(w);
  } else {
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    {
      std::vector<std::jthread> workers;
      for (unsigned t = 0; t < threads; ++t) {
        workers.emplace_back([&] {
          try {
            for (std::size_t w; (w = next.fetch_add(1)) < plan.size();) score_window(w);
          } catch (...) {
            std::lock_guard lock(error_mutex);
            if (!error) error = std::current_exception();
          }
        });
      }
    }
    if (error) std::rethrow_exception(error);
  }

  ScoreReport report;
  CompensatedSum total;
  for (std::size_t w = 0; w < plan.size(); ++w) {
    total.add(partial[w]);
    report.scored_bytes += plan[w].scored();
  }
  report.total_bits = total.value();
  report.stride = stride;
  report.context_len = context;
  report.windows = plan.size();
  report.bpb = report.total_bits / static_cast<double>(report.scored_bytes);
  return report;
}

}  // namespace bytelm
