#pragma once

#include <array>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "bytelm/config.hpp"
#include "bytelm/corpus.hpp"
#include "bytelm/error.hpp"
#include "bytelm/model.hpp"
#include "bytelm/parameters.hpp"
#include "bytelm/random.hpp"

namespace bytelm {

namespace detail {

// Mean of -log2 softmax(logits_i)[target_i]. When `dlogits` is given it
// receives the gradient of that mean with respect to the logits.
template <class T>
double bits_and_gradient(const Matrix<T>& logits, ByteView targets, Matrix<T>* dlogits) {
  if (logits.rows != targets.size() || logits.cols != kVocabSize) {
    fail(ErrorKind::alignment, "logits have " + std::to_string(logits.rows) + " rows but " +
                                   std::to_string(targets.size()) + " targets were given");
  }
  require(!targets.empty(), ErrorKind::alignment, "loss needs at least one target");
  const double n = static_cast<double>(targets.size());
  if (dlogits) dlogits->reshape(logits.rows, kVocabSize);
  double total_nats = 0.0;
  for (std::size_t i = 0; i < logits.rows; ++i) {
    const T* row = logits.row_ptr(i);
    double mx = static_cast<double>(row[0]);
    for (std::size_t j = 0; j < kVocabSize; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    std::array<double, kVocabSize> e{};
    double sum = 0.0;
    for (std::size_t j = 0; j < kVocabSize; ++j) {
      e[j] = std::exp(static_cast<double>(row[j]) - mx);
      sum += e[j];
    }
    total_nats += mx + std::log(sum) - static_cast<double>(row[targets[i]]);
    if (dlogits) {
      const double scale = 1.0 / (n * std::numbers::ln2);
      T* dr = dlogits->row_ptr(i);
      for (std::size_t j = 0; j < kVocabSize; ++j) {
        dr[j] = static_cast<T>((e[j] / sum - (j == targets[i] ? 1.0 : 0.0)) * scale);
      }
    }
  }
  return total_nats / (n * std::numbers::ln2);
}

}  // namespace detail

/// Mean information in bits per scored position. Row i of `logits` must be
/// the prediction for `targets[i]`.
template <class T>
double bits_per_byte_loss(const Matrix<T>& logits, ByteView targets) {
  return detail::bits_and_gradient<T>(logits, targets, nullptr);
}

/// initial_lr * decay_factor ^ floor(step / decay_every), rounded to 15
/// significant digits so that 1e-4 * 0.99 is 9.9e-5 rather than the
/// product's binary rounding 9.900000000000001e-05.
inline double learning_rate(std::uint64_t step, const TrainConfig& cfg) {
  const auto decays = static_cast<double>(step / cfg.decay_every);
  const double exact = cfg.initial_lr * std::pow(cfg.decay_factor, decays);
  char buf[32];
  const auto end = std::to_chars(buf, buf + sizeof buf, exact, std::chars_format::general, 15).ptr;
  double rounded = exact;
  std::from_chars(buf, end, rounded);
  return rounded;
}

template <class T>
struct OptimizerState {
  std::uint64_t step = 0;
  Parameters<T> first_moment;
  Parameters<T> second_moment;

  static OptimizerState fresh(const ModelConfig& cfg) {
    return OptimizerState{0, Parameters<T>::zeros(cfg), Parameters<T>::zeros(cfg)};
  }
};

/// One bias-corrected Adam update at rate `lr`; increments the step.
template <class T>
void adam_update(Parameters<T>& params, const Parameters<T>& grads, OptimizerState<T>& opt,
                 double lr, const TrainConfig& cfg) {
  opt.step += 1;
  const double t = static_cast<double>(opt.step);
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, t);
  const double c2 = 1.0 - std::pow(b2, t);
  auto& pt = params.tensors();
  for (std::size_t i = 0; i < pt.size(); ++i) {
    T* p = pt[i].ptr();
    const T* g = grads.tensors()[i].ptr();
    T* m = opt.first_moment.tensors()[i].ptr();
    T* v = opt.second_moment.tensors()[i].ptr();
    for (std::size_t j = 0; j < pt[i].size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      const double mj = b1 * static_cast<double>(m[j]) + (1.0 - b1) * gj;
      const double vj = b2 * static_cast<double>(v[j]) + (1.0 - b2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double step = lr * (mj / c1) / (std::sqrt(vj / c2) + cfg.adam_epsilon);
      p[j] = static_cast<T>(static_cast<double>(p[j]) - step);
    }
  }
}

/// Mean bits over positions 1..n-1 of every window (position 0 is context
/// only); accumulates the gradient into `grads`.
template <class T>
double loss_and_gradient(const Parameters<T>& params, const WindowBatch& batch, Mode mode,
                         std::uint64_t dropout_seed, Parameters<T>& grads) {
  require(!batch.windows.empty(), ErrorKind::argument, "empty batch");
  const std::size_t n = batch.windows.front().size();
  require(n >= 2, ErrorKind::length, "training windows need at least two bytes");
  const std::size_t seq = n - 1;
  detail::check_input_length(seq, params.config());
  ByteSequence inputs, targets;
  inputs.reserve(batch.windows.size() * seq);
  targets.reserve(batch.windows.size() * seq);
  for (const auto& w : batch.windows) {
    require(w.size() == n, ErrorKind::length, "windows in a batch must share one length");
    inputs.insert(inputs.end(), w.begin(), w.end() - 1);
    targets.insert(targets.end(), w.begin() + 1, w.end());
  }
  thread_local detail::ForwardCache<T> cache;  // reused so steps do not re-allocate activations
  thread_local Matrix<T> dlogits;
  const Matrix<T> logits =
      detail::forward<T>(params, inputs, batch.windows.size(), seq, mode, dropout_seed, &cache);
  const double bits = detail::bits_and_gradient<T>(logits, targets, &dlogits);
  detail::backward<T>(params, cache, dlogits, grads);
  return bits;
}

/// Eval-mode mean bits over positions 1..n-1 of every window.
template <class T>
double batch_bits(const Parameters<T>& params, const WindowBatch& batch) {
  double total = 0.0;
  for (const auto& w : batch.windows) {
    const ByteView bytes(w);
    const Matrix<T> logits = forward(params, bytes.first(bytes.size() - 1));
    total += bits_per_byte_loss(logits, bytes.subspan(1));
  }
  return total / static_cast<double>(batch.windows.size());
}

/// The batch for `step`, a pure function of (cfg.seed, step), so a run can
/// resume from any checkpoint without sampler state.
inline WindowBatch training_batch(const RawCorpus& corpus, const TrainConfig& cfg,
                                  std::uint64_t step) {
  const std::uint64_t seed = mix_seed(mix_seed(cfg.seed, 0x73616d706c65ULL), step);
  return sample_windows(corpus, cfg.window_len, cfg.batch_size, seed);
}

struct StepResult {
  double loss_bits = 0.0;  // before the update
  double learning_rate = 0.0;
};

/// One Adam step on the batch at learning_rate(opt.step). Dropout masks are
/// seeded from (cfg.seed, opt.step). Throws a numeric error, leaving the
/// parameters untouched, if the loss or any gradient is not finite.
template <class T>
StepResult train_step(Parameters<T>& params, OptimizerState<T>& opt, const WindowBatch& batch,
                      const TrainConfig& cfg) {
  Parameters<T> grads = Parameters<T>::zeros(params.config());
  const double loss =
      loss_and_gradient(params, batch, Mode::train, mix_seed(cfg.seed, opt.step), grads);
  if (!std::isfinite(loss)) {
    fail(ErrorKind::numeric, "non-finite loss at step " + std::to_string(opt.step));
  }
  for (const auto& t : grads.tensors()) {
    for (const T g : t.data) {
      if (!std::isfinite(static_cast<double>(g))) {
        fail(ErrorKind::numeric, "non-finite gradient in '" + t.name + "' at step " +
                                     std::to_string(opt.step) + " (loss " + std::to_string(loss) + ")");
      }
    }
  }
  const double lr = learning_rate(opt.step, cfg);
  adam_update(params, grads, opt, lr, cfg);
  return StepResult{loss, lr};
}

struct GradientCheckResult {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t kink_resamples = 0;
  std::string worst_tensor;
};

namespace detail {

// Sign pattern of every relu input, used to detect finite-difference steps
// that straddle a kink.
template <class T>
std::vector<bool> relu_pattern(const Parameters<T>& params, ByteView context) {
  ForwardCache<T> cache;
  forward<T>(params, context, 1, context.size(), Mode::eval, 0, &cache);
  std::vector<bool> pattern;
  for (const auto& layer : cache.layers)
    for (const T u : layer.pre_relu.data) pattern.push_back(u > T(0));
  return pattern;
}

}  // namespace detail

/// Compares backprop against central differences (step 1e-4) at
/// `coordinates` parameter entries drawn uniformly over all parameters, in
/// extended precision. The loss is the eval-mode bits per byte of input[1..]
/// given the preceding bytes. A coordinate whose +-step flips any relu is
/// not differentiable at that scale and is redrawn.
inline GradientCheckResult gradient_check(const ModelConfig& config, ByteView input,
                                          std::uint64_t seed, std::size_t coordinates = 200,
                                          double step = 1e-4) {
  using Real = long double;
  require(coordinates >= 1, ErrorKind::argument, "gradient_check needs at least one coordinate");
  require(input.size() >= 2, ErrorKind::argument, "gradient_check needs at least two input bytes");
  Parameters<Real> params = init_parameters<Real>(config, seed);
  const ByteView context = input.first(input.size() - 1);
  const ByteView targets = input.subspan(1);

  Parameters<Real> grads = Parameters<Real>::zeros(config);
  {
    detail::ForwardCache<Real> cache;
    const auto logits = detail::forward<Real>(params, context, 1, context.size(), Mode::eval, 0, &cache);
    Matrix<Real> dlogits;
    detail::bits_and_gradient<Real>(logits, targets, &dlogits);
    detail::backward<Real>(params, cache, dlogits, grads);
  }
  auto loss = [&] {
    // total nats in extended precision; bits_per_byte_loss rounds through double
    const Matrix<Real> logits = forward(params, context);
    Real total = 0;
    for (std::size_t i = 0; i < logits.rows; ++i) {
      const Real* row = logits.row_ptr(i);
      Real mx = row[0];
      for (std::size_t j = 0; j < kVocabSize; ++j) mx = std::max(mx, row[j]);
      Real sum = 0;
      for (std::size_t j = 0; j < kVocabSize; ++j) sum += std::exp(row[j] - mx);
      total += mx + std::log(sum) - row[targets[i]];
    }
    return total / (static_cast<Real>(targets.size()) * std::numbers::ln2_v<Real>);
  };
  const std::vector<bool> base_pattern = detail::relu_pattern(params, context);

  std::mt19937_64 rng(mix_seed(seed, 0x6772616463686bULL));
  const std::uint64_t total = params.element_count();
  const Real h = static_cast<Real>(step);
  GradientCheckResult result;
  std::size_t draws = 0;
  while (result.coordinates < coordinates) {
    require(++draws <= 100 * coordinates, ErrorKind::numeric,
            "gradient_check: too many coordinates straddle relu kinks");
    std::uint64_t flat = uniform_below(rng, total);
    std::size_t ti = 0;
    while (flat >= params.tensors()[ti].size()) flat -= params.tensors()[ti++].size();
    Real& w = params.tensors()[ti].data[flat];
    const Real saved = w;
    w = saved + h;
    const Real up = loss();
    const bool up_kink = detail::relu_pattern(params, context) != base_pattern;
    w = saved - h;
    const Real down = loss();
    const bool down_kink = detail::relu_pattern(params, context) != base_pattern;
    w = saved;
    if (up_kink || down_kink) {
      ++result.kink_resamples;
      continue;
    }
    const double numeric = static_cast<double>((up - down) / (2 * h));
    const double analytic = static_cast<double>(grads.tensors()[ti].data[flat]);
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    const double rel = std::abs(analytic - numeric) / denom;
    if (rel >= result.max_relative_error) {
      result.max_relative_error = rel;
      result.worst_tensor = params.tensors()[ti].name;
    }
    ++result.coordinates;
  }
  return result;
}

}  // namespace bytelm
