#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "bytelm/config.hpp"
#include "bytelm/error.hpp"
#include "bytelm/random.hpp"

namespace bytelm {

template <class T>
struct Tensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<T> data;

  std::size_t size() const noexcept { return data.size(); }
  T* ptr() noexcept { return data.data(); }
  const T* ptr() const noexcept { return data.data(); }
};

enum class InitRule { scaled_normal, ones, zeros };

struct TensorSpec {
  std::string name;
  std::vector<std::size_t> shape;
  InitRule init = InitRule::zeros;

  std::size_t elements() const {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
  }
};

/// Slots of the 16 tensors each transformer layer owns, in storage order.
enum LayerSlot : std::size_t {
  kAttnNormGain,
  kAttnNormBias,
  kQueryWeight,
  kQueryBias,
  kKeyWeight,
  kKeyBias,
  kValueWeight,
  kValueBias,
  kAttnOutWeight,
  kAttnOutBias,
  kFfnNormGain,
  kFfnNormBias,
  kFfnInWeight,
  kFfnInBias,
  kFfnOutWeight,
  kFfnOutBias,
  kLayerSlotCount,
};

inline constexpr std::size_t kLeadingTensors = 4;  // embedding, projection w/b, positions

/// The full tensor shape schedule for a config, in storage order. Weight
/// matrices are stored [fan_in x fan_out], row-major.
inline std::vector<TensorSpec> tensor_schedule(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t h = cfg.hidden_size, f = cfg.filter_size, e = cfg.embed_dim;
  std::vector<TensorSpec> specs;
  specs.push_back({"byte_embedding", {kVocabSize, e}, InitRule::scaled_normal});
  specs.push_back({"embed_projection.weight", {e, h}, InitRule::scaled_normal});
  specs.push_back({"embed_projection.bias", {h}, InitRule::zeros});
  specs.push_back({"position_embedding", {cfg.context_len, h}, InitRule::scaled_normal});
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    specs.push_back({p + "attn_norm.gain", {h}, InitRule::ones});
    specs.push_back({p + "attn_norm.bias", {h}, InitRule::zeros});
    for (const char* proj : {"query", "key", "value", "output"}) {
      specs.push_back({p + "attn." + proj + ".weight", {h, h}, InitRule::scaled_normal});
      specs.push_back({p + "attn." + proj + ".bias", {h}, InitRule::zeros});
    }
    specs.push_back({p + "ffn_norm.gain", {h}, InitRule::ones});
    specs.push_back({p + "ffn_norm.bias", {h}, InitRule::zeros});
    specs.push_back({p + "ffn.in.weight", {h, f}, InitRule::scaled_normal});
    specs.push_back({p + "ffn.in.bias", {f}, InitRule::zeros});
    specs.push_back({p + "ffn.out.weight", {f, h}, InitRule::scaled_normal});
    specs.push_back({p + "ffn.out.bias", {h}, InitRule::zeros});
  }
  specs.push_back({"final_norm.gain", {h}, InitRule::ones});
  specs.push_back({"final_norm.bias", {h}, InitRule::zeros});
  specs.push_back({"output_head.weight", {h, kVocabSize}, InitRule::scaled_normal});
  specs.push_back({"output_head.bias", {kVocabSize}, InitRule::zeros});
  return specs;
}

struct ParameterCount {
  std::uint64_t byte_embedding = 0;
  std::uint64_t embed_projection = 0;
  std::uint64_t position_embedding = 0;
  std::uint64_t per_layer = 0;
  std::uint64_t layers = 0;
  std::uint64_t final_norm = 0;
  std::uint64_t output_head = 0;
  std::uint64_t total = 0;
};

/// Closed-form parameter counts. For the 40-layer full-scale config this gives
/// 840,674,560 in total and 65,536 byte-embedding weights.
inline ParameterCount count_parameters(const ModelConfig& cfg) {
  cfg.validate();
  const std::uint64_t h = cfg.hidden_size, f = cfg.filter_size, e = cfg.embed_dim;
  const std::uint64_t v = kVocabSize;
  ParameterCount c;
  c.byte_embedding = v * e;
  c.embed_projection = e * h + h;
  c.position_embedding = cfg.context_len * h;
  c.per_layer = 4 * (h * h + h)  // attention projections
                + (h * f + f) + (f * h + h)  // feed-forward
                + 4 * h;  // two norms
  c.layers = c.per_layer * cfg.num_layers;
  c.final_norm = 2 * h;
  c.output_head = h * v + v;
  c.total = c.byte_embedding + c.embed_projection + c.position_embedding + c.layers +
            c.final_norm + c.output_head;
  return c;
}

/// Named tensor store for a model. Gradients and Adam moments use the same
/// type so that every buffer is congruent with the weights.
template <class T>
class Parameters {
 public:
  Parameters() = default;

  /// All tensors allocated and zero-filled.
  static Parameters zeros(const ModelConfig& cfg) {
    Parameters p;
    p.config_ = cfg;
    for (auto& spec : tensor_schedule(cfg)) {
      p.tensors_.push_back(Tensor<T>{spec.name, spec.shape, std::vector<T>(spec.elements(), T(0))});
    }
    return p;
  }

  /// Adopts existing tensors; throws a consistency error if they do not
  /// match the schedule of `cfg`.
  static Parameters from_tensors(const ModelConfig& cfg, std::vector<Tensor<T>> tensors) {
    Parameters p;
    p.config_ = cfg;
    p.tensors_ = std::move(tensors);
    p.check_consistency();
    return p;
  }

  const ModelConfig& config() const noexcept { return config_; }
  std::vector<Tensor<T>>& tensors() noexcept { return tensors_; }
  const std::vector<Tensor<T>>& tensors() const noexcept { return tensors_; }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
  }

  Tensor<T>& byte_embedding() { return tensors_[0]; }
  const Tensor<T>& byte_embedding() const { return tensors_[0]; }
  Tensor<T>& embed_projection_weight() { return tensors_[1]; }
  const Tensor<T>& embed_projection_weight() const { return tensors_[1]; }
  Tensor<T>& embed_projection_bias() { return tensors_[2]; }
  const Tensor<T>& embed_projection_bias() const { return tensors_[2]; }
  Tensor<T>& position_embedding() { return tensors_[3]; }
  const Tensor<T>& position_embedding() const { return tensors_[3]; }

  Tensor<T>& layer(std::size_t l, LayerSlot slot) { return tensors_[layer_index(l, slot)]; }
  const Tensor<T>& layer(std::size_t l, LayerSlot slot) const {
    return tensors_[layer_index(l, slot)];
  }

  Tensor<T>& final_norm_gain() { return tensors_[tail(0)]; }
  const Tensor<T>& final_norm_gain() const { return tensors_[tail(0)]; }
  Tensor<T>& final_norm_bias() { return tensors_[tail(1)]; }
  const Tensor<T>& final_norm_bias() const { return tensors_[tail(1)]; }
  Tensor<T>& output_head_weight() { return tensors_[tail(2)]; }
  const Tensor<T>& output_head_weight() const { return tensors_[tail(2)]; }
  Tensor<T>& output_head_bias() { return tensors_[tail(3)]; }
  const Tensor<T>& output_head_bias() const { return tensors_[tail(3)]; }

  const Tensor<T>* find(std::string_view name) const {
    for (const auto& t : tensors_)
      if (t.name == name) return &t;
    return nullptr;
  }

  template <class U>
  Parameters<U> cast() const {
    Parameters<U> out = Parameters<U>::zeros(config_);
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
      std::transform(tensors_[i].data.begin(), tensors_[i].data.end(), out.tensors()[i].data.begin(),
                     [](T v) { return static_cast<U>(v); });
    }
    return out;
  }

  void fill(T value) {
    for (auto& t : tensors_) std::fill(t.data.begin(), t.data.end(), value);
  }

  bool all_finite() const {
    for (const auto& t : tensors_)
      for (T v : t.data)
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  /// Checks every tensor name and shape against the schedule of `config()`.
  void check_consistency() const {
    const auto specs = tensor_schedule(config_);
    require(specs.size() == tensors_.size(), ErrorKind::consistency,
            "expected " + std::to_string(specs.size()) + " tensors for the config, found " +
                std::to_string(tensors_.size()));
    for (std::size_t i = 0; i < specs.size(); ++i) {
      const auto& t = tensors_[i];
      require(t.name == specs[i].name, ErrorKind::consistency,
              "tensor " + std::to_string(i) + " is '" + t.name + "', expected '" + specs[i].name + "'");
      require(t.shape == specs[i].shape && t.size() == specs[i].elements(), ErrorKind::consistency,
              "tensor '" + t.name + "' has a shape that disagrees with the model config");
    }
  }

  friend bool operator==(const Parameters& a, const Parameters& b) {
    if (!(a.config_ == b.config_) || a.tensors_.size() != b.tensors_.size()) return false;
    for (std::size_t i = 0; i < a.tensors_.size(); ++i) {
      const auto& x = a.tensors_[i];
      const auto& y = b.tensors_[i];
      if (x.name != y.name || x.shape != y.shape || x.data != y.data) return false;
    }
    return true;
  }

 private:
  static std::size_t layer_index(std::size_t l, LayerSlot slot) {
    return kLeadingTensors + l * kLayerSlotCount + slot;
  }
  std::size_t tail(std::size_t k) const {
    return kLeadingTensors + config_.num_layers * kLayerSlotCount + k;
  }

  ModelConfig config_{};
  std::vector<Tensor<T>> tensors_;
};

/// Weights drawn from a normal truncated at two standard deviations and
/// scaled by 1/sqrt(fan_in), where fan_in is the leading dimension; norm
/// gains start at one and biases at zero. Values are drawn in double, so
/// float and double parameter sets from the same seed agree up to rounding.
template <class T>
Parameters<T> init_parameters(const ModelConfig& cfg, std::uint64_t seed) {
  const auto specs = tensor_schedule(cfg);
  Parameters<T> params = Parameters<T>::zeros(cfg);
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < specs.size(); ++i) {
    auto& data = params.tensors()[i].data;
    switch (specs[i].init) {
      case InitRule::ones:
        std::fill(data.begin(), data.end(), T(1));
        break;
      case InitRule::zeros:
        break;
      case InitRule::scaled_normal: {
        const double scale = 1.0 / std::sqrt(static_cast<double>(specs[i].shape.front()));
        for (auto& v : data) v = static_cast<T>(scale * truncated_normal(rng));
        break;
      }
    }
  }
  return params;
}

}  // namespace bytelm
