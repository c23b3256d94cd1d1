#pragma once

#include <random>
#include <string>

#include "bytelm/corpus.hpp"
#include "bytelm/error.hpp"
#include "bytelm/parameters.hpp"
#include "bytelm/random.hpp"

namespace fixtures {

inline bytelm::ModelConfig tiny_config() {
  bytelm::ModelConfig c;
  c.num_layers = 2;
  c.hidden_size = 16;
  c.filter_size = 32;
  c.num_heads = 2;
  c.embed_dim = 8;
  c.context_len = 64;
  return c;
}

// Initial parameters with every tensor (norms and biases included) jittered
// so that no term of the forward pass is trivially zero or one.
template <class T>
bytelm::Parameters<T> jittered(const bytelm::ModelConfig& cfg, std::uint64_t seed, double scale = 0.1) {
  auto p = bytelm::init_parameters<T>(cfg, seed);
  std::mt19937_64 rng(seed ^ 0x5eed);
  for (auto& t : p.tensors())
    for (auto& v : t.data) v += static_cast<T>(scale * bytelm::standard_normal(rng));
  return p;
}

inline bytelm::ByteSequence random_bytes(std::mt19937_64& rng, std::size_t n) {
  bytelm::ByteSequence out(n);
  for (auto& b : out) b = static_cast<bytelm::Byte>(bytelm::uniform_below(rng, 256));
  return out;
}

inline bytelm::ByteSequence random_text(std::mt19937_64& rng, std::size_t n) {
  static const std::string alphabet = "abcdefghij klmnop\n";
  bytelm::ByteSequence out(n);
  for (auto& b : out) b = static_cast<bytelm::Byte>(alphabet[bytelm::uniform_below(rng, alphabet.size())]);
  return out;
}

template <class Fn>
bytelm::ErrorKind kind_of(Fn&& fn) {
  try {
    fn();
  } catch (const bytelm::Error& e) {
    return e.kind();
  }
  throw std::logic_error("expected a bytelm::Error");
}

}  // namespace fixtures
