#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "bytelm/config.hpp"
#include "bytelm/corpus.hpp"
#include "bytelm/error.hpp"
#include "bytelm/parameters.hpp"
#include "bytelm/training.hpp"

namespace bytelm {

// Checkpoint layout, all integers little-endian:
//
//   "BLMCKPT1"                      8 bytes
//   format_version                  u32
//   header length, header           u64, utf-8 key=value lines
//   tensor count                    u64
//   per tensor: name length, name   u64, utf-8
//               rank, dims          u64, rank x u64
//               values              row-major IEEE-754 float32
//   checksum                        u64, FNV-1a over every preceding byte
//
// The header carries the model and training configs, the step, whether
// Adam moments follow the weights, and the checksum algorithm name.

inline constexpr std::string_view kCheckpointMagic = "BLMCKPT1";
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::string_view kChecksumAlgorithm = "fnv1a-64";

struct Checkpoint {
  std::uint32_t format_version = kCheckpointVersion;
  ModelConfig model;
  TrainConfig train;
  std::uint64_t step = 0;
  Parameters<float> params;
  std::optional<OptimizerState<float>> optimizer;
};

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace detail {

class ByteWriter {
 public:
  void raw(std::string_view s) { out_.append(s); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void str(std::string_view s) {
    u64(s.size());
    raw(s);
  }
  std::string& buffer() { return out_; }

 private:
  std::string out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}

  std::string_view raw(std::size_t n) {
    if (data_.size() - pos_ < n) {
      fail(ErrorKind::truncation, "checkpoint truncated: needed " + std::to_string(n) +
                                      " more bytes at offset " + std::to_string(pos_));
    }
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint32_t u32() {
    const auto s = raw(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{static_cast<unsigned char>(s[i])} << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    const auto s = raw(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{static_cast<unsigned char>(s[i])} << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str() {
    const std::uint64_t n = u64();
    return std::string(raw(static_cast<std::size_t>(std::min<std::uint64_t>(n, remaining() + 1))));
  }
  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
};

inline void write_tensor(ByteWriter& w, std::string_view name, const Tensor<float>& t) {
  w.str(name);
  w.u64(t.shape.size());
  for (const auto d : t.shape) w.u64(d);
  for (const float v : t.data) w.f32(v);
}

inline Tensor<float> read_tensor(ByteReader& r) {
  Tensor<float> t;
  t.name = r.str();
  const std::uint64_t rank = r.u64();
  require(rank <= 8, ErrorKind::structure, "tensor '" + t.name + "' has implausible rank");
  std::uint64_t count = 1;
  for (std::uint64_t i = 0; i < rank; ++i) {
    t.shape.push_back(static_cast<std::size_t>(r.u64()));
    count *= t.shape.back();
  }
  if (count * 4 > r.remaining()) {
    fail(ErrorKind::truncation, "checkpoint truncated inside tensor '" + t.name + "'");
  }
  t.data.resize(static_cast<std::size_t>(count));
  for (auto& v : t.data) v = r.f32();
  return t;
}

}  // namespace detail

/// Serializes without validating; save_checkpoint() is the checked path.
inline std::string encode_checkpoint(const Checkpoint& ckpt) {
  Settings header = to_settings(ckpt.model);
  header.merge(to_settings(ckpt.train));
  header["step"] = std::to_string(ckpt.step);
  header["checksum"] = std::string(kChecksumAlgorithm);
  header["value_type"] = "float32";
  header["has_optimizer"] = ckpt.optimizer ? "1" : "0";
  if (ckpt.optimizer) header["optimizer_step"] = std::to_string(ckpt.optimizer->step);

  detail::ByteWriter w;
  w.raw(kCheckpointMagic);
  w.u32(ckpt.format_version);
  w.str(format_settings(header));
  std::uint64_t count = ckpt.params.tensors().size();
  if (ckpt.optimizer) count += 2 * ckpt.params.tensors().size();
  w.u64(count);
  for (const auto& t : ckpt.params.tensors()) detail::write_tensor(w, t.name, t);
  if (ckpt.optimizer) {
    for (const auto& t : ckpt.optimizer->first_moment.tensors())
      detail::write_tensor(w, "adam.first_moment/" + t.name, t);
    for (const auto& t : ckpt.optimizer->second_moment.tensors())
      detail::write_tensor(w, "adam.second_moment/" + t.name, t);
  }
  const std::uint64_t checksum = fnv1a64(w.buffer());
  w.u64(checksum);
  return std::move(w.buffer());
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (r.remaining() < kCheckpointMagic.size() || r.raw(kCheckpointMagic.size()) != kCheckpointMagic) {
    fail(ErrorKind::structure, "not a checkpoint file (bad magic)");
  }
  Checkpoint ckpt;
  ckpt.format_version = r.u32();
  if (ckpt.format_version != kCheckpointVersion) {
    fail(ErrorKind::version, "unsupported checkpoint format_version " +
                                 std::to_string(ckpt.format_version) + " (expected " +
                                 std::to_string(kCheckpointVersion) + ")");
  }
  const Settings header = parse_settings(r.str(), "checkpoint header");
  if (auto it = header.find("checksum"); it == header.end() || it->second != kChecksumAlgorithm) {
    fail(ErrorKind::structure, "checkpoint header names an unknown checksum algorithm");
  }
  apply_settings(header, ckpt.model, ckpt.train);
  auto header_int = [&](std::string_view key) -> std::uint64_t {
    const auto it = header.find(key);
    require(it != header.end(), ErrorKind::structure,
            "checkpoint header lacks '" + std::string(key) + "'");
    return detail::parse_number<std::uint64_t>(key, it->second);
  };
  ckpt.step = header_int("step");
  const bool has_optimizer = header_int("has_optimizer") != 0;

  const std::uint64_t count = r.u64();
  std::vector<Tensor<float>> tensors;
  for (std::uint64_t i = 0; i < count; ++i) tensors.push_back(detail::read_tensor(r));
  if (r.remaining() < 8) {
    fail(ErrorKind::truncation, "checkpoint truncated: trailing checksum missing");
  }
  const std::size_t body_len = r.position();
  const std::uint64_t stored = r.u64();
  require(r.remaining() == 0, ErrorKind::structure, "unexpected bytes after checkpoint checksum");
  if (stored != fnv1a64(bytes.substr(0, body_len))) {
    fail(ErrorKind::checksum, "checkpoint checksum mismatch");
  }

  try {
    ckpt.model.validate();
  } catch (const Error& e) {
    fail(ErrorKind::consistency, std::string("checkpoint model config is invalid: ") + e.what());
  }
  const std::size_t per_set = tensor_schedule(ckpt.model).size();
  const std::size_t expected = has_optimizer ? 3 * per_set : per_set;
  require(tensors.size() == expected, ErrorKind::consistency,
          "checkpoint holds " + std::to_string(tensors.size()) + " tensors, config implies " +
              std::to_string(expected));
  auto take = [&](std::size_t set, std::string_view prefix) {
    std::vector<Tensor<float>> part(std::make_move_iterator(tensors.begin() + set * per_set),
                                    std::make_move_iterator(tensors.begin() + (set + 1) * per_set));
    for (auto& t : part) {
      require(t.name.starts_with(prefix), ErrorKind::consistency,
              "unexpected tensor '" + t.name + "' in checkpoint");
      t.name.erase(0, prefix.size());
    }
    return Parameters<float>::from_tensors(ckpt.model, std::move(part));
  };
  ckpt.params = take(0, "");
  if (has_optimizer) {
    OptimizerState<float> opt;
    opt.step = header_int("optimizer_step");
    opt.first_moment = take(1, "adam.first_moment/");
    opt.second_moment = take(2, "adam.second_moment/");
    ckpt.optimizer = std::move(opt);
  }
  return ckpt;
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  require(ckpt.params.config() == ckpt.model, ErrorKind::consistency,
          "checkpoint model config differs from the parameters' config");
  ckpt.params.check_consistency();
  const std::string bytes = encode_checkpoint(ckpt);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::io, "cannot write checkpoint: " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorKind::io, "error while writing checkpoint: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) {
    fail(ErrorKind::io, "missing checkpoint file: " + path.string());
  }
  const ByteSequence bytes = read_file_bytes(path);
  return decode_checkpoint(
      std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

}  // namespace bytelm
