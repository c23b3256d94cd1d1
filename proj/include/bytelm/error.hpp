#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace bytelm {

enum class ErrorKind {
  io,
  argument,
  size,
  structure,
  config,
  length,
  index,
  numeric,
  alignment,
  version,
  truncation,
  consistency,
  checksum,
  parse,
  dataset,
  degenerate,
  usage,
};

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::io: return "io";
    case ErrorKind::argument: return "argument";
    case ErrorKind::size: return "size";
    case ErrorKind::structure: return "structure";
    case ErrorKind::config: return "config";
    case ErrorKind::length: return "length";
    case ErrorKind::index: return "index";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::alignment: return "alignment";
    case ErrorKind::version: return "version";
    case ErrorKind::truncation: return "truncation";
    case ErrorKind::consistency: return "consistency";
    case ErrorKind::checksum: return "checksum";
    case ErrorKind::parse: return "parse";
    case ErrorKind::dataset: return "dataset";
    case ErrorKind::degenerate: return "degenerate";
    case ErrorKind::usage: return "usage";
  }
  return "unknown";
}

/// Every failure raised by the toolkit. The kind is stable and machine
/// readable; the message is for humans.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace bytelm
