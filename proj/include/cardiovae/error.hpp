#pragma once

#include <stdexcept>
#include <string>

namespace cardiovae {

/// Broad failure categories. The CLI maps each one onto a process exit code.
enum class ErrorKind {
  usage,    // bad invocation or missing argument
  config,   // config file / value problems
  io,       // filesystem or on-disk format problems
  numeric,  // NaN/Inf, degenerate statistics, divergence
  shape,    // tensor/layer dimension mismatch
  invalid,  // precondition violated by a library caller
};

inline const char* kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::usage: return "usage";
    case ErrorKind::config: return "config";
    case ErrorKind::io: return "io";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::shape: return "shape";
    case ErrorKind::invalid: return "invalid";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Dimension mismatch. `axis` names the offending axis ("height", "channels", ...).
class ShapeError : public Error {
 public:
  ShapeError(std::string axis, const std::string& what)
      : Error(ErrorKind::shape, what), axis_(std::move(axis)) {}
  const std::string& axis() const noexcept { return axis_; }

 private:
  std::string axis_;
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

/// Binary format failures for TNSR/CVXG files.
enum class FormatFault { bad_magic, bad_version, bad_dtype, truncated, dim_overflow, empty_dims, bad_entry, arch_mismatch, missing_tensor };

inline const char* fault_name(FormatFault f) {
  switch (f) {
    case FormatFault::bad_magic: return "bad magic";
    case FormatFault::bad_version: return "bad version";
    case FormatFault::bad_dtype: return "bad dtype";
    case FormatFault::truncated: return "truncated";
    case FormatFault::dim_overflow: return "dim overflow";
    case FormatFault::empty_dims: return "empty dims";
    case FormatFault::bad_entry: return "bad entry";
    case FormatFault::arch_mismatch: return "arch mismatch";
    case FormatFault::missing_tensor: return "missing tensor";
  }
  return "unknown";
}

class FormatError : public Error {
 public:
  FormatError(FormatFault fault, const std::string& detail)
      : Error(ErrorKind::io, std::string(fault_name(fault)) + ": " + detail), fault_(fault) {}
  FormatFault fault() const noexcept { return fault_; }

 private:
  FormatFault fault_;
};

}  // namespace cardiovae
