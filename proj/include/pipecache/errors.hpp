#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace pipecache {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An operation was handed input that violates its contract
/// (missing column, wrong kind, invalid argument).
class PreconditionError : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated bytes / files.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Filesystem or OS-level failure.
class IoError : public Error {
 public:
  using Error::Error;
};

/// A cache lookup missed and no inner transformer was available.
class CacheMissError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration (CLI config files, cache meta mismatches).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Pipeline-expression syntax error with a byte offset into the source.
class SyntaxError : public Error {
 public:
  SyntaxError(std::size_t offset, std::vector<std::string> expected,
              const std::string& message)
      : Error(message), offset_(offset), expected_(std::move(expected)) {}

  std::size_t offset() const { return offset_; }
  const std::vector<std::string>& expected() const { return expected_; }

 private:
  std::size_t offset_;
  std::vector<std::string> expected_;
};

}  // namespace pipecache
