#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

namespace coapt {

/// Root of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Caller broke an API contract (non-scalar loss, missing tape, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Argument outside a function's mathematical domain.
class DomainError : public Error {
 public:
  using Error::Error;
};

class LookupError : public Error {
 public:
  using Error::Error;
};

class IntegrityError : public Error {
 public:
  using Error::Error;
};

class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

class DeterminismError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss during training.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// Attempt to mutate a frozen tensor.
class FrozenError : public Error {
 public:
  using Error::Error;
};

/// Token budget exceeded. `excess()` is the number of slots over the limit.
class OverflowError : public Error {
 public:
  OverflowError(const std::string& what, std::size_t excess)
      : Error(what), excess_(excess) {}
  std::size_t excess() const noexcept { return excess_; }

 private:
  std::size_t excess_;
};

/// Malformed binary or text file. `offset()` is the byte position where
/// parsing failed (0 when not applicable).
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset = 0)
      : Error(what + (offset ? " (at byte " + std::to_string(offset) + ")" : std::string{})),
        offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class UnknownWordError : public LookupError {
 public:
  explicit UnknownWordError(std::string word)
      : LookupError("unknown word '" + word + "'"), word_(std::move(word)) {}
  const std::string& word() const noexcept { return word_; }

 private:
  std::string word_;
};

}  // namespace coapt
