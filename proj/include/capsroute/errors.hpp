#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace capsroute {

// Incompatible extents, bad axes, malformed contraction signatures.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Operand outside the domain of an op (log of a non-positive value, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// A caller broke a documented precondition.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Non-finite values where finite ones are required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or truncated serialized data. Carries the byte offset at which
// reading failed.
class DataError : public std::runtime_error {
 public:
  DataError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  explicit DataError(const std::string& what) : std::runtime_error(what), offset_(0) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class VersionError : public DataError {
 public:
  VersionError(const std::string& what, std::size_t offset) : DataError(what, offset) {}
};

}  // namespace capsroute
