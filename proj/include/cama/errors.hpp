#pragma once

#include <stdexcept>
#include <string>

namespace cama {

/// Operand shapes are incompatible for the requested operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A token id or element index is outside its valid range.
class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// A caller broke an operation's precondition (non-scalar loss, empty input, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Invalid model / data / run configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Argument outside the mathematical domain of an operation.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Malformed or unreadable file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A verification step (equivalence check, threshold) failed.
class VerificationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cama
