#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace modprobe {

// An operation was called with arguments that violate its preconditions.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// An iterative numeric routine failed to converge or left its contract.
class NumericFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Correlation of a constant sequence has no value. Graph builders catch this
// and record a zero edge instead.
class UndefinedCorrelation : public NumericFailure {
 public:
  using NumericFailure::NumericFailure;
};

// Malformed file content; offset() is the byte position where parsing stopped.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"),
        offset_(offset) {}
  explicit FormatError(const std::string& what) : std::runtime_error(what) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_ = 0;
};

namespace detail {
inline void require(bool ok, const std::string& what) {
  if (!ok) throw InvalidArgument(what);
}
}  // namespace detail

}  // namespace modprobe
