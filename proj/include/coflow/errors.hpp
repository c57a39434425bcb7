#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace coflow {

// Shape or rank disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// API misuse: backward twice, non-scalar loss, missing gradients, bad timestamps.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Zero-norm input where a norm appears in a denominator.
class DegenerateInputError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Prediction requested for a time before the feature's capture time.
class TemporalOrderError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::size_t step)
      : std::runtime_error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

// Malformed binary input. offset is the byte position where decoding failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " at byte " + std::to_string(offset)), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace coflow
