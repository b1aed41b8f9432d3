#pragma once

#include <stdexcept>
#include <string>

namespace branchflow {

// Invalid configuration, shapes, or arguments. Not recoverable by retrying.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A caller broke an API contract (detached tape node, unfrozen base in transfer, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Non-finite values appeared during integration or training.
// `at()` is the simulation time or the 1-based epoch, depending on the source.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, double at)
      : std::runtime_error(what), at_(at) {}

  double at() const noexcept { return at_; }

 private:
  double at_;
};

}  // namespace branchflow
