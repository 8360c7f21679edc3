#pragma once

#include <stdexcept>
#include <string>

namespace onestage {

// Invalid child configuration, malformed config string or space file.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shape mismatch; the message names the offending node.
class DimensionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values in losses, activations or gradients.
class NumericFault : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// API used out of order (e.g. backward without a recorded forward).
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class PreconditionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// No benchmark entry fits the requested budget.
class BudgetInfeasible : public std::runtime_error {
 public:
  BudgetInfeasible(const std::string& what, long long smallest_madds)
      : std::runtime_error(what), smallest_madds_(smallest_madds) {}
  long long smallest_madds() const { return smallest_madds_; }

 private:
  long long smallest_madds_;
};

}  // namespace onestage
