#pragma once

#include <map>
#include <string>

#include "onestage/tensor.hpp"

namespace onestage {

/// Shared parameter storage, keyed and iterated in name order.
using ParamStore = std::map<std::string, Parameter>;

struct RmsPropConfig {
  double rho = 0.9;       // squared-gradient moving-average decay
  double momentum = 0.9;
  double eps = 1e-3;
};

/// RMSProp with momentum:
///   ms  <- rho * ms + (1 - rho) * g^2
///   mom <- momentum * mom + lr * g / sqrt(ms + eps)
///   p   <- p - mom
/// Accumulators start at zero. Weight decay adds `weight_decay * p` to the
/// gradient of parameters whose `decay` flag is set.
class RmsProp {
 public:
  struct Slot {
    Tensor ms;
    Tensor mom;
  };

  explicit RmsProp(RmsPropConfig cfg = {}) : cfg_(cfg) {}

  /// Applies one update from the accumulated `Parameter::grad` values (a
  /// missing gradient counts as zero). Throws NumericFault naming the
  /// parameter on non-finite gradients, before any parameter is modified.
  void step(ParamStore& params, double lr, double weight_decay);

  const RmsPropConfig& config() const { return cfg_; }
  long long steps() const { return steps_; }
  void set_steps(long long s) { steps_ = s; }
  std::map<std::string, Slot>& slots() { return slots_; }
  const std::map<std::string, Slot>& slots() const { return slots_; }

 private:
  RmsPropConfig cfg_;
  std::map<std::string, Slot> slots_;
  long long steps_ = 0;
};

}  // namespace onestage
