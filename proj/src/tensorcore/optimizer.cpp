#include "onestage/optimizer.hpp"

#include <cmath>

#include "onestage/errors.hpp"

namespace onestage {

void RmsProp::step(ParamStore& params, double lr, double weight_decay) {
  for (const auto& [name, p] : params) {
    if (!p.grad.empty() && !all_finite(p.grad.span()))
      throw NumericFault("non-finite gradient in parameter '" + name + "'");
  }
  const float rho = static_cast<float>(cfg_.rho);
  const float mu = static_cast<float>(cfg_.momentum);
  const float eps = static_cast<float>(cfg_.eps);
  const float rate = static_cast<float>(lr);
  for (auto& [name, p] : params) {
    Slot& slot = slots_[name];
    if (slot.ms.empty()) {
      slot.ms = Tensor(p.value.shape);
      slot.mom = Tensor(p.value.shape);
    }
    const float decay = p.decay ? static_cast<float>(weight_decay) : 0.0f;
    const bool has_grad = !p.grad.empty();
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      float g = has_grad ? p.grad[i] : 0.0f;
      if (decay != 0.0f) g += decay * p.value[i];
      slot.ms[i] = rho * slot.ms[i] + (1.0f - rho) * g * g;
      const float denom = std::sqrt(slot.ms[i] + eps);
      slot.mom[i] = mu * slot.mom[i] + (denom > 0.0f ? rate * g / denom : 0.0f);
      p.value[i] -= slot.mom[i];
    }
  }
  ++steps_;
}

}  // namespace onestage
