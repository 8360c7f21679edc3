#pragma once

#include <span>

#include "onestage/tensor.hpp"

namespace onestage {

struct LossResult {
  double loss = 0.0;
  Tensor grad;  // d(loss)/d(logits), same shape as the logits
};

/// Row-wise softmax of (N, K) logits.
Tensor softmax(const Tensor& logits);

/// Mean cross-entropy against labels smoothed as (1 - s) * onehot + s / K.
LossResult softmax_xent(const Tensor& logits, std::span<const int> labels, double smoothing);

/// Mean cross-entropy of softmax(logits) against a fixed target distribution.
LossResult soft_target_xent(const Tensor& logits, const Tensor& target_probs);

}  // namespace onestage
