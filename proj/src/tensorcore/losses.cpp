#include "onestage/losses.hpp"

#include <algorithm>
#include <cmath>

#include "onestage/errors.hpp"

namespace onestage {

namespace {

// Log-softmax of one row in double precision.
void log_softmax_row(const float* z, int k, std::vector<double>& out) {
  double mx = z[0];
  for (int j = 1; j < k; ++j) mx = std::max(mx, static_cast<double>(z[j]));
  double s = 0.0;
  for (int j = 0; j < k; ++j) s += std::exp(z[j] - mx);
  const double lse = mx + std::log(s);
  for (int j = 0; j < k; ++j) out[j] = z[j] - lse;
}

LossResult xent_against(const Tensor& logits, const auto& target_row) {
  if (logits.rank() != 2) throw DimensionError("loss: logits must be (N, K)");
  const int n = logits.dim(0), k = logits.dim(1);
  LossResult r{0.0, Tensor(logits.shape)};
  std::vector<double> lp(k), q(k);
  for (int i = 0; i < n; ++i) {
    const float* z = logits.ptr() + static_cast<std::size_t>(i) * k;
    log_softmax_row(z, k, lp);
    target_row(i, q);
    double row = 0.0;
    for (int j = 0; j < k; ++j) {
      if (q[j] != 0.0) row -= q[j] * lp[j];
      r.grad[static_cast<std::size_t>(i) * k + j] =
          static_cast<float>((std::exp(lp[j]) - q[j]) / n);
    }
    r.loss += row;
  }
  r.loss /= n;
  return r;
}

}  // namespace

Tensor softmax(const Tensor& logits) {
  if (logits.rank() != 2) throw DimensionError("softmax: logits must be (N, K)");
  const int n = logits.dim(0), k = logits.dim(1);
  Tensor out(logits.shape);
  std::vector<double> lp(k);
  for (int i = 0; i < n; ++i) {
    log_softmax_row(logits.ptr() + static_cast<std::size_t>(i) * k, k, lp);
    for (int j = 0; j < k; ++j) out[static_cast<std::size_t>(i) * k + j] = static_cast<float>(std::exp(lp[j]));
  }
  return out;
}

LossResult softmax_xent(const Tensor& logits, std::span<const int> labels, double smoothing) {
  if (logits.rank() != 2 || static_cast<int>(labels.size()) != logits.dim(0))
    throw DimensionError("softmax_xent: " + std::to_string(labels.size()) +
                         " labels for logits " + shape_str(logits.shape));
  const int k = logits.dim(1);
  return xent_against(logits, [&](int i, std::vector<double>& q) {
    std::fill(q.begin(), q.end(), smoothing / k);
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= k) throw PreconditionError("label " + std::to_string(y) + " out of range");
    q[y] += 1.0 - smoothing;
  });
}

LossResult soft_target_xent(const Tensor& logits, const Tensor& target_probs) {
  if (target_probs.shape != logits.shape)
    throw DimensionError("soft_target_xent: target " + shape_str(target_probs.shape) +
                         " vs logits " + shape_str(logits.shape));
  const int k = logits.dim(1);
  return xent_against(logits, [&](int i, std::vector<double>& q) {
    for (int j = 0; j < k; ++j) q[j] = target_probs[static_cast<std::size_t>(i) * k + j];
  });
}

}  // namespace onestage
