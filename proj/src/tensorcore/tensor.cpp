#include "onestage/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "onestage/errors.hpp"

namespace onestage {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t acc, int d) { return acc * static_cast<std::size_t>(d); });
}

std::string shape_str(const Shape& shape) {
  std::string out = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + ")";
}

Tensor::Tensor(Shape s, float fill) : shape(std::move(s)), data(shape_numel(shape), fill) {
  for (int d : shape) {
    if (d <= 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  }
}

Tensor::Tensor(Shape s, std::vector<float> values) : shape(std::move(s)), data(std::move(values)) {
  if (data.size() != shape_numel(shape)) {
    throw DimensionError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  }
}

bool all_finite(std::span<const float> values) {
  return std::all_of(values.begin(), values.end(), [](float v) { return std::isfinite(v); });
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) {
    throw DimensionError("max_abs_diff: shapes " + shape_str(a.shape) + " and " +
                         shape_str(b.shape) + " differ");
  }
  float m = 0.0f;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

void Parameter::zero_grad() {
  if (!grad.empty()) std::fill(grad.data.begin(), grad.data.end(), 0.0f);
}

Tensor& Parameter::ensure_grad() {
  if (grad.empty()) grad = Tensor(value.shape);
  return grad;
}

}  // namespace onestage

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace onestage {

void tune_allocator() {
#if defined(__GLIBC__)
  // Keep freed activation buffers in the heap instead of returning them to
  // the kernel; large tensors are reallocated every step.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

}  // namespace onestage
