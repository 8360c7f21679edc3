#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace onestage {

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major float32 tensor. Activations are NCHW, conv weights
/// (C_out, C_in, k, k), fully connected weights (C_out, C_in).
struct Tensor {
  Shape shape;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(Shape s, float fill = 0.0f);
  Tensor(Shape s, std::vector<float> values);

  std::size_t numel() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  bool empty() const { return data.empty(); }

  float* ptr() { return data.data(); }
  const float* ptr() const { return data.data(); }
  std::span<float> span() { return data; }
  std::span<const float> span() const { return data; }

  float& operator[](std::size_t i) { return data[i]; }
  float operator[](std::size_t i) const { return data[i]; }

  // NCHW accessors.
  float& at(int n, int c, int h, int w) {
    return data[((static_cast<std::size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
  float at(int n, int c, int h, int w) const {
    return data[((static_cast<std::size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

bool all_finite(std::span<const float> values);
float max_abs_diff(const Tensor& a, const Tensor& b);

/// Learnable tensor with its gradient accumulator. `decay` marks parameters
/// that receive weight decay (conv and fully connected weights).
struct Parameter {
  Tensor value;
  Tensor grad;  // empty until the first accumulation
  bool decay = true;

  void zero_grad();
  Tensor& ensure_grad();
};

/// Process-wide allocator settings for training workloads; call once at startup.
void tune_allocator();

}  // namespace onestage
