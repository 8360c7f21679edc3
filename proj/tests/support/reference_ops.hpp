// Naive double-precision forward ops, written from the op definitions and
// used as the numeric side of gradient checks.
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "onestage/tensor.hpp"

namespace ref {

struct D {
  onestage::Shape shape;
  std::vector<double> v;

  D() = default;
  explicit D(onestage::Shape s) : shape(std::move(s)), v(onestage::shape_numel(shape), 0.0) {}
  explicit D(const onestage::Tensor& t) : shape(t.shape), v(t.data.begin(), t.data.end()) {}
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  double& at(int n, int c, int h, int w) {
    return v[((static_cast<std::size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
  double at(int n, int c, int h, int w) const {
    return v[((static_cast<std::size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
};

inline int out_size(int in, int s) { return (in + s - 1) / s; }
inline int pad_before(int in, int k, int s) {
  return std::max((out_size(in, s) - 1) * s + k - in, 0) / 2;
}

// groups == 1: ordinary conv; groups == C: depthwise.
inline D conv(const D& x, const D& w, int stride, bool depthwise) {
  const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int co = w.dim(0), k = w.dim(2);
  const int ho = out_size(h, stride), wo = out_size(wd, stride);
  const int pt = pad_before(h, k, stride), pl = pad_before(wd, k, stride);
  D y({n, co, ho, wo});
  for (int b = 0; b < n; ++b)
    for (int o = 0; o < co; ++o)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          double s = 0.0;
          const int c0 = depthwise ? o : 0, c1 = depthwise ? o + 1 : ci;
          for (int c = c0; c < c1; ++c)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int iy = oy * stride + ky - pt, ix = ox * stride + kx - pl;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                const double wt = depthwise
                                      ? w.v[(static_cast<std::size_t>(o) * k + ky) * k + kx]
                                      : w.v[((static_cast<std::size_t>(o) * ci + c) * k + ky) * k + kx];
                s += wt * x.at(b, c, iy, ix);
              }
          y.at(b, o, oy, ox) = s;
        }
  return y;
}

// Batch statistics when mean/var are empty.
inline D batchnorm(const D& x, const D& g, const D& beta, std::vector<double> mean,
                   std::vector<double> var, double eps) {
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t plane = x.v.size() / (static_cast<std::size_t>(n) * c);
  const bool batch = mean.empty();
  if (batch) {
    mean.assign(c, 0.0);
    var.assign(c, 0.0);
    for (int ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (int b = 0; b < n; ++b)
        for (std::size_t j = 0; j < plane; ++j) s += x.v[(static_cast<std::size_t>(b) * c + ch) * plane + j];
      mean[ch] = s / (n * plane);
      double q = 0.0;
      for (int b = 0; b < n; ++b)
        for (std::size_t j = 0; j < plane; ++j) {
          const double d = x.v[(static_cast<std::size_t>(b) * c + ch) * plane + j] - mean[ch];
          q += d * d;
        }
      var[ch] = q / (n * plane);
    }
  }
  D y(x.shape);
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (std::size_t j = 0; j < plane; ++j) {
        const std::size_t i = (static_cast<std::size_t>(b) * c + ch) * plane + j;
        y.v[i] = g.v[ch] * (x.v[i] - mean[ch]) / std::sqrt(var[ch] + eps) + beta.v[ch];
      }
  return y;
}

inline D swish(const D& x) {
  D y(x.shape);
  for (std::size_t i = 0; i < x.v.size(); ++i) y.v[i] = x.v[i] / (1.0 + std::exp(-x.v[i]));
  return y;
}

inline D relu(const D& x) {
  D y(x.shape);
  for (std::size_t i = 0; i < x.v.size(); ++i) y.v[i] = std::max(0.0, x.v[i]);
  return y;
}

inline D avgpool2x2(const D& x) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  D y({n, c, out_size(h, 2), out_size(w, 2)});
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (int oy = 0; oy < y.dim(2); ++oy)
        for (int ox = 0; ox < y.dim(3); ++ox) {
          double s = 0.0;
          int cnt = 0;
          for (int iy = 2 * oy; iy < std::min(h, 2 * oy + 2); ++iy)
            for (int ix = 2 * ox; ix < std::min(w, 2 * ox + 2); ++ix) {
              s += x.at(b, ch, iy, ix);
              ++cnt;
            }
          y.at(b, ch, oy, ox) = s / cnt;
        }
  return y;
}

inline D global_avgpool(const D& x) {
  const int n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  D y({n, c});
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (int j = 0; j < plane; ++j) s += x.v[(static_cast<std::size_t>(b) * c + ch) * plane + j];
      y.v[static_cast<std::size_t>(b) * c + ch] = s / plane;
    }
  return y;
}

inline D fully_connected(const D& x, const D& w, const D& bias) {
  const int n = x.dim(0), ci = x.dim(1), co = w.dim(0);
  D y({n, co});
  for (int b = 0; b < n; ++b)
    for (int o = 0; o < co; ++o) {
      double s = bias.v[o];
      for (int i = 0; i < ci; ++i) s += w.v[static_cast<std::size_t>(o) * ci + i] * x.v[static_cast<std::size_t>(b) * ci + i];
      y.v[static_cast<std::size_t>(b) * co + o] = s;
    }
  return y;
}

inline D add(const D& a, const D& b) {
  D y(a.shape);
  for (std::size_t i = 0; i < a.v.size(); ++i) y.v[i] = a.v[i] + b.v[i];
  return y;
}

inline D mul(const D& a, const D& m) {
  D y(a.shape);
  for (std::size_t i = 0; i < a.v.size(); ++i) y.v[i] = a.v[i] * m.v[i];
  return y;
}

inline D resize_channels(const D& x, int channels) {
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t plane = x.v.size() / (static_cast<std::size_t>(n) * c);
  onestage::Shape s = x.shape;
  s[1] = channels;
  D y(s);
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < std::min(c, channels); ++ch)
      for (std::size_t j = 0; j < plane; ++j)
        y.v[(static_cast<std::size_t>(b) * channels + ch) * plane + j] =
            x.v[(static_cast<std::size_t>(b) * c + ch) * plane + j];
  return y;
}

inline D channel_mask(const D& x, int active) {
  return resize_channels(resize_channels(x, active), x.dim(1));
}

}  // namespace ref
