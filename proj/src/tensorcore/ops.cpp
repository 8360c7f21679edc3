#include <algorithm>
#include <cmath>

#include <Eigen/Core>

#include "onestage/autograd.hpp"
#include "onestage/errors.hpp"
#include "onestage/searchspace.hpp"

namespace onestage {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

void expect(bool ok, const std::string& op, const std::string& name, const std::string& what) {
  if (!ok) throw DimensionError(op + " '" + name + "': " + what);
}

int same_pad_before(int in, int k, int stride) {
  const int out = same_out(in, stride);
  return std::max((out - 1) * stride + k - in, 0) / 2;
}

struct ConvGeom {
  int n, c_in, h, w, c_out, k, stride, h_out, w_out, pad_t, pad_l;
  bool pointwise() const { return k == 1 && stride == 1; }
  int col_rows() const { return c_in * k * k; }
  int col_cols() const { return h_out * w_out; }
};

void im2col(const float* x, const ConvGeom& g, float* col) {
  const int plane = g.h_out * g.w_out;
  for (int c = 0; c < g.c_in; ++c) {
    const float* xc = x + static_cast<std::size_t>(c) * g.h * g.w;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        float* row = col + static_cast<std::size_t>((c * g.k + ky) * g.k + kx) * plane;
        for (int oy = 0; oy < g.h_out; ++oy) {
          const int iy = oy * g.stride + ky - g.pad_t;
          float* dst = row + oy * g.w_out;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.w_out, 0.0f);
            continue;
          }
          for (int ox = 0; ox < g.w_out; ++ox) {
            const int ix = ox * g.stride + kx - g.pad_l;
            dst[ox] = (ix >= 0 && ix < g.w) ? xc[iy * g.w + ix] : 0.0f;
          }
        }
      }
    }
  }
}

void col2im_add(const float* col, const ConvGeom& g, float* dx) {
  const int plane = g.h_out * g.w_out;
  for (int c = 0; c < g.c_in; ++c) {
    float* dxc = dx + static_cast<std::size_t>(c) * g.h * g.w;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const float* row = col + static_cast<std::size_t>((c * g.k + ky) * g.k + kx) * plane;
        for (int oy = 0; oy < g.h_out; ++oy) {
          const int iy = oy * g.stride + ky - g.pad_t;
          if (iy < 0 || iy >= g.h) continue;
          for (int ox = 0; ox < g.w_out; ++ox) {
            const int ix = ox * g.stride + kx - g.pad_l;
            if (ix >= 0 && ix < g.w) dxc[iy * g.w + ix] += row[oy * g.w_out + ox];
          }
        }
      }
    }
  }
}

inline float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }

}  // namespace

VarId conv2d(Tape& t, VarId x, VarId w, int stride, const std::string& name) {
  const Tensor& xv = t.value(x);
  const Tensor& wv = t.value(w);
  expect(xv.rank() == 4, "conv2d", name, "input must be NCHW, got " + shape_str(xv.shape));
  expect(wv.rank() == 4 && wv.dim(2) == wv.dim(3), "conv2d", name,
         "weight must be (C_out, C_in, k, k), got " + shape_str(wv.shape));
  expect(wv.dim(1) == xv.dim(1), "conv2d", name,
         "weight expects " + std::to_string(wv.dim(1)) + " input channels, input has " +
             std::to_string(xv.dim(1)));
  ConvGeom g{xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), wv.dim(0), wv.dim(2), stride, 0, 0, 0, 0};
  g.h_out = same_out(g.h, stride);
  g.w_out = same_out(g.w, stride);
  g.pad_t = same_pad_before(g.h, g.k, stride);
  g.pad_l = same_pad_before(g.w, g.k, stride);

  Tensor out({g.n, g.c_out, g.h_out, g.w_out});
  const ConstMap wm(wv.ptr(), g.c_out, g.col_rows());
  std::vector<float> col(g.pointwise() ? 0 : static_cast<std::size_t>(g.col_rows()) * g.col_cols());
  const std::size_t in_stride = static_cast<std::size_t>(g.c_in) * g.h * g.w;
  const std::size_t out_stride = static_cast<std::size_t>(g.c_out) * g.h_out * g.w_out;
  for (int n = 0; n < g.n; ++n) {
    const float* xn = xv.ptr() + n * in_stride;
    const float* src = xn;
    if (!g.pointwise()) {
      im2col(xn, g, col.data());
      src = col.data();
    }
    MutMap(out.ptr() + n * out_stride, g.c_out, g.col_cols()).noalias() =
        wm * ConstMap(src, g.col_rows(), g.col_cols());
  }

  return t.push(OpKind::kConv2d, name, std::move(out), {x, w}, [x, w, g](Tape& tp, VarId self) {
    const Tensor& xv = tp.value(x);
    const Tensor& wv = tp.value(w);
    const Tensor& dy = tp.grad(self);
    const std::size_t in_stride = static_cast<std::size_t>(g.c_in) * g.h * g.w;
    const std::size_t out_stride = static_cast<std::size_t>(g.c_out) * g.h_out * g.w_out;
    const bool need_dx = tp.requires_grad(x);
    const bool need_dw = tp.requires_grad(w);
    std::vector<float> col(static_cast<std::size_t>(g.col_rows()) * g.col_cols());
    RowMat dw_acc = RowMat::Zero(g.c_out, g.col_rows());
    const ConstMap wm(wv.ptr(), g.c_out, g.col_rows());
    float* dx = need_dx ? tp.grad(x).ptr() : nullptr;
    for (int n = 0; n < g.n; ++n) {
      const ConstMap dyn(dy.ptr() + n * out_stride, g.c_out, g.col_cols());
      if (need_dw) {
        const float* src = xv.ptr() + n * in_stride;
        if (!g.pointwise()) {
          im2col(src, g, col.data());
          src = col.data();
        }
        dw_acc.noalias() += dyn * ConstMap(src, g.col_rows(), g.col_cols()).transpose();
      }
      if (need_dx) {
        if (g.pointwise()) {
          MutMap(dx + n * in_stride, g.c_in, g.col_cols()).noalias() += wm.transpose() * dyn;
        } else {
          MutMap(col.data(), g.col_rows(), g.col_cols()).noalias() = wm.transpose() * dyn;
          col2im_add(col.data(), g, dx + n * in_stride);
        }
      }
    }
    if (need_dw) MutMap(tp.grad(w).ptr(), g.c_out, g.col_rows()) += dw_acc;
  });
}

// Visits every (output row, kernel tap) pair with the output column range
// whose input column ox * stride + shift stays inside the image.
template <typename F>
void for_each_tap(const ConvGeom& g, F&& f) {
  for (int oy = 0; oy < g.h_out; ++oy) {
    const int iy0 = oy * g.stride - g.pad_t;
    for (int ky = 0; ky < g.k; ++ky) {
      const int iy = iy0 + ky;
      if (iy < 0 || iy >= g.h) continue;
      for (int kx = 0; kx < g.k; ++kx) {
        const int shift = kx - g.pad_l;
        if (g.w - 1 - shift < 0) continue;
        const int lo = shift >= 0 ? 0 : (-shift + g.stride - 1) / g.stride;
        const int hi = std::min(g.w_out, (g.w - 1 - shift) / g.stride + 1);
        if (lo < hi) f(oy, iy, ky, kx, lo, hi, shift);
      }
    }
  }
}

VarId depthwise_conv2d(Tape& t, VarId x, VarId w, int stride, const std::string& name) {
  const Tensor& xv = t.value(x);
  const Tensor& wv = t.value(w);
  expect(xv.rank() == 4, "depthwise_conv2d", name, "input must be NCHW");
  expect(wv.rank() == 4 && wv.dim(1) == 1 && wv.dim(2) == wv.dim(3), "depthwise_conv2d", name,
         "weight must be (C, 1, k, k), got " + shape_str(wv.shape));
  expect(wv.dim(0) == xv.dim(1), "depthwise_conv2d", name,
         "weight has " + std::to_string(wv.dim(0)) + " channels, input has " +
             std::to_string(xv.dim(1)));
  ConvGeom g{xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), xv.dim(1), wv.dim(2), stride, 0, 0, 0, 0};
  g.h_out = same_out(g.h, stride);
  g.w_out = same_out(g.w, stride);
  g.pad_t = same_pad_before(g.h, g.k, stride);
  g.pad_l = same_pad_before(g.w, g.k, stride);

  Tensor out({g.n, g.c_in, g.h_out, g.w_out});
  for (int n = 0; n < g.n; ++n) {
    for (int c = 0; c < g.c_in; ++c) {
      const float* xc = xv.ptr() + (static_cast<std::size_t>(n) * g.c_in + c) * g.h * g.w;
      const float* wc = wv.ptr() + static_cast<std::size_t>(c) * g.k * g.k;
      float* oc = out.ptr() + (static_cast<std::size_t>(n) * g.c_in + c) * g.h_out * g.w_out;
      if (std::all_of(xc, xc + static_cast<std::size_t>(g.h) * g.w, [](float v) { return v == 0.0f; })) continue;
      for_each_tap(g, [&](int oy, int iy, int ky, int kx, int ox_lo, int ox_hi, int shift) {
        const float wk = wc[ky * g.k + kx];
        const float* xr = xc + iy * g.w + shift;
        float* orow = oc + oy * g.w_out;
        for (int ox = ox_lo; ox < ox_hi; ++ox) orow[ox] += wk * xr[ox * g.stride];
      });
    }
  }

  return t.push(OpKind::kDepthwiseConv2d, name, std::move(out), {x, w},
                [x, w, g](Tape& tp, VarId self) {
                  const Tensor& xv = tp.value(x);
                  const Tensor& wv = tp.value(w);
                  const Tensor& dy = tp.grad(self);
                  float* dx = tp.requires_grad(x) ? tp.grad(x).ptr() : nullptr;
                  float* dw = tp.requires_grad(w) ? tp.grad(w).ptr() : nullptr;
                  const std::size_t out_plane = static_cast<std::size_t>(g.h_out) * g.w_out;
                  for (int n = 0; n < g.n; ++n) {
                    for (int c = 0; c < g.c_in; ++c) {
                      const std::size_t in_off = (static_cast<std::size_t>(n) * g.c_in + c) * g.h * g.w;
                      const float* dyc = dy.ptr() + (static_cast<std::size_t>(n) * g.c_in + c) * out_plane;
                      if (std::all_of(dyc, dyc + out_plane, [](float v) { return v == 0.0f; })) continue;
                      const float* xc = xv.ptr() + in_off;
                      const float* wc = wv.ptr() + static_cast<std::size_t>(c) * g.k * g.k;
                      float* dwc = dw ? dw + static_cast<std::size_t>(c) * g.k * g.k : nullptr;
                      float* dxc = dx ? dx + in_off : nullptr;
                      for_each_tap(g, [&](int oy, int iy, int ky, int kx, int ox_lo, int ox_hi, int shift) {
                        const float* dyr = dyc + oy * g.w_out;
                        if (dwc) {
                          const float* xr = xc + iy * g.w + shift;
                          float acc = 0.0f;
                          for (int ox = ox_lo; ox < ox_hi; ++ox) acc += dyr[ox] * xr[ox * g.stride];
                          dwc[ky * g.k + kx] += acc;
                        }
                        if (dxc) {
                          const float wk = wc[ky * g.k + kx];
                          float* dxr = dxc + iy * g.w + shift;
                          for (int ox = ox_lo; ox < ox_hi; ++ox) dxr[ox * g.stride] += wk * dyr[ox];
                        }
                      });
                    }
                  }
                });
}

VarId batchnorm(Tape& t, VarId x, VarId gamma, VarId beta, const BnOptions& opts,
                const std::string& name) {
  const Tensor& xv = t.value(x);
  const Tensor& gv = t.value(gamma);
  const Tensor& bv = t.value(beta);
  expect(xv.rank() == 4 || xv.rank() == 2, "batchnorm", name, "input must be NCHW or NC");
  const int n = xv.dim(0), c = xv.dim(1);
  const int plane = xv.rank() == 4 ? xv.dim(2) * xv.dim(3) : 1;
  expect(static_cast<int>(gv.numel()) == c && static_cast<int>(bv.numel()) == c, "batchnorm",
         name, "gamma/beta length must equal " + std::to_string(c));
  const long long count = static_cast<long long>(n) * plane;

  std::vector<float> mean(c), inv_std(c);
  if (opts.mode == BnMode::kBatch) {
    std::vector<double> sum(c, 0.0), sum_sq(c, 0.0);
    for (int i = 0; i < n; ++i) {
      for (int ch = 0; ch < c; ++ch) {
        const float* p = xv.ptr() + (static_cast<std::size_t>(i) * c + ch) * plane;
        double s = 0.0, s2 = 0.0;
        for (int j = 0; j < plane; ++j) {
          s += p[j];
          s2 += static_cast<double>(p[j]) * p[j];
        }
        sum[ch] += s;
        sum_sq[ch] += s2;
      }
    }
    for (int ch = 0; ch < c; ++ch) {
      const double m = sum[ch] / static_cast<double>(count);
      // Second pass for the variance keeps it exact for large means.
      double v = 0.0;
      for (int i = 0; i < n; ++i) {
        const float* p = xv.ptr() + (static_cast<std::size_t>(i) * c + ch) * plane;
        for (int j = 0; j < plane; ++j) {
          const double d = p[j] - m;
          v += d * d;
        }
      }
      v /= static_cast<double>(count);
      mean[ch] = static_cast<float>(m);
      inv_std[ch] = static_cast<float>(1.0 / std::sqrt(v + opts.eps));
    }
    if (opts.sink) opts.sink->observe(opts.key, sum, sum_sq, count);
  } else {
    if (!opts.running || static_cast<int>(opts.running->mean.size()) != c ||
        static_cast<int>(opts.running->var.size()) != c) {
      throw StateError("batchnorm '" + name + "': running statistics missing or sized wrong");
    }
    for (int ch = 0; ch < c; ++ch) {
      mean[ch] = opts.running->mean[ch];
      inv_std[ch] =
          static_cast<float>(1.0 / std::sqrt(static_cast<double>(opts.running->var[ch]) + opts.eps));
    }
  }

  Tensor xhat(xv.shape);
  Tensor out(xv.shape);
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t off = (static_cast<std::size_t>(i) * c + ch) * plane;
      const float m = mean[ch], is = inv_std[ch], gm = gv[ch], bt = bv[ch];
      for (int j = 0; j < plane; ++j) {
        const float h = (xv[off + j] - m) * is;
        xhat[off + j] = h;
        out[off + j] = gm * h + bt;
      }
    }
  }

  const bool batch_mode = opts.mode == BnMode::kBatch;
  return t.push(
      OpKind::kBatchNorm, name, std::move(out), {x, gamma, beta},
      [x, gamma, beta, n, c, plane, count, batch_mode, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](Tape& tp, VarId self) {
        const Tensor& dy = tp.grad(self);
        const Tensor& gv = tp.value(gamma);
        std::vector<double> dgamma(c, 0.0), dbeta(c, 0.0);
        for (int i = 0; i < n; ++i) {
          for (int ch = 0; ch < c; ++ch) {
            const std::size_t off = (static_cast<std::size_t>(i) * c + ch) * plane;
            double sg = 0.0, sb = 0.0;
            for (int j = 0; j < plane; ++j) {
              sg += static_cast<double>(dy[off + j]) * xhat[off + j];
              sb += dy[off + j];
            }
            dgamma[ch] += sg;
            dbeta[ch] += sb;
          }
        }
        if (tp.requires_grad(gamma)) {
          Tensor& g = tp.grad(gamma);
          for (int ch = 0; ch < c; ++ch) g[ch] += static_cast<float>(dgamma[ch]);
        }
        if (tp.requires_grad(beta)) {
          Tensor& g = tp.grad(beta);
          for (int ch = 0; ch < c; ++ch) g[ch] += static_cast<float>(dbeta[ch]);
        }
        if (!tp.requires_grad(x)) return;
        Tensor& dx = tp.grad(x);
        const double m = static_cast<double>(count);
        for (int i = 0; i < n; ++i) {
          for (int ch = 0; ch < c; ++ch) {
            const std::size_t off = (static_cast<std::size_t>(i) * c + ch) * plane;
            const float scale = gv[ch] * inv_std[ch];
            if (batch_mode) {
              const float mb = static_cast<float>(dbeta[ch] / m);
              const float mg = static_cast<float>(dgamma[ch] / m);
              for (int j = 0; j < plane; ++j)
                dx[off + j] += scale * (dy[off + j] - mb - xhat[off + j] * mg);
            } else {
              for (int j = 0; j < plane; ++j) dx[off + j] += scale * dy[off + j];
            }
          }
        }
      });
}

VarId swish(Tape& t, VarId x, const std::string& name) {
  const Tensor& xv = t.value(x);
  Tensor out(xv.shape);
  for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = xv[i] * sigmoid(xv[i]);
  return t.push(OpKind::kSwish, name, std::move(out), {x}, [x](Tape& tp, VarId self) {
    const Tensor& xv = tp.value(x);
    const Tensor& dy = tp.grad(self);
    Tensor& dx = tp.grad(x);
    for (std::size_t i = 0; i < xv.numel(); ++i) {
      const float s = sigmoid(xv[i]);
      dx[i] += dy[i] * (s + xv[i] * s * (1.0f - s));
    }
  });
}

VarId relu(Tape& t, VarId x, const std::string& name) {
  const Tensor& xv = t.value(x);
  Tensor out(xv.shape);
  for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = xv[i] > 0.0f ? xv[i] : 0.0f;
  return t.push(OpKind::kRelu, name, std::move(out), {x}, [x](Tape& tp, VarId self) {
    const Tensor& xv = tp.value(x);
    const Tensor& dy = tp.grad(self);
    Tensor& dx = tp.grad(x);
    for (std::size_t i = 0; i < xv.numel(); ++i)
      if (xv[i] > 0.0f) dx[i] += dy[i];
  });
}

VarId avgpool2x2(Tape& t, VarId x, const std::string& name) {
  const Tensor& xv = t.value(x);
  expect(xv.rank() == 4, "avgpool", name, "input must be NCHW");
  const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const int ho = same_out(h, 2), wo = same_out(w, 2);
  Tensor out({n, c, ho, wo});
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          float s = 0.0f;
          int cnt = 0;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const int iy = 2 * oy + dy, ix = 2 * ox + dx;
              if (iy < h && ix < w) {
                s += xv.at(i, ch, iy, ix);
                ++cnt;
              }
            }
          out.at(i, ch, oy, ox) = s / static_cast<float>(cnt);
        }
  return t.push(OpKind::kAvgPool, name, std::move(out), {x}, [x](Tape& tp, VarId self) {
    const Tensor& dy = tp.grad(self);
    Tensor& dx = tp.grad(x);
    const int n = dx.dim(0), c = dx.dim(1), h = dx.dim(2), w = dx.dim(3);
    const int ho = dy.dim(2), wo = dy.dim(3);
    for (int i = 0; i < n; ++i)
      for (int ch = 0; ch < c; ++ch)
        for (int oy = 0; oy < ho; ++oy)
          for (int ox = 0; ox < wo; ++ox) {
            const int ny = std::min(2, h - 2 * oy), nx = std::min(2, w - 2 * ox);
            const float g = dy.at(i, ch, oy, ox) / static_cast<float>(ny * nx);
            for (int a = 0; a < ny; ++a)
              for (int b = 0; b < nx; ++b) dx.at(i, ch, 2 * oy + a, 2 * ox + b) += g;
          }
  });
}

VarId global_avgpool(Tape& t, VarId x, const std::string& name) {
  const Tensor& xv = t.value(x);
  expect(xv.rank() == 4, "global_avgpool", name, "input must be NCHW");
  const int n = xv.dim(0), c = xv.dim(1), plane = xv.dim(2) * xv.dim(3);
  Tensor out({n, c});
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const float* p = xv.ptr() + (static_cast<std::size_t>(i) * c + ch) * plane;
      float s = 0.0f;
      for (int j = 0; j < plane; ++j) s += p[j];
      out[static_cast<std::size_t>(i) * c + ch] = s / static_cast<float>(plane);
    }
  return t.push(OpKind::kGlobalAvgPool, name, std::move(out), {x},
                [x, n, c, plane](Tape& tp, VarId self) {
                  const Tensor& dy = tp.grad(self);
                  Tensor& dx = tp.grad(x);
                  for (int i = 0; i < n; ++i)
                    for (int ch = 0; ch < c; ++ch) {
                      const float g = dy[static_cast<std::size_t>(i) * c + ch] / static_cast<float>(plane);
                      float* p = dx.ptr() + (static_cast<std::size_t>(i) * c + ch) * plane;
                      for (int j = 0; j < plane; ++j) p[j] += g;
                    }
                });
}

VarId fully_connected(Tape& t, VarId x, VarId w, VarId b, const std::string& name) {
  const Tensor& xv = t.value(x);
  const Tensor& wv = t.value(w);
  const Tensor& bv = t.value(b);
  expect(xv.rank() == 2, "fully_connected", name, "input must be (N, C)");
  expect(wv.rank() == 2 && wv.dim(1) == xv.dim(1), "fully_connected", name,
         "weight " + shape_str(wv.shape) + " incompatible with input " + shape_str(xv.shape));
  expect(static_cast<int>(bv.numel()) == wv.dim(0), "fully_connected", name, "bias length");
  const int n = xv.dim(0), ci = xv.dim(1), co = wv.dim(0);
  Tensor out({n, co});
  MutMap om(out.ptr(), n, co);
  om.noalias() = ConstMap(xv.ptr(), n, ci) * ConstMap(wv.ptr(), co, ci).transpose();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < co; ++j) om(i, j) += bv[j];
  return t.push(OpKind::kFullyConnected, name, std::move(out), {x, w, b},
                [x, w, b, n, ci, co](Tape& tp, VarId self) {
                  const ConstMap dy(tp.grad(self).ptr(), n, co);
                  if (tp.requires_grad(x))
                    MutMap(tp.grad(x).ptr(), n, ci).noalias() +=
                        dy * ConstMap(tp.value(w).ptr(), co, ci);
                  if (tp.requires_grad(w))
                    MutMap(tp.grad(w).ptr(), co, ci).noalias() +=
                        dy.transpose() * ConstMap(tp.value(x).ptr(), n, ci);
                  if (tp.requires_grad(b)) {
                    Tensor& db = tp.grad(b);
                    for (int i = 0; i < n; ++i)
                      for (int j = 0; j < co; ++j) db[j] += dy(i, j);
                  }
                });
}

VarId add(Tape& t, VarId a, VarId b, const std::string& name) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  expect(av.shape == bv.shape, "add", name,
         "shapes " + shape_str(av.shape) + " and " + shape_str(bv.shape) + " differ");
  Tensor out(av.shape);
  for (std::size_t i = 0; i < av.numel(); ++i) out[i] = av[i] + bv[i];
  return t.push(OpKind::kAdd, name, std::move(out), {a, b}, [a, b](Tape& tp, VarId self) {
    const Tensor& dy = tp.grad(self);
    for (VarId in : {a, b}) {
      if (!tp.requires_grad(in)) continue;
      Tensor& d = tp.grad(in);
      for (std::size_t i = 0; i < dy.numel(); ++i) d[i] += dy[i];
    }
  });
}

namespace {

bool keep_unit(std::uint64_t seed, std::uint64_t key, float rate) {
  const std::uint64_t h = mix64(seed ^ mix64(key));
  const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
  return u >= rate;
}

}  // namespace

VarId dropout(Tape& t, VarId x, float rate, std::uint64_t seed, const std::string& name) {
  const Tensor& xv = t.value(x);
  if (rate < 0.0f || rate >= 1.0f) throw PreconditionError("dropout rate must be in [0, 1)");
  const float scale = 1.0f / (1.0f - rate);
  Tensor mask(xv.shape);
  const bool two_d = xv.rank() == 2;
  for (std::size_t i = 0; i < xv.numel(); ++i) {
    std::uint64_t key = i;
    if (two_d) {
      const std::uint64_t row = i / static_cast<std::size_t>(xv.dim(1));
      key = (row << 32) | (i % static_cast<std::size_t>(xv.dim(1)));
    }
    mask[i] = (rate == 0.0f || keep_unit(seed, key, rate)) ? scale : 0.0f;
  }
  Tensor out(xv.shape);
  for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = xv[i] * mask[i];
  return t.push(OpKind::kDropout, name, std::move(out), {x},
                [x, mask = std::move(mask)](Tape& tp, VarId self) {
                  const Tensor& dy = tp.grad(self);
                  Tensor& dx = tp.grad(x);
                  for (std::size_t i = 0; i < dy.numel(); ++i) dx[i] += dy[i] * mask[i];
                });
}

VarId channel_mask(Tape& t, VarId x, int active, const std::string& name) {
  const Tensor& xv = t.value(x);
  expect(xv.rank() >= 2, "channel_mask", name, "input needs a channel dimension");
  const int n = xv.dim(0), c = xv.dim(1);
  const std::size_t plane = xv.numel() / (static_cast<std::size_t>(n) * c);
  expect(active >= 0 && active <= c, "channel_mask", name,
         "active channels " + std::to_string(active) + " exceed " + std::to_string(c));
  Tensor out = xv;
  for (int i = 0; i < n; ++i) {
    float* p = out.ptr() + (static_cast<std::size_t>(i) * c + active) * plane;
    std::fill(p, p + (c - active) * plane, 0.0f);
  }
  return t.push(OpKind::kChannelMask, name, std::move(out), {x},
                [x, n, c, active, plane](Tape& tp, VarId self) {
                  const Tensor& dy = tp.grad(self);
                  Tensor& dx = tp.grad(x);
                  for (int i = 0; i < n; ++i) {
                    const std::size_t off = static_cast<std::size_t>(i) * c * plane;
                    for (std::size_t j = 0; j < active * plane; ++j) dx[off + j] += dy[off + j];
                  }
                });
}

VarId weight_mask(Tape& t, VarId w, const Tensor& mask, const std::string& name) {
  const Tensor& wv = t.value(w);
  expect(mask.shape == wv.shape, "weight_mask", name,
         "mask " + shape_str(mask.shape) + " does not match weight " + shape_str(wv.shape));
  Tensor out(wv.shape);
  for (std::size_t i = 0; i < wv.numel(); ++i) out[i] = mask[i] != 0.0f ? wv[i] : 0.0f;
  return t.push(OpKind::kWeightMask, name, std::move(out), {w}, [w, mask](Tape& tp, VarId self) {
    const Tensor& dy = tp.grad(self);
    Tensor& dw = tp.grad(w);
    for (std::size_t i = 0; i < dy.numel(); ++i)
      if (mask[i] != 0.0f) dw[i] += dy[i];
  });
}

VarId resize_channels(Tape& t, VarId x, int channels, const std::string& name) {
  const Tensor& xv = t.value(x);
  expect(xv.rank() >= 2 && channels > 0, "resize_channels", name, "bad target width");
  const int n = xv.dim(0), c = xv.dim(1);
  const std::size_t plane = xv.numel() / (static_cast<std::size_t>(n) * c);
  Shape shape = xv.shape;
  shape[1] = channels;
  Tensor out(shape);
  const int common = std::min(c, channels);
  for (int i = 0; i < n; ++i) {
    const float* src = xv.ptr() + static_cast<std::size_t>(i) * c * plane;
    float* dst = out.ptr() + static_cast<std::size_t>(i) * channels * plane;
    std::copy(src, src + common * plane, dst);
  }
  return t.push(OpKind::kResizeChannels, name, std::move(out), {x},
                [x, n, c, channels, common, plane](Tape& tp, VarId self) {
                  const Tensor& dy = tp.grad(self);
                  Tensor& dx = tp.grad(x);
                  for (int i = 0; i < n; ++i) {
                    const float* src = dy.ptr() + static_cast<std::size_t>(i) * channels * plane;
                    float* dst = dx.ptr() + static_cast<std::size_t>(i) * c * plane;
                    for (std::size_t j = 0; j < common * plane; ++j) dst[j] += src[j];
                  }
                });
}

}  // namespace onestage
