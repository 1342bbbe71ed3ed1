#pragma once

// Forward operators and their gradients. Every backward function takes the
// upstream gradient of a scalar loss and returns (or accumulates) gradients
// for the inputs and parameters of its forward counterpart.
//
// Parameter gradients accumulate (+=) so a parameter shared across calls sums
// its contributions; input gradients are returned fresh.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "wavetag/error.hpp"
#include "wavetag/tensor.hpp"

namespace wavetag {

// When set, every forward op checks its output for NaN/Inf.
inline bool g_check_finite = false;

template <typename T>
inline void check_finite(const Tensor<T>& t, const char* op) {
  if (g_check_finite && !t.all_finite()) throw NonFiniteError(std::string(op) + ": non-finite output");
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  if (stride == 0) throw ShapeError("convolution stride must be >= 1");
  if (in + 2 * pad < k) {
    throw ShapeError("convolution kernel " + std::to_string(k) + " exceeds padded input " +
                     std::to_string(in + 2 * pad));
  }
  return (in + 2 * pad - k) / stride + 1;
}

struct Conv2dGeometry {
  std::size_t stride_h = 1, stride_w = 1;
  std::size_t pad_h = 0, pad_w = 0;
};

namespace detail {

struct ConvDims {
  std::size_t B, Cin, H, W, Cout, Kh, Kw, Ho, Wo;
  Conv2dGeometry g;

  std::size_t rows() const { return Cin * Kh * Kw; }
  std::size_t cols() const { return B * Ho * Wo; }
};

inline ConvDims conv_dims(const Shape& x, const Shape& w, const Conv2dGeometry& g) {
  require_rank(x, 4, "conv2d input");
  require_rank(w, 4, "conv2d weight");
  if (w[1] != x[1]) {
    throw ShapeError("conv2d: weight expects " + std::to_string(w[1]) + " input channels, got " +
                     std::to_string(x[1]));
  }
  ConvDims d{x[0], x[1], x[2], x[3], w[0], w[2], w[3], 0, 0, g};
  d.Ho = conv_out_extent(d.H, d.Kh, g.stride_h, g.pad_h);
  d.Wo = conv_out_extent(d.W, d.Kw, g.stride_w, g.pad_w);
  return d;
}

// Output columns [lo, hi) whose input index o * stride + k - pad lies in [0, n).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out, std::size_t n, std::size_t k,
                                                       std::size_t stride, std::size_t pad) {
  // first o with o * stride + k >= pad
  const std::size_t lo = k >= pad ? 0 : (pad - k + stride - 1) / stride;
  // last o with o * stride + k - pad <= n - 1
  const std::size_t lim = n - 1 + pad;
  const std::size_t hi = lim < k ? 0 : std::min(out, (lim - k) / stride + 1);
  return {std::min(lo, hi), hi};
}

// Lowers the whole batch to a [Cin*Kh*Kw, B*Ho*Wo] patch matrix.
template <typename T>
void im2col(const T* x, const ConvDims& d, T* col) {
  const std::size_t HW = d.Ho * d.Wo;
  const std::size_t ncols = d.cols();
  for (std::size_t ci = 0; ci < d.Cin; ++ci) {
    for (std::size_t kh = 0; kh < d.Kh; ++kh) {
      const auto [oh_lo, oh_hi] = valid_range(d.Ho, d.H, kh, d.g.stride_h, d.g.pad_h);
      for (std::size_t kw = 0; kw < d.Kw; ++kw) {
        const auto [ow_lo, ow_hi] = valid_range(d.Wo, d.W, kw, d.g.stride_w, d.g.pad_w);
        T* row = col + ((ci * d.Kh + kh) * d.Kw + kw) * ncols;
        for (std::size_t b = 0; b < d.B; ++b) {
          const T* xc = x + (b * d.Cin + ci) * d.H * d.W;
          T* out = row + b * HW;
          for (std::size_t oh = 0; oh < d.Ho; ++oh) {
            T* o = out + oh * d.Wo;
            if (oh < oh_lo || oh >= oh_hi) {
              std::fill(o, o + d.Wo, T(0));
              continue;
            }
            // ow * stride + kw - pad is nonnegative on [ow_lo, ow_hi)
            const T* xr = xc + (oh * d.g.stride_h + kh - d.g.pad_h) * d.W;
            std::fill(o, o + ow_lo, T(0));
            const std::size_t sw = d.g.stride_w;
            for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) o[ow] = xr[ow * sw + kw - d.g.pad_w];
            std::fill(o + ow_hi, o + d.Wo, T(0));
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvDims& d, T* dx) {
  const std::size_t HW = d.Ho * d.Wo;
  const std::size_t ncols = d.cols();
  for (std::size_t ci = 0; ci < d.Cin; ++ci) {
    for (std::size_t kh = 0; kh < d.Kh; ++kh) {
      const auto [oh_lo, oh_hi] = valid_range(d.Ho, d.H, kh, d.g.stride_h, d.g.pad_h);
      for (std::size_t kw = 0; kw < d.Kw; ++kw) {
        const auto [ow_lo, ow_hi] = valid_range(d.Wo, d.W, kw, d.g.stride_w, d.g.pad_w);
        const T* row = col + ((ci * d.Kh + kh) * d.Kw + kw) * ncols;
        for (std::size_t b = 0; b < d.B; ++b) {
          T* xc = dx + (b * d.Cin + ci) * d.H * d.W;
          const T* in = row + b * HW;
          for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
            T* xr = xc + (oh * d.g.stride_h + kh - d.g.pad_h) * d.W;
            const T* c = in + oh * d.Wo;
            const std::size_t sw = d.g.stride_w;
            for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) xr[ow * sw + kw - d.g.pad_w] += c[ow];
          }
        }
      }
    }
  }
}

}  // namespace detail

// Cross-correlation (no kernel flip) with zero padding on raw weight storage
// viewed as [Cout,Cin,Kh,Kw].
template <typename T>
Tensor<T> conv2d_view(const Tensor<T>& x, const T* w, const Shape& w_shape, const Tensor<T>& b,
                      const Conv2dGeometry& g) {
  const auto d = detail::conv_dims(x.shape(), w_shape, g);
  if (b.size() != d.Cout) throw ShapeError("conv2d: bias length mismatch");
  const std::size_t HW = d.Ho * d.Wo;
  const auto col = std::make_unique_for_overwrite<T[]>(d.rows() * d.cols());
  detail::im2col(x.data(), d, col.get());
  RowMat<T> y(d.Cout, d.cols());
  y.noalias() = ConstMatMap<T>(w, d.Cout, d.rows()) * ConstMatMap<T>(col.get(), d.rows(), d.cols());

  auto out = Tensor<T>::uninitialized({d.B, d.Cout, d.Ho, d.Wo});
  for (std::size_t bi = 0; bi < d.B; ++bi) {
    for (std::size_t co = 0; co < d.Cout; ++co) {
      const T* src = y.data() + co * d.cols() + bi * HW;
      T* dst = out.data() + (bi * d.Cout + co) * HW;
      const T bias = b[co];
      for (std::size_t i = 0; i < HW; ++i) dst[i] = src[i] + bias;
    }
  }
  check_finite(out, "conv2d");
  return out;
}

// Accumulates into dw (same storage layout as w) and db; returns dx when requested.
template <typename T>
std::optional<Tensor<T>> conv2d_backward_view(const Tensor<T>& x, const T* w, const Shape& w_shape,
                                              const Conv2dGeometry& g, const Tensor<T>& dy, T* dw, Tensor<T>& db,
                                              bool want_dx = true) {
  const auto d = detail::conv_dims(x.shape(), w_shape, g);
  require_same_shape(dy.shape(), {d.B, d.Cout, d.Ho, d.Wo}, "conv2d_backward upstream");
  const std::size_t HW = d.Ho * d.Wo;

  RowMat<T> dyc(d.Cout, d.cols());
  for (std::size_t bi = 0; bi < d.B; ++bi) {
    for (std::size_t co = 0; co < d.Cout; ++co) {
      const T* src = dy.data() + (bi * d.Cout + co) * HW;
      std::copy(src, src + HW, dyc.data() + co * d.cols() + bi * HW);
    }
  }
  const auto col = std::make_unique_for_overwrite<T[]>(d.rows() * d.cols());
  detail::im2col(x.data(), d, col.get());

  MatMap<T>(dw, d.Cout, d.rows()).noalias() += dyc * ConstMatMap<T>(col.get(), d.rows(), d.cols()).transpose();
  for (std::size_t co = 0; co < d.Cout; ++co) {
    T acc = 0;
    const T* r = dyc.data() + co * d.cols();
    for (std::size_t i = 0; i < d.cols(); ++i) acc += r[i];
    db[co] += acc;
  }
  if (!want_dx) return std::nullopt;

  MatMap<T> dcol(col.get(), d.rows(), d.cols());
  dcol.noalias() = ConstMatMap<T>(w, d.Cout, d.rows()).transpose() * dyc;
  Tensor<T> dx(x.shape());
  detail::col2im_add(col.get(), d, dx.data());
  return dx;
}

// x [B,Cin,H,W], w [Cout,Cin,Kh,Kw], b [Cout] -> [B,Cout,Ho,Wo].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, const Conv2dGeometry& g) {
  return conv2d_view(x, w.data(), w.shape(), b, g);
}

template <typename T>
std::optional<Tensor<T>> conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Conv2dGeometry& g,
                                         const Tensor<T>& dy, Tensor<T>& dw, Tensor<T>& db, bool want_dx = true) {
  require_same_shape(dw.shape(), w.shape(), "conv2d_backward weight gradient");
  return conv2d_backward_view(x, w.data(), w.shape(), g, dy, dw.data(), db, want_dx);
}

// 1D convolution over the last axis: x [B,Cin,L], w [Cout,Cin,K] -> [B,Cout,Lout].
template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t stride, std::size_t pad) {
  require_rank(x.shape(), 3, "conv1d input");
  require_rank(w.shape(), 3, "conv1d weight");
  const Conv2dGeometry g{1, stride, 0, pad};
  auto y = conv2d_view(x.reshaped({x.dim(0), x.dim(1), 1, x.dim(2)}), w.data(), {w.dim(0), w.dim(1), 1, w.dim(2)}, b, g);
  return std::move(y).reshaped({y.dim(0), y.dim(1), y.dim(3)});
}

template <typename T>
std::optional<Tensor<T>> conv1d_backward(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride, std::size_t pad,
                                         const Tensor<T>& dy, Tensor<T>& dw, Tensor<T>& db, bool want_dx = true) {
  require_same_shape(dw.shape(), w.shape(), "conv1d_backward weight gradient");
  const Conv2dGeometry g{1, stride, 0, pad};
  auto dx = conv2d_backward_view(x.reshaped({x.dim(0), x.dim(1), 1, x.dim(2)}), w.data(),
                                 {w.dim(0), w.dim(1), 1, w.dim(2)}, g,
                                 dy.reshaped({dy.dim(0), dy.dim(1), 1, dy.dim(2)}), dw.data(), db, want_dx);
  if (dx) dx->reshape(x.shape());
  return dx;
}

enum class Mode { train, eval };

struct BatchNormOptions {
  double momentum = 0.9;  // running <- momentum * running + (1 - momentum) * batch
  double eps = 1e-5;
};

// Per-channel statistics saved by the train-mode forward pass.
template <typename T>
struct BatchNormCache {
  Tensor<T> xhat;
  std::vector<T> inv_std;
  Mode mode = Mode::train;
};

// Normalizes over every axis except axis 1 (channels). Train mode uses batch
// statistics and updates the running buffers; eval mode uses the buffers.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                    Tensor<T>& running_var, Mode mode, const BatchNormOptions& opt = {},
                    BatchNormCache<T>* cache = nullptr) {
  if (x.rank() < 2) throw ShapeError("batchnorm: input needs a channel axis");
  const std::size_t B = x.dim(0), C = x.dim(1);
  const std::size_t S = x.size() / (B * C);
  if (gamma.size() != C || beta.size() != C || running_mean.size() != C || running_var.size() != C) {
    throw ShapeError("batchnorm: parameter length mismatch");
  }
  const std::size_t M = B * S;
  if (mode == Mode::train && M < 2) throw ShapeError("batchnorm: train mode needs at least 2 values per channel");

  auto y = Tensor<T>::uninitialized(x.shape());
  auto xhat = Tensor<T>::uninitialized(x.shape());
  std::vector<T> inv_std(C);
  for (std::size_t c = 0; c < C; ++c) {
    double mean, var;
    if (mode == Mode::train) {
      double s = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const T* p = x.data() + (b * C + c) * S;
        for (std::size_t i = 0; i < S; ++i) s += p[i];
      }
      mean = s / static_cast<double>(M);
      double ss = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const T* p = x.data() + (b * C + c) * S;
        for (std::size_t i = 0; i < S; ++i) {
          const double dv = p[i] - mean;
          ss += dv * dv;
        }
      }
      var = ss / static_cast<double>(M);
      running_mean[c] = static_cast<T>(opt.momentum * running_mean[c] + (1.0 - opt.momentum) * mean);
      running_var[c] = static_cast<T>(opt.momentum * running_var[c] +
                                      (1.0 - opt.momentum) * ss / static_cast<double>(M - 1));
    } else {
      mean = running_mean[c];
      var = running_var[c];
    }
    const double is = 1.0 / std::sqrt(var + opt.eps);
    inv_std[c] = static_cast<T>(is);
    const T g = gamma[c], bt = beta[c];
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t off = (b * C + c) * S;
      for (std::size_t i = 0; i < S; ++i) {
        const T h = static_cast<T>((x[off + i] - mean) * is);
        xhat[off + i] = h;
        y[off + i] = g * h + bt;
      }
    }
  }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
    cache->mode = mode;
  }
  check_finite(y, "batchnorm");
  return y;
}

template <typename T>
Tensor<T> batchnorm_backward(const BatchNormCache<T>& cache, const Tensor<T>& gamma, const Tensor<T>& dy,
                             Tensor<T>& dgamma, Tensor<T>& dbeta) {
  require_same_shape(dy.shape(), cache.xhat.shape(), "batchnorm_backward upstream");
  const std::size_t B = dy.dim(0), C = dy.dim(1);
  const std::size_t S = dy.size() / (B * C);
  const double M = static_cast<double>(B * S);
  auto dx = Tensor<T>::uninitialized(dy.shape());
  for (std::size_t c = 0; c < C; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t off = (b * C + c) * S;
      for (std::size_t i = 0; i < S; ++i) {
        sum_dy += dy[off + i];
        sum_dy_xhat += dy[off + i] * cache.xhat[off + i];
      }
    }
    dgamma[c] += static_cast<T>(sum_dy_xhat);
    dbeta[c] += static_cast<T>(sum_dy);
    const double scale = gamma[c] * cache.inv_std[c];
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t off = (b * C + c) * S;
      for (std::size_t i = 0; i < S; ++i) {
        if (cache.mode == Mode::train) {
          dx[off + i] = static_cast<T>(scale / M * (M * dy[off + i] - sum_dy - cache.xhat[off + i] * sum_dy_xhat));
        } else {
          dx[off + i] = static_cast<T>(scale * dy[off + i]);
        }
      }
    }
  }
  return dx;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  auto y = Tensor<T>::uninitialized(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  return y;
}

// Uses the forward output: the gradient passes where y > 0.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& y, const Tensor<T>& dy) {
  auto dx = Tensor<T>::uninitialized(dy.shape());
  for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = y[i] > T(0) ? dy[i] : T(0);
  return dx;
}

template <typename T>
T sigmoid_scalar(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = sigmoid_scalar(x[i]);
  return y;
}

template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& y, const Tensor<T>& dy) {
  Tensor<T> dx(dy.shape());
  for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = dy[i] * y[i] * (T(1) - y[i]);
  return dx;
}

namespace detail {
struct AxisSplit {
  std::size_t outer, len, inner;
};
inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisSplit a{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}
}  // namespace detail

// Softmax along `axis` (the time axis of the caller), independently for every
// other index.
template <typename T>
Tensor<T> softmax_over_axis(const Tensor<T>& x, std::size_t axis) {
  const auto a = detail::split_axis(x.shape(), axis);
  Tensor<T> y(x.shape());
  for (std::size_t o = 0; o < a.outer; ++o) {
    for (std::size_t in = 0; in < a.inner; ++in) {
      const std::size_t base = o * a.len * a.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t t = 0; t < a.len; ++t) mx = std::max(mx, x[base + t * a.inner]);
      T sum = 0;
      for (std::size_t t = 0; t < a.len; ++t) {
        const T e = std::exp(x[base + t * a.inner] - mx);
        y[base + t * a.inner] = e;
        sum += e;
      }
      for (std::size_t t = 0; t < a.len; ++t) y[base + t * a.inner] /= sum;
    }
  }
  return y;
}

template <typename T>
Tensor<T> softmax_over_axis_backward(const Tensor<T>& y, const Tensor<T>& dy, std::size_t axis) {
  const auto a = detail::split_axis(y.shape(), axis);
  Tensor<T> dx(y.shape());
  for (std::size_t o = 0; o < a.outer; ++o) {
    for (std::size_t in = 0; in < a.inner; ++in) {
      const std::size_t base = o * a.len * a.inner + in;
      T dot = 0;
      for (std::size_t t = 0; t < a.len; ++t) dot += dy[base + t * a.inner] * y[base + t * a.inner];
      for (std::size_t t = 0; t < a.len; ++t) {
        const std::size_t i = base + t * a.inner;
        dx[i] = y[i] * (dy[i] - dot);
      }
    }
  }
  return dx;
}

struct PoolGeometry {
  std::size_t kh = 1, kw = 1;
  std::size_t stride_h = 1, stride_w = 1;
  std::size_t pad_h = 0, pad_w = 0;
};

// Window maximum over [B,C,H,W]. Padding never wins; ties keep the first
// element in row-major window order. argmax receives flat input indices.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, const PoolGeometry& g, std::vector<std::size_t>* argmax = nullptr) {
  require_rank(x.shape(), 4, "maxpool2d input");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Ho = conv_out_extent(H, g.kh, g.stride_h, g.pad_h);
  const std::size_t Wo = conv_out_extent(W, g.kw, g.stride_w, g.pad_w);
  auto y = Tensor<T>::uninitialized({B, C, Ho, Wo});
  if (argmax) argmax->assign(y.size(), 0);
  std::size_t oi = 0;
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const std::size_t base = bc * H * W;
    for (std::size_t oh = 0; oh < Ho; ++oh) {
      for (std::size_t ow = 0; ow < Wo; ++ow, ++oi) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_i = std::numeric_limits<std::size_t>::max();
        for (std::size_t kh = 0; kh < g.kh; ++kh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride_h + kh) - static_cast<std::ptrdiff_t>(g.pad_h);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
          for (std::size_t kw = 0; kw < g.kw; ++kw) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride_w + kw) - static_cast<std::ptrdiff_t>(g.pad_w);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
            const std::size_t idx = base + static_cast<std::size_t>(ih) * W + static_cast<std::size_t>(iw);
            if (best_i == std::numeric_limits<std::size_t>::max() || x[idx] > best) {
              best = x[idx];
              best_i = idx;
            }
          }
        }
        if (best_i == std::numeric_limits<std::size_t>::max()) throw ShapeError("maxpool2d: window entirely in padding");
        y[oi] = best;
        if (argmax) (*argmax)[oi] = best_i;
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> maxpool_backward(const Shape& input_shape, const std::vector<std::size_t>& argmax, const Tensor<T>& dy) {
  if (argmax.size() != dy.size()) throw ShapeError("maxpool_backward: upstream size mismatch");
  Tensor<T> dx(input_shape);
  for (std::size_t i = 0; i < dy.size(); ++i) dx[argmax[i]] += dy[i];
  return dx;
}

// [B,C,L] -> [B,C,Lout]
template <typename T>
Tensor<T> maxpool1d(const Tensor<T>& x, std::size_t k, std::size_t stride, std::vector<std::size_t>* argmax = nullptr) {
  require_rank(x.shape(), 3, "maxpool1d input");
  auto y = maxpool2d(x.reshaped({x.dim(0), x.dim(1), 1, x.dim(2)}), PoolGeometry{1, k, 1, stride, 0, 0}, argmax);
  return std::move(y).reshaped({y.dim(0), y.dim(1), y.dim(3)});
}

// x [B,Din], w [Dout,Din], b [Dout] -> [B,Dout]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require_rank(x.shape(), 2, "linear input");
  require_rank(w.shape(), 2, "linear weight");
  const std::size_t B = x.dim(0), Din = x.dim(1), Dout = w.dim(0);
  if (w.dim(1) != Din) throw ShapeError("linear: weight expects " + std::to_string(w.dim(1)) + " inputs, got " + std::to_string(Din));
  if (b.size() != Dout) throw ShapeError("linear: bias length mismatch");
  Tensor<T> y({B, Dout});
  MatMap<T> ym(y.data(), B, Dout);
  ym.noalias() = ConstMatMap<T>(x.data(), B, Din) * ConstMatMap<T>(w.data(), Dout, Din).transpose();
  ym.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.data(), Dout);
  check_finite(y, "linear");
  return y;
}

template <typename T>
Tensor<T> linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, Tensor<T>& dw, Tensor<T>& db) {
  const std::size_t B = x.dim(0), Din = x.dim(1), Dout = w.dim(0);
  require_same_shape(dy.shape(), {B, Dout}, "linear_backward upstream");
  ConstMatMap<T> dym(dy.data(), B, Dout);
  MatMap<T>(dw.data(), Dout, Din).noalias() += dym.transpose() * ConstMatMap<T>(x.data(), B, Din);
  for (std::size_t o = 0; o < Dout; ++o) {
    T acc = 0;
    for (std::size_t bi = 0; bi < B; ++bi) acc += dy[bi * Dout + o];
    db[o] += acc;
  }
  Tensor<T> dx({B, Din});
  MatMap<T>(dx.data(), B, Din).noalias() = dym * ConstMatMap<T>(w.data(), Dout, Din);
  return dx;
}

// Mean over one axis; the axis is removed from the output shape.
template <typename T>
Tensor<T> mean_over_axis(const Tensor<T>& x, std::size_t axis) {
  const auto a = detail::split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor<T> y(out_shape);
  for (std::size_t o = 0; o < a.outer; ++o) {
    for (std::size_t in = 0; in < a.inner; ++in) {
      T s = 0;
      for (std::size_t t = 0; t < a.len; ++t) s += x[(o * a.len + t) * a.inner + in];
      y[o * a.inner + in] = s / static_cast<T>(a.len);
    }
  }
  return y;
}

template <typename T>
Tensor<T> mean_over_axis_backward(const Shape& input_shape, std::size_t axis, const Tensor<T>& dy) {
  const auto a = detail::split_axis(input_shape, axis);
  Tensor<T> dx(input_shape);
  const T inv = T(1) / static_cast<T>(a.len);
  for (std::size_t o = 0; o < a.outer; ++o) {
    for (std::size_t t = 0; t < a.len; ++t) {
      for (std::size_t in = 0; in < a.inner; ++in) dx[(o * a.len + t) * a.inner + in] = dy[o * a.inner + in] * inv;
    }
  }
  return dx;
}

// Residual sum. Its gradient is the upstream gradient for both operands.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> y = a;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b[i];
  return y;
}

template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add_inplace");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

// [B,C,1,T] -> [B,1,C,T]. Row-major layouts coincide, so only the shape changes:
// element (b,c,0,t) lands on (b,0,c,t).
template <typename T>
Tensor<T> transpose_c1t_to_1ct(Tensor<T> x) {
  require_rank(x.shape(), 4, "transpose_c1t_to_1ct");
  if (x.dim(2) != 1) throw ShapeError("transpose_c1t_to_1ct: expected height 1, got " + shape_str(x.shape()));
  const Shape s{x.dim(0), 1, x.dim(1), x.dim(3)};
  return std::move(x).reshaped(s);
}

template <typename T>
Tensor<T> transpose_1ct_to_c1t(Tensor<T> x) {
  require_rank(x.shape(), 4, "transpose_1ct_to_c1t");
  if (x.dim(1) != 1) throw ShapeError("transpose_1ct_to_c1t: expected one channel, got " + shape_str(x.shape()));
  const Shape s{x.dim(0), x.dim(2), 1, x.dim(3)};
  return std::move(x).reshaped(s);
}

// [B,D,W] -> [B,W,D]; it is its own adjoint.
template <typename T>
Tensor<T> swap_last_axes(const Tensor<T>& x) {
  require_rank(x.shape(), 3, "swap_last_axes");
  const std::size_t B = x.dim(0), D = x.dim(1), W = x.dim(2);
  Tensor<T> y({B, W, D});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t d = 0; d < D; ++d) {
      for (std::size_t w = 0; w < W; ++w) y[(b * W + w) * D + d] = x[(b * D + d) * W + w];
    }
  }
  return y;
}

// Concatenates [B,N1] and [B,N2] along the feature axis.
template <typename T>
Tensor<T> concat_features(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a.shape(), 2, "concat_features");
  require_rank(b.shape(), 2, "concat_features");
  if (a.dim(0) != b.dim(0)) throw ShapeError("concat_features: batch mismatch");
  const std::size_t B = a.dim(0), N1 = a.dim(1), N2 = b.dim(1);
  Tensor<T> y({B, N1 + N2});
  for (std::size_t i = 0; i < B; ++i) {
    std::copy(a.data() + i * N1, a.data() + (i + 1) * N1, y.data() + i * (N1 + N2));
    std::copy(b.data() + i * N2, b.data() + (i + 1) * N2, y.data() + i * (N1 + N2) + N1);
  }
  return y;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_features(const Tensor<T>& y, std::size_t n1) {
  const std::size_t B = y.dim(0), N = y.dim(1), N2 = N - n1;
  Tensor<T> a({B, n1}), b({B, N2});
  for (std::size_t i = 0; i < B; ++i) {
    std::copy(y.data() + i * N, y.data() + i * N + n1, a.data() + i * n1);
    std::copy(y.data() + i * N + n1, y.data() + (i + 1) * N, b.data() + i * N2);
  }
  return {std::move(a), std::move(b)};
}

inline constexpr double kProbClamp = 1e-7;

// Probability-space binary cross entropy summed over classes and averaged over
// the batch: -(1/B) sum_{k,n} [(1-y) log(1-t) + y log t], with t clamped to
// [1e-7, 1-1e-7]. Labels may be fractional (ratio labels).
template <typename T>
double bce_from_probability(const Tensor<T>& t, const Tensor<T>& y) {
  require_rank(t.shape(), 2, "bce_from_probability");
  require_same_shape(t.shape(), y.shape(), "bce_from_probability");
  const double B = static_cast<double>(t.dim(0));
  double s = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double p = std::clamp(static_cast<double>(t[i]), kProbClamp, 1.0 - kProbClamp);
    const double yy = y[i];
    s += (1.0 - yy) * std::log(1.0 - p) + yy * std::log(p);
  }
  return -s / B;
}

// Gradient with respect to t; zero where the clamp is active.
template <typename T>
Tensor<T> bce_from_probability_backward(const Tensor<T>& t, const Tensor<T>& y, double upstream = 1.0) {
  require_same_shape(t.shape(), y.shape(), "bce_from_probability_backward");
  const double B = static_cast<double>(t.dim(0));
  Tensor<T> dt(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double p = t[i];
    if (p < kProbClamp || p > 1.0 - kProbClamp) continue;
    const double yy = y[i];
    dt[i] = static_cast<T>(-upstream / B * (yy / p - (1.0 - yy) / (1.0 - p)));
  }
  return dt;
}

}  // namespace wavetag
