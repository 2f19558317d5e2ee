#pragma once

// Forward primitives with their backward rules.
//
// Convolutions lower to im2col + a fixed i-k-j loop nest, so for a given
// build the summation order (and therefore every bit of the result) is fixed.
// Only per-channel broadcast exists; everything else requires equal shapes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "erfcond/tensor.hpp"

namespace erfcond {

using Rng = std::mt19937_64;

struct Conv2dOptions {
  int stride_h = 1, stride_w = 1;
  int pad_h = 0, pad_w = 0;
  int dilation_h = 1, dilation_w = 1;

  static Conv2dOptions square(int stride, int pad, int dilation = 1) {
    return {stride, stride, pad, pad, dilation, dilation};
  }
};

struct ConvTranspose2dOptions {
  int stride_h = 1, stride_w = 1;
  int pad_h = 0, pad_w = 0;
  int output_pad_h = 0, output_pad_w = 0;
  int dilation_h = 1, dilation_w = 1;

  static ConvTranspose2dOptions square(int stride, int pad, int output_pad, int dilation = 1) {
    return {stride, stride, pad, pad, output_pad, output_pad, dilation, dilation};
  }
};

inline std::int64_t conv_out_size(std::int64_t in, int k, int stride, int pad, int dilation) {
  const std::int64_t span = static_cast<std::int64_t>(dilation) * (k - 1) + 1;
  const std::int64_t padded = in + 2 * pad - span;
  if (padded < 0) return 0;
  return padded / stride + 1;
}

inline std::int64_t conv_transpose_out_size(std::int64_t in, int k, int stride, int pad, int output_pad,
                                            int dilation) {
  return (in - 1) * stride - 2 * pad + static_cast<std::int64_t>(dilation) * (k - 1) + output_pad + 1;
}

namespace detail {

template <typename T>
using ImplPtr = std::shared_ptr<TensorImpl<T>>;

template <typename T>
bool tracked(const ImplPtr<T>& p) {
  return p && p->requires_grad;
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using CMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MMap = Eigen::Map<RowMat<T>>;

// C[M x N] += A[M x K] * B[K x N]
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
  MMap<T>(c, m, n).noalias() += CMap<T>(a, m, k) * CMap<T>(b, k, n);
}

// C[K x N] += A[M x K]^T * B[M x N]
template <typename T>
void gemm_at_acc(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
  MMap<T>(c, k, n).noalias() += CMap<T>(a, m, k).transpose() * CMap<T>(b, m, n);
}

// Eight-lane dot product with a fixed combination order.
template <typename T>
T dot(const T* a, const T* b, std::int64_t n) {
  T acc[8] = {};
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (int l = 0; l < 8; ++l) acc[l] += a[i + l] * b[i + l];
  }
  T tail = T(0);
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

// C[M x K] += A[M x N] * B[K x N]^T
template <typename T>
void gemm_bt_acc(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
  MMap<T>(c, m, k).noalias() += CMap<T>(a, m, n) * CMap<T>(b, k, n).transpose();
}

struct ConvGeometry {
  std::int64_t channels, height, width;  // image side
  int kh, kw;
  int sh, sw, ph, pw, dh, dw;
  std::int64_t out_h, out_w;  // column side
};

template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* col) {
  const std::int64_t cols = g.out_h * g.out_w;
  for (std::int64_t c = 0; c < g.channels; ++c) {
    for (int i = 0; i < g.kh; ++i) {
      for (int j = 0; j < g.kw; ++j) {
        T* dst = col + ((c * g.kh + i) * g.kw + j) * cols;
        for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
          const std::int64_t ih = oh * g.sh - g.ph + static_cast<std::int64_t>(i) * g.dh;
          T* drow = dst + oh * g.out_w;
          if (ih < 0 || ih >= g.height) {
            std::fill(drow, drow + g.out_w, T(0));
            continue;
          }
          const T* srow = img + (c * g.height + ih) * g.width;
          for (std::int64_t ow = 0; ow < g.out_w; ++ow) {
            const std::int64_t iw = ow * g.sw - g.pw + static_cast<std::int64_t>(j) * g.dw;
            drow[ow] = (iw >= 0 && iw < g.width) ? srow[iw] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_acc(const T* col, const ConvGeometry& g, T* img) {
  const std::int64_t cols = g.out_h * g.out_w;
  for (std::int64_t c = 0; c < g.channels; ++c) {
    for (int i = 0; i < g.kh; ++i) {
      for (int j = 0; j < g.kw; ++j) {
        const T* src = col + ((c * g.kh + i) * g.kw + j) * cols;
        for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
          const std::int64_t ih = oh * g.sh - g.ph + static_cast<std::int64_t>(i) * g.dh;
          if (ih < 0 || ih >= g.height) continue;
          T* drow = img + (c * g.height + ih) * g.width;
          const T* srow = src + oh * g.out_w;
          for (std::int64_t ow = 0; ow < g.out_w; ++ow) {
            const std::int64_t iw = ow * g.sw - g.pw + static_cast<std::int64_t>(j) * g.dw;
            if (iw >= 0 && iw < g.width) drow[iw] += srow[ow];
          }
        }
      }
    }
  }
}

inline void require_rank(const Shape& s, std::size_t rank, const char* what) {
  if (s.size() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(s));
  }
}

template <typename T>
void require_finite(const Tensor<T>& t, const char* what) {
  if (!all_finite<T>(t.data())) throw NumericError(std::string(what) + ": non-finite input");
}

}  // namespace detail

// input [N,Cin,H,W], weight [Cout,Cin,kH,kW], bias [Cout] or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 const Conv2dOptions& opt) {
  detail::require_rank(input.shape(), 4, "conv2d input");
  detail::require_rank(weight.shape(), 4, "conv2d weight");
  const auto n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const auto cout = weight.dim(0);
  const int kh = static_cast<int>(weight.dim(2)), kw = static_cast<int>(weight.dim(3));
  if (weight.dim(1) != cin) {
    throw ShapeError("conv2d: input has " + std::to_string(cin) + " channels, weight expects " +
                     std::to_string(weight.dim(1)));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()) + " does not match Cout=" +
                     std::to_string(cout));
  }
  if (opt.stride_h < 1 || opt.stride_w < 1 || opt.dilation_h < 1 || opt.dilation_w < 1 || opt.pad_h < 0 ||
      opt.pad_w < 0) {
    throw ShapeError("conv2d: invalid stride/padding/dilation");
  }
  const auto oh = conv_out_size(h, kh, opt.stride_h, opt.pad_h, opt.dilation_h);
  const auto ow = conv_out_size(w, kw, opt.stride_w, opt.pad_w, opt.dilation_w);
  if (oh < 1 || ow < 1) {
    throw ShapeError("conv2d: non-positive output size for input " + shape_str(input.shape()));
  }
  detail::require_finite(input, "conv2d");

  const detail::ConvGeometry g{cin, h, w, kh, kw, opt.stride_h, opt.stride_w, opt.pad_h, opt.pad_w,
                               opt.dilation_h, opt.dilation_w, oh, ow};
  const std::int64_t k = cin * kh * kw, p = oh * ow;
  const bool keep_cols = grad_enabled() && weight.requires_grad();

  std::vector<T> out(static_cast<std::size_t>(n * cout * p));
  std::vector<std::vector<T>> saved;
  std::vector<T> col(static_cast<std::size_t>(k * p));
  const T* wdata = weight.data().data();
  for (std::int64_t b = 0; b < n; ++b) {
    detail::im2col(input.data().data() + b * cin * h * w, g, col.data());
    T* ob = out.data() + b * cout * p;
    if (bias.defined()) {
      for (std::int64_t c = 0; c < cout; ++c) std::fill(ob + c * p, ob + (c + 1) * p, bias[c]);
    }
    detail::gemm_acc(wdata, col.data(), ob, cout, k, p);
    if (keep_cols) saved.push_back(col);
  }

  auto xi = input.impl(), wi = weight.impl(), bi = bias.defined() ? bias.impl() : nullptr;
  return make_result<T>(
      Shape{n, cout, oh, ow}, std::move(out), "conv2d", {xi, wi, bi},
      [xi, wi, bi, g, n, cin, cout, k, p, saved = std::move(saved)](const std::vector<T>& gy) {
        const std::int64_t in_sz = cin * g.height * g.width;
        std::vector<T> dcol;
        for (std::int64_t b = 0; b < n; ++b) {
          const T* gyb = gy.data() + b * cout * p;
          if (detail::tracked(xi)) {
            dcol.assign(static_cast<std::size_t>(k * p), T(0));
            detail::gemm_at_acc(wi->data.data(), gyb, dcol.data(), cout, k, p);
            detail::col2im_acc(dcol.data(), g, xi->grad_buffer() + b * in_sz);
          }
          if (detail::tracked(wi)) {
            detail::gemm_bt_acc(gyb, saved[static_cast<std::size_t>(b)].data(), wi->grad_buffer(), cout, k, p);
          }
          if (detail::tracked(bi)) {
            T* gb = bi->grad_buffer();
            for (std::int64_t c = 0; c < cout; ++c) {
              T s = T(0);
              for (std::int64_t j = 0; j < p; ++j) s += gyb[c * p + j];
              gb[c] += s;
            }
          }
        }
      });
}

// input [N,Cin,H,W], weight [Cin,Cout,kH,kW] (transposed-conv layout), bias [Cout] or undefined.
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                           const ConvTranspose2dOptions& opt) {
  detail::require_rank(input.shape(), 4, "conv_transpose2d input");
  detail::require_rank(weight.shape(), 4, "conv_transpose2d weight");
  const auto n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const auto cout = weight.dim(1);
  const int kh = static_cast<int>(weight.dim(2)), kw = static_cast<int>(weight.dim(3));
  if (weight.dim(0) != cin) {
    throw ShapeError("conv_transpose2d: input has " + std::to_string(cin) + " channels, weight expects " +
                     std::to_string(weight.dim(0)));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw ShapeError("conv_transpose2d: bias shape " + shape_str(bias.shape()) + " does not match Cout=" +
                     std::to_string(cout));
  }
  if (opt.stride_h < 1 || opt.stride_w < 1 || opt.dilation_h < 1 || opt.dilation_w < 1 || opt.pad_h < 0 ||
      opt.pad_w < 0 || opt.output_pad_h < 0 || opt.output_pad_w < 0 ||
      (opt.output_pad_h >= std::max(opt.stride_h, opt.dilation_h)) ||
      (opt.output_pad_w >= std::max(opt.stride_w, opt.dilation_w))) {
    throw ShapeError("conv_transpose2d: invalid stride/padding/output_padding/dilation");
  }
  const auto oh = conv_transpose_out_size(h, kh, opt.stride_h, opt.pad_h, opt.output_pad_h, opt.dilation_h);
  const auto ow = conv_transpose_out_size(w, kw, opt.stride_w, opt.pad_w, opt.output_pad_w, opt.dilation_w);
  if (oh < 1 || ow < 1) {
    throw ShapeError("conv_transpose2d: non-positive output size for input " + shape_str(input.shape()));
  }
  detail::require_finite(input, "conv_transpose2d");

  // The output plays the role of a conv2d input whose columns are the input pixels.
  const detail::ConvGeometry g{cout, oh, ow, kh, kw, opt.stride_h, opt.stride_w, opt.pad_h, opt.pad_w,
                               opt.dilation_h, opt.dilation_w, h, w};
  const std::int64_t k = cout * kh * kw, p = h * w, out_sz = cout * oh * ow;

  std::vector<T> out(static_cast<std::size_t>(n * out_sz), T(0));
  std::vector<T> col(static_cast<std::size_t>(k * p));
  for (std::int64_t b = 0; b < n; ++b) {
    std::fill(col.begin(), col.end(), T(0));
    detail::gemm_at_acc(weight.data().data(), input.data().data() + b * cin * p, col.data(), cin, k, p);
    T* ob = out.data() + b * out_sz;
    detail::col2im_acc(col.data(), g, ob);
    if (bias.defined()) {
      for (std::int64_t c = 0; c < cout; ++c) {
        const T bv = bias[c];
        for (std::int64_t j = 0; j < oh * ow; ++j) ob[c * oh * ow + j] += bv;
      }
    }
  }

  auto xi = input.impl(), wi = weight.impl(), bi = bias.defined() ? bias.impl() : nullptr;
  return make_result<T>(Shape{n, cout, oh, ow}, std::move(out), "conv_transpose2d", {xi, wi, bi},
                        [xi, wi, bi, g, n, cin, cout, k, p, out_sz](const std::vector<T>& gy) {
                          std::vector<T> dcol(static_cast<std::size_t>(k * p));
                          const std::int64_t plane = g.height * g.width;
                          for (std::int64_t b = 0; b < n; ++b) {
                            const T* gyb = gy.data() + b * out_sz;
                            detail::im2col(gyb, g, dcol.data());
                            if (detail::tracked(xi)) {
                              detail::gemm_acc(wi->data.data(), dcol.data(), xi->grad_buffer() + b * cin * p, cin,
                                               k, p);
                            }
                            if (detail::tracked(wi)) {
                              detail::gemm_bt_acc(xi->data.data() + b * cin * p, dcol.data(), wi->grad_buffer(),
                                                  cin, k, p);
                            }
                            if (detail::tracked(bi)) {
                              T* gb = bi->grad_buffer();
                              for (std::int64_t c = 0; c < cout; ++c) {
                                T s = T(0);
                                for (std::int64_t j = 0; j < plane; ++j) s += gyb[c * plane + j];
                                gb[c] += s;
                              }
                            }
                          }
                        });
}

// Per-channel normalization over (N,H,W). In training mode the running
// statistics are updated in place (unbiased variance, PyTorch convention).
template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                       Tensor<T>& running_mean, Tensor<T>& running_var, T eps, T momentum, bool training) {
  detail::require_rank(input.shape(), 4, "batch_norm2d input");
  const auto n = input.dim(0), c = input.dim(1), plane = input.dim(2) * input.dim(3);
  for (const Tensor<T>* t : std::initializer_list<const Tensor<T>*>{&gamma, &beta, &running_mean, &running_var}) {
    if (t->rank() != 1 || t->dim(0) != c) {
      throw ShapeError("batch_norm2d: per-channel tensor " + shape_str(t->shape()) + " does not match C=" +
                       std::to_string(c));
    }
  }
  if (!(eps > T(0))) throw Error("batch_norm2d: eps must be positive");
  const std::int64_t m = n * plane;
  if (training && m < 2) throw ShapeError("batch_norm2d: training needs more than one value per channel");

  std::vector<T> out(static_cast<std::size_t>(input.numel()));
  std::vector<T> xhat(training ? out.size() : 0);
  std::vector<T> invstd(static_cast<std::size_t>(c));
  std::vector<T> mean(static_cast<std::size_t>(c));
  const T* x = input.data().data();
  for (std::int64_t ch = 0; ch < c; ++ch) {
    T mu, var;
    if (training) {
      T s = T(0);
      for (std::int64_t b = 0; b < n; ++b) {
        const T* px = x + (b * c + ch) * plane;
        for (std::int64_t j = 0; j < plane; ++j) s += px[j];
      }
      mu = s / static_cast<T>(m);
      T ss = T(0);
      for (std::int64_t b = 0; b < n; ++b) {
        const T* px = x + (b * c + ch) * plane;
        for (std::int64_t j = 0; j < plane; ++j) ss += (px[j] - mu) * (px[j] - mu);
      }
      var = ss / static_cast<T>(m);
      running_mean[ch] = (T(1) - momentum) * running_mean[ch] + momentum * mu;
      running_var[ch] = (T(1) - momentum) * running_var[ch] + momentum * ss / static_cast<T>(m - 1);
    } else {
      mu = running_mean[ch];
      var = running_var[ch];
    }
    const T is = T(1) / std::sqrt(var + eps);
    invstd[static_cast<std::size_t>(ch)] = is;
    mean[static_cast<std::size_t>(ch)] = mu;
    const T g = gamma[ch], be = beta[ch];
    for (std::int64_t b = 0; b < n; ++b) {
      const std::int64_t off = (b * c + ch) * plane;
      for (std::int64_t j = 0; j < plane; ++j) {
        const T xh = (x[off + j] - mu) * is;
        if (training) xhat[static_cast<std::size_t>(off + j)] = xh;
        out[static_cast<std::size_t>(off + j)] = g * xh + be;
      }
    }
  }

  auto xi = input.impl(), gi = gamma.impl(), bi = beta.impl();
  return make_result<T>(
      input.shape(), std::move(out), "batch_norm2d", {xi, gi, bi},
      [xi, gi, bi, n, c, plane, m, training, xhat = std::move(xhat), invstd = std::move(invstd),
       mean = std::move(mean)](const std::vector<T>& gy) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const T is = invstd[static_cast<std::size_t>(ch)];
          const T mu = mean[static_cast<std::size_t>(ch)];
          T sum_dy = T(0), sum_dy_xh = T(0);
          for (std::int64_t b = 0; b < n; ++b) {
            const std::int64_t off = (b * c + ch) * plane;
            for (std::int64_t j = 0; j < plane; ++j) {
              const T xh = training ? xhat[static_cast<std::size_t>(off + j)]
                                    : (xi->data[static_cast<std::size_t>(off + j)] - mu) * is;
              sum_dy += gy[static_cast<std::size_t>(off + j)];
              sum_dy_xh += gy[static_cast<std::size_t>(off + j)] * xh;
            }
          }
          if (detail::tracked(gi)) gi->grad_buffer()[ch] += sum_dy_xh;
          if (detail::tracked(bi)) bi->grad_buffer()[ch] += sum_dy;
          if (!detail::tracked(xi)) continue;
          const T g = gi->data[static_cast<std::size_t>(ch)];
          T* gx = xi->grad_buffer();
          const T mt = static_cast<T>(m);
          for (std::int64_t b = 0; b < n; ++b) {
            const std::int64_t off = (b * c + ch) * plane;
            for (std::int64_t j = 0; j < plane; ++j) {
              const auto idx = static_cast<std::size_t>(off + j);
              if (training) {
                gx[idx] += g * is / mt * (mt * gy[idx] - sum_dy - xhat[idx] * sum_dy_xh);
              } else {
                gx[idx] += g * is * gy[idx];
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  std::vector<T> out(input.data().begin(), input.data().end());
  for (auto& v : out) v = v > T(0) ? v : T(0);
  auto xi = input.impl();
  return make_result<T>(input.shape(), std::move(out), "relu", {xi}, [xi](const std::vector<T>& gy) {
    T* gx = xi->grad_buffer();
    for (std::size_t i = 0; i < gy.size(); ++i) {
      if (xi->data[i] > T(0)) gx[i] += gy[i];
    }
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.storage()[i];
  auto ai = a.impl(), bi = b.impl();
  return make_result<T>(a.shape(), std::move(out), "add", {ai, bi}, [ai, bi](const std::vector<T>& gy) {
    for (const auto& t : {ai, bi}) {
      if (!detail::tracked(t)) continue;
      T* g = t->grad_buffer();
      for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.storage()[i];
  auto ai = a.impl(), bi = b.impl();
  return make_result<T>(a.shape(), std::move(out), "mul", {ai, bi}, [ai, bi](const std::vector<T>& gy) {
    if (detail::tracked(ai)) {
      T* g = ai->grad_buffer();
      for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i] * bi->data[i];
    }
    if (detail::tracked(bi)) {
      T* g = bi->grad_buffer();
      for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i] * ai->data[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= s;
  auto ai = a.impl();
  return make_result<T>(a.shape(), std::move(out), "scale", {ai}, [ai, s](const std::vector<T>& gy) {
    T* g = ai->grad_buffer();
    for (std::size_t i = 0; i < gy.size(); ++i) g[i] += s * gy[i];
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = T(0);
  for (T v : a.data()) s += v;
  auto ai = a.impl();
  return make_result<T>(Shape{1}, {s}, "sum", {ai}, [ai](const std::vector<T>& gy) {
    T* g = ai->grad_buffer();
    for (std::size_t i = 0; i < ai->data.size(); ++i) g[i] += gy[0];
  });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v = T(1) / (T(1) + std::exp(-v));
  auto ai = a.impl();
  auto result = make_result<T>(a.shape(), std::move(out), "sigmoid", {ai}, nullptr);
  if (result.requires_grad()) {
    std::weak_ptr<TensorImpl<T>> self = result.impl();
    result.impl()->grad_fn->backward = [ai, self](const std::vector<T>& gy) {
      auto out_impl = self.lock();
      T* g = ai->grad_buffer();
      for (std::size_t i = 0; i < gy.size(); ++i) {
        const T y = out_impl->data[i];
        g[i] += gy[i] * y * (T(1) - y);
      }
    };
  }
  return result;
}

// 2x2 window, stride 2, floor semantics.
template <typename T>
Tensor<T> maxpool2(const Tensor<T>& input) {
  detail::require_rank(input.shape(), 4, "maxpool2 input");
  const auto n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h < 2 || w < 2) throw ShapeError("maxpool2: spatial dims smaller than the 2x2 window " + shape_str(input.shape()));
  const auto oh = h / 2, ow = w / 2;
  std::vector<T> out(static_cast<std::size_t>(n * c * oh * ow));
  std::vector<std::int64_t> arg(out.size());
  const T* x = input.data().data();
  std::size_t o = 0;
  for (std::int64_t plane = 0; plane < n * c; ++plane) {
    const T* px = x + plane * h * w;
    for (std::int64_t i = 0; i < oh; ++i) {
      for (std::int64_t j = 0; j < ow; ++j, ++o) {
        std::int64_t best = (2 * i) * w + 2 * j;
        for (std::int64_t di = 0; di < 2; ++di) {
          for (std::int64_t dj = 0; dj < 2; ++dj) {
            const std::int64_t idx = (2 * i + di) * w + 2 * j + dj;
            if (px[idx] > px[best]) best = idx;
          }
        }
        out[o] = px[best];
        arg[o] = plane * h * w + best;
      }
    }
  }
  auto xi = input.impl();
  return make_result<T>(Shape{n, c, oh, ow}, std::move(out), "maxpool2", {xi},
                        [xi, arg = std::move(arg)](const std::vector<T>& gy) {
                          T* gx = xi->grad_buffer();
                          for (std::size_t i = 0; i < gy.size(); ++i) gx[arg[i]] += gy[i];
                        });
}

// Concatenate [N,Ci,H,W] tensors along the channel axis.
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  for (const auto& t : parts) detail::require_rank(t.shape(), 4, "concat_channels input");
  const auto n = parts[0].dim(0), h = parts[0].dim(2), w = parts[0].dim(3);
  std::int64_t c = 0;
  for (const auto& t : parts) {
    if (t.dim(0) != n || t.dim(2) != h || t.dim(3) != w) {
      throw ShapeError("concat_channels: mismatched " + shape_str(t.shape()) + " vs " + shape_str(parts[0].shape()));
    }
    c += t.dim(1);
  }
  const std::int64_t plane = h * w;
  std::vector<T> out(static_cast<std::size_t>(n * c * plane));
  std::vector<std::shared_ptr<TensorImpl<T>>> impls;
  std::vector<std::int64_t> chans;
  for (std::int64_t b = 0; b < n; ++b) {
    std::int64_t off = 0;
    for (const auto& t : parts) {
      const auto ci = t.dim(1);
      std::copy_n(t.data().data() + b * ci * plane, ci * plane, out.data() + (b * c + off) * plane);
      off += ci;
    }
  }
  for (const auto& t : parts) {
    impls.push_back(t.impl());
    chans.push_back(t.dim(1));
  }
  return make_result<T>(Shape{n, c, h, w}, std::move(out), "concat_channels", impls,
                        [impls, chans, n, c, plane](const std::vector<T>& gy) {
                          std::int64_t off = 0;
                          for (std::size_t k = 0; k < impls.size(); ++k) {
                            const auto ci = chans[k];
                            if (detail::tracked(impls[k])) {
                              T* g = impls[k]->grad_buffer();
                              for (std::int64_t b = 0; b < n; ++b) {
                                const T* src = gy.data() + (b * c + off) * plane;
                                T* dst = g + b * ci * plane;
                                for (std::int64_t j = 0; j < ci * plane; ++j) dst[j] += src[j];
                              }
                            }
                            off += ci;
                          }
                        });
}

// Inverted dropout; the identity (same handle) when not training or p == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& input, double p, Rng& rng, bool training) {
  if (p < 0.0 || p >= 1.0) throw Error("dropout: probability must lie in [0,1)");
  if (!training || p == 0.0) return input;
  std::bernoulli_distribution keep(1.0 - p);
  const T s = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(static_cast<std::size_t>(input.numel()));
  for (auto& m : mask) m = keep(rng) ? s : T(0);
  std::vector<T> out(input.data().begin(), input.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  auto xi = input.impl();
  return make_result<T>(input.shape(), std::move(out), "dropout", {xi},
                        [xi, mask = std::move(mask)](const std::vector<T>& gy) {
                          T* g = xi->grad_buffer();
                          for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i] * mask[i];
                        });
}

// Channel vector [C] at one spatial location of sample `batch` in [N,C,H,W].
template <typename T>
Tensor<T> gather_pixel(const Tensor<T>& input, std::int64_t batch, std::int64_t row, std::int64_t col) {
  detail::require_rank(input.shape(), 4, "gather_pixel input");
  const auto n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (batch < 0 || batch >= n || row < 0 || row >= h || col < 0 || col >= w) {
    throw ShapeError("gather_pixel: location (" + std::to_string(batch) + "," + std::to_string(row) + "," +
                     std::to_string(col) + ") outside " + shape_str(input.shape()));
  }
  std::vector<T> out(static_cast<std::size_t>(c));
  for (std::int64_t k = 0; k < c; ++k) out[static_cast<std::size_t>(k)] = input[((batch * c + k) * h + row) * w + col];
  auto xi = input.impl();
  return make_result<T>(Shape{c}, std::move(out), "gather_pixel", {xi},
                        [xi, batch, row, col, c, h, w](const std::vector<T>& gy) {
                          T* g = xi->grad_buffer();
                          for (std::int64_t k = 0; k < c; ++k) g[((batch * c + k) * h + row) * w + col] += gy[k];
                        });
}

// 1x1 convolution of sample `batch` of feature [N,C,H,W] with a per-instance
// kernel [C+1] (C weights then the bias). Output [H,W].
template <typename T>
Tensor<T> conditional_conv(const Tensor<T>& feature, std::int64_t batch, const Tensor<T>& kernel) {
  detail::require_rank(feature.shape(), 4, "conditional_conv feature");
  const auto n = feature.dim(0), c = feature.dim(1), h = feature.dim(2), w = feature.dim(3);
  if (kernel.rank() != 1 || kernel.dim(0) != c + 1) {
    throw ShapeError("conditional_conv: kernel " + shape_str(kernel.shape()) + " needs length C+1=" +
                     std::to_string(c + 1));
  }
  if (batch < 0 || batch >= n) throw ShapeError("conditional_conv: batch index out of range");
  const std::int64_t plane = h * w;
  std::vector<T> out(static_cast<std::size_t>(plane), kernel[c]);
  const T* f = feature.data().data() + batch * c * plane;
  for (std::int64_t k = 0; k < c; ++k) {
    const T wk = kernel[k];
    for (std::int64_t j = 0; j < plane; ++j) out[static_cast<std::size_t>(j)] += wk * f[k * plane + j];
  }
  auto fi = feature.impl(), ki = kernel.impl();
  return make_result<T>(Shape{h, w}, std::move(out), "conditional_conv", {fi, ki},
                        [fi, ki, batch, c, plane](const std::vector<T>& gy) {
                          const T* f = fi->data.data() + batch * c * plane;
                          if (detail::tracked(ki)) {
                            T* gk = ki->grad_buffer();
                            for (std::int64_t k = 0; k < c; ++k) gk[k] += detail::dot(gy.data(), f + k * plane, plane);
                            T s = T(0);
                            for (T v : gy) s += v;
                            gk[c] += s;
                          }
                          if (detail::tracked(fi)) {
                            T* gf = fi->grad_buffer() + batch * c * plane;
                            for (std::int64_t k = 0; k < c; ++k) {
                              const T wk = ki->data[static_cast<std::size_t>(k)];
                              for (std::int64_t j = 0; j < plane; ++j) gf[k * plane + j] += wk * gy[j];
                            }
                          }
                        });
}

// Row pooling of a [H,W] map into [H]: a*max_row + b*mean_row + c, with
// (a, b, c) = coeffs[0..2]. Max routes its gradient to the first argmax.
template <typename T>
Tensor<T> row_pool_affine(const Tensor<T>& map, const Tensor<T>& coeffs) {
  detail::require_rank(map.shape(), 2, "row_pool_affine map");
  if (coeffs.rank() != 1 || coeffs.dim(0) != 3) throw ShapeError("row_pool_affine: coeffs must have shape [3]");
  const auto h = map.dim(0), w = map.dim(1);
  std::vector<T> out(static_cast<std::size_t>(h));
  std::vector<std::int64_t> arg(static_cast<std::size_t>(h));
  std::vector<T> mx(static_cast<std::size_t>(h)), mn(static_cast<std::size_t>(h));
  const T a = coeffs[0], b = coeffs[1], cc = coeffs[2];
  for (std::int64_t r = 0; r < h; ++r) {
    const T* row = map.data().data() + r * w;
    std::int64_t best = 0;
    T s = T(0);
    for (std::int64_t j = 0; j < w; ++j) {
      if (row[j] > row[best]) best = j;
      s += row[j];
    }
    const auto ri = static_cast<std::size_t>(r);
    arg[ri] = best;
    mx[ri] = row[best];
    mn[ri] = s / static_cast<T>(w);
    out[ri] = a * mx[ri] + b * mn[ri] + cc;
  }
  auto mi = map.impl(), ci = coeffs.impl();
  return make_result<T>(Shape{h}, std::move(out), "row_pool_affine", {mi, ci},
                        [mi, ci, h, w, arg = std::move(arg), mx = std::move(mx), mn = std::move(mn)](
                            const std::vector<T>& gy) {
                          const T a = ci->data[0], b = ci->data[1];
                          if (detail::tracked(ci)) {
                            T* g = ci->grad_buffer();
                            for (std::size_t r = 0; r < gy.size(); ++r) {
                              g[0] += gy[r] * mx[r];
                              g[1] += gy[r] * mn[r];
                              g[2] += gy[r];
                            }
                          }
                          if (detail::tracked(mi)) {
                            T* g = mi->grad_buffer();
                            for (std::int64_t r = 0; r < h; ++r) {
                              const T gr = gy[static_cast<std::size_t>(r)];
                              const T share = gr * b / static_cast<T>(w);
                              for (std::int64_t j = 0; j < w; ++j) g[r * w + j] += share;
                              g[r * w + arg[static_cast<std::size_t>(r)]] += gr * a;
                            }
                          }
                        });
}

// Constant [N,2,H,W] tensor of normalized (x, y) coordinates in [-1, 1].
template <typename T>
Tensor<T> coord_channels(std::int64_t n, std::int64_t h, std::int64_t w) {
  Tensor<T> out(Shape{n, 2, h, w});
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t r = 0; r < h; ++r) {
      for (std::int64_t c = 0; c < w; ++c) {
        out[((b * 2 + 0) * h + r) * w + c] = w > 1 ? T(2) * static_cast<T>(c) / static_cast<T>(w - 1) - T(1) : T(0);
        out[((b * 2 + 1) * h + r) * w + c] = h > 1 ? T(2) * static_cast<T>(r) / static_cast<T>(h - 1) - T(1) : T(0);
      }
    }
  }
  return out;
}

}  // namespace erfcond
