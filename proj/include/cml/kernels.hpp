// Numeric kernels: convolution, pooling and batch normalization, forward and
// backward. All kernels fold time into batch and are pure functions of their
// arguments.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "cml/tensor.hpp"

namespace cml {

struct ConvSpec {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

/// Pooling window of size `kernel` moved with step `stride`, no padding.
struct PoolSpec {
  std::size_t stride = 2;
  std::size_t kernel = 2;

  static constexpr PoolSpec square(std::size_t s) { return {s, s}; }

  constexpr std::size_t out_dim(std::size_t in) const {
    return in < kernel ? 0 : (in - kernel) / stride + 1;
  }
};

/// Conv weights are stored as a Tensor5 of shape (1, Cout, Cin, kh, kw).
inline Shape5 conv_weight_shape(std::size_t cout, std::size_t cin, std::size_t kh, std::size_t kw) {
  return {1, cout, cin, kh, kw};
}

inline Shape5 conv_output_shape(const Shape5& in, const Shape5& weight, ConvSpec spec) {
  if (weight.t != 1) throw ShapeError("conv2d: weight must have shape (1,Cout,Cin,kh,kw), got " + weight.str());
  if (weight.c != in.c) {
    throw ShapeError("conv2d: input has " + std::to_string(in.c) + " channels but kernel expects " +
                     std::to_string(weight.c));
  }
  if (spec.stride == 0) throw ShapeError("conv2d: stride must be positive");
  const std::size_t ph = in.h + 2 * spec.pad;
  const std::size_t pw = in.w + 2 * spec.pad;
  if (ph < weight.h || pw < weight.w) {
    throw ShapeError("conv2d: kernel " + std::to_string(weight.h) + "x" + std::to_string(weight.w) +
                     " larger than padded input " + std::to_string(ph) + "x" + std::to_string(pw));
  }
  return {in.t, in.b, weight.b, (ph - weight.h) / spec.stride + 1, (pw - weight.w) / spec.stride + 1};
}

/// Output indices o in [lo, hi) whose tap o·stride + k − pad lands inside [0, n).
struct TapRange {
  std::size_t lo = 0;
  std::size_t hi = 0;
};

inline TapRange tap_range(std::size_t n_out, std::size_t n_in, std::size_t stride, std::size_t k, std::size_t pad) {
  TapRange r;
  r.lo = k >= pad ? 0 : (pad - k + stride - 1) / stride;
  // largest o with o·stride + k − pad <= n_in − 1
  if (n_in + pad < k + 1) return {0, 0};
  r.hi = std::min(n_out, (n_in + pad - k - 1) / stride + 1);
  if (r.lo > r.hi) r.lo = r.hi;
  return r;
}

/// Unfolds one (Cin, H, W) image into a (Cin·kh·kw, Ho·Wo) column matrix;
/// taps that fall into the zero padding stay 0.
template <typename S>
void im2col(const S* img, std::size_t cin, std::size_t H, std::size_t W, std::size_t kh, std::size_t kw,
            std::size_t Ho, std::size_t Wo, ConvSpec spec, S* cols) {
  const std::size_t st = spec.stride, pad = spec.pad, ncol = Ho * Wo;
  std::fill(cols, cols + cin * kh * kw * ncol, S(0));
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (std::size_t ki = 0; ki < kh; ++ki)
      for (std::size_t kj = 0; kj < kw; ++kj) {
        S* row = cols + ((ci * kh + ki) * kw + kj) * ncol;
        const TapRange rr = tap_range(Ho, H, st, ki, pad), cr = tap_range(Wo, W, st, kj, pad);
        for (std::size_t oi = rr.lo; oi < rr.hi; ++oi) {
          const S* src = img + (ci * H + oi * st + ki - pad) * W + (cr.lo * st + kj - pad);
          S* dst = row + oi * Wo + cr.lo;
          const std::size_t len = cr.hi - cr.lo;
          if (st == 1) {
            std::copy(src, src + len, dst);
          } else {
            for (std::size_t q = 0; q < len; ++q) dst[q] = src[q * st];
          }
        }
      }
}

/// Inverse scatter of im2col: accumulates columns back into the image.
template <typename S>
void col2im_add(const S* cols, std::size_t cin, std::size_t H, std::size_t W, std::size_t kh, std::size_t kw,
                std::size_t Ho, std::size_t Wo, ConvSpec spec, S* img) {
  const std::size_t st = spec.stride, pad = spec.pad, ncol = Ho * Wo;
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (std::size_t ki = 0; ki < kh; ++ki)
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const S* row = cols + ((ci * kh + ki) * kw + kj) * ncol;
        const TapRange rr = tap_range(Ho, H, st, ki, pad), cr = tap_range(Wo, W, st, kj, pad);
        for (std::size_t oi = rr.lo; oi < rr.hi; ++oi) {
          S* dst = img + (ci * H + oi * st + ki - pad) * W + (cr.lo * st + kj - pad);
          const S* src = row + oi * Wo + cr.lo;
          const std::size_t len = cr.hi - cr.lo;
          for (std::size_t q = 0; q < len; ++q) dst[q * st] += src[q];
        }
      }
}

/// Dot product with eight independent partial sums (a fixed summation order,
/// so results do not depend on compiler reassociation).
template <typename S>
S dot(const S* a, const S* b, std::size_t n) {
  S part[8] = {};
  std::size_t q = 0;
  for (; q + 8 <= n; q += 8)
    for (std::size_t l = 0; l < 8; ++l) part[l] += a[q + l] * b[q + l];
  S acc = ((part[0] + part[1]) + (part[2] + part[3])) + ((part[4] + part[5]) + (part[6] + part[7]));
  for (; q < n; ++q) acc += a[q] * b[q];
  return acc;
}

/// Cross-correlation, output shape (T, B, Cout, Ho, Wo).
template <typename S>
Tensor5<S> conv2d_forward(ConstView<S> x, ConstView<S> weight, ConvSpec spec) {
  const Shape5 os = conv_output_shape(x.shape, weight.shape, spec);
  Tensor5<S> out(os);
  const std::size_t cin = x.shape.c, cout = os.c, H = x.shape.h, W = x.shape.w;
  const std::size_t kh = weight.shape.h, kw = weight.shape.w, ncol = os.plane(), nrow = cin * kh * kw;
  std::vector<S> cols(nrow * ncol);
  for (std::size_t n = 0; n < x.shape.images(); ++n) {
    im2col(x.data.data() + n * cin * H * W, cin, H, W, kh, kw, os.h, os.w, spec, cols.data());
    for (std::size_t co = 0; co < cout; ++co) {
      S* orow = out.data() + (n * cout + co) * ncol;
      const S* wrow = weight.data.data() + co * nrow;
      for (std::size_t r = 0; r < nrow; ++r) {
        const S wv = wrow[r];
        const S* crow = cols.data() + r * ncol;
        for (std::size_t q = 0; q < ncol; ++q) orow[q] += wv * crow[q];
      }
    }
  }
  return out;
}

template <typename S>
Tensor5<S> conv2d_backward_input(ConstView<S> grad_out, ConstView<S> weight, const Shape5& in_shape,
                                 ConvSpec spec) {
  Tensor5<S> gx(in_shape);
  const Shape5& os = grad_out.shape;
  const std::size_t cin = in_shape.c, cout = os.c, H = in_shape.h, W = in_shape.w;
  const std::size_t kh = weight.shape.h, kw = weight.shape.w, ncol = os.plane(), nrow = cin * kh * kw;
  std::vector<S> gcols(nrow * ncol);
  for (std::size_t n = 0; n < in_shape.images(); ++n) {
    std::fill(gcols.begin(), gcols.end(), S(0));
    for (std::size_t co = 0; co < cout; ++co) {
      const S* grow = grad_out.data.data() + (n * cout + co) * ncol;
      const S* wrow = weight.data.data() + co * nrow;
      for (std::size_t r = 0; r < nrow; ++r) {
        const S wv = wrow[r];
        S* crow = gcols.data() + r * ncol;
        for (std::size_t q = 0; q < ncol; ++q) crow[q] += wv * grow[q];
      }
    }
    col2im_add(gcols.data(), cin, H, W, kh, kw, os.h, os.w, spec, gx.data() + n * cin * H * W);
  }
  return gx;
}

template <typename S>
Tensor5<S> conv2d_backward_weight(ConstView<S> grad_out, ConstView<S> x, const Shape5& w_shape,
                                  ConvSpec spec) {
  Tensor5<S> gw(w_shape);
  const Shape5& os = grad_out.shape;
  const std::size_t cin = x.shape.c, cout = os.c, H = x.shape.h, W = x.shape.w;
  const std::size_t kh = w_shape.h, kw = w_shape.w, ncol = os.plane(), nrow = cin * kh * kw;
  std::vector<S> cols(nrow * ncol);
  for (std::size_t n = 0; n < x.shape.images(); ++n) {
    im2col(x.data.data() + n * cin * H * W, cin, H, W, kh, kw, os.h, os.w, spec, cols.data());
    for (std::size_t co = 0; co < cout; ++co) {
      const S* grow = grad_out.data.data() + (n * cout + co) * ncol;
      S* wrow = gw.data() + co * nrow;
      for (std::size_t r = 0; r < nrow; ++r) {
        wrow[r] += dot(grow, cols.data() + r * ncol, ncol);
      }
    }
  }
  return gw;
}

// ---------------------------------------------------------------------------
// Pooling

inline Shape5 pool_output_shape(const Shape5& in, PoolSpec spec, const char* who) {
  if (spec.stride == 0 || spec.kernel == 0) throw ShapeError(std::string(who) + ": stride and window must be positive");
  if (in.h < spec.kernel || in.w < spec.kernel) {
    throw ShapeError(std::string(who) + ": window " + std::to_string(spec.kernel) + " larger than input " +
                     std::to_string(in.h) + "x" + std::to_string(in.w));
  }
  return {in.t, in.b, in.c, spec.out_dim(in.h), spec.out_dim(in.w)};
}

template <typename S>
struct MaxPoolResult {
  Tensor5<S> out;
  /// Flat index into the input buffer of each output's selected element.
  std::vector<std::uint32_t> argmax;
};

/// Window max; ties go to the first maximal element in row-major scan order,
/// so a window of binary spikes selects its first 1 (or (0,0) if it has none).
template <typename S>
MaxPoolResult<S> maxpool_forward(ConstView<S> x, PoolSpec spec) {
  const Shape5 os = pool_output_shape(x.shape, spec, "maxpool");
  MaxPoolResult<S> r{Tensor5<S>(os), std::vector<std::uint32_t>(os.numel())};
  const std::size_t planes = x.shape.images() * x.shape.c;
  const std::size_t H = x.shape.h, W = x.shape.w, Ho = os.h, Wo = os.w;
  for (std::size_t p = 0; p < planes; ++p) {
    const std::size_t base = p * H * W;
    for (std::size_t oi = 0; oi < Ho; ++oi) {
      for (std::size_t oj = 0; oj < Wo; ++oj) {
        std::size_t best = base + oi * spec.stride * W + oj * spec.stride;
        S best_v = x.data[best];
        for (std::size_t ki = 0; ki < spec.kernel; ++ki) {
          for (std::size_t kj = 0; kj < spec.kernel; ++kj) {
            const std::size_t idx = base + (oi * spec.stride + ki) * W + oj * spec.stride + kj;
            if (x.data[idx] > best_v) {
              best_v = x.data[idx];
              best = idx;
            }
          }
        }
        const std::size_t o = p * Ho * Wo + oi * Wo + oj;
        r.out[o] = best_v;
        r.argmax[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  return r;
}

template <typename S>
Tensor5<S> maxpool_backward(ConstView<S> grad_out, std::span<const std::uint32_t> argmax, const Shape5& in_shape) {
  Tensor5<S> gx(in_shape);
  for (std::size_t o = 0; o < grad_out.data.size(); ++o) gx[argmax[o]] += grad_out.data[o];
  return gx;
}

/// (row, col) of a flat input index relative to the window that produced
/// pooled output (oi, oj).
struct WindowOffset {
  std::size_t row = 0;
  std::size_t col = 0;
  friend bool operator==(const WindowOffset&, const WindowOffset&) = default;
};

inline WindowOffset window_offset(std::uint32_t flat, const Shape5& in_shape, PoolSpec spec, std::size_t oi,
                                  std::size_t oj) {
  const std::size_t in_plane = flat % (in_shape.h * in_shape.w);
  return {in_plane / in_shape.w - oi * spec.stride, in_plane % in_shape.w - oj * spec.stride};
}

template <typename S>
Tensor5<S> avgpool_forward(ConstView<S> x, PoolSpec spec) {
  const Shape5 os = pool_output_shape(x.shape, spec, "avgpool");
  Tensor5<S> out(os);
  const std::size_t planes = x.shape.images() * x.shape.c;
  const std::size_t H = x.shape.h, W = x.shape.w, Ho = os.h, Wo = os.w;
  const S inv = S(1) / static_cast<S>(spec.kernel * spec.kernel);
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t oi = 0; oi < Ho; ++oi) {
      for (std::size_t oj = 0; oj < Wo; ++oj) {
        S acc = 0;
        for (std::size_t ki = 0; ki < spec.kernel; ++ki)
          for (std::size_t kj = 0; kj < spec.kernel; ++kj)
            acc += x.data[p * H * W + (oi * spec.stride + ki) * W + oj * spec.stride + kj];
        out[p * Ho * Wo + oi * Wo + oj] = acc * inv;
      }
    }
  }
  return out;
}

template <typename S>
Tensor5<S> avgpool_backward(ConstView<S> grad_out, const Shape5& in_shape, PoolSpec spec) {
  Tensor5<S> gx(in_shape);
  const Shape5& os = grad_out.shape;
  const std::size_t planes = in_shape.images() * in_shape.c;
  const std::size_t H = in_shape.h, W = in_shape.w, Ho = os.h, Wo = os.w;
  const S inv = S(1) / static_cast<S>(spec.kernel * spec.kernel);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t oi = 0; oi < Ho; ++oi)
      for (std::size_t oj = 0; oj < Wo; ++oj) {
        const S g = grad_out.data[p * Ho * Wo + oi * Wo + oj] * inv;
        for (std::size_t ki = 0; ki < spec.kernel; ++ki)
          for (std::size_t kj = 0; kj < spec.kernel; ++kj)
            gx[p * H * W + (oi * spec.stride + ki) * W + oj * spec.stride + kj] += g;
      }
  return gx;
}

// ---------------------------------------------------------------------------
// Batch normalization over (T·B, H, W) per channel.

enum class BnMode { Train, Eval };

struct BnConfig {
  double eps = 1e-5;
  double momentum = 0.1;
};

template <typename S>
struct BnRunningStats {
  std::vector<S> mean;
  std::vector<S> var;

  BnRunningStats() = default;
  explicit BnRunningStats(std::size_t c) : mean(c, S(0)), var(c, S(1)) {}
};

/// Saved for the backward pass.
template <typename S>
struct BnContext {
  std::vector<S> mean;
  std::vector<S> inv_std;
  BnMode mode = BnMode::Train;
};

template <typename S>
struct BnForward {
  Tensor5<S> out;
  BnContext<S> ctx;
};

/// gamma and beta have one entry per channel. In train mode the running stats
/// are updated in place (unbiased variance, PyTorch convention).
template <typename S>
BnForward<S> batchnorm_forward(ConstView<S> x, std::span<const S> gamma, std::span<const S> beta,
                               BnRunningStats<S>& running, BnMode mode, BnConfig cfg = {}) {
  const std::size_t C = x.shape.c;
  if (gamma.size() != C || beta.size() != C || running.mean.size() != C || running.var.size() != C) {
    throw ShapeError("batchnorm: parameter length does not match channel count " + std::to_string(C));
  }
  const std::size_t n_img = x.shape.images(), plane = x.shape.plane();
  const std::size_t count = n_img * plane;
  if (count == 0) throw ShapeError("batchnorm: empty batch");

  BnForward<S> r{Tensor5<S>(x.shape), {std::vector<S>(C), std::vector<S>(C), mode}};
  for (std::size_t c = 0; c < C; ++c) {
    double mean, var;
    if (mode == BnMode::Train) {
      double acc = 0;
      for (std::size_t n = 0; n < n_img; ++n) {
        const S* p = x.data.data() + (n * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      }
      mean = acc / static_cast<double>(count);
      double sq = 0;
      for (std::size_t n = 0; n < n_img; ++n) {
        const S* p = x.data.data() + (n * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = p[i] - mean;
          sq += d * d;
        }
      }
      var = sq / static_cast<double>(count);
      const double unbiased = count > 1 ? sq / static_cast<double>(count - 1) : var;
      running.mean[c] = static_cast<S>((1 - cfg.momentum) * running.mean[c] + cfg.momentum * mean);
      running.var[c] = static_cast<S>((1 - cfg.momentum) * running.var[c] + cfg.momentum * unbiased);
    } else {
      mean = running.mean[c];
      var = running.var[c];
    }
    const S inv_std = static_cast<S>(1.0 / std::sqrt(var + cfg.eps));
    const S m = static_cast<S>(mean);
    r.ctx.mean[c] = m;
    r.ctx.inv_std[c] = inv_std;
    const S g = gamma[c] * inv_std, b = beta[c];
    for (std::size_t n = 0; n < n_img; ++n) {
      const S* p = x.data.data() + (n * C + c) * plane;
      S* q = r.out.data() + (n * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) q[i] = (p[i] - m) * g + b;
    }
  }
  return r;
}

template <typename S>
struct BnGrads {
  Tensor5<S> dx;
  std::vector<S> dgamma;
  std::vector<S> dbeta;
};

template <typename S>
BnGrads<S> batchnorm_backward(ConstView<S> grad_out, ConstView<S> x, std::span<const S> gamma,
                              const BnContext<S>& ctx) {
  const std::size_t C = x.shape.c, n_img = x.shape.images(), plane = x.shape.plane();
  const double count = static_cast<double>(n_img * plane);
  BnGrads<S> g{Tensor5<S>(x.shape), std::vector<S>(C), std::vector<S>(C)};
  for (std::size_t c = 0; c < C; ++c) {
    const S m = ctx.mean[c], is = ctx.inv_std[c];
    double sum_g = 0, sum_gx = 0;
    for (std::size_t n = 0; n < n_img; ++n) {
      const S* gp = grad_out.data.data() + (n * C + c) * plane;
      const S* xp = x.data.data() + (n * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        sum_g += gp[i];
        sum_gx += gp[i] * (xp[i] - m) * is;
      }
    }
    g.dbeta[c] = static_cast<S>(sum_g);
    g.dgamma[c] = static_cast<S>(sum_gx);
    const S k = gamma[c] * is;
    for (std::size_t n = 0; n < n_img; ++n) {
      const S* gp = grad_out.data.data() + (n * C + c) * plane;
      const S* xp = x.data.data() + (n * C + c) * plane;
      S* dp = g.dx.data() + (n * C + c) * plane;
      if (ctx.mode == BnMode::Eval) {
        for (std::size_t i = 0; i < plane; ++i) dp[i] = k * gp[i];
      } else {
        const S mg = static_cast<S>(sum_g / count), mgx = static_cast<S>(sum_gx / count);
        for (std::size_t i = 0; i < plane; ++i) {
          const S xhat = (xp[i] - m) * is;
          dp[i] = k * (gp[i] - mg - xhat * mgx);
        }
      }
    }
  }
  return g;
}

}  // namespace cml
