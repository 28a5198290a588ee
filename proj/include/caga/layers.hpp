#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "caga/ops.hpp"
#include "caga/rng.hpp"
#include "caga/tensor.hpp"
#include "caga/tensor_io.hpp"

namespace caga {

enum class Padding { valid, same };

struct ConvSpec {
    int in_channels = 1;
    int out_channels = 1;
    int kernel = 3;
    int stride = 1;
    int dilation = 1;
    Padding padding = Padding::valid;
    bool bias = true;
};

// k_eff = k + (k-1)(d-1): the span of a k-tap kernel with taps d apart.
inline int effective_kernel_size(int k, int d) {
    if (k < 1 || d < 1)
        throw ContractError("effective_kernel_size: k and d must be positive, got k=" +
                            std::to_string(k) + " d=" + std::to_string(d));
    return k + (k - 1) * (d - 1);
}

// Valid-mode output extent floor((H - k_eff)/s) + 1. Non-divisible remainders
// floor (trailing input rows beyond the last placement are dropped).
inline int dilated_output_extent(int H, int k, int d, int s) {
    if (s < 1) throw ContractError("dilated_output_extent: stride must be positive");
    const int keff = effective_kernel_size(k, d);
    if (H < keff)
        throw ShapeError("dilated_output_extent: kernel larger than input (H=" +
                         std::to_string(H) + " < k_eff=" + std::to_string(keff) + ")");
    return (H - keff) / s + 1;
}

namespace detail {

struct ConvGeom {
    std::size_t B, Cin, H, W, Cout, OH, OW;
    int k, s, d, pad;
    bool batched;  // rank-4 input
};

// Clamped output-coordinate range for a given tap so that the sampled input
// index o*s + t*d - pad stays inside [0, extent).
inline void tap_range(int tap_off, int s, int pad, int in_extent, int out_extent,
                      int& lo, int& hi) {
    int base = tap_off - pad;  // ix = o*s + base
    lo = 0;
    if (base < 0) lo = (-base + s - 1) / s;
    int max_num = in_extent - 1 - base;
    hi = max_num < 0 ? -1 : std::min(out_extent - 1, max_num / s);
}

template <typename T>
ConvGeom conv_geometry(const Tensor<T>& x, const ConvSpec& spec) {
    if (x.rank() != 3 && x.rank() != 4)
        throw ShapeError("conv2d: expected (C,H,W) or (B,C,H,W) input, got " +
                         shape_str(x.shape()));
    ConvGeom g;
    g.batched = x.rank() == 4;
    g.B = g.batched ? x.extent(0) : 1;
    g.Cin = x.extent(g.batched ? 1 : 0);
    g.H = x.extent(g.batched ? 2 : 1);
    g.W = x.extent(g.batched ? 3 : 2);
    g.Cout = static_cast<std::size_t>(spec.out_channels);
    g.k = spec.kernel;
    g.s = spec.stride;
    g.d = spec.dilation;
    if (g.Cin != static_cast<std::size_t>(spec.in_channels))
        throw ShapeError("conv2d: input has " + std::to_string(g.Cin) +
                         " channels, spec expects " + std::to_string(spec.in_channels));
    const int keff = effective_kernel_size(g.k, g.d);
    if (spec.padding == Padding::same) {
        if (keff % 2 == 0)
            throw ContractError("conv2d: same padding requires odd effective kernel, got " +
                                std::to_string(keff));
        if (g.s != 1)
            throw ContractError("conv2d: same padding is defined for stride 1 only");
        g.pad = (keff - 1) / 2;
        g.OH = g.H;
        g.OW = g.W;
    } else {
        g.pad = 0;
        g.OH = static_cast<std::size_t>(
            dilated_output_extent(static_cast<int>(g.H), g.k, g.d, g.s));
        g.OW = static_cast<std::size_t>(
            dilated_output_extent(static_cast<int>(g.W), g.k, g.d, g.s));
    }
    return g;
}

} // namespace detail

// Dilated 2-D cross-correlation. Weights are (C_out, C_in, k, k); bias, when
// given, is (C_out). Input may be (C,H,W) or (B,C,H,W); the output keeps the
// input's rank. Differentiable in input, weights and bias.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvSpec& spec, const Tensor<T>& weight,
                 const Tensor<T>& bias = {}) {
    using detail::tap_range;
    const auto g = detail::conv_geometry(x, spec);
    const Shape want{g.Cout, g.Cin, static_cast<std::size_t>(g.k),
                     static_cast<std::size_t>(g.k)};
    if (weight.shape() != want)
        throw ShapeError("conv2d: weight shape " + shape_str(weight.shape()) +
                         ", expected " + shape_str(want));
    if (spec.bias && (!bias.defined() || bias.shape() != Shape{g.Cout}))
        throw ShapeError("conv2d: bias must have shape (" + std::to_string(g.Cout) + ")");

    Shape out_shape = g.batched ? Shape{g.B, g.Cout, g.OH, g.OW}
                                : Shape{g.Cout, g.OH, g.OW};
    Tensor<T> out = Tensor<T>::zeros(out_shape);

    const T* xv = x.data();
    const T* wv = weight.data();
    T* ov = out.data();
    const std::size_t in_plane = g.H * g.W, out_plane = g.OH * g.OW;
    const std::size_t kk = static_cast<std::size_t>(g.k) * g.k;

    for (std::size_t b = 0; b < g.B; ++b)
        for (std::size_t oc = 0; oc < g.Cout; ++oc) {
            T* op = ov + (b * g.Cout + oc) * out_plane;
            if (spec.bias) {
                const T bv = bias[oc];
                for (std::size_t i = 0; i < out_plane; ++i) op[i] = bv;
            }
            for (std::size_t ic = 0; ic < g.Cin; ++ic) {
                const T* ip = xv + (b * g.Cin + ic) * in_plane;
                const T* wp = wv + (oc * g.Cin + ic) * kk;
                for (int ky = 0; ky < g.k; ++ky) {
                    int oy_lo, oy_hi;
                    tap_range(ky * g.d, g.s, g.pad, static_cast<int>(g.H),
                              static_cast<int>(g.OH), oy_lo, oy_hi);
                    for (int kx = 0; kx < g.k; ++kx) {
                        const T w = wp[ky * g.k + kx];
                        int ox_lo, ox_hi;
                        tap_range(kx * g.d, g.s, g.pad, static_cast<int>(g.W),
                                  static_cast<int>(g.OW), ox_lo, ox_hi);
                        for (int oy = oy_lo; oy <= oy_hi; ++oy) {
                            const int iy = oy * g.s + ky * g.d - g.pad;
                            const T* irow = ip + static_cast<std::size_t>(iy) * g.W;
                            T* orow = op + static_cast<std::size_t>(oy) * g.OW;
                            for (int ox = ox_lo; ox <= ox_hi; ++ox)
                                orow[ox] += w * irow[ox * g.s + kx * g.d - g.pad];
                        }
                    }
                }
            }
        }

    const bool track = x.requires_grad() || weight.requires_grad() ||
                       (spec.bias && bias.requires_grad());
    record_op(track, out, "conv2d",
              [xd = x.ptr(), wd = weight.ptr(), bd = spec.bias ? bias.ptr() : nullptr,
               od = out.ptr(), g, kk, in_plane, out_plane] {
                  const T* go = od->g.data();
                  const bool need_dx = xd->requires_grad;
                  const bool need_dw = wd->requires_grad;
                  if (need_dx) xd->ensure_grad();
                  if (need_dw) wd->ensure_grad();
                  if (bd && bd->requires_grad) {
                      bd->ensure_grad();
                      for (std::size_t b = 0; b < g.B; ++b)
                          for (std::size_t oc = 0; oc < g.Cout; ++oc) {
                              const T* gp = go + (b * g.Cout + oc) * out_plane;
                              T acc = T(0);
                              for (std::size_t i = 0; i < out_plane; ++i) acc += gp[i];
                              bd->g[oc] += acc;
                          }
                  }
                  if (!need_dx && !need_dw) return;
                  for (std::size_t b = 0; b < g.B; ++b)
                      for (std::size_t oc = 0; oc < g.Cout; ++oc) {
                          const T* gp = go + (b * g.Cout + oc) * out_plane;
                          for (std::size_t ic = 0; ic < g.Cin; ++ic) {
                              const T* ip = xd->v.data() + (b * g.Cin + ic) * in_plane;
                              T* dxp = need_dx ? xd->g.data() + (b * g.Cin + ic) * in_plane
                                               : nullptr;
                              const std::size_t woff = (oc * g.Cin + ic) * kk;
                              for (int ky = 0; ky < g.k; ++ky) {
                                  int oy_lo, oy_hi;
                                  detail::tap_range(ky * g.d, g.s, g.pad,
                                                    static_cast<int>(g.H),
                                                    static_cast<int>(g.OH), oy_lo, oy_hi);
                                  for (int kx = 0; kx < g.k; ++kx) {
                                      const T w = wd->v[woff + ky * g.k + kx];
                                      int ox_lo, ox_hi;
                                      detail::tap_range(kx * g.d, g.s, g.pad,
                                                        static_cast<int>(g.W),
                                                        static_cast<int>(g.OW), ox_lo,
                                                        ox_hi);
                                      T dw_acc = T(0);
                                      for (int oy = oy_lo; oy <= oy_hi; ++oy) {
                                          const int iy = oy * g.s + ky * g.d - g.pad;
                                          const T* grow =
                                              gp + static_cast<std::size_t>(oy) * g.OW;
                                          const std::size_t irow =
                                              static_cast<std::size_t>(iy) * g.W;
                                          for (int ox = ox_lo; ox <= ox_hi; ++ox) {
                                              const std::size_t ix = static_cast<std::size_t>(
                                                  ox * g.s + kx * g.d - g.pad);
                                              const T gv = grow[ox];
                                              dw_acc += gv * ip[irow + ix];
                                              if (need_dx) dxp[irow + ix] += gv * w;
                                          }
                                      }
                                      if (need_dw) wd->g[woff + ky * g.k + kx] += dw_acc;
                                  }
                              }
                          }
                      }
              });
    return out;
}

// Per-channel k x k convolution: weight (C, k, k), optional bias (C).
// Channel c of the output sees only channel c of the input.
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const ConvSpec& spec, const Tensor<T>& weight,
                           const Tensor<T>& bias = {}) {
    if (spec.out_channels != spec.in_channels)
        throw ContractError("depthwise_conv2d: in_channels must equal out_channels");
    const auto g = detail::conv_geometry(x, spec);
    const Shape want{g.Cin, static_cast<std::size_t>(g.k), static_cast<std::size_t>(g.k)};
    if (weight.shape() != want)
        throw ShapeError("depthwise_conv2d: weight shape " + shape_str(weight.shape()) +
                         ", expected " + shape_str(want));
    if (spec.bias && (!bias.defined() || bias.shape() != Shape{g.Cin}))
        throw ShapeError("depthwise_conv2d: bias must have shape (" +
                         std::to_string(g.Cin) + ")");

    Shape out_shape = g.batched ? Shape{g.B, g.Cin, g.OH, g.OW} : Shape{g.Cin, g.OH, g.OW};
    Tensor<T> out = Tensor<T>::zeros(out_shape);
    const std::size_t in_plane = g.H * g.W, out_plane = g.OH * g.OW;
    const std::size_t kk = static_cast<std::size_t>(g.k) * g.k;

    for (std::size_t b = 0; b < g.B; ++b)
        for (std::size_t c = 0; c < g.Cin; ++c) {
            const T* ip = x.data() + (b * g.Cin + c) * in_plane;
            T* op = out.data() + (b * g.Cin + c) * out_plane;
            if (spec.bias)
                for (std::size_t i = 0; i < out_plane; ++i) op[i] = bias[c];
            const T* wp = weight.data() + c * kk;
            for (int ky = 0; ky < g.k; ++ky) {
                int oy_lo, oy_hi;
                detail::tap_range(ky * g.d, g.s, g.pad, static_cast<int>(g.H),
                                  static_cast<int>(g.OH), oy_lo, oy_hi);
                for (int kx = 0; kx < g.k; ++kx) {
                    const T w = wp[ky * g.k + kx];
                    int ox_lo, ox_hi;
                    detail::tap_range(kx * g.d, g.s, g.pad, static_cast<int>(g.W),
                                      static_cast<int>(g.OW), ox_lo, ox_hi);
                    for (int oy = oy_lo; oy <= oy_hi; ++oy) {
                        const int iy = oy * g.s + ky * g.d - g.pad;
                        const T* irow = ip + static_cast<std::size_t>(iy) * g.W;
                        T* orow = op + static_cast<std::size_t>(oy) * g.OW;
                        for (int ox = ox_lo; ox <= ox_hi; ++ox)
                            orow[ox] += w * irow[ox * g.s + kx * g.d - g.pad];
                    }
                }
            }
        }

    const bool track = x.requires_grad() || weight.requires_grad() ||
                       (spec.bias && bias.requires_grad());
    record_op(track, out, "depthwise_conv2d",
              [xd = x.ptr(), wd = weight.ptr(), bd = spec.bias ? bias.ptr() : nullptr,
               od = out.ptr(), g, kk, in_plane, out_plane] {
                  const T* go = od->g.data();
                  const bool need_dx = xd->requires_grad;
                  const bool need_dw = wd->requires_grad;
                  if (need_dx) xd->ensure_grad();
                  if (need_dw) wd->ensure_grad();
                  if (bd && bd->requires_grad) bd->ensure_grad();
                  for (std::size_t b = 0; b < g.B; ++b)
                      for (std::size_t c = 0; c < g.Cin; ++c) {
                          const T* gp = go + (b * g.Cin + c) * out_plane;
                          const T* ip = xd->v.data() + (b * g.Cin + c) * in_plane;
                          T* dxp = need_dx ? xd->g.data() + (b * g.Cin + c) * in_plane
                                           : nullptr;
                          if (bd && bd->requires_grad) {
                              T acc = T(0);
                              for (std::size_t i = 0; i < out_plane; ++i) acc += gp[i];
                              bd->g[c] += acc;
                          }
                          for (int ky = 0; ky < g.k; ++ky) {
                              int oy_lo, oy_hi;
                              detail::tap_range(ky * g.d, g.s, g.pad, static_cast<int>(g.H),
                                                static_cast<int>(g.OH), oy_lo, oy_hi);
                              for (int kx = 0; kx < g.k; ++kx) {
                                  const T w = wd->v[c * kk + ky * g.k + kx];
                                  int ox_lo, ox_hi;
                                  detail::tap_range(kx * g.d, g.s, g.pad,
                                                    static_cast<int>(g.W),
                                                    static_cast<int>(g.OW), ox_lo, ox_hi);
                                  T dw_acc = T(0);
                                  for (int oy = oy_lo; oy <= oy_hi; ++oy) {
                                      const int iy = oy * g.s + ky * g.d - g.pad;
                                      const T* grow = gp + static_cast<std::size_t>(oy) * g.OW;
                                      const std::size_t irow = static_cast<std::size_t>(iy) * g.W;
                                      for (int ox = ox_lo; ox <= ox_hi; ++ox) {
                                          const std::size_t ix = static_cast<std::size_t>(
                                              ox * g.s + kx * g.d - g.pad);
                                          dw_acc += grow[ox] * ip[irow + ix];
                                          if (need_dx) dxp[irow + ix] += grow[ox] * w;
                                      }
                                  }
                                  if (need_dw) wd->g[c * kk + ky * g.k + kx] += dw_acc;
                              }
                          }
                      }
              });
    return out;
}

// Per-channel affine normalization state. Running variance is tracked with the
// unbiased estimator; normalization inside a training step uses the biased
// batch variance (the usual convention).
template <typename T>
struct BatchNormState {
    Tensor<T> gamma;  // learnable scale
    Tensor<T> beta;   // learnable shift
    Tensor<T> running_mean;
    Tensor<T> running_var;
    T momentum;
    T eps;

    explicit BatchNormState(int channels, T momentum_ = T(0.1), T eps_ = T(1e-5))
        : gamma(Tensor<T>::full({static_cast<std::size_t>(channels)}, T(1))),
          beta(Tensor<T>::zeros({static_cast<std::size_t>(channels)})),
          running_mean(Tensor<T>::zeros({static_cast<std::size_t>(channels)})),
          running_var(Tensor<T>::full({static_cast<std::size_t>(channels)}, T(1))),
          momentum(momentum_),
          eps(eps_) {
        if (channels < 1) throw ContractError("BatchNormState: channels must be positive");
        if (!(eps > T(0))) throw ContractError("BatchNormState: eps must be positive");
    }

    std::size_t channels() const { return running_mean.size(); }
};

// Batch normalization over (B,H,W) per channel. Accepts (C,H,W) as a batch of
// one. Training mode normalizes with batch statistics and updates running
// stats; eval mode uses the running stats. The affine transform follows.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, BatchNormState<T>& state, bool training) {
    if (x.rank() != 3 && x.rank() != 4)
        throw ShapeError("batchnorm2d: expected (C,H,W) or (B,C,H,W), got " +
                         shape_str(x.shape()));
    const bool batched = x.rank() == 4;
    const std::size_t B = batched ? x.extent(0) : 1;
    const std::size_t C = x.extent(batched ? 1 : 0);
    const std::size_t H = x.extent(batched ? 2 : 1);
    const std::size_t W = x.extent(batched ? 3 : 2);
    if (C != state.channels())
        throw ShapeError("batchnorm2d: " + std::to_string(C) + " channels vs state " +
                         std::to_string(state.channels()));
    const std::size_t plane = H * W;
    const std::size_t N = B * plane;  // normalization set per channel
    if (training && N < 2)
        throw ContractError("batchnorm2d: degenerate batch (B*H*W = " + std::to_string(N) +
                            " < 2) in training mode");

    std::vector<T> mu(C), sigma(C);  // per-channel mean and sqrt(var+eps) used
    if (training) {
        for (std::size_t c = 0; c < C; ++c) {
            T m = T(0), v = T(0);
            for (std::size_t b = 0; b < B; ++b) {
                const T* p = x.data() + (b * C + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) m += p[i];
            }
            m /= static_cast<T>(N);
            for (std::size_t b = 0; b < B; ++b) {
                const T* p = x.data() + (b * C + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) v += (p[i] - m) * (p[i] - m);
            }
            const T var_biased = v / static_cast<T>(N);
            const T var_unbiased = v / static_cast<T>(N - 1);
            mu[c] = m;
            sigma[c] = std::sqrt(var_biased + state.eps);
            state.running_mean[c] =
                (T(1) - state.momentum) * state.running_mean[c] + state.momentum * m;
            state.running_var[c] =
                (T(1) - state.momentum) * state.running_var[c] + state.momentum * var_unbiased;
        }
    } else {
        for (std::size_t c = 0; c < C; ++c) {
            mu[c] = state.running_mean[c];
            sigma[c] = std::sqrt(state.running_var[c] + state.eps);
        }
    }

    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
            const T* p = x.data() + (b * C + c) * plane;
            T* o = out.data() + (b * C + c) * plane;
            const T gam = state.gamma[c], bet = state.beta[c], m = mu[c], s = sigma[c];
            for (std::size_t i = 0; i < plane; ++i) o[i] = gam * (p[i] - m) / s + bet;
        }

    const bool track =
        x.requires_grad() || state.gamma.requires_grad() || state.beta.requires_grad();
    record_op(track, out, "batchnorm2d",
              [xd = x.ptr(), gd = state.gamma.ptr(), bd = state.beta.ptr(), od = out.ptr(),
               mu, sigma, B, C, plane, N, training] {
                  const T* go = od->g.data();
                  if (bd->requires_grad) bd->ensure_grad();
                  if (gd->requires_grad) gd->ensure_grad();
                  if (xd->requires_grad) xd->ensure_grad();
                  for (std::size_t c = 0; c < C; ++c) {
                      const T m = mu[c], s = sigma[c], gam = gd->v[c];
                      T sum_g = T(0), sum_gx = T(0);
                      for (std::size_t b = 0; b < B; ++b) {
                          const T* gp = go + (b * C + c) * plane;
                          const T* p = xd->v.data() + (b * C + c) * plane;
                          for (std::size_t i = 0; i < plane; ++i) {
                              sum_g += gp[i];
                              sum_gx += gp[i] * (p[i] - m) / s;
                          }
                      }
                      if (bd->requires_grad) bd->g[c] += sum_g;
                      if (gd->requires_grad) gd->g[c] += sum_gx;
                      if (!xd->requires_grad) continue;
                      const T inv_n = T(1) / static_cast<T>(N);
                      for (std::size_t b = 0; b < B; ++b) {
                          const T* gp = go + (b * C + c) * plane;
                          const T* p = xd->v.data() + (b * C + c) * plane;
                          T* dx = xd->g.data() + (b * C + c) * plane;
                          for (std::size_t i = 0; i < plane; ++i) {
                              const T xhat = (p[i] - m) / s;
                              if (training)
                                  dx[i] += gam / s * (gp[i] - sum_g * inv_n - xhat * sum_gx * inv_n);
                              else
                                  dx[i] += gam / s * gp[i];
                          }
                      }
                  }
              });
    return out;
}

// Bilinear resampling with the align-corners-false coordinate map
// src = (dst + 0.5) * in/out - 0.5, edges clamped. Accepts (C,h,w) or
// (B,C,h,w), resizes the two trailing axes.
template <typename T>
Tensor<T> interpolate_bilinear(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
    if (x.rank() != 3 && x.rank() != 4)
        throw ShapeError("interpolate_bilinear: expected (C,h,w) or (B,C,h,w), got " +
                         shape_str(x.shape()));
    if (out_h == 0 || out_w == 0)
        throw ContractError("interpolate_bilinear: zero target extent");
    const bool batched = x.rank() == 4;
    const std::size_t planes = batched ? x.extent(0) * x.extent(1) : x.extent(0);
    const std::size_t h = x.extent(batched ? 2 : 1), w = x.extent(batched ? 3 : 2);

    struct TapWeight {
        std::size_t lo, hi;
        T frac;
    };
    auto make_taps = [](std::size_t in, std::size_t out) {
        std::vector<TapWeight> taps(out);
        const double scale = static_cast<double>(in) / static_cast<double>(out);
        for (std::size_t o = 0; o < out; ++o) {
            double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
            src = std::clamp(src, 0.0, static_cast<double>(in - 1));
            const std::size_t lo = static_cast<std::size_t>(src);
            taps[o] = {lo, std::min(lo + 1, in - 1), static_cast<T>(src - static_cast<double>(lo))};
        }
        return taps;
    };
    const auto ty = make_taps(h, out_h);
    const auto tx = make_taps(w, out_w);

    Shape out_shape = x.shape();
    out_shape[out_shape.size() - 2] = out_h;
    out_shape[out_shape.size() - 1] = out_w;
    Tensor<T> out = Tensor<T>::zeros(out_shape);
    for (std::size_t p = 0; p < planes; ++p) {
        const T* ip = x.data() + p * h * w;
        T* op = out.data() + p * out_h * out_w;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
            const auto& wy = ty[oy];
            for (std::size_t ox = 0; ox < out_w; ++ox) {
                const auto& wx = tx[ox];
                const T p00 = ip[wy.lo * w + wx.lo], p01 = ip[wy.lo * w + wx.hi];
                const T p10 = ip[wy.hi * w + wx.lo], p11 = ip[wy.hi * w + wx.hi];
                const T top = p00 + (p01 - p00) * wx.frac;
                const T bot = p10 + (p11 - p10) * wx.frac;
                op[oy * out_w + ox] = top + (bot - top) * wy.frac;
            }
        }
    }
    record_op(x.requires_grad(), out, "interpolate_bilinear",
              [xd = x.ptr(), od = out.ptr(), ty, tx, planes, h, w, out_h, out_w] {
                  if (!xd->requires_grad) return;
                  xd->ensure_grad();
                  for (std::size_t p = 0; p < planes; ++p) {
                      const T* gp = od->g.data() + p * out_h * out_w;
                      T* dx = xd->g.data() + p * h * w;
                      for (std::size_t oy = 0; oy < out_h; ++oy) {
                          const auto& wy = ty[oy];
                          for (std::size_t ox = 0; ox < out_w; ++ox) {
                              const auto& wx = tx[ox];
                              const T g = gp[oy * out_w + ox];
                              const T fy = wy.frac, fx = wx.frac;
                              dx[wy.lo * w + wx.lo] += g * (T(1) - fy) * (T(1) - fx);
                              dx[wy.lo * w + wx.hi] += g * (T(1) - fy) * fx;
                              dx[wy.hi * w + wx.lo] += g * fy * (T(1) - fx);
                              dx[wy.hi * w + wx.hi] += g * fy * fx;
                          }
                      }
                  }
              });
    return out;
}

// I.i.d. uniform on [-a, a] with a = sqrt(6 / (fan_in + fan_out)).
// Deterministic for a given generator state.
template <typename T>
Tensor<T> xavier_uniform_init(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    if (fan_in == 0 || fan_out == 0)
        throw ContractError("xavier_uniform_init: fans must be positive");
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Tensor<T> t = Tensor<T>::zeros(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i)
        t[i] = static_cast<T>(rng.uniform(-a, a));
    return t;
}

// Ordered name -> tensor map for trainable parameters and non-trainable
// buffers (running statistics). Order is registration order and defines the
// optimizer's update sequence and the checkpoint layout.
template <typename T>
struct ParamRegistry {
    std::vector<std::pair<std::string, Tensor<T>>> params;
    std::vector<std::pair<std::string, Tensor<T>>> buffers;

    Tensor<T>& add_param(const std::string& name, Tensor<T> t) {
        t.set_requires_grad(true);
        params.emplace_back(name, std::move(t));
        return params.back().second;
    }
    Tensor<T>& add_buffer(const std::string& name, Tensor<T> t) {
        buffers.emplace_back(name, std::move(t));
        return buffers.back().second;
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : params) n += t.size();
        return n;
    }

    Tensor<T>* find(const std::string& name) {
        for (auto& [n, t] : params)
            if (n == name) return &t;
        for (auto& [n, t] : buffers)
            if (n == name) return &t;
        return nullptr;
    }

    void zero_grads() {
        for (auto& [n, t] : params) t.zero_grad();
    }
};

// Checkpoint directory: manifest.txt with `param name=file` / `buffer
// name=file` lines plus one TNSR file per entry.
template <typename T>
void save_checkpoint(const ParamRegistry<T>& reg, const std::string& dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    std::ofstream manifest(dir + "/manifest.txt");
    if (!manifest) throw IoError("checkpoint: cannot write manifest in " + dir);
    for (const auto& [name, t] : reg.params) {
        const std::string file = name + ".tnsr";
        save_tnsr(t, dir + "/" + file);
        manifest << "param " << name << "=" << file << "\n";
    }
    for (const auto& [name, t] : reg.buffers) {
        const std::string file = name + ".tnsr";
        save_tnsr(t, dir + "/" + file);
        manifest << "buffer " << name << "=" << file << "\n";
    }
    if (!manifest) throw IoError("checkpoint: manifest write failed in " + dir);
}

template <typename T>
void load_checkpoint(ParamRegistry<T>& reg, const std::string& dir) {
    std::ifstream manifest(dir + "/manifest.txt");
    if (!manifest) throw IoError("checkpoint: cannot open " + dir + "/manifest.txt");
    std::string line;
    std::size_t loaded = 0;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        const auto sp = line.find(' ');
        const auto eq = line.find('=', sp);
        if (sp == std::string::npos || eq == std::string::npos)
            throw IoError("checkpoint: malformed manifest line: " + line);
        const std::string name = line.substr(sp + 1, eq - sp - 1);
        const std::string file = line.substr(eq + 1);
        Tensor<T>* dst = reg.find(name);
        if (!dst) throw IoError("checkpoint: unknown entry '" + name + "' in manifest");
        Tensor<T> src = load_tnsr<T>(dir + "/" + file);
        if (src.shape() != dst->shape())
            throw IoError("checkpoint: shape mismatch for '" + name + "': file " +
                          shape_str(src.shape()) + " vs model " + shape_str(dst->shape()));
        std::copy(src.values().begin(), src.values().end(), dst->values().begin());
        ++loaded;
    }
    if (loaded != reg.params.size() + reg.buffers.size())
        throw IoError("checkpoint: manifest covers " + std::to_string(loaded) + " of " +
                      std::to_string(reg.params.size() + reg.buffers.size()) + " entries");
}

} // namespace caga
