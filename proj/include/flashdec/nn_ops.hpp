// Copyright 2026 The flashdec Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "flashdec/autodiff.hpp"
#include "flashdec/errors.hpp"
#include "flashdec/tensor.hpp"

namespace flashdec {

// Records the shapes seen by every convolution while installed; used by the
// cost model to cross-check analytic counts against an executed forward.
struct ConvCall {
  Shape input;
  Shape weight;
  Shape output;
  std::int64_t groups = 1;
};
inline thread_local std::vector<ConvCall>* conv_trace = nullptr;

struct ConvOptions {
  std::array<std::int64_t, 3> stride{1, 1, 1};  // (t, h, w)
  std::int64_t groups = 1;
};

namespace detail {

struct ConvGeometry {
  std::int64_t cin, t, h, w;
  std::int64_t cout, kt, kh, kw;
  std::int64_t groups;
  std::int64_t st, sh, sw;
  std::int64_t pt, ph, pw;  // pt is left-only (causal)
  std::int64_t ot, oh, ow;

  std::int64_t cin_per_group() const { return cin / groups; }
  std::int64_t cout_per_group() const { return cout / groups; }
  std::int64_t taps() const { return kt * kh * kw; }
};

// Weight rank 2 -> 1x1x1, rank 4 -> frame-wise (kt = 1), rank 5 -> full.
inline ConvGeometry conv_geometry(const Shape& x, const Shape& wt,
                                  const ConvOptions& opt, const char* op) {
  if (x.size() != 4) {
    throw DimensionError(std::string(op) + ": input must be [C,T,H,W], got " +
                         shape_str(x));
  }
  ConvGeometry g{};
  g.cin = x[0];
  g.t = x[1];
  g.h = x[2];
  g.w = x[3];
  g.cout = wt.empty() ? 0 : wt[0];
  switch (wt.size()) {
    case 2: g.kt = g.kh = g.kw = 1; break;
    case 4: g.kt = 1; g.kh = wt[2]; g.kw = wt[3]; break;
    case 5: g.kt = wt[2]; g.kh = wt[3]; g.kw = wt[4]; break;
    default:
      throw DimensionError(std::string(op) + ": unsupported weight shape " +
                           shape_str(wt));
  }
  g.groups = opt.groups;
  if (g.groups < 1 || g.cin % g.groups != 0 || g.cout % g.groups != 0) {
    throw DimensionError(std::string(op) + ": groups " + std::to_string(g.groups) +
                         " incompatible with channels " + std::to_string(g.cin) +
                         "->" + std::to_string(g.cout));
  }
  if (wt[1] != g.cin / g.groups) {
    throw DimensionError(std::string(op) + ": kernel expects " +
                         std::to_string(wt[1] * g.groups) +
                         " input channels, input has " + std::to_string(g.cin));
  }
  g.st = opt.stride[0];
  g.sh = opt.stride[1];
  g.sw = opt.stride[2];
  if (g.st < 1 || g.sh < 1 || g.sw < 1) {
    throw DimensionError(std::string(op) + ": stride must be >= 1");
  }
  g.pt = g.kt - 1;
  g.ph = g.kh / 2;
  g.pw = g.kw / 2;
  if (g.kt > g.t + g.pt || g.kh > g.h + 2 * g.ph || g.kw > g.w + 2 * g.pw ||
      g.kt < 1 || g.kh < 1 || g.kw < 1) {
    throw DimensionError(std::string(op) + ": kernel " + shape_str(wt) +
                         " exceeds padded input " + shape_str(x));
  }
  g.ot = (g.t + g.pt - g.kt) / g.st + 1;
  g.oh = (g.h + 2 * g.ph - g.kh) / g.sh + 1;
  g.ow = (g.w + 2 * g.pw - g.kw) / g.sw + 1;
  return g;
}

// Output positions [lo, hi) along one axis whose input coordinate
// o*stride + k - pad lies inside [0, extent).
inline void valid_range(std::int64_t extent, std::int64_t out, std::int64_t k,
                        std::int64_t pad, std::int64_t stride, std::int64_t& lo,
                        std::int64_t& hi) {
  const std::int64_t off = k - pad;
  lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
  hi = extent - off <= 0 ? 0 : (extent - off - 1) / stride + 1;
  hi = std::min(hi, out);
  if (hi < lo) hi = lo;
}

template <typename T>
void conv_forward(const ConvGeometry& g, const T* x, const T* wt, const T* bias,
                  T* y) {
  const std::int64_t cpg = g.cin_per_group();
  const std::int64_t opg = g.cout_per_group();
  const std::int64_t oplane = g.ot * g.oh * g.ow;
#if defined(_OPENMP)
#pragma omp parallel for schedule(static)
#endif
  for (std::int64_t co = 0; co < g.cout; ++co) {
    T* out = y + co * oplane;
    std::fill(out, out + oplane, bias ? bias[co] : T{0});
    const std::int64_t grp = co / opg;
    for (std::int64_t cig = 0; cig < cpg; ++cig) {
      const std::int64_t ci = grp * cpg + cig;
      const T* in = x + ci * g.t * g.h * g.w;
      const T* wk = wt + (co * cpg + cig) * g.taps();
      for (std::int64_t a = 0; a < g.kt; ++a) {
        std::int64_t t0, t1;
        valid_range(g.t, g.ot, a, g.pt, g.st, t0, t1);
        for (std::int64_t b = 0; b < g.kh; ++b) {
          std::int64_t h0, h1;
          valid_range(g.h, g.oh, b, g.ph, g.sh, h0, h1);
          for (std::int64_t c = 0; c < g.kw; ++c) {
            const T wv = wk[(a * g.kh + b) * g.kw + c];
            std::int64_t w0, w1;
            valid_range(g.w, g.ow, c, g.pw, g.sw, w0, w1);
            for (std::int64_t to = t0; to < t1; ++to) {
              const std::int64_t ti = to * g.st + a - g.pt;
              for (std::int64_t ho = h0; ho < h1; ++ho) {
                const std::int64_t hi = ho * g.sh + b - g.ph;
                T* orow = out + (to * g.oh + ho) * g.ow;
                const T* irow = in + (ti * g.h + hi) * g.w + c - g.pw;
                if (g.sw == 1) {
                  for (std::int64_t wo = w0; wo < w1; ++wo) orow[wo] += wv * irow[wo];
                } else {
                  for (std::int64_t wo = w0; wo < w1; ++wo) {
                    orow[wo] += wv * irow[wo * g.sw];
                  }
                }
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv_backward_input(const ConvGeometry& g, const T* gy, const T* wt, T* gx) {
  const std::int64_t cpg = g.cin_per_group();
  const std::int64_t opg = g.cout_per_group();
  const std::int64_t oplane = g.ot * g.oh * g.ow;
#if defined(_OPENMP)
#pragma omp parallel for schedule(static)
#endif
  for (std::int64_t ci = 0; ci < g.cin; ++ci) {
    const std::int64_t grp = ci / cpg;
    const std::int64_t cig = ci % cpg;
    T* gin = gx + ci * g.t * g.h * g.w;
    for (std::int64_t co = grp * opg; co < (grp + 1) * opg; ++co) {
      const T* gout = gy + co * oplane;
      const T* wk = wt + (co * cpg + cig) * g.taps();
      for (std::int64_t a = 0; a < g.kt; ++a) {
        std::int64_t t0, t1;
        valid_range(g.t, g.ot, a, g.pt, g.st, t0, t1);
        for (std::int64_t b = 0; b < g.kh; ++b) {
          std::int64_t h0, h1;
          valid_range(g.h, g.oh, b, g.ph, g.sh, h0, h1);
          for (std::int64_t c = 0; c < g.kw; ++c) {
            const T wv = wk[(a * g.kh + b) * g.kw + c];
            std::int64_t w0, w1;
            valid_range(g.w, g.ow, c, g.pw, g.sw, w0, w1);
            for (std::int64_t to = t0; to < t1; ++to) {
              const std::int64_t ti = to * g.st + a - g.pt;
              for (std::int64_t ho = h0; ho < h1; ++ho) {
                const std::int64_t hi = ho * g.sh + b - g.ph;
                const T* grow = gout + (to * g.oh + ho) * g.ow;
                T* irow = gin + (ti * g.h + hi) * g.w + c - g.pw;
                if (g.sw == 1) {
                  for (std::int64_t wo = w0; wo < w1; ++wo) irow[wo] += wv * grow[wo];
                } else {
                  for (std::int64_t wo = w0; wo < w1; ++wo) {
                    irow[wo * g.sw] += wv * grow[wo];
                  }
                }
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv_backward_params(const ConvGeometry& g, const T* gy, const T* x, T* gw,
                          T* gb) {
  const std::int64_t cpg = g.cin_per_group();
  const std::int64_t opg = g.cout_per_group();
  const std::int64_t oplane = g.ot * g.oh * g.ow;
#if defined(_OPENMP)
#pragma omp parallel for schedule(static)
#endif
  for (std::int64_t co = 0; co < g.cout; ++co) {
    const T* gout = gy + co * oplane;
    if (gb) {
      T acc{0};
      for (std::int64_t i = 0; i < oplane; ++i) acc += gout[i];
      gb[co] += acc;
    }
    if (!gw) continue;
    std::vector<T> lanes(static_cast<std::size_t>(g.ow));
    const std::int64_t grp = co / opg;
    for (std::int64_t cig = 0; cig < cpg; ++cig) {
      const std::int64_t ci = grp * cpg + cig;
      const T* in = x + ci * g.t * g.h * g.w;
      T* wk = gw + (co * cpg + cig) * g.taps();
      for (std::int64_t a = 0; a < g.kt; ++a) {
        std::int64_t t0, t1;
        valid_range(g.t, g.ot, a, g.pt, g.st, t0, t1);
        for (std::int64_t b = 0; b < g.kh; ++b) {
          std::int64_t h0, h1;
          valid_range(g.h, g.oh, b, g.ph, g.sh, h0, h1);
          for (std::int64_t c = 0; c < g.kw; ++c) {
            std::int64_t w0, w1;
            valid_range(g.w, g.ow, c, g.pw, g.sw, w0, w1);
            // Lane-wise partial sums keep the inner loop vectorizable with a
            // fixed reduction order.
            std::fill(lanes.begin(), lanes.end(), T{0});
            for (std::int64_t to = t0; to < t1; ++to) {
              const std::int64_t ti = to * g.st + a - g.pt;
              for (std::int64_t ho = h0; ho < h1; ++ho) {
                const std::int64_t hi = ho * g.sh + b - g.ph;
                const T* grow = gout + (to * g.oh + ho) * g.ow;
                const T* irow = in + (ti * g.h + hi) * g.w + c - g.pw;
                T* acc = lanes.data();
                if (g.sw == 1) {
                  for (std::int64_t wo = w0; wo < w1; ++wo) acc[wo] += grow[wo] * irow[wo];
                } else {
                  for (std::int64_t wo = w0; wo < w1; ++wo) {
                    acc[wo] += grow[wo] * irow[wo * g.sw];
                  }
                }
              }
            }
            T total{0};
            for (std::int64_t wo = w0; wo < w1; ++wo) total += lanes[wo];
            wk[(a * g.kh + b) * g.kw + c] += total;
          }
        }
      }
    }
  }
}

}  // namespace detail

// Causal convolution over [C, T, H, W]: the time axis is padded with
// (kt - 1) zeros on the left only, so output frame t reads input frames <= t;
// space is zero-padded by floor(k / 2) on both sides. Weight ranks 2, 4 and 5
// give 1x1x1, frame-wise 2D and full 3D kernels. `bias` may be an invalid Var.
template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
              const ConvOptions& opt = {}) {
  const auto g = detail::conv_geometry(x.shape(), weight.shape(), opt, "conv3d");
  if (bias.valid() && (bias.value().rank() != 1 || bias.value().dim(0) != g.cout)) {
    throw DimensionError("conv3d: bias shape " + shape_str(bias.shape()) +
                         " does not match " + std::to_string(g.cout) +
                         " output channels");
  }
  Tensor<T> y({g.cout, g.ot, g.oh, g.ow});
  detail::conv_forward(g, x.value().raw(), weight.value().raw(),
                       bias.valid() ? bias.value().raw() : nullptr, y.raw());
  if (conv_trace) conv_trace->push_back({x.shape(), weight.shape(), y.shape(), g.groups});
  std::vector<Var<T>> inputs{x, weight};
  if (bias.valid()) inputs.push_back(bias);
  const int xi = x.id(), wi = weight.id(), bi = bias.valid() ? bias.id() : -1;
  return x.tape().record(
      "conv3d", std::move(y), std::move(inputs), [g, xi, wi, bi](Tape<T>& tp, int self) {
        const T* gy = tp.grad_of(self).raw();
        if (tp.requires_grad(xi)) {
          detail::conv_backward_input(g, gy, tp.value(wi).raw(), tp.grad_acc(xi).raw());
        }
        const bool need_w = tp.requires_grad(wi);
        const bool need_b = bi >= 0 && tp.requires_grad(bi);
        if (need_w || need_b) {
          detail::conv_backward_params(g, gy, tp.value(xi).raw(),
                                       need_w ? tp.grad_acc(wi).raw() : nullptr,
                                       need_b ? tp.grad_acc(bi).raw() : nullptr);
        }
      });
}

// Weight [C_out, C_in, N_t, N_h, N_w].
template <typename T>
Var<T> conv3d_causal(const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
                     std::array<std::int64_t, 3> stride = {1, 1, 1}) {
  if (weight.value().rank() != 5) {
    throw DimensionError("conv3d_causal: weight must be rank 5, got " +
                         shape_str(weight.shape()));
  }
  return conv3d(x, weight, bias, ConvOptions{stride, 1});
}

// Same 2D kernel [C_out, C_in, N_h, N_w] applied to every frame.
template <typename T>
Var<T> conv2d_framewise(const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
                        std::array<std::int64_t, 2> stride = {1, 1}) {
  if (weight.value().rank() != 4) {
    throw DimensionError("conv2d_framewise: weight must be rank 4, got " +
                         shape_str(weight.shape()));
  }
  return conv3d(x, weight, bias, ConvOptions{{1, stride[0], stride[1]}, 1});
}

// Per-channel causal spatio-temporal filter, weight [C, 1, N_t, N_h, N_w].
template <typename T>
Var<T> depthwise_conv3d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const auto& ws = weight.shape();
  if (ws.size() != 5 || ws[1] != 1) {
    throw DimensionError("depthwise_conv3d: weight must be [C,1,Nt,Nh,Nw], got " +
                         shape_str(ws));
  }
  if (x.value().rank() != 4 || ws[0] != x.shape()[0]) {
    throw DimensionError("depthwise_conv3d: " + std::to_string(ws[0]) +
                         " filters for input " + shape_str(x.shape()));
  }
  return conv3d(x, weight, bias, ConvOptions{{1, 1, 1}, ws[0]});
}

// Cross-channel linear map at every position; weight [C_out, C_in].
template <typename T>
Var<T> conv1x1(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  if (weight.value().rank() != 2) {
    throw DimensionError("conv1x1: weight must be [C_out, C_in], got " +
                         shape_str(weight.shape()));
  }
  return conv3d(x, weight, bias);
}

// pointwise(depthwise(x)); the pointwise weight is [C_out, C_in] or
// [C_out, C_in, 1, 1, 1].
template <typename T>
Var<T> dwsep_conv3d(const Var<T>& x, const Var<T>& dw_weight, const Var<T>& pw_weight,
                    const Var<T>& pw_bias) {
  const auto& pws = pw_weight.shape();
  if (pws.size() < 2 || pws[1] != dw_weight.shape().at(0)) {
    throw DimensionError("dwsep_conv3d: pointwise expects " +
                         std::to_string(pws.size() >= 2 ? pws[1] : -1) +
                         " channels, depthwise stage has " +
                         std::to_string(dw_weight.shape().at(0)));
  }
  if (pws.size() == 5 && (pws[2] != 1 || pws[3] != 1 || pws[4] != 1)) {
    throw DimensionError("dwsep_conv3d: pointwise kernel must be 1x1x1");
  }
  const Var<T> mid = depthwise_conv3d(x, dw_weight, Var<T>());
  return conv3d(mid, pw_weight, pw_bias);
}

// Repeats each element f times along (t, h, w).
template <typename T>
Var<T> nearest_upsample(const Var<T>& x, std::array<std::int64_t, 3> f) {
  const auto& xv = x.value();
  if (xv.rank() != 4) throw DimensionError("nearest_upsample: input must be rank 4");
  if (f[0] < 1 || f[1] < 1 || f[2] < 1) {
    throw DimensionError("nearest_upsample: factors must be >= 1");
  }
  const std::int64_t C = xv.dim(0), Ti = xv.dim(1), Hi = xv.dim(2), Wi = xv.dim(3);
  const std::int64_t To = Ti * f[0], Ho = Hi * f[1], Wo = Wi * f[2];
  Tensor<T> y({C, To, Ho, Wo});
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t t = 0; t < To; ++t)
      for (std::int64_t h = 0; h < Ho; ++h) {
        const T* irow = xv.raw() + ((c * Ti + t / f[0]) * Hi + h / f[1]) * Wi;
        T* orow = y.raw() + ((c * To + t) * Ho + h) * Wo;
        for (std::int64_t w = 0; w < Wo; ++w) orow[w] = irow[w / f[2]];
      }
  const int xi = x.id();
  return x.tape().record("nearest_upsample", std::move(y), {x},
                         [xi, f, C, Ti, Hi, Wi, To, Ho, Wo](Tape<T>& tp, int self) {
    if (!tp.requires_grad(xi)) return;
    const auto& g = tp.grad_of(self);
    auto& gx = tp.grad_acc(xi);
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t t = 0; t < To; ++t)
        for (std::int64_t h = 0; h < Ho; ++h) {
          T* irow = gx.raw() + ((c * Ti + t / f[0]) * Hi + h / f[1]) * Wi;
          const T* orow = g.raw() + ((c * To + t) * Ho + h) * Wo;
          for (std::int64_t w = 0; w < Wo; ++w) irow[w / f[2]] += orow[w];
        }
  });
}

// Group normalization over [C, T, H, W] with per-channel affine scale/shift
// of shape [C]. Statistics are taken per (group, frame), so frame t of the
// output never depends on other frames and stacks of norms stay causal.
template <typename T>
Var<T> group_norm(const Var<T>& x, std::int64_t groups, const Var<T>& scale,
                  const Var<T>& shift, double eps = 1e-6) {
  const auto& xv = x.value();
  if (xv.rank() != 4) throw DimensionError("group_norm: input must be rank 4");
  const std::int64_t C = xv.dim(0), F = xv.dim(1);
  if (groups < 1 || C % groups != 0) {
    throw DimensionError("group_norm: " + std::to_string(groups) +
                         " groups do not divide " + std::to_string(C) + " channels");
  }
  if (scale.shape() != Shape{C} || shift.shape() != Shape{C}) {
    throw DimensionError("group_norm: affine parameters must be [" +
                         std::to_string(C) + "]");
  }
  const std::int64_t hw = xv.dim(2) * xv.dim(3);
  const std::int64_t cpg = C / groups;
  const std::int64_t n = cpg * hw;
  // Offset of (channel c, frame f) plane.
  auto plane = [F, hw](std::int64_t c, std::int64_t f) { return (c * F + f) * hw; };
  std::vector<T> inv_std(static_cast<std::size_t>(groups * F));
  Tensor<T> xhat(xv.shape());
  Tensor<T> y(xv.shape());
  for (std::int64_t g = 0; g < groups; ++g) {
    for (std::int64_t f = 0; f < F; ++f) {
      double s = 0.0;
      for (std::int64_t c = g * cpg; c < (g + 1) * cpg; ++c) {
        const T* base = xv.raw() + plane(c, f);
        for (std::int64_t i = 0; i < hw; ++i) s += base[i];
      }
      const double mu = s / static_cast<double>(n);
      double v = 0.0;
      for (std::int64_t c = g * cpg; c < (g + 1) * cpg; ++c) {
        const T* base = xv.raw() + plane(c, f);
        for (std::int64_t i = 0; i < hw; ++i) {
          const double d = base[i] - mu;
          v += d * d;
        }
      }
      v /= static_cast<double>(n);
      const double is = 1.0 / std::sqrt(v + eps);
      inv_std[static_cast<std::size_t>(g * F + f)] = static_cast<T>(is);
      for (std::int64_t c = g * cpg; c < (g + 1) * cpg; ++c) {
        const T ga = scale.value()[c], be = shift.value()[c];
        const std::int64_t o = plane(c, f);
        for (std::int64_t i = 0; i < hw; ++i) {
          xhat[o + i] = static_cast<T>((xv[o + i] - mu) * is);
          y[o + i] = ga * xhat[o + i] + be;
        }
      }
    }
  }
  const int xi = x.id(), si = scale.id(), hi = shift.id();
  return x.tape().record(
      "group_norm", std::move(y), {x, scale, shift},
      [xi, si, hi, C, F, hw, cpg, n, groups, plane, inv_std = std::move(inv_std),
       xhat = std::move(xhat)](Tape<T>& tp, int self) {
        const auto& g = tp.grad_of(self);
        const std::int64_t chan = F * hw;
        if (tp.requires_grad(si) || tp.requires_grad(hi)) {
          for (std::int64_t c = 0; c < C; ++c) {
            T ds{0}, db{0};
            for (std::int64_t i = 0; i < chan; ++i) {
              ds += g[c * chan + i] * xhat[c * chan + i];
              db += g[c * chan + i];
            }
            if (tp.requires_grad(si)) tp.grad_acc(si)[c] += ds;
            if (tp.requires_grad(hi)) tp.grad_acc(hi)[c] += db;
          }
        }
        if (!tp.requires_grad(xi)) return;
        const auto& sc = tp.value(si);
        auto& gx = tp.grad_acc(xi);
        for (std::int64_t grp = 0; grp < groups; ++grp) {
          for (std::int64_t f = 0; f < F; ++f) {
            double m1 = 0.0, m2 = 0.0;  // mean(dxhat), mean(dxhat * xhat)
            for (std::int64_t c = grp * cpg; c < (grp + 1) * cpg; ++c) {
              const std::int64_t o = plane(c, f);
              for (std::int64_t i = 0; i < hw; ++i) {
                const double d = static_cast<double>(g[o + i]) * sc[c];
                m1 += d;
                m2 += d * xhat[o + i];
              }
            }
            m1 /= static_cast<double>(n);
            m2 /= static_cast<double>(n);
            const double is = inv_std[static_cast<std::size_t>(grp * F + f)];
            for (std::int64_t c = grp * cpg; c < (grp + 1) * cpg; ++c) {
              const std::int64_t o = plane(c, f);
              for (std::int64_t i = 0; i < hw; ++i) {
                const double d = static_cast<double>(g[o + i]) * sc[c];
                gx[o + i] += static_cast<T>(is * (d - m1 - xhat[o + i] * m2));
              }
            }
          }
        }
      });
}

// Mean over every valid k x k spatial window of each frame:
// [C, T, H, W] -> [C, T, H - k + 1, W - k + 1].
template <typename T>
Var<T> box_filter(const Var<T>& x, std::int64_t k) {
  const auto& xv = x.value();
  if (xv.rank() != 4) throw DimensionError("box_filter: input must be rank 4");
  const std::int64_t P = xv.dim(0) * xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  if (k < 1 || k > H || k > W) {
    throw DimensionError("box_filter: window " + std::to_string(k) +
                         " larger than frame " + shape_str(xv.shape()));
  }
  const std::int64_t Ho = H - k + 1, Wo = W - k + 1;
  const T inv = T{1} / static_cast<T>(k * k);
  Tensor<T> y({xv.dim(0), xv.dim(1), Ho, Wo});
  for (std::int64_t p = 0; p < P; ++p)
    for (std::int64_t h = 0; h < Ho; ++h)
      for (std::int64_t w = 0; w < Wo; ++w) {
        T acc{0};
        for (std::int64_t a = 0; a < k; ++a) {
          const T* row = xv.raw() + (p * H + h + a) * W + w;
          for (std::int64_t b = 0; b < k; ++b) acc += row[b];
        }
        y[(p * Ho + h) * Wo + w] = acc * inv;
      }
  const int xi = x.id();
  return x.tape().record("box_filter", std::move(y), {x},
                         [xi, P, H, W, Ho, Wo, k, inv](Tape<T>& tp, int self) {
    if (!tp.requires_grad(xi)) return;
    const auto& g = tp.grad_of(self);
    auto& gx = tp.grad_acc(xi);
    for (std::int64_t p = 0; p < P; ++p)
      for (std::int64_t h = 0; h < Ho; ++h)
        for (std::int64_t w = 0; w < Wo; ++w) {
          const T gv = g[(p * Ho + h) * Wo + w] * inv;
          for (std::int64_t a = 0; a < k; ++a) {
            T* row = gx.raw() + (p * H + h + a) * W + w;
            for (std::int64_t b = 0; b < k; ++b) row[b] += gv;
          }
        }
  });
}

// 2x2 spatial average pooling (odd trailing rows/columns dropped).
template <typename T>
Var<T> avg_pool2(const Var<T>& x) {
  const auto& xv = x.value();
  if (xv.rank() != 4) throw DimensionError("avg_pool2: input must be rank 4");
  const std::int64_t P = xv.dim(0) * xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const std::int64_t Ho = H / 2, Wo = W / 2;
  if (Ho < 1 || Wo < 1) throw DimensionError("avg_pool2: frame too small");
  Tensor<T> y({xv.dim(0), xv.dim(1), Ho, Wo});
  for (std::int64_t p = 0; p < P; ++p)
    for (std::int64_t h = 0; h < Ho; ++h)
      for (std::int64_t w = 0; w < Wo; ++w) {
        const T* r0 = xv.raw() + (p * H + 2 * h) * W + 2 * w;
        const T* r1 = r0 + W;
        y[(p * Ho + h) * Wo + w] = T{0.25} * (r0[0] + r0[1] + r1[0] + r1[1]);
      }
  const int xi = x.id();
  return x.tape().record("avg_pool2", std::move(y), {x},
                         [xi, P, H, W, Ho, Wo](Tape<T>& tp, int self) {
    if (!tp.requires_grad(xi)) return;
    const auto& g = tp.grad_of(self);
    auto& gx = tp.grad_acc(xi);
    for (std::int64_t p = 0; p < P; ++p)
      for (std::int64_t h = 0; h < Ho; ++h)
        for (std::int64_t w = 0; w < Wo; ++w) {
          const T gv = T{0.25} * g[(p * Ho + h) * Wo + w];
          T* r0 = gx.raw() + (p * H + 2 * h) * W + 2 * w;
          T* r1 = r0 + W;
          r0[0] += gv;
          r0[1] += gv;
          r1[0] += gv;
          r1[1] += gv;
        }
  });
}

// sqrt(dx^2 + dy^2 + eps) from forward differences:
// [C, T, H, W] -> [C, T, H - 1, W - 1].
template <typename T>
Var<T> gradient_magnitude(const Var<T>& x, double eps = 1e-6) {
  const auto& xv = x.value();
  if (xv.rank() != 4) throw DimensionError("gradient_magnitude: input must be rank 4");
  const std::int64_t P = xv.dim(0) * xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  if (H < 2 || W < 2) throw DimensionError("gradient_magnitude: frame too small");
  const std::int64_t Ho = H - 1, Wo = W - 1;
  Tensor<T> y({xv.dim(0), xv.dim(1), Ho, Wo});
  for (std::int64_t p = 0; p < P; ++p)
    for (std::int64_t h = 0; h < Ho; ++h)
      for (std::int64_t w = 0; w < Wo; ++w) {
        const T* r = xv.raw() + (p * H + h) * W + w;
        const T dx = r[1] - r[0];
        const T dy = r[W] - r[0];
        y[(p * Ho + h) * Wo + w] = std::sqrt(dx * dx + dy * dy + static_cast<T>(eps));
      }
  const int xi = x.id();
  return x.tape().record("gradient_magnitude", std::move(y), {x},
                         [xi, P, H, W, Ho, Wo](Tape<T>& tp, int self) {
    if (!tp.requires_grad(xi)) return;
    const auto& g = tp.grad_of(self);
    const auto& xv = tp.value(xi);
    const auto& yv = tp.value(self);
    auto& gx = tp.grad_acc(xi);
    for (std::int64_t p = 0; p < P; ++p)
      for (std::int64_t h = 0; h < Ho; ++h)
        for (std::int64_t w = 0; w < Wo; ++w) {
          const std::int64_t o = (p * Ho + h) * Wo + w;
          const std::int64_t i = (p * H + h) * W + w;
          const T dx = xv[i + 1] - xv[i];
          const T dy = xv[i + W] - xv[i];
          const T s = g[o] / yv[o];
          gx[i + 1] += s * dx;
          gx[i + W] += s * dy;
          gx[i] -= s * (dx + dy);
        }
  });
}

}  // namespace flashdec
