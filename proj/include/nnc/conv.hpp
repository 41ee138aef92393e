#pragma once

// Direct (loop) convolutions, stride 1. Cross-correlation plus per-channel bias.

#include <algorithm>
#include <cstddef>
#include <string>

#include "nnc/tape.hpp"
#include "nnc/tensor.hpp"

namespace nnc {

template <typename T>
Var<T> reshape(Var<T> x, Shape shape);

namespace detail {

inline std::string dim_msg(const char* what, std::size_t got, std::size_t want) {
  return std::string(what) + " is " + std::to_string(got) + ", expected " + std::to_string(want);
}

}  // namespace detail

/// input (N, Cin, H, W) or (Cin, H, W); kernels (Cout, Cin, k, k); bias (Cout).
template <typename T>
Var<T> conv2d(Var<T> input, Var<T> kernels, Var<T> bias, std::size_t padding) {
  const Shape& si = input.shape();
  if (si.size() == 3) {
    Var<T> out = conv2d(reshape(input, Shape{1, si[0], si[1], si[2]}), kernels, bias, padding);
    const Shape& so = out.shape();
    return reshape(out, Shape{so[1], so[2], so[3]});
  }
  const Shape& sk = kernels.shape();
  if (si.size() != 4) shape_fail("conv2d", "input must be (N, C, H, W), got " + to_string(si));
  if (sk.size() != 4) shape_fail("conv2d", "kernels must be (Cout, Cin, k, k), got " + to_string(sk));
  if (sk[1] != si[1]) shape_fail("conv2d", detail::dim_msg("input channel dimension", si[1], sk[1]));
  if (bias.shape() != Shape{sk[0]}) shape_fail("conv2d", "bias must have " + std::to_string(sk[0]) + " entries");
  const std::size_t n = si[0], ci = si[1], h = si[2], w = si[3];
  const std::size_t co = sk[0], kh = sk[2], kw = sk[3];
  const std::size_t p = padding;
  if (kh > h + 2 * p) shape_fail("conv2d", "kernel height " + std::to_string(kh) + " exceeds padded height " + std::to_string(h + 2 * p));
  if (kw > w + 2 * p) shape_fail("conv2d", "kernel width " + std::to_string(kw) + " exceeds padded width " + std::to_string(w + 2 * p));
  const std::size_t ho = h + 2 * p - kh + 1, wo = w + 2 * p - kw + 1;

  Tensor<T> out(Shape{n, co, ho, wo});
  const T* xp = input.value().ptr();
  const T* kp = kernels.value().ptr();
  const T* bp = bias.value().ptr();
  // Valid output range for a kernel tap at offset kk along an axis of extent e.
  auto lo = [p](std::size_t kk) { return kk < p ? p - kk : std::size_t{0}; };
  auto hi = [p](std::size_t kk, std::size_t e, std::size_t eo) {
    // ox + kk - p < e  <=>  ox < e + p - kk
    return kk > e + p ? std::size_t{0} : std::min(eo, e + p - kk);
  };
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oc = 0; oc < co; ++oc) {
      T* op = out.ptr() + (b * co + oc) * ho * wo;
      std::fill(op, op + ho * wo, bp[oc]);
      for (std::size_t ic = 0; ic < ci; ++ic) {
        const T* ip = xp + (b * ci + ic) * h * w;
        const T* kern = kp + (oc * ci + ic) * kh * kw;
        for (std::size_t ky = 0; ky < kh; ++ky)
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const T wv = kern[ky * kw + kx];
            const std::size_t y0 = lo(ky), y1 = hi(ky, h, ho);
            const std::size_t x0 = lo(kx), x1 = hi(kx, w, wo);
            if (x1 <= x0) continue;
            const std::size_t len = x1 - x0;
            for (std::size_t oy = y0; oy < y1; ++oy) {
              const T* irow = ip + (oy + ky - p) * w + (x0 + kx - p);
              T* orow = op + oy * wo + x0;
              for (std::size_t i = 0; i < len; ++i) orow[i] += wv * irow[i];
            }
          }
      }
    }

  const std::size_t xi = input.id, ki = kernels.id, bi = bias.id;
  return input.tape->record(
      std::move(out), {xi, ki, bi}, [=](Tape<T>& tp, const Tensor<T>& g) {
        const T* xp = tp.value(xi).ptr();
        const T* kp = tp.value(ki).ptr();
        const T* gp = g.ptr();
        const bool want_x = tp.requires_grad(xi), want_k = tp.requires_grad(ki);
        T* gx = want_x ? tp.grad_ref(xi).ptr() : nullptr;
        T* gk = want_k ? tp.grad_ref(ki).ptr() : nullptr;
        if (tp.requires_grad(bi)) {
          T* gb = tp.grad_ref(bi).ptr();
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t oc = 0; oc < co; ++oc) {
              const T* go = gp + (b * co + oc) * ho * wo;
              T acc{0};
              for (std::size_t i = 0; i < ho * wo; ++i) acc += go[i];
              gb[oc] += acc;
            }
        }
        if (!want_x && !want_k) return;
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t oc = 0; oc < co; ++oc) {
            const T* go = gp + (b * co + oc) * ho * wo;
            for (std::size_t ic = 0; ic < ci; ++ic) {
              const T* ip = xp + (b * ci + ic) * h * w;
              T* gip = want_x ? gx + (b * ci + ic) * h * w : nullptr;
              const T* kern = kp + (oc * ci + ic) * kh * kw;
              T* gkern = want_k ? gk + (oc * ci + ic) * kh * kw : nullptr;
              for (std::size_t ky = 0; ky < kh; ++ky)
                for (std::size_t kx = 0; kx < kw; ++kx) {
                  const std::size_t y0 = lo(ky), y1 = hi(ky, h, ho);
                  const std::size_t x0 = lo(kx), x1 = hi(kx, w, wo);
                  const T wv = kern[ky * kw + kx];
                  if (x1 <= x0) continue;
                  const std::size_t len = x1 - x0;
                  T acc{0};
                  for (std::size_t oy = y0; oy < y1; ++oy) {
                    const std::size_t roff = (oy + ky - p) * w + (x0 + kx - p);
                    const T* grow = go + oy * wo + x0;
                    if (want_k) {
                      const T* irow = ip + roff;
                      for (std::size_t i = 0; i < len; ++i) acc += grow[i] * irow[i];
                    }
                    if (want_x) {
                      T* girow = gip + roff;
                      for (std::size_t i = 0; i < len; ++i) girow[i] += wv * grow[i];
                    }
                  }
                  if (want_k) gkern[ky * kw + kx] += acc;
                }
            }
          }
      });
}

/// input (N, Cin, D, H, W) or (Cin, D, H, W); kernels (Cout, Cin, kd, kh, kw);
/// bias (Cout). No padding.
template <typename T>
Var<T> conv3d(Var<T> input, Var<T> kernels, Var<T> bias) {
  const Shape& si = input.shape();
  if (si.size() == 4) {
    Var<T> out = conv3d(reshape(input, Shape{1, si[0], si[1], si[2], si[3]}), kernels, bias);
    const Shape& so = out.shape();
    return reshape(out, Shape{so[1], so[2], so[3], so[4]});
  }
  const Shape& sk = kernels.shape();
  if (si.size() != 5) shape_fail("conv3d", "input must be (N, C, D, H, W), got " + to_string(si));
  if (sk.size() != 5) shape_fail("conv3d", "kernels must be (Cout, Cin, kd, kh, kw), got " + to_string(sk));
  if (sk[1] != si[1]) shape_fail("conv3d", detail::dim_msg("input channel dimension", si[1], sk[1]));
  if (bias.shape() != Shape{sk[0]}) shape_fail("conv3d", "bias must have " + std::to_string(sk[0]) + " entries");
  const std::size_t n = si[0], ci = si[1], d = si[2], h = si[3], w = si[4];
  const std::size_t co = sk[0], kd = sk[2], kh = sk[3], kw = sk[4];
  if (kd > d) shape_fail("conv3d", "kernel depth " + std::to_string(kd) + " exceeds input depth " + std::to_string(d));
  if (kh > h) shape_fail("conv3d", "kernel height " + std::to_string(kh) + " exceeds input height " + std::to_string(h));
  if (kw > w) shape_fail("conv3d", "kernel width " + std::to_string(kw) + " exceeds input width " + std::to_string(w));
  const std::size_t dout = d - kd + 1, ho = h - kh + 1, wo = w - kw + 1;
  const std::size_t in_vol = d * h * w, out_vol = dout * ho * wo, k_vol = kd * kh * kw;

  Tensor<T> out(Shape{n, co, dout, ho, wo});
  const T* xp = input.value().ptr();
  const T* kp = kernels.value().ptr();
  const T* bp = bias.value().ptr();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oc = 0; oc < co; ++oc) {
      T* op = out.ptr() + (b * co + oc) * out_vol;
      std::fill(op, op + out_vol, bp[oc]);
      for (std::size_t ic = 0; ic < ci; ++ic) {
        const T* ip = xp + (b * ci + ic) * in_vol;
        const T* kern = kp + (oc * ci + ic) * k_vol;
        for (std::size_t kz = 0; kz < kd; ++kz)
          for (std::size_t ky = 0; ky < kh; ++ky)
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const T wv = kern[(kz * kh + ky) * kw + kx];
              for (std::size_t oz = 0; oz < dout; ++oz)
                for (std::size_t oy = 0; oy < ho; ++oy) {
                  const T* irow = ip + ((oz + kz) * h + oy + ky) * w + kx;
                  T* orow = op + (oz * ho + oy) * wo;
                  for (std::size_t ox = 0; ox < wo; ++ox) orow[ox] += wv * irow[ox];
                }
            }
      }
    }

  const std::size_t xi = input.id, ki = kernels.id, bi = bias.id;
  return input.tape->record(
      std::move(out), {xi, ki, bi}, [=](Tape<T>& tp, const Tensor<T>& g) {
        const T* xp = tp.value(xi).ptr();
        const T* kp = tp.value(ki).ptr();
        const T* gp = g.ptr();
        const bool want_x = tp.requires_grad(xi), want_k = tp.requires_grad(ki);
        T* gx = want_x ? tp.grad_ref(xi).ptr() : nullptr;
        T* gk = want_k ? tp.grad_ref(ki).ptr() : nullptr;
        if (tp.requires_grad(bi)) {
          T* gb = tp.grad_ref(bi).ptr();
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t oc = 0; oc < co; ++oc) {
              const T* go = gp + (b * co + oc) * out_vol;
              T acc{0};
              for (std::size_t i = 0; i < out_vol; ++i) acc += go[i];
              gb[oc] += acc;
            }
        }
        if (!want_x && !want_k) return;
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t oc = 0; oc < co; ++oc) {
            const T* go = gp + (b * co + oc) * out_vol;
            for (std::size_t ic = 0; ic < ci; ++ic) {
              const T* ip = xp + (b * ci + ic) * in_vol;
              T* gip = want_x ? gx + (b * ci + ic) * in_vol : nullptr;
              const T* kern = kp + (oc * ci + ic) * k_vol;
              T* gkern = want_k ? gk + (oc * ci + ic) * k_vol : nullptr;
              for (std::size_t kz = 0; kz < kd; ++kz)
                for (std::size_t ky = 0; ky < kh; ++ky)
                  for (std::size_t kx = 0; kx < kw; ++kx) {
                    const std::size_t kidx = (kz * kh + ky) * kw + kx;
                    const T wv = kern[kidx];
                    T acc{0};
                    for (std::size_t oz = 0; oz < dout; ++oz)
                      for (std::size_t oy = 0; oy < ho; ++oy) {
                        const std::size_t roff = ((oz + kz) * h + oy + ky) * w + kx;
                        const T* grow = go + (oz * ho + oy) * wo;
                        if (want_k) {
                          const T* irow = ip + roff;
                          for (std::size_t ox = 0; ox < wo; ++ox) acc += grow[ox] * irow[ox];
                        }
                        if (want_x) {
                          T* girow = gip + roff;
                          for (std::size_t ox = 0; ox < wo; ++ox) girow[ox] += wv * grow[ox];
                        }
                      }
                    if (want_k) gkern[kidx] += acc;
                  }
            }
          }
      });
}

}  // namespace nnc
