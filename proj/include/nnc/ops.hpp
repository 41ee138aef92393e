#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <type_traits>
#include <string>
#include <vector>

#include "nnc/tape.hpp"
#include "nnc/tensor.hpp"

namespace nnc {

namespace hooks {
/// Negative-test hook: when set, sigmoid's backward rule is scaled by 1.5 so
/// gradient checks must fail.
inline bool corrupt_sigmoid_backward = false;
}  // namespace hooks

namespace detail {

template <typename T>
void require_same_shape(const char* op, Var<T> a, Var<T> b) {
  if (a.tape != b.tape) shape_fail(op, "operands recorded on different tapes");
  if (a.shape() != b.shape()) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() != sb.size()) {
      shape_fail(op, "rank mismatch " + to_string(sa) + " vs " + to_string(sb));
    }
    for (std::size_t i = 0; i < sa.size(); ++i) {
      if (sa[i] != sb[i]) {
        shape_fail(op, "dimension " + std::to_string(i) + " differs: " + std::to_string(sa[i]) + " vs " +
                           std::to_string(sb[i]));
      }
    }
  }
}

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Structural ops

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tape<T>& t = *x.tape;
  Tensor<T> out = x.value().reshaped(std::move(shape));
  const std::size_t xi = x.id;
  return t.record(std::move(out), {xi}, [xi](Tape<T>& tp, const Tensor<T>& g) {
    Tensor<T>& gx = tp.grad_ref(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

/// Swaps the last two axes: (..., A, B) -> (..., B, A).
template <typename T>
Var<T> transpose_last2(Var<T> x) {
  const Shape& s = x.shape();
  if (s.size() < 2) shape_fail("transpose_last2", "rank must be >= 2, got " + to_string(s));
  const std::size_t a = s[s.size() - 2], b = s[s.size() - 1];
  const std::size_t batch = x.value().size() / (a * b);
  Shape os = s;
  std::swap(os[os.size() - 2], os[os.size() - 1]);
  Tensor<T> out(os);
  const T* xp = x.value().ptr();
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t i = 0; i < a; ++i)
      for (std::size_t j = 0; j < b; ++j) out[n * a * b + j * a + i] = xp[n * a * b + i * b + j];
  const std::size_t xi = x.id;
  return x.tape->record(std::move(out), {xi}, [xi, a, b, batch](Tape<T>& tp, const Tensor<T>& g) {
    Tensor<T>& gx = tp.grad_ref(xi);
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t i = 0; i < a; ++i)
        for (std::size_t j = 0; j < b; ++j) gx[n * a * b + i * b + j] += g[n * a * b + j * a + i];
  });
}

/// Half-open range [begin, end) along one axis.
template <typename T>
Var<T> slice(Var<T> x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = x.shape();
  if (axis >= s.size()) shape_fail("slice", "axis " + std::to_string(axis) + " out of range");
  if (begin >= end || end > s[axis]) {
    shape_fail("slice", "range [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid for dimension " +
                            std::to_string(axis) + " of extent " + std::to_string(s[axis]));
  }
  const auto sp = detail::split_at(s, axis);
  const std::size_t len = end - begin;
  Shape os = s;
  os[axis] = len;
  Tensor<T> out(os);
  const T* xp = x.value().ptr();
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(xp + (o * sp.n + begin) * sp.inner, len * sp.inner, out.ptr() + o * len * sp.inner);
  const std::size_t xi = x.id;
  return x.tape->record(std::move(out), {xi}, [xi, sp, begin, len](Tape<T>& tp, const Tensor<T>& g) {
    Tensor<T>& gx = tp.grad_ref(xi);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      const T* gp = g.ptr() + o * len * sp.inner;
      T* dst = gx.ptr() + (o * sp.n + begin) * sp.inner;
      for (std::size_t i = 0; i < len * sp.inner; ++i) dst[i] += gp[i];
    }
  });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, std::size_t axis) {
  if (xs.empty()) shape_fail("concat", "no inputs");
  const Shape& s0 = xs.front().shape();
  if (axis >= s0.size()) shape_fail("concat", "axis " + std::to_string(axis) + " out of range");
  Shape os = s0;
  os[axis] = 0;
  std::vector<std::size_t> lens, ids;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    if (s.size() != s0.size()) shape_fail("concat", "rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != s0[i]) shape_fail("concat", "dimension " + std::to_string(i) + " differs");
    }
    os[axis] += s[axis];
    lens.push_back(s[axis]);
    ids.push_back(x.id);
  }
  const auto sp = detail::split_at(os, axis);
  Tensor<T> out(os);
  std::size_t off = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const T* xp = xs[k].value().ptr();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(xp + o * lens[k] * sp.inner, lens[k] * sp.inner, out.ptr() + (o * sp.n + off) * sp.inner);
    off += lens[k];
  }
  return xs.front().tape->record(std::move(out), ids, [ids, lens, sp](Tape<T>& tp, const Tensor<T>& g) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (tp.requires_grad(ids[k])) {
        Tensor<T>& gx = tp.grad_ref(ids[k]);
        for (std::size_t o = 0; o < sp.outer; ++o) {
          const T* src = g.ptr() + (o * sp.n + off) * sp.inner;
          T* dst = gx.ptr() + o * lens[k] * sp.inner;
          for (std::size_t i = 0; i < lens[k] * sp.inner; ++i) dst[i] += src[i];
        }
      }
      off += lens[k];
    }
  });
}

// ---------------------------------------------------------------------------
// Pointwise

enum class BinaryKind { Add, Mul };
enum class UnaryKind { Relu, Sigmoid };

template <typename T>
Var<T> elementwise(Var<T> a, Var<T> b, BinaryKind kind) {
  detail::require_same_shape(kind == BinaryKind::Add ? "add" : "mul", a, b);
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  Tensor<T> out(av.shape());
  if (kind == BinaryKind::Add) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  }
  const std::size_t ai = a.id, bi = b.id;
  return a.tape->record(std::move(out), {ai, bi}, [ai, bi, kind](Tape<T>& tp, const Tensor<T>& g) {
    if (kind == BinaryKind::Add) {
      if (tp.requires_grad(ai)) {
        Tensor<T>& ga = tp.grad_ref(ai);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (tp.requires_grad(bi)) {
        Tensor<T>& gb = tp.grad_ref(bi);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
      return;
    }
    const Tensor<T>& av = tp.value(ai);
    const Tensor<T>& bv = tp.value(bi);
    if (tp.requires_grad(ai)) {
      Tensor<T>& ga = tp.grad_ref(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tp.requires_grad(bi)) {
      Tensor<T>& gb = tp.grad_ref(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return elementwise(a, b, BinaryKind::Add);
}
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  return elementwise(a, b, BinaryKind::Mul);
}

template <typename T>
Var<T> unary(Var<T> x, UnaryKind kind) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  if (kind == UnaryKind::Relu) {
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = xv[i] > T{0} ? xv[i] : T{0};
      x.tape->note_branch(xv[i] > T{0});
    }
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = T{1} / (T{1} + std::exp(-xv[i]));
  }
  const std::size_t xi = x.id;
  const std::size_t oi = x.tape->size();
  return x.tape->record(std::move(out), {xi}, [xi, oi, kind](Tape<T>& tp, const Tensor<T>& g) {
    Tensor<T>& gx = tp.grad_ref(xi);
    const Tensor<T>& y = tp.value(oi);
    if (kind == UnaryKind::Relu) {
      // Subgradient at exactly zero is zero.
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += y[i] > T{0} ? g[i] : T{0};
    } else {
      const T k = hooks::corrupt_sigmoid_backward ? T(1.5) : T(1);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += k * g[i] * y[i] * (T{1} - y[i]);
    }
  });
}

template <typename T>
Var<T> relu(Var<T> x) {
  return unary(x, UnaryKind::Relu);
}
template <typename T>
Var<T> sigmoid(Var<T> x) {
  return unary(x, UnaryKind::Sigmoid);
}

template <typename T>
Var<T> scale(Var<T> x, T s) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * s;
  const std::size_t xi = x.id;
  return x.tape->record(std::move(out), {xi}, [xi, s](Tape<T>& tp, const Tensor<T>& g) {
    Tensor<T>& gx = tp.grad_ref(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s;
  });
}

/// x[..., j] + b[j].
template <typename T>
Var<T> add_bias(Var<T> x, Var<T> b) {
  const Shape& s = x.shape();
  if (b.shape().size() != 1 || b.shape()[0] != s.back()) {
    shape_fail("add_bias", "bias " + to_string(b.shape()) + " does not match last dimension of " + to_string(s));
  }
  const std::size_t c = s.back();
  const std::size_t rows = x.value().size() / c;
  Tensor<T> out = x.value();
  const T* bp = b.value().ptr();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] += bp[j];
  const std::size_t xi = x.id, bi = b.id;
  return x.tape->record(std::move(out), {xi, bi}, [xi, bi, rows, c](Tape<T>& tp, const Tensor<T>& g) {
    if (tp.requires_grad(xi)) {
      Tensor<T>& gx = tp.grad_ref(xi);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (tp.requires_grad(bi)) {
      Tensor<T>& gb = tp.grad_ref(bi);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) gb[j] += g[r * c + j];
    }
  });
}

/// x[..., j] * gate[..., 0]: replicates a one-column mask across the last axis.
template <typename T>
Var<T> mul_expand_last(Var<T> x, Var<T> gate) {
  const Shape& s = x.shape();
  Shape expect = s;
  expect.back() = 1;
  if (gate.shape() != expect) {
    shape_fail("mul_expand_last", "gate " + to_string(gate.shape()) + " must be " + to_string(expect));
  }
  const std::size_t c = s.back();
  const std::size_t rows = x.value().size() / c;
  Tensor<T> out(s);
  const T* xp = x.value().ptr();
  const T* gp = gate.value().ptr();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = xp[r * c + j] * gp[r];
  const std::size_t xi = x.id, gi = gate.id;
  return x.tape->record(std::move(out), {xi, gi}, [xi, gi, rows, c](Tape<T>& tp, const Tensor<T>& g) {
    const Tensor<T>& xv = tp.value(xi);
    const Tensor<T>& gv = tp.value(gi);
    if (tp.requires_grad(xi)) {
      Tensor<T>& gx = tp.grad_ref(xi);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += g[r * c + j] * gv[r];
    }
    if (tp.requires_grad(gi)) {
      Tensor<T>& gg = tp.grad_ref(gi);
      for (std::size_t r = 0; r < rows; ++r) {
        T acc{0};
        for (std::size_t j = 0; j < c; ++j) acc += g[r * c + j] * xv[r * c + j];
        gg[r] += acc;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Var<T> sum(Var<T> x) {
  T acc{0};
  for (T v : x.value().data()) acc += v;
  const std::size_t xi = x.id;
  return x.tape->record(Tensor<T>::scalar(acc), {xi}, [xi](Tape<T>& tp, const Tensor<T>& g) {
    Tensor<T>& gx = tp.grad_ref(xi);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0];
  });
}

template <typename T>
Var<T> mean(Var<T> x) {
  return scale(sum(x), T(1) / static_cast<T>(x.value().size()));
}

/// Sum over the last axis, keeping it as extent 1.
template <typename T>
Var<T> sum_last(Var<T> x) {
  const Shape& s = x.shape();
  const std::size_t c = s.back();
  const std::size_t rows = x.value().size() / c;
  Shape os = s;
  os.back() = 1;
  Tensor<T> out(os);
  const T* xp = x.value().ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    T acc{0};
    for (std::size_t j = 0; j < c; ++j) acc += xp[r * c + j];
    out[r] = acc;
  }
  const std::size_t xi = x.id;
  return x.tape->record(std::move(out), {xi}, [xi, rows, c](Tape<T>& tp, const Tensor<T>& g) {
    Tensor<T>& gx = tp.grad_ref(xi);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += g[r];
  });
}

/// log(sum(exp(x))) over the last axis, max-shifted; keeps the axis as extent 1.
template <typename T>
Var<T> logsumexp_last(Var<T> x) {
  const Shape& s = x.shape();
  const std::size_t c = s.back();
  const std::size_t rows = x.value().size() / c;
  Shape os = s;
  os.back() = 1;
  Tensor<T> out(os);
  const T* xp = x.value().ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xp + r * c;
    const T m = *std::max_element(row, row + c);
    T acc{0};
    for (std::size_t j = 0; j < c; ++j) acc += std::exp(row[j] - m);
    out[r] = m + std::log(acc);
  }
  const std::size_t xi = x.id;
  const std::size_t oi = x.tape->size();
  return x.tape->record(std::move(out), {xi}, [xi, oi, rows, c](Tape<T>& tp, const Tensor<T>& g) {
    Tensor<T>& gx = tp.grad_ref(xi);
    const Tensor<T>& xv = tp.value(xi);
    const Tensor<T>& lse = tp.value(oi);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += g[r] * std::exp(xv[r * c + j] - lse[r]);
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// (m x k) . (k x n)
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2) {
    shape_fail("matmul", "operands must be rank 2, got " + to_string(sa) + " and " + to_string(sb));
  }
  if (sa[1] != sb[0]) {
    shape_fail("matmul", "inner dimension mismatch: a has " + std::to_string(sa[1]) + " columns, b has " +
                             std::to_string(sb[0]) + " rows");
  }
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  Tensor<T> out(Shape{m, n});
  const T* ap = a.value().ptr();
  const T* bp = b.value().ptr();
  T* op = out.ptr();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ap[i * k + p];
      const T* brow = bp + p * n;
      T* orow = op + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  const std::size_t ai = a.id, bi = b.id;
  return a.tape->record(std::move(out), {ai, bi}, [ai, bi, m, k, n](Tape<T>& tp, const Tensor<T>& g) {
    const T* ap = tp.value(ai).ptr();
    const T* bp = tp.value(bi).ptr();
    const T* gp = g.ptr();
    if (tp.requires_grad(ai)) {
      T* ga = tp.grad_ref(ai).ptr();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          T acc{0};
          for (std::size_t j = 0; j < n; ++j) acc += gp[i * n + j] * bp[p * n + j];
          ga[i * k + p] += acc;
        }
    }
    if (tp.requires_grad(bi)) {
      T* gb = tp.grad_ref(bi).ptr();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const T av = ap[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * gp[i * n + j];
        }
    }
  });
}

/// Applies w (m_out x m) on the left of every sample block: (N, m, d) -> (N, m_out, d).
template <typename T>
Var<T> left_matmul(Var<T> w, Var<T> x) {
  const Shape& sw = w.shape();
  const Shape& sx = x.shape();
  if (sw.size() != 2 || sx.size() != 3) {
    shape_fail("left_matmul", "expected rank-2 weight and rank-3 input, got " + to_string(sw) + " and " + to_string(sx));
  }
  if (sw[1] != sx[1]) {
    shape_fail("left_matmul", "dimension 1 of input (" + std::to_string(sx[1]) + ") must equal weight columns (" +
                                  std::to_string(sw[1]) + ")");
  }
  const std::size_t batch = sx[0], mo = sw[0], m = sw[1], d = sx[2];
  Tensor<T> out(Shape{batch, mo, d});
  const T* wp = w.value().ptr();
  const T* xp = x.value().ptr();
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t i = 0; i < mo; ++i)
      for (std::size_t p = 0; p < m; ++p) {
        const T wv = wp[i * m + p];
        const T* xr = xp + (n * m + p) * d;
        T* orow = out.ptr() + (n * mo + i) * d;
        for (std::size_t j = 0; j < d; ++j) orow[j] += wv * xr[j];
      }
  const std::size_t wi = w.id, xi = x.id;
  return w.tape->record(std::move(out), {wi, xi}, [wi, xi, batch, mo, m, d](Tape<T>& tp, const Tensor<T>& g) {
    const T* wp = tp.value(wi).ptr();
    const T* xp = tp.value(xi).ptr();
    const T* gp = g.ptr();
    if (tp.requires_grad(wi)) {
      T* gw = tp.grad_ref(wi).ptr();
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t i = 0; i < mo; ++i)
          for (std::size_t p = 0; p < m; ++p) {
            T acc{0};
            for (std::size_t j = 0; j < d; ++j) acc += gp[(n * mo + i) * d + j] * xp[(n * m + p) * d + j];
            gw[i * m + p] += acc;
          }
    }
    if (tp.requires_grad(xi)) {
      T* gx = tp.grad_ref(xi).ptr();
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t i = 0; i < mo; ++i)
          for (std::size_t p = 0; p < m; ++p) {
            const T wv = wp[i * m + p];
            for (std::size_t j = 0; j < d; ++j) gx[(n * m + p) * d + j] += wv * gp[(n * mo + i) * d + j];
          }
    }
  });
}

// ---------------------------------------------------------------------------
// Softmax / losses / normalization

template <typename T>
Var<T> softmax(Var<T> x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size()) shape_fail("softmax", "axis " + std::to_string(axis) + " out of range for " + to_string(s));
  const auto sp = detail::split_at(s, axis);
  Tensor<T> out(s);
  const T* xp = x.value().ptr();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.n * sp.inner + in;
      T m = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < sp.n; ++j) m = std::max(m, xp[base + j * sp.inner]);
      T acc{0};
      for (std::size_t j = 0; j < sp.n; ++j) {
        const T e = std::exp(xp[base + j * sp.inner] - m);
        out[base + j * sp.inner] = e;
        acc += e;
      }
      for (std::size_t j = 0; j < sp.n; ++j) out[base + j * sp.inner] /= acc;
    }
  const std::size_t xi = x.id;
  const std::size_t oi = x.tape->size();
  return x.tape->record(std::move(out), {xi}, [xi, oi, sp](Tape<T>& tp, const Tensor<T>& g) {
    Tensor<T>& gx = tp.grad_ref(xi);
    const Tensor<T>& y = tp.value(oi);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t in = 0; in < sp.inner; ++in) {
        const std::size_t base = o * sp.n * sp.inner + in;
        T dot{0};
        for (std::size_t j = 0; j < sp.n; ++j) dot += g[base + j * sp.inner] * y[base + j * sp.inner];
        for (std::size_t j = 0; j < sp.n; ++j) {
          const std::size_t idx = base + j * sp.inner;
          gx[idx] += y[idx] * (g[idx] - dot);
        }
      }
  });
}

/// Mean over rows of -log softmax(logits)[target].
template <typename T>
Var<T> cross_entropy_from_logits(Var<T> logits, std::span<const std::size_t> targets) {
  const Shape& s = logits.shape();
  if (s.size() != 2) shape_fail("cross_entropy_from_logits", "logits must be N x C, got " + to_string(s));
  const std::size_t rows = s[0], c = s[1];
  if (targets.size() != rows) {
    shape_fail("cross_entropy_from_logits",
               "dimension 0: " + std::to_string(rows) + " rows but " + std::to_string(targets.size()) + " targets");
  }
  for (std::size_t t : targets) {
    if (t >= c) throw std::out_of_range("cross_entropy_from_logits: target " + std::to_string(t) + " outside [0, " + std::to_string(c) + ")");
  }
  const T* xp = logits.value().ptr();
  Tensor<T> probs(s);
  T loss{0};
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xp + r * c;
    const T m = *std::max_element(row, row + c);
    T acc{0};
    for (std::size_t j = 0; j < c; ++j) acc += std::exp(row[j] - m);
    const T lse = m + std::log(acc);
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] = std::exp(row[j] - lse);
    loss += lse - row[targets[r]];
  }
  loss /= static_cast<T>(rows);
  std::vector<std::size_t> tg(targets.begin(), targets.end());
  const std::size_t li = logits.id;
  return logits.tape->record(
      Tensor<T>::scalar(loss), {li},
      [li, probs = std::move(probs), tg = std::move(tg), rows, c](Tape<T>& tp, const Tensor<T>& g) {
        Tensor<T>& gx = tp.grad_ref(li);
        const T k = g[0] / static_cast<T>(rows);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < c; ++j) {
            const T onehot = j == tg[r] ? T{1} : T{0};
            gx[r * c + j] += k * (probs[r * c + j] - onehot);
          }
      });
}

/// Unit-normalizes every vector along the last axis. Zero vectors pass
/// through unchanged and a warning is logged on the tape.
template <typename T>
Var<T> l2_normalize(Var<T> x) {
  const Shape& s = x.shape();
  const std::size_t d = s.back();
  const std::size_t rows = x.value().size() / d;
  Tensor<T> out(s);
  std::vector<T> norms(rows);
  const T* xp = x.value().ptr();
  std::size_t zeros = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    T acc{0};
    for (std::size_t j = 0; j < d; ++j) acc += xp[r * d + j] * xp[r * d + j];
    const T nrm = std::sqrt(acc);
    norms[r] = nrm;
    if (nrm == T{0}) {
      ++zeros;
      continue;
    }
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xp[r * d + j] / nrm;
  }
  if (zeros > 0) x.tape->warn("l2_normalize: " + std::to_string(zeros) + " zero vector(s) left unnormalized");
  const std::size_t xi = x.id;
  const std::size_t oi = x.tape->size();
  return x.tape->record(std::move(out), {xi},
                        [xi, oi, rows, d, norms = std::move(norms)](Tape<T>& tp, const Tensor<T>& g) {
                          Tensor<T>& gx = tp.grad_ref(xi);
                          const Tensor<T>& y = tp.value(oi);
                          for (std::size_t r = 0; r < rows; ++r) {
                            if (norms[r] == T{0}) {
                              for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += g[r * d + j];
                              continue;
                            }
                            T dot{0};
                            for (std::size_t j = 0; j < d; ++j) dot += g[r * d + j] * y[r * d + j];
                            for (std::size_t j = 0; j < d; ++j)
                              gx[r * d + j] += (g[r * d + j] - y[r * d + j] * dot) / norms[r];
                          }
                        });
}

// ---------------------------------------------------------------------------
// Batch normalization

enum class BnMode { Train, Eval };

template <typename T>
struct BatchNormStats {
  Tensor<T> mean;
  Tensor<T> var;
};

struct BatchNormOptions {
  BnMode mode = BnMode::Train;
  /// Samples are split into this many contiguous groups; statistics are per group.
  std::size_t groups = 1;
  double eps = 1e-5;
  double momentum = 0.1;
};

/// x: (N, C, ...). Normalizes each channel over samples and trailing extents.
/// In train mode the running statistics (if given) move toward the average of
/// the group statistics, using the unbiased variance.
template <typename T>
Var<T> batchnorm(Var<T> x, Var<T> gamma, Var<T> beta, const BatchNormOptions& opt,
                 std::type_identity_t<BatchNormStats<T>>* running = nullptr) {
  const Shape& s = x.shape();
  if (s.size() < 2) shape_fail("batchnorm", "input must be (N, C, ...), got " + to_string(s));
  const std::size_t n = s[0], c = s[1];
  const std::size_t spatial = x.value().size() / (n * c);
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    shape_fail("batchnorm", "dimension 1: scale/shift must have " + std::to_string(c) + " entries");
  }
  const T eps = static_cast<T>(opt.eps);
  const T* xp = x.value().ptr();
  const T* gp = gamma.value().ptr();
  const T* bp = beta.value().ptr();
  Tensor<T> out(s);

  if (opt.mode == BnMode::Eval) {
    if (running == nullptr) throw std::invalid_argument("batchnorm: eval mode requires running statistics");
    std::vector<T> inv(c);
    for (std::size_t ch = 0; ch < c; ++ch) inv[ch] = T{1} / std::sqrt(running->var[ch] + eps);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t base = (i * c + ch) * spatial;
        const T mu = running->mean[ch];
        for (std::size_t k = 0; k < spatial; ++k) out[base + k] = gp[ch] * (xp[base + k] - mu) * inv[ch] + bp[ch];
      }
    const std::size_t xi = x.id, gi = gamma.id, bi = beta.id;
    Tensor<T> xhat(s);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t base = (i * c + ch) * spatial;
        for (std::size_t k = 0; k < spatial; ++k) xhat[base + k] = (xp[base + k] - running->mean[ch]) * inv[ch];
      }
    return x.tape->record(std::move(out), {xi, gi, bi},
                          [xi, gi, bi, n, c, spatial, inv, xhat = std::move(xhat)](Tape<T>& tp, const Tensor<T>& g) {
                            const T* gam = tp.value(gi).ptr();
                            if (tp.requires_grad(xi)) {
                              Tensor<T>& gx = tp.grad_ref(xi);
                              for (std::size_t i = 0; i < n; ++i)
                                for (std::size_t ch = 0; ch < c; ++ch) {
                                  const std::size_t base = (i * c + ch) * spatial;
                                  for (std::size_t k = 0; k < spatial; ++k) gx[base + k] += g[base + k] * gam[ch] * inv[ch];
                                }
                            }
                            if (tp.requires_grad(gi) || tp.requires_grad(bi)) {
                              std::vector<T> dg(c, T{0}), db(c, T{0});
                              for (std::size_t i = 0; i < n; ++i)
                                for (std::size_t ch = 0; ch < c; ++ch) {
                                  const std::size_t base = (i * c + ch) * spatial;
                                  for (std::size_t k = 0; k < spatial; ++k) {
                                    dg[ch] += g[base + k] * xhat[base + k];
                                    db[ch] += g[base + k];
                                  }
                                }
                              if (tp.requires_grad(gi)) {
                                Tensor<T>& t = tp.grad_ref(gi);
                                for (std::size_t ch = 0; ch < c; ++ch) t[ch] += dg[ch];
                              }
                              if (tp.requires_grad(bi)) {
                                Tensor<T>& t = tp.grad_ref(bi);
                                for (std::size_t ch = 0; ch < c; ++ch) t[ch] += db[ch];
                              }
                            }
                          });
  }

  if (n < 2) throw std::invalid_argument("batchnorm: train mode needs at least 2 samples, got " + std::to_string(n));
  const std::size_t groups = opt.groups;
  if (groups == 0 || n % groups != 0) {
    throw std::invalid_argument("batchnorm: " + std::to_string(groups) + " groups do not divide batch of " +
                                std::to_string(n));
  }
  const std::size_t per = n / groups;
  const std::size_t count = per * spatial;
  Tensor<T> xhat(s);
  std::vector<T> inv(groups * c);
  std::vector<T> run_mean(c, T{0}), run_var(c, T{0});
  for (std::size_t grp = 0; grp < groups; ++grp)
    for (std::size_t ch = 0; ch < c; ++ch) {
      T acc{0};
      for (std::size_t i = grp * per; i < (grp + 1) * per; ++i) {
        const std::size_t base = (i * c + ch) * spatial;
        for (std::size_t k = 0; k < spatial; ++k) acc += xp[base + k];
      }
      const T mu = acc / static_cast<T>(count);
      T sq{0};
      for (std::size_t i = grp * per; i < (grp + 1) * per; ++i) {
        const std::size_t base = (i * c + ch) * spatial;
        for (std::size_t k = 0; k < spatial; ++k) {
          const T dlt = xp[base + k] - mu;
          sq += dlt * dlt;
        }
      }
      const T var = sq / static_cast<T>(count);
      const T iv = T{1} / std::sqrt(var + eps);
      inv[grp * c + ch] = iv;
      for (std::size_t i = grp * per; i < (grp + 1) * per; ++i) {
        const std::size_t base = (i * c + ch) * spatial;
        for (std::size_t k = 0; k < spatial; ++k) {
          const T xh = (xp[base + k] - mu) * iv;
          xhat[base + k] = xh;
          out[base + k] = gp[ch] * xh + bp[ch];
        }
      }
      run_mean[ch] += mu / static_cast<T>(groups);
      const T unbiased = count > 1 ? sq / static_cast<T>(count - 1) : var;
      run_var[ch] += unbiased / static_cast<T>(groups);
    }
  if (running != nullptr) {
    const T mom = static_cast<T>(opt.momentum);
    for (std::size_t ch = 0; ch < c; ++ch) {
      running->mean[ch] = (T{1} - mom) * running->mean[ch] + mom * run_mean[ch];
      running->var[ch] = (T{1} - mom) * running->var[ch] + mom * run_var[ch];
    }
  }
  const std::size_t xi = x.id, gi = gamma.id, bi = beta.id;
  return x.tape->record(
      std::move(out), {xi, gi, bi},
      [xi, gi, bi, n, c, spatial, groups, per, count, inv = std::move(inv), xhat = std::move(xhat)](
          Tape<T>& tp, const Tensor<T>& g) {
        const T* gam = tp.value(gi).ptr();
        std::vector<T> dg(c, T{0}), db(c, T{0});
        const bool want_x = tp.requires_grad(xi);
        Tensor<T>* gx = want_x ? &tp.grad_ref(xi) : nullptr;
        for (std::size_t grp = 0; grp < groups; ++grp)
          for (std::size_t ch = 0; ch < c; ++ch) {
            T sdy{0}, sdyx{0};
            for (std::size_t i = grp * per; i < (grp + 1) * per; ++i) {
              const std::size_t base = (i * c + ch) * spatial;
              for (std::size_t k = 0; k < spatial; ++k) {
                sdy += g[base + k];
                sdyx += g[base + k] * xhat[base + k];
              }
            }
            dg[ch] += sdyx;
            db[ch] += sdy;
            if (!want_x) continue;
            const T iv = inv[grp * c + ch];
            const T m = static_cast<T>(count);
            const T k0 = gam[ch] * iv / m;
            for (std::size_t i = grp * per; i < (grp + 1) * per; ++i) {
              const std::size_t base = (i * c + ch) * spatial;
              for (std::size_t k = 0; k < spatial; ++k)
                (*gx)[base + k] += k0 * (m * g[base + k] - sdy - xhat[base + k] * sdyx);
            }
          }
        if (tp.requires_grad(gi)) {
          Tensor<T>& t = tp.grad_ref(gi);
          for (std::size_t ch = 0; ch < c; ++ch) t[ch] += dg[ch];
        }
        if (tp.requires_grad(bi)) {
          Tensor<T>& t = tp.grad_ref(bi);
          for (std::size_t ch = 0; ch < c; ++ch) t[ch] += db[ch];
        }
      });
}

}  // namespace nnc

#include "nnc/conv.hpp"
