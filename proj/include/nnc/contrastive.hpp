#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "nnc/model.hpp"
#include "nnc/ops.hpp"
#include "nnc/params.hpp"
#include "nnc/rng.hpp"

namespace nnc {

/// theta_k <- r * theta_k + (1 - r) * theta_q for every key-side tensor.
template <typename T>
void momentum_update(ParamMap<T>& key, const ParamMap<T>& query, double r) {
  if (!(r > 0.0 && r < 1.0)) throw std::invalid_argument("momentum_update: r must lie in (0, 1)");
  for (auto& [name, k] : key) {
    auto it = query.find(name);
    if (it == query.end()) throw std::invalid_argument("momentum_update: query has no parameter '" + name + "'");
    const Tensor<T>& q = it->second;
    if (q.shape() != k.shape()) {
      shape_fail("momentum_update", "'" + name + "' is " + to_string(k.shape()) + " on the key side but " +
                                        to_string(q.shape()) + " on the query side");
    }
    // Extended precision so that theta_k == theta_q stays a fixed point after rounding.
    const long double rk = r, rq = 1.0L - rk;
    for (std::size_t i = 0; i < k.size(); ++i) k[i] = static_cast<T>(rk * k[i] + rq * q[i]);
  }
}

/// Uniformly random permutation of [0, n).
inline std::vector<std::size_t> random_permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  shuffle(p.begin(), p.end(), rng);
  return p;
}

/// out[i] = x[perm[i]] along axis 0.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t n = x.dim(0), row = x.size() / n;
  if (perm.size() != n) shape_fail("gather_rows", "permutation length does not match dimension 0");
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < n; ++i) std::copy_n(x.ptr() + perm[i] * row, row, out.ptr() + i * row);
  return out;
}

/// Rows `idx` of x along axis 0, in that order; any length, repeats allowed.
template <typename T>
Tensor<T> take_rows(const Tensor<T>& x, const std::vector<std::size_t>& idx) {
  const std::size_t n = x.dim(0), row = x.size() / n;
  Shape s = x.shape();
  s[0] = idx.size();
  Tensor<T> out(s);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= n) shape_fail("take_rows", "row " + std::to_string(idx[i]) + " out of range " + std::to_string(n));
    std::copy_n(x.ptr() + idx[i] * row, row, out.ptr() + i * row);
  }
  return out;
}

/// Inverse of gather_rows: out[perm[i]] = x[i].
template <typename T>
Tensor<T> scatter_rows(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t n = x.dim(0), row = x.size() / n;
  if (perm.size() != n) shape_fail("scatter_rows", "permutation length does not match dimension 0");
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < n; ++i) std::copy_n(x.ptr() + i * row, row, out.ptr() + perm[i] * row);
  return out;
}

/// Key-encoder embeddings with shuffled batch norm: samples are permuted,
/// split into `groups` contiguous BN groups, embedded without gradients, and
/// returned in input order.
template <typename T>
Tensor<T> shuffled_bn_embed(const Tensor<T>& hsi, const Tensor<T>& lidar, const ParamMap<T>& params,
                            BufferMap<T>* buffers, const ModelConfig& cfg, std::size_t groups,
                            const std::vector<std::size_t>& perm) {
  const std::size_t n = hsi.dim(0);
  if (groups == 0 || n % groups != 0) {
    throw std::invalid_argument("shuffled batch norm: " + std::to_string(groups) + " groups do not divide batch " +
                                std::to_string(n));
  }
  Tape<T> tape;
  VarMap<T> vars = bind_params(tape, params, false);
  ForwardContext<T> ctx;
  ctx.groups = groups;
  ctx.running = buffers;
  Var<T> z = embed_forward(tape.constant(gather_rows(hsi, perm)), tape.constant(gather_rows(lidar, perm)), vars, cfg, ctx);
  return scatter_rows(z.value(), perm);
}

namespace detail {

template <typename T>
void require_unit_rows(const char* what, const Tensor<T>& x, double tol) {
  const std::size_t d = x.shape().back(), rows = x.size() / d;
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) s += double(x[r * d + j]) * double(x[r * d + j]);
    if (std::abs(std::sqrt(s) - 1.0) > tol) {
      throw std::invalid_argument(std::string("contrastive_logits: ") + what + " row " + std::to_string(r) +
                                  " has norm " + std::to_string(std::sqrt(s)) + ", expected 1");
    }
  }
}

}  // namespace detail

/// Column 0: <q_i, k_i>; columns 1..K: <q_i, queue_j>. Keys and queue are
/// constants on the tape, so no gradient reaches them.
template <typename T>
Var<T> contrastive_logits(Var<T> q, const Tensor<T>& k_pos, const Tensor<T>* queue, double tol = 1e-4) {
  const Shape& sq = q.shape();
  if (sq.size() != 2 || k_pos.shape() != sq) {
    shape_fail("contrastive_logits", "q and k must both be (N, E), got " + to_string(sq) + " and " + to_string(k_pos.shape()));
  }
  if (queue && (queue->rank() != 2 || queue->dim(1) != sq[1])) {
    shape_fail("contrastive_logits", "queue must be (K, " + std::to_string(sq[1]) + "), got " + to_string(queue->shape()));
  }
  detail::require_unit_rows("q", q.value(), tol);
  detail::require_unit_rows("k", k_pos, tol);
  if (queue) detail::require_unit_rows("queue", *queue, tol);
  Tape<T>& tape = *q.tape;
  Var<T> pos = sum_last(mul(q, tape.constant(k_pos)));
  pos = reshape(pos, Shape{sq[0], 1});
  if (!queue) return pos;
  const std::size_t kq = queue->dim(0), e = sq[1];
  Tensor<T> qt({e, kq});
  for (std::size_t j = 0; j < kq; ++j)
    for (std::size_t c = 0; c < e; ++c) qt[c * kq + j] = (*queue)[j * e + c];
  Var<T> neg = matmul(q, tape.constant(std::move(qt)));
  return concat(std::vector<Var<T>>{pos, neg}, 1);
}

/// Cross-entropy over [l_pos, l_neg] / tau with target 0, averaged over the
/// batch. With `negatives_only`, the positive is left out of the denominator:
/// mean(logsumexp(l_neg / tau) - l_pos / tau).
template <typename T>
Var<T> info_nce_loss(Var<T> logits, double tau, bool negatives_only = false) {
  if (!(tau > 0.0)) throw std::invalid_argument("info_nce_loss: temperature must be positive");
  const Shape& s = logits.shape();
  if (s.size() != 2) shape_fail("info_nce_loss", "logits must be (N, 1 + K), got " + to_string(s));
  Var<T> z = scale(logits, static_cast<T>(1.0 / tau));
  if (!negatives_only) {
    std::vector<std::size_t> zeros(s[0], 0);
    return cross_entropy_from_logits(z, zeros);
  }
  if (s[1] < 2) shape_fail("info_nce_loss", "the negatives-only form needs at least one negative");
  Var<T> pos = slice(z, 1, 0, 1);
  Var<T> lse = logsumexp_last(slice(z, 1, 1, s[1]));
  return mean(add(lse, scale(pos, T{-1})));
}

}  // namespace nnc
