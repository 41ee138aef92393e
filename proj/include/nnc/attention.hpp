#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "nnc/ops.hpp"
#include "nnc/params.hpp"

namespace nnc {

enum class SoftmaxAxis { Tokens, Features };

struct AttentionConfig {
  std::size_t tokens = 25;  // c
  std::size_t dim = 256;    // d
  std::size_t heads = 5;    // H
  bool gate = true;
  SoftmaxAxis softmax_axis = SoftmaxAxis::Tokens;

  std::size_t head_tokens() const { return tokens / heads; }
};

inline std::string head_prefix(std::size_t i) { return "attn.head" + std::to_string(i) + "."; }

inline std::vector<ParamSpec> attention_param_specs(const AttentionConfig& cfg) {
  if (cfg.heads == 0 || cfg.tokens % cfg.heads != 0) {
    throw std::invalid_argument("attention: " + std::to_string(cfg.heads) + " heads do not divide " +
                                std::to_string(cfg.tokens) + " tokens");
  }
  const std::size_t d = cfg.dim, m = cfg.head_tokens();
  std::vector<ParamSpec> out;
  for (std::size_t i = 0; i < cfg.heads; ++i) {
    const std::string p = head_prefix(i);
    for (const char* w : {"Wq1", "Wq2", "Wk", "Wv"}) out.push_back({p + w, {d, d}, InitKind::KaimingUniform, d});
    out.push_back({p + "WB", {m, m}, InitKind::KaimingUniform, m});
    if (cfg.gate) out.push_back({p + "WBp", {d, 1}, InitKind::KaimingUniform, d});
  }
  return out;
}

/// X (..., m) times W (m, n) for any leading shape.
template <typename T>
Var<T> matmul_right(Var<T> x, Var<T> w) {
  Shape s = x.shape();
  const std::size_t m = s.back();
  Var<T> flat = reshape(x, Shape{x.value().size() / m, m});
  Var<T> y = matmul(flat, w);
  s.back() = w.dim(1);
  return reshape(y, s);
}

/// Contiguous blocks of c/H tokens. Accepts (c, d) or (N, c, d).
template <typename T>
std::vector<Var<T>> split_heads(Var<T> x, std::size_t heads) {
  const std::size_t axis = x.shape().size() - 2;
  const std::size_t c = x.dim(axis);
  if (heads == 0 || c % heads != 0) {
    shape_fail("split_heads", std::to_string(heads) + " heads do not divide " + std::to_string(c) + " tokens");
  }
  const std::size_t m = c / heads;
  std::vector<Var<T>> out;
  for (std::size_t i = 0; i < heads; ++i) out.push_back(slice(x, axis, i * m, (i + 1) * m));
  return out;
}

template <typename T>
struct HeadWeights {
  Var<T> wq1, wq2, wk, wv, wb;
  std::optional<Var<T>> wbp;  // absent when the gate is disabled
};

template <typename T>
HeadWeights<T> head_weights(const VarMap<T>& vars, std::size_t i, bool gate) {
  const std::string p = head_prefix(i);
  HeadWeights<T> w{param(vars, p + "Wq1"), param(vars, p + "Wq2"), param(vars, p + "Wk"),
                   param(vars, p + "Wv"),  param(vars, p + "WB"),  std::nullopt};
  if (gate) w.wbp = param(vars, p + "WBp");
  return w;
}

/// Intermediates of one head. All are (N, c/H, d) except gate, (N, c/H, 1).
template <typename T>
struct HeadOutput {
  Var<T> b1, b2, b1_hat, att, h, gate, out;
  bool gated = false;
};

/// One bilinear attention head on (N, c/H, d) blocks.
template <typename T>
HeadOutput<T> bilinear_head(Var<T> q, Var<T> k, Var<T> v, const HeadWeights<T>& w,
                            SoftmaxAxis axis = SoftmaxAxis::Tokens) {
  if (q.shape().size() != 3 || q.shape() != k.shape() || q.shape() != v.shape()) {
    shape_fail("bilinear_head", "Q, K, V must share an (N, c/H, d) shape, got " + to_string(q.shape()) + ", " +
                                    to_string(k.shape()) + ", " + to_string(v.shape()));
  }
  HeadOutput<T> o;
  o.b1 = mul(relu(matmul_right(q, w.wq1)), relu(matmul_right(k, w.wk)));
  o.b2 = mul(relu(matmul_right(q, w.wq2)), relu(matmul_right(v, w.wv)));
  o.b1_hat = relu(left_matmul(w.wb, o.b1));
  o.att = softmax(o.b1_hat, axis == SoftmaxAxis::Tokens ? 1 : 2);
  o.h = mul(o.att, o.b2);
  if (w.wbp) {
    o.gate = sigmoid(matmul_right(o.b1_hat, *w.wbp));
    o.out = mul_expand_last(o.h, o.gate);
    o.gated = true;
  } else {
    o.out = o.h;
  }
  return o;
}

/// Multi-head bilinear attention with gate; output has the input's shape.
/// Q, K, V are (c, d) or (N, c, d).
template <typename T>
Var<T> bilinear_attention(Var<T> q, Var<T> k, Var<T> v, const VarMap<T>& vars, const AttentionConfig& cfg) {
  const bool single = q.shape().size() == 2;
  if (single) {
    q = reshape(q, Shape{1, q.dim(0), q.dim(1)});
    k = reshape(k, Shape{1, k.dim(0), k.dim(1)});
    v = reshape(v, Shape{1, v.dim(0), v.dim(1)});
  }
  if (q.shape().size() != 3 || q.dim(1) != cfg.tokens || q.dim(2) != cfg.dim) {
    shape_fail("bilinear_attention", "expected (N, " + std::to_string(cfg.tokens) + ", " + std::to_string(cfg.dim) +
                                         ") inputs, got " + to_string(q.shape()));
  }
  const auto qs = split_heads(q, cfg.heads), ks = split_heads(k, cfg.heads), vs = split_heads(v, cfg.heads);
  std::vector<Var<T>> outs;
  for (std::size_t i = 0; i < cfg.heads; ++i) {
    outs.push_back(bilinear_head(qs[i], ks[i], vs[i], head_weights(vars, i, cfg.gate), cfg.softmax_axis).out);
  }
  Var<T> fused = concat(outs, 1);
  if (single) fused = reshape(fused, Shape{cfg.tokens, cfg.dim});
  return fused;
}

inline std::vector<ParamSpec> projection_param_specs(std::size_t in, std::size_t embed) {
  return {{"proj.weight", {in, embed}, InitKind::KaimingUniform, in}, {"proj.bias", {embed}, InitKind::Zeros, 1}};
}

inline std::vector<ParamSpec> classifier_param_specs(std::size_t in, std::size_t classes) {
  return {{"cls.weight", {in, classes}, InitKind::KaimingUniform, in}, {"cls.bias", {classes}, InitKind::Zeros, 1}};
}

template <typename T>
Var<T> flatten_samples(Var<T> fused) {
  if (fused.shape().size() == 2) return reshape(fused, Shape{1, fused.value().size()});
  const std::size_t n = fused.dim(0);
  return reshape(fused, Shape{n, fused.value().size() / n});
}

/// Flatten, linear, L2-normalize: (N, c, d) -> (N, embed) unit rows.
template <typename T>
Var<T> projection_head(Var<T> fused, const VarMap<T>& vars) {
  Var<T> z = add_bias(matmul(flatten_samples(fused), param(vars, "proj.weight")), param(vars, "proj.bias"));
  return l2_normalize(z);
}

/// Flatten, linear: (N, c, d) -> (N, classes) raw logits.
template <typename T>
Var<T> classifier_head(Var<T> fused, const VarMap<T>& vars) {
  return add_bias(matmul(flatten_samples(fused), param(vars, "cls.weight")), param(vars, "cls.bias"));
}

}  // namespace nnc
