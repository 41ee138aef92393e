#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "nnc/attention.hpp"
#include "nnc/ops.hpp"
#include "nnc/params.hpp"

namespace nnc {

struct Conv3dLayer {
  std::size_t kernels = 8;
  std::size_t depth = 9;  // spectral extent; spatial extent is always 3x3
};

/// Architecture of the dual-branch encoder, the attention fusion and the heads.
struct ModelConfig {
  std::size_t bands = 30;
  std::size_t patch = 11;
  std::vector<Conv3dLayer> hsi3d{{8, 9}, {16, 7}, {32, 5}};
  std::vector<std::size_t> lidar{64, 128, 256};
  std::size_t dim = 256;
  std::size_t heads = 5;
  std::size_t embed = 128;   // projection width; 0 drops the projection head
  std::size_t classes = 0;   // 0 drops the classifier head
  bool conv3d = true;        // false: the HSI branch uses 2D convs with the same kernel counts
  bool bilinear = true;      // false: the fused tokens are V itself
  bool gate = true;
  bool bn = true;            // BN after every conv (ReLU is always applied)
  SoftmaxAxis softmax_axis = SoftmaxAxis::Tokens;

  std::size_t layers() const { return hsi3d.size(); }
  std::size_t side() const { return patch - 2 * layers(); }
  std::size_t tokens() const { return side() * side(); }

  std::size_t spectral_out() const {
    std::size_t depth = bands;
    for (const auto& l : hsi3d) depth -= l.depth - 1;
    return depth;
  }

  /// Channels entering the final HSI 2D conv.
  std::size_t hsi_stack_channels() const {
    return conv3d ? hsi3d.back().kernels * spectral_out() : hsi3d.back().kernels;
  }

  AttentionConfig attention() const { return {tokens(), dim, heads, gate, softmax_axis}; }

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
    if (hsi3d.empty()) fail("the HSI branch needs at least one conv layer");
    if (lidar.size() != hsi3d.size()) fail("HSI and LiDAR branches must have the same number of spatial convs");
    if (patch % 2 == 0 || patch <= 2 * layers()) fail("patch " + std::to_string(patch) + " too small for the conv stack");
    if (lidar.back() != dim) fail("last LiDAR conv must output dim=" + std::to_string(dim) + " channels");
    if (conv3d) {
      std::size_t depth = bands;
      for (const auto& l : hsi3d) {
        if (l.depth == 0 || l.depth > depth) fail("3D kernel depth " + std::to_string(l.depth) + " exceeds spectral extent");
        depth -= l.depth - 1;
      }
    }
    if (bilinear && (heads == 0 || tokens() % heads != 0)) {
      fail(std::to_string(heads) + " heads do not divide " + std::to_string(tokens()) + " tokens");
    }
    if (classes == 1) fail("classifier needs at least 2 classes");
  }

  nlohmann::json to_json() const {
    nlohmann::json layers3d = nlohmann::json::array();
    for (const auto& l : hsi3d) layers3d.push_back({l.kernels, l.depth});
    return {{"bands", bands},     {"patch", patch}, {"hsi3d", layers3d},       {"lidar", lidar},
            {"dim", dim},         {"heads", heads}, {"embed", embed},          {"classes", classes},
            {"conv3d", conv3d},   {"bilinear", bilinear}, {"gate", gate},      {"bn", bn},
            {"softmax_axis", softmax_axis == SoftmaxAxis::Tokens ? "tokens" : "features"}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.bands = j.at("bands");
    c.patch = j.at("patch");
    c.hsi3d.clear();
    for (const auto& l : j.at("hsi3d")) c.hsi3d.push_back({l.at(0).get<std::size_t>(), l.at(1).get<std::size_t>()});
    c.lidar = j.at("lidar").get<std::vector<std::size_t>>();
    c.dim = j.at("dim");
    c.heads = j.at("heads");
    c.embed = j.at("embed");
    c.classes = j.at("classes");
    c.conv3d = j.at("conv3d");
    c.bilinear = j.at("bilinear");
    c.gate = j.at("gate");
    c.bn = j.at("bn");
    c.softmax_axis = j.at("softmax_axis") == "tokens" ? SoftmaxAxis::Tokens : SoftmaxAxis::Features;
    return c;
  }
};

/// Layer sizes from the published encoder table.
inline ModelConfig paper_config() { return ModelConfig{}; }

/// Scaled-down network for the synthetic desk experiments.
inline ModelConfig desk_config() {
  ModelConfig c;
  c.bands = 10;
  c.hsi3d = {{4, 3}, {8, 3}, {8, 3}};
  c.lidar = {8, 16, 32};
  c.dim = 32;
  c.heads = 5;
  c.embed = 128;
  return c;
}

/// Smallest network that exercises every code path; used for gradient checks.
inline ModelConfig reduced_config() {
  ModelConfig c;
  c.bands = 6;
  c.patch = 7;
  c.hsi3d = {{2, 3}, {4, 2}};
  c.lidar = {4, 16};
  c.dim = 16;
  c.heads = 3;
  c.embed = 8;
  return c;
}

// ---------------------------------------------------------------------------
// Parameters

namespace detail {

inline void conv_specs(std::vector<ParamSpec>& out, const std::string& name, Shape kernel, bool bn) {
  std::size_t fan_in = 1;
  for (std::size_t i = 1; i < kernel.size(); ++i) fan_in *= kernel[i];
  const std::size_t co = kernel[0];
  out.push_back({name + ".weight", std::move(kernel), InitKind::KaimingUniform, fan_in});
  out.push_back({name + ".bias", {co}, InitKind::Zeros, 1});
  if (bn) {
    out.push_back({name + ".gamma", {co}, InitKind::Ones, 1});
    out.push_back({name + ".beta", {co}, InitKind::Zeros, 1});
  }
}

}  // namespace detail

/// Names of the conv layers followed by batch norm, in forward order.
inline std::vector<std::pair<std::string, std::size_t>> bn_layers(const ModelConfig& cfg) {
  std::vector<std::pair<std::string, std::size_t>> out;
  if (!cfg.bn) return out;
  for (std::size_t i = 0; i < cfg.layers(); ++i) {
    out.push_back({(cfg.conv3d ? "hsi.conv3d" : "hsi.conv") + std::to_string(i), cfg.hsi3d[i].kernels});
  }
  out.push_back({"hsi.conv2d", cfg.dim});
  for (std::size_t i = 0; i < cfg.lidar.size(); ++i) out.push_back({"lidar.conv" + std::to_string(i), cfg.lidar[i]});
  out.push_back({"fuse.conv", cfg.dim});
  return out;
}

inline std::vector<ParamSpec> encoder_param_specs(const ModelConfig& cfg) {
  std::vector<ParamSpec> out;
  std::size_t in = cfg.conv3d ? 1 : cfg.bands;
  for (std::size_t i = 0; i < cfg.layers(); ++i) {
    const auto& l = cfg.hsi3d[i];
    if (cfg.conv3d) {
      detail::conv_specs(out, "hsi.conv3d" + std::to_string(i), {l.kernels, in, l.depth, 3, 3}, cfg.bn);
    } else {
      detail::conv_specs(out, "hsi.conv" + std::to_string(i), {l.kernels, in, 3, 3}, cfg.bn);
    }
    in = l.kernels;
  }
  detail::conv_specs(out, "hsi.conv2d", {cfg.dim, cfg.hsi_stack_channels(), 3, 3}, cfg.bn);
  in = 1;
  for (std::size_t i = 0; i < cfg.lidar.size(); ++i) {
    detail::conv_specs(out, "lidar.conv" + std::to_string(i), {cfg.lidar[i], in, 3, 3}, cfg.bn);
    in = cfg.lidar[i];
  }
  detail::conv_specs(out, "fuse.conv", {cfg.dim, 2 * cfg.dim, 1, 1}, cfg.bn);
  return out;
}

/// Every learnable tensor of the configured model, in initialization order.
inline std::vector<ParamSpec> model_param_specs(const ModelConfig& cfg) {
  cfg.validate();
  auto out = encoder_param_specs(cfg);
  if (cfg.bilinear) {
    auto a = attention_param_specs(cfg.attention());
    out.insert(out.end(), a.begin(), a.end());
  }
  const std::size_t flat = cfg.tokens() * cfg.dim;
  if (cfg.embed > 0) {
    auto p = projection_param_specs(flat, cfg.embed);
    out.insert(out.end(), p.begin(), p.end());
  }
  if (cfg.classes > 0) {
    auto c = classifier_param_specs(flat, cfg.classes);
    out.insert(out.end(), c.begin(), c.end());
  }
  return out;
}

inline std::size_t parameter_count(const ModelConfig& cfg) { return count_params(model_param_specs(cfg)); }

template <typename T>
using BufferMap = std::map<std::string, BatchNormStats<T>>;

template <typename T>
BufferMap<T> init_buffers(const ModelConfig& cfg) {
  BufferMap<T> out;
  for (const auto& [name, c] : bn_layers(cfg)) out.emplace(name, BatchNormStats<T>{Tensor<T>({c}), Tensor<T>({c}, T{1})});
  return out;
}

template <typename U, typename T>
BufferMap<U> cast_buffers(const BufferMap<T>& b) {
  BufferMap<U> out;
  for (const auto& [name, s] : b) out.emplace(name, BatchNormStats<U>{s.mean.template cast<U>(), s.var.template cast<U>()});
  return out;
}

// ---------------------------------------------------------------------------
// Forward

using ShapeTrace = std::vector<std::pair<std::string, Shape>>;

/// How batch norm behaves in one forward pass.
template <typename T>
struct ForwardContext {
  BnMode mode = BnMode::Train;
  std::size_t groups = 1;
  BufferMap<T>* running = nullptr;  // updated in train mode, read in eval mode
  ShapeTrace* trace = nullptr;
};

namespace detail {

template <typename T>
void record_shape(const ForwardContext<T>& ctx, const std::string& name, Var<T> x) {
  if (ctx.trace) ctx.trace->push_back({name, x.shape()});
}

template <typename T>
Var<T> bn_relu(Var<T> x, const VarMap<T>& vars, const std::string& layer, const ModelConfig& cfg,
               const ForwardContext<T>& ctx) {
  if (cfg.bn) {
    BatchNormStats<T>* stats = nullptr;
    if (ctx.running) {
      auto it = ctx.running->find(layer);
      if (it == ctx.running->end()) throw std::out_of_range("missing running statistics for " + layer);
      stats = &it->second;
    }
    BatchNormOptions opt;
    opt.mode = ctx.mode;
    opt.groups = ctx.groups;
    x = batchnorm(x, param(vars, layer + ".gamma"), param(vars, layer + ".beta"), opt, stats);
  }
  return relu(x);
}

template <typename T>
Var<T> conv2d_block(Var<T> x, const VarMap<T>& vars, const std::string& layer, std::size_t padding,
                    const ModelConfig& cfg, const ForwardContext<T>& ctx) {
  Var<T> y = conv2d(x, param(vars, layer + ".weight"), param(vars, layer + ".bias"), padding);
  y = bn_relu(y, vars, layer, cfg, ctx);
  record_shape(ctx, layer, y);
  return y;
}

/// (N, d, s, s) -> (N, s*s, d)
template <typename T>
Var<T> to_tokens(Var<T> x) {
  const Shape& s = x.shape();
  return transpose_last2(reshape(x, Shape{s[0], s[1], s[2] * s[3]}));
}

/// (N, c, d) -> (N, d, s, s)
template <typename T>
Var<T> from_tokens(Var<T> x, std::size_t side) {
  Var<T> t = transpose_last2(x);
  return reshape(t, Shape{t.dim(0), t.dim(1), side, side});
}

template <typename T>
void require_input(const char* op, Var<T> x, const Shape& tail) {
  const Shape& s = x.shape();
  if (s.size() != tail.size() + 1 || !std::equal(tail.begin(), tail.end(), s.begin() + 1)) {
    shape_fail(op, "expected (N, " + to_string(tail).substr(1) + " input, got " + to_string(s));
  }
}

}  // namespace detail

/// HSI patches (N, B, P, P) -> F_H tokens (N, c, d).
template <typename T>
Var<T> encode_hsi(Var<T> x, const VarMap<T>& vars, const ModelConfig& cfg, const ForwardContext<T>& ctx) {
  detail::require_input("encode_hsi", x, Shape{cfg.bands, cfg.patch, cfg.patch});
  const std::size_t n = x.dim(0);
  if (cfg.conv3d) {
    Var<T> y = reshape(x, Shape{n, 1, cfg.bands, cfg.patch, cfg.patch});
    for (std::size_t i = 0; i < cfg.layers(); ++i) {
      const std::string layer = "hsi.conv3d" + std::to_string(i);
      y = conv3d(y, param(vars, layer + ".weight"), param(vars, layer + ".bias"));
      y = detail::bn_relu(y, vars, layer, cfg, ctx);
      detail::record_shape(ctx, layer, y);
    }
    // (N, C, D, s, s) -> (N, C*D, s, s): channel-major stacking of spectral slices.
    const Shape& s = y.shape();
    y = reshape(y, Shape{n, s[1] * s[2], s[3], s[4]});
    detail::record_shape(ctx, std::string("hsi.reshape"), y);
    x = y;
  } else {
    for (std::size_t i = 0; i < cfg.layers(); ++i) x = detail::conv2d_block(x, vars, "hsi.conv" + std::to_string(i), 0, cfg, ctx);
  }
  Var<T> y = detail::conv2d_block(x, vars, "hsi.conv2d", 1, cfg, ctx);
  y = detail::to_tokens(y);
  detail::record_shape(ctx, std::string("hsi.tokens"), y);
  return y;
}

/// LiDAR patches (N, 1, P, P) -> F_L tokens (N, c, d).
template <typename T>
Var<T> encode_lidar(Var<T> x, const VarMap<T>& vars, const ModelConfig& cfg, const ForwardContext<T>& ctx) {
  detail::require_input("encode_lidar", x, Shape{1, cfg.patch, cfg.patch});
  for (std::size_t i = 0; i < cfg.lidar.size(); ++i) x = detail::conv2d_block(x, vars, "lidar.conv" + std::to_string(i), 0, cfg, ctx);
  Var<T> y = detail::to_tokens(x);
  detail::record_shape(ctx, std::string("lidar.tokens"), y);
  return y;
}

/// Channel concatenation of both token maps, then a 1x1 conv embedding.
template <typename T>
Var<T> fuse_embed(Var<T> fh, Var<T> fl, const VarMap<T>& vars, const ModelConfig& cfg, const ForwardContext<T>& ctx) {
  const Shape want{cfg.tokens(), cfg.dim};
  detail::require_input("fuse_embed", fh, want);
  detail::require_input("fuse_embed", fl, want);
  Var<T> x = concat(std::vector<Var<T>>{detail::from_tokens(fh, cfg.side()), detail::from_tokens(fl, cfg.side())}, 1);
  Var<T> y = detail::conv2d_block(x, vars, "fuse.conv", 0, cfg, ctx);
  y = detail::to_tokens(y);
  detail::record_shape(ctx, std::string("fuse.tokens"), y);
  return y;
}

template <typename T>
struct EncoderOutput {
  Var<T> q, k, v;  // F_H, F_L, F_fus
};

template <typename T>
EncoderOutput<T> encoder_forward(Var<T> hsi, Var<T> lidar, const VarMap<T>& vars, const ModelConfig& cfg,
                                 const ForwardContext<T>& ctx) {
  Var<T> fh = encode_hsi(hsi, vars, cfg, ctx);
  Var<T> fl = encode_lidar(lidar, vars, cfg, ctx);
  Var<T> fused = fuse_embed(fh, fl, vars, cfg, ctx);
  return {fh, fl, fused};
}

/// Encoder plus attention fusion: (N, c, d).
template <typename T>
Var<T> fused_features(Var<T> hsi, Var<T> lidar, const VarMap<T>& vars, const ModelConfig& cfg,
                      const ForwardContext<T>& ctx) {
  EncoderOutput<T> e = encoder_forward(hsi, lidar, vars, cfg, ctx);
  if (!cfg.bilinear) return e.v;
  Var<T> f = bilinear_attention(e.q, e.k, e.v, vars, cfg.attention());
  detail::record_shape(ctx, std::string("attn.out"), f);
  return f;
}

template <typename T>
Var<T> embed_forward(Var<T> hsi, Var<T> lidar, const VarMap<T>& vars, const ModelConfig& cfg,
                     const ForwardContext<T>& ctx) {
  return projection_head(fused_features(hsi, lidar, vars, cfg, ctx), vars);
}

template <typename T>
Var<T> logits_forward(Var<T> hsi, Var<T> lidar, const VarMap<T>& vars, const ModelConfig& cfg,
                      const ForwardContext<T>& ctx) {
  return classifier_head(fused_features(hsi, lidar, vars, cfg, ctx), vars);
}

// ---------------------------------------------------------------------------
// Shape arithmetic

/// Expected output shape of every layer for one sample, computed from the
/// config alone (channel-first, no batch axis).
inline ShapeTrace expected_trace(const ModelConfig& cfg) {
  ShapeTrace t;
  std::size_t s = cfg.patch;
  if (cfg.conv3d) {
    std::size_t depth = cfg.bands;
    for (std::size_t i = 0; i < cfg.layers(); ++i) {
      depth -= cfg.hsi3d[i].depth - 1;
      s -= 2;
      t.push_back({"hsi.conv3d" + std::to_string(i), {cfg.hsi3d[i].kernels, depth, s, s}});
    }
    t.push_back({"hsi.reshape", {cfg.hsi_stack_channels(), s, s}});
  } else {
    for (std::size_t i = 0; i < cfg.layers(); ++i) {
      s -= 2;
      t.push_back({"hsi.conv" + std::to_string(i), {cfg.hsi3d[i].kernels, s, s}});
    }
  }
  t.push_back({"hsi.conv2d", {cfg.dim, s, s}});
  t.push_back({"hsi.tokens", {s * s, cfg.dim}});
  std::size_t ls = cfg.patch;
  for (std::size_t i = 0; i < cfg.lidar.size(); ++i) {
    ls -= 2;
    t.push_back({"lidar.conv" + std::to_string(i), {cfg.lidar[i], ls, ls}});
  }
  t.push_back({"lidar.tokens", {ls * ls, cfg.dim}});
  t.push_back({"fuse.conv", {cfg.dim, s, s}});
  t.push_back({"fuse.tokens", {s * s, cfg.dim}});
  if (cfg.bilinear) t.push_back({"attn.out", {s * s, cfg.dim}});
  return t;
}

/// Drops the batch axis from a recorded trace.
inline ShapeTrace per_sample(const ShapeTrace& t) {
  ShapeTrace out;
  for (const auto& [name, s] : t) out.push_back({name, Shape(s.begin() + 1, s.end())});
  return out;
}

/// FNV-1a of the serialized architecture; names the checkpoint's layout.
inline std::uint64_t architecture_hash(const ModelConfig& cfg) {
  const std::string s = cfg.to_json().dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace nnc
