#pragma once

#include <chrono>
#include <functional>
#include <string>
#include <vector>

#include "nnc/contrastive.hpp"
#include "nnc/gradcheck.hpp"
#include "nnc/model_check.hpp"

namespace nnc {

struct SuiteEntry {
  std::string name;
  double max_rel_error = 0;
  std::size_t coords = 0;
  std::size_t kinks_skipped = 0;
  bool passed = false;
  double seconds = 0;
  std::string detail;
};

struct SuiteOptions {
  double tol = 1e-4;
  double op_eps = 1e-6;
  double composite_eps = 1e-4;  // step for chains of many ops, where roundoff dominates at 1e-6
  std::size_t queue = 8;
  bool ablations = true;
};

/// Model variants covered by the full-loss check.
inline std::vector<std::pair<std::string, ModelConfig>> suite_models(bool ablations) {
  std::vector<std::pair<std::string, ModelConfig>> out{{"base", reduced_config()}};
  if (!ablations) return out;
  ModelConfig c = reduced_config();
  c.bilinear = false;
  out.emplace_back("no-bilinear", c);
  c = reduced_config();
  c.gate = false;
  out.emplace_back("no-gate", c);
  c = reduced_config();
  c.conv3d = false;
  out.emplace_back("no-3dconv", c);
  c = reduced_config();
  c.softmax_axis = SoftmaxAxis::Features;
  out.emplace_back("softmax-features", c);
  return out;
}

namespace detail {

inline Tensor<double> suite_tensor(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  return random_uniform(std::move(s), rng, lo, hi);
}

inline Tensor<double> away_from_zero(Tensor<double> t) {
  for (std::size_t i = 0; i < t.size(); ++i) t[i] += t[i] >= 0 ? 0.1 : -0.1;
  return t;
}

inline Tensor<double> unit_rows(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> t({n, d});
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) s += (t[r * d + j] = normal01(rng)) * t[r * d + j];
    for (std::size_t j = 0; j < d; ++j) t[r * d + j] /= std::sqrt(s);
  }
  return t;
}

}  // namespace detail

/// Every differentiable op, the attention block, each encoder branch, and the
/// full contrastive loss on the reduced model, checked in double precision.
inline std::vector<SuiteEntry> run_gradcheck_suite(const SuiteOptions& opt = {},
                                                   const std::function<void(const SuiteEntry&)>& on_entry = {}) {
  using detail::suite_tensor;
  using In = std::span<const Var<double>>;
  std::vector<SuiteEntry> out;
  auto record = [&](const std::string& name, const std::function<GradCheckResult()>& run) {
    const auto t0 = std::chrono::steady_clock::now();
    SuiteEntry e;
    e.name = name;
    try {
      const GradCheckResult r = run();
      e.max_rel_error = r.max_rel_error;
      e.coords = r.coords_checked;
      e.kinks_skipped = r.kinks_skipped;
      e.passed = r.max_rel_error <= opt.tol && r.coords_checked > 0;
      e.detail = "input " + std::to_string(r.worst_input) + " coord " + std::to_string(r.worst_coord) + " analytic " +
                 std::to_string(r.analytic) + " numeric " + std::to_string(r.numeric);
    } catch (const std::exception& ex) {
      e.passed = false;
      e.detail = ex.what();
    }
    e.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back(e);
    if (on_entry) on_entry(out.back());
  };
  GradCheckOptions op;
  op.eps = opt.op_eps;
  auto check = [&](const std::string& name, ScalarFn f, std::vector<Tensor<double>> in) {
    record(name, [&] { return grad_check(f, in, op); });
  };

  // Elementwise and structural ops.
  check("add", [](Tape<double>&, In v) { return weighted_sum(add(v[0], v[1]), 1); },
        {suite_tensor({3, 4}, 1), suite_tensor({3, 4}, 2)});
  check("mul", [](Tape<double>&, In v) { return weighted_sum(mul(v[0], v[1]), 2); },
        {suite_tensor({3, 4}, 3), suite_tensor({3, 4}, 4)});
  check("scale", [](Tape<double>&, In v) { return weighted_sum(scale(v[0], -2.5), 3); }, {suite_tensor({5}, 5)});
  check("relu", [](Tape<double>&, In v) { return weighted_sum(relu(v[0]), 4); },
        {detail::away_from_zero(suite_tensor({2, 3, 2}, 6))});
  check("sigmoid", [](Tape<double>&, In v) { return weighted_sum(sigmoid(v[0]), 5); }, {suite_tensor({2, 5}, 7, -3, 3)});
  check("add_bias", [](Tape<double>&, In v) { return weighted_sum(add_bias(v[0], v[1]), 6); },
        {suite_tensor({2, 3, 4}, 8), suite_tensor({4}, 9)});
  check("mul_expand_last", [](Tape<double>&, In v) { return weighted_sum(mul_expand_last(v[0], v[1]), 7); },
        {suite_tensor({2, 3, 4}, 10), suite_tensor({2, 3, 1}, 11)});
  check("reshape", [](Tape<double>&, In v) { return weighted_sum(reshape(v[0], Shape{4, 3}), 8); },
        {suite_tensor({2, 6}, 12)});
  check("transpose_last2", [](Tape<double>&, In v) { return weighted_sum(transpose_last2(v[0]), 9); },
        {suite_tensor({2, 3, 4}, 13)});
  check("slice", [](Tape<double>&, In v) { return weighted_sum(slice(v[0], 1, 1, 3), 10); },
        {suite_tensor({2, 4, 3}, 14)});
  check("concat", [](Tape<double>&, In v) { return weighted_sum(concat(std::vector<Var<double>>{v[0], v[1]}, 1), 11); },
        {suite_tensor({2, 2, 3}, 15), suite_tensor({2, 3, 3}, 16)});
  check("sum", [](Tape<double>&, In v) { return sum(mul(v[0], v[0])); }, {suite_tensor({3, 3}, 17)});
  check("mean", [](Tape<double>&, In v) { return mean(mul(v[0], v[0])); }, {suite_tensor({3, 3}, 18)});
  check("sum_last", [](Tape<double>&, In v) { return weighted_sum(sum_last(v[0]), 12); }, {suite_tensor({2, 3, 4}, 19)});
  check("logsumexp_last", [](Tape<double>&, In v) { return weighted_sum(logsumexp_last(v[0]), 13); },
        {suite_tensor({2, 3, 4}, 20, -3, 3)});

  // Linear algebra and normalizers.
  check("matmul", [](Tape<double>&, In v) { return weighted_sum(matmul(v[0], v[1]), 14); },
        {suite_tensor({3, 4}, 21), suite_tensor({4, 5}, 22)});
  check("left_matmul", [](Tape<double>&, In v) { return weighted_sum(left_matmul(v[0], v[1]), 15); },
        {suite_tensor({3, 4}, 23), suite_tensor({2, 4, 5}, 24)});
  for (std::size_t axis : {1, 2}) {
    check("softmax[axis " + std::to_string(axis) + "]",
          [axis](Tape<double>&, In v) { return weighted_sum(softmax(v[0], axis), 16); }, {suite_tensor({2, 3, 4}, 25)});
  }
  check("cross_entropy", [](Tape<double>&, In v) {
    const std::vector<std::size_t> y{2, 0, 1};
    return cross_entropy_from_logits(v[0], y);
  }, {suite_tensor({3, 4}, 26, -2, 2)});
  check("l2_normalize", [](Tape<double>&, In v) { return weighted_sum(l2_normalize(v[0]), 17); },
        {suite_tensor({3, 5}, 27)});
  for (std::size_t groups : {1, 2}) {
    check("batchnorm[train, groups " + std::to_string(groups) + "]",
          [groups](Tape<double>&, In v) {
            BatchNormOptions o;
            o.groups = groups;
            return weighted_sum(batchnorm(v[0], v[1], v[2], o), 18);
          },
          {suite_tensor({4, 3, 2, 2}, 28), suite_tensor({3}, 29, 0.5, 1.5), suite_tensor({3}, 30)});
  }
  check("batchnorm[eval]", [](Tape<double>&, In v) {
    BatchNormOptions o;
    o.mode = BnMode::Eval;
    BatchNormStats<double> st{suite_tensor({3}, 31), suite_tensor({3}, 32, 0.5, 2.0)};
    return weighted_sum(batchnorm(v[0], v[1], v[2], o, &st), 19);
  }, {suite_tensor({2, 3, 2, 2}, 33), suite_tensor({3}, 34, 0.5, 1.5), suite_tensor({3}, 35)});
  for (std::size_t pad : {0, 1}) {
    check("conv2d[pad " + std::to_string(pad) + "]",
          [pad](Tape<double>&, In v) { return weighted_sum(conv2d(v[0], v[1], v[2], pad), 20); },
          {suite_tensor({2, 3, 5, 5}, 36), suite_tensor({4, 3, 3, 3}, 37), suite_tensor({4}, 38)});
  }
  check("conv3d", [](Tape<double>&, In v) { return weighted_sum(conv3d(v[0], v[1], v[2]), 21); },
        {suite_tensor({2, 2, 5, 5, 5}, 39), suite_tensor({3, 2, 3, 3, 3}, 40), suite_tensor({3}, 41)});

  // Attention block at c=10, d=8, H=2, every weight family and the inputs.
  GradCheckOptions comp;
  comp.eps = opt.composite_eps;
  for (bool gate : {true, false})
    for (SoftmaxAxis axis : {SoftmaxAxis::Tokens, SoftmaxAxis::Features}) {
      const AttentionConfig ac{10, 8, 2, gate, axis};
      const std::string name = std::string("bilinear_attention[") + (gate ? "gate" : "no-gate") + ", " +
                               (axis == SoftmaxAxis::Tokens ? "tokens" : "features") + "]";
      Rng rng(42);
      const ParamMap<double> p = init_params<double>(attention_param_specs(ac), rng);
      std::vector<std::string> names;
      std::vector<Tensor<double>> in{suite_tensor({2, 10, 8}, 43), suite_tensor({2, 10, 8}, 44),
                                     suite_tensor({2, 10, 8}, 45)};
      for (const auto& [n, t] : p) {
        names.push_back(n);
        in.push_back(t);
      }
      ScalarFn f = [ac, names](Tape<double>&, In v) {
        VarMap<double> vars;
        for (std::size_t i = 0; i < names.size(); ++i) vars.emplace(names[i], v[3 + i]);
        return weighted_sum(bilinear_attention(v[0], v[1], v[2], vars, ac), 22);
      };
      record(name, [&] { return grad_check(f, in, comp); });
    }

  // Encoder branches on the reduced model.
  ModelCheckOptions mo;
  mo.eps = opt.composite_eps;
  const ModelConfig red = reduced_config();
  auto branch = [&](const std::string& name, std::vector<std::string> prefixes, int part, bool inputs) {
    ModelCheckOptions o = mo;
    o.include_inputs = inputs;
    record(name, [&] {
      return model_grad_check(red, prefixes, [&](Tape<double>&, const VarMap<double>& vars, Var<double> h, Var<double> l) {
        ForwardContext<double> ctx;
        ctx.groups = 2;
        if (part == 0) return weighted_sum(encode_hsi(h, vars, red, ctx), 23);
        if (part == 1) return weighted_sum(encode_lidar(l, vars, red, ctx), 23);
        return weighted_sum(encoder_forward(h, l, vars, red, ctx).v, 23);
      }, o);
    });
  };
  branch("encoder[hsi branch]", {"hsi."}, 0, true);
  branch("encoder[lidar branch]", {"lidar."}, 1, true);
  branch("encoder[fusion]", {"fuse."}, 2, false);

  // InfoNCE with respect to the query on a 2 x (1 + 4) case.
  {
    const Tensor<double> kp = detail::unit_rows(2, 6, 46), queue = detail::unit_rows(4, 6, 47);
    ScalarFn f = [&](Tape<double>&, In v) {
      return info_nce_loss(contrastive_logits(l2_normalize(v[0]), kp, &queue), 0.07);
    };
    record("info_nce[2x(1+4)]", [&] { return grad_check(f, {suite_tensor({2, 6}, 48)}, op); });
  }

  // Full contrastive loss: query encoder, attention, projection, InfoNCE.
  for (const auto& [label, cfg] : suite_models(opt.ablations)) {
    for (bool literal : {false, true}) {
      if (literal && label != "base") continue;
      const Tensor<double> kp = detail::unit_rows(4, cfg.embed, 49), queue = detail::unit_rows(opt.queue, cfg.embed, 50);
      ModelCheckOptions o = mo;
      o.batch = 4;
      o.max_coords_per_input = 24;
      const ModelConfig c = cfg;
      const std::string name = "contrastive_loss[" + label + (literal ? ", negatives-only" : "") + ", K=" +
                               std::to_string(opt.queue) + "]";
      record(name, [&] {
        return model_grad_check(c, {""}, [&](Tape<double>&, const VarMap<double>& vars, Var<double> h, Var<double> l) {
          ForwardContext<double> ctx;
          ctx.groups = 2;
          return info_nce_loss(contrastive_logits(embed_forward(h, l, vars, c, ctx), kp, &queue), 0.07, literal);
        }, o);
      });
    }
  }
  return out;
}

}  // namespace nnc
