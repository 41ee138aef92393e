#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "nnc/attention.hpp"
#include "nnc/model_check.hpp"
#include "test_util.hpp"

namespace nnc {
namespace {

using test::kGradTol;
using test::random_tensor;

AttentionConfig small_cfg(bool gate = true, SoftmaxAxis axis = SoftmaxAxis::Tokens) {
  return {10, 8, 2, gate, axis};
}

ParamMap<double> attention_params(const AttentionConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  return init_params<double>(attention_param_specs(cfg), rng);
}

TEST(SplitHeads, FullScaleBlocks) {
  Tape<double> t;
  auto x = t.constant(random_tensor({25, 256}, 1));
  auto parts = split_heads(x, 5);
  ASSERT_EQ(parts.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(parts[i].shape(), (Shape{5, 256}));
    for (std::size_t j = 0; j < 256; ++j) EXPECT_EQ(parts[i].value().at({2, j}), x.value().at({i * 5 + 2, j}));
  }
  EXPECT_EQ(concat(parts, 0).value(), x.value());
}

TEST(SplitHeads, SingleHeadIsIdentityAndBatchedRoundTrip) {
  Tape<double> t;
  auto x = t.constant(random_tensor({3, 12, 4}, 2));
  auto one = split_heads(x, 1);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].value(), x.value());
  EXPECT_EQ(concat(split_heads(x, 4), 1).value(), x.value());
  EXPECT_THROW(split_heads(x, 5), ShapeError);
}

struct HeadFixture {
  Tape<double> tape;
  AttentionConfig cfg = small_cfg();
  ParamMap<double> params = attention_params(cfg, 3);
  VarMap<double> vars;
  Var<double> q, k, v;

  explicit HeadFixture(std::uint64_t seed = 4) {
    q = tape.constant(random_tensor({3, 5, 8}, seed));
    k = tape.constant(random_tensor({3, 5, 8}, seed + 1));
    v = tape.constant(random_tensor({3, 5, 8}, seed + 2));
    rebind();
  }
  void rebind() { vars = bind_params(tape, params, false); }
  HeadOutput<double> run(std::size_t head = 0, SoftmaxAxis axis = SoftmaxAxis::Tokens) {
    return bilinear_head(q, k, v, head_weights(vars, head, true), axis);
  }
};

TEST(BilinearHead, ZeroGateWeightsHalveTheOutput) {
  HeadFixture f;
  f.params["attn.head0.WBp"].fill(0.0);
  f.rebind();
  auto o = f.run();
  for (std::size_t i = 0; i < o.gate.value().size(); ++i) EXPECT_EQ(o.gate.value()[i], 0.5);
  for (std::size_t i = 0; i < o.h.value().size(); ++i) EXPECT_EQ(o.out.value()[i], 0.5 * o.h.value()[i]);
}

TEST(BilinearHead, TokenConstantScoresGiveUniformAttention) {
  HeadFixture f;
  f.params["attn.head0.WB"].fill(0.0);  // b1_hat == 0 everywhere
  f.rebind();
  auto o = f.run();
  for (std::size_t i = 0; i < o.att.value().size(); ++i) EXPECT_NEAR(o.att.value()[i], 1.0 / 5.0, 1e-15);
  // Same along tokens, any constant: rows of WB identical.
  HeadFixture g;
  auto& wb = g.params["attn.head0.WB"];
  for (std::size_t r = 1; r < 5; ++r)
    for (std::size_t c = 0; c < 5; ++c) wb.at({r, c}) = wb.at({0, c});
  g.rebind();
  auto o2 = g.run();
  for (std::size_t i = 0; i < o2.att.value().size(); ++i) EXPECT_NEAR(o2.att.value()[i], 0.2, 1e-12);
}

TEST(BilinearHead, ZeroQueryOrKeyAnnihilatesScores) {
  for (int which = 0; which < 2; ++which) {
    HeadFixture f;
    (which == 0 ? f.q : f.k) = f.tape.constant(Tensor<double>({3, 5, 8}));
    auto o = f.run();
    for (std::size_t i = 0; i < o.b1.value().size(); ++i) EXPECT_EQ(o.b1.value()[i], 0.0);
    for (std::size_t i = 0; i < o.att.value().size(); ++i) EXPECT_NEAR(o.att.value()[i], 0.2, 1e-15);
  }
}

TEST(BilinearHead, IdentityWeightsExposeSecondOrderProduct) {
  HeadFixture f;
  for (const char* w : {"Wq1", "Wk", "WB"}) {
    auto& t = f.params[std::string("attn.head0.") + w];
    t.fill(0.0);
    for (std::size_t i = 0; i < t.dim(0); ++i) t.at({i, i}) = 1.0;
  }
  f.rebind();
  auto o = f.run();
  const auto& qv = f.q.value();
  const auto& kv = f.k.value();
  for (std::size_t i = 0; i < qv.size(); ++i) {
    EXPECT_EQ(o.b1.value()[i], std::max(qv[i], 0.0) * std::max(kv[i], 0.0));
    EXPECT_EQ(o.b1_hat.value()[i], o.b1.value()[i]);
  }
}

TEST(BilinearHead, AttentionNormalizedAndGateInOpenInterval) {
  for (auto axis : {SoftmaxAxis::Tokens, SoftmaxAxis::Features}) {
    HeadFixture f(10);
    auto o = f.run(1, axis);
    const auto& a = o.att.value();
    if (axis == SoftmaxAxis::Tokens) {
      for (std::size_t n = 0; n < 3; ++n)
        for (std::size_t j = 0; j < 8; ++j) {
          double s = 0;
          for (std::size_t t = 0; t < 5; ++t) s += a.at({n, t, j});
          EXPECT_NEAR(s, 1.0, 1e-6);
        }
    } else {
      for (std::size_t n = 0; n < 3; ++n)
        for (std::size_t t = 0; t < 5; ++t) {
          double s = 0;
          for (std::size_t j = 0; j < 8; ++j) s += a.at({n, t, j});
          EXPECT_NEAR(s, 1.0, 1e-6);
        }
    }
    for (double g : o.gate.value().vec()) {
      EXPECT_GT(g, 0.0);
      EXPECT_LT(g, 1.0);
    }
    EXPECT_EQ(o.gate.shape(), (Shape{3, 5, 1}));
  }
}

TEST(BilinearAttention, FullScaleShape) {
  AttentionConfig cfg;
  Tape<double> t;
  auto vars = bind_params(t, attention_params(cfg, 5), false);
  auto q = t.constant(random_tensor({25, 256}, 6));
  auto k = t.constant(random_tensor({25, 256}, 7));
  auto v = t.constant(random_tensor({25, 256}, 8));
  EXPECT_EQ(bilinear_attention(q, k, v, vars, cfg).shape(), (Shape{25, 256}));
}

TEST(BilinearAttention, HeadPermutationIsASymmetry) {
  AttentionConfig cfg{15, 6, 3, true, SoftmaxAxis::Tokens};
  auto params = attention_params(cfg, 9);
  const std::vector<std::size_t> perm{2, 0, 1};
  ParamMap<double> permuted;
  for (std::size_t i = 0; i < 3; ++i)
    for (const char* w : {"Wq1", "Wq2", "Wk", "Wv", "WB", "WBp"}) {
      permuted[head_prefix(i) + w] = params.at(head_prefix(perm[i]) + w);
    }
  Tape<double> t;
  auto q = t.constant(random_tensor({2, 15, 6}, 1));
  auto k = t.constant(random_tensor({2, 15, 6}, 2));
  auto v = t.constant(random_tensor({2, 15, 6}, 3));
  auto block_perm = [&](Var<double> x) {
    auto parts = split_heads(x, 3);
    return concat(std::vector<Var<double>>{parts[perm[0]], parts[perm[1]], parts[perm[2]]}, 1);
  };
  auto base = bilinear_attention(q, k, v, bind_params(t, params, false), cfg);
  auto moved = bilinear_attention(block_perm(q), block_perm(k), block_perm(v), bind_params(t, permuted, false), cfg);
  EXPECT_EQ(moved.value(), block_perm(base).value());
}

TEST(BilinearAttention, GradientsOfEveryFamily) {
  for (bool gate : {true, false})
    for (auto axis : {SoftmaxAxis::Tokens, SoftmaxAxis::Features}) {
      AttentionConfig cfg = small_cfg(gate, axis);
      auto params = attention_params(cfg, 11);
      std::vector<std::string> names;
      std::vector<Tensor<double>> inputs;
      for (const auto& [n, p] : params) {
        names.push_back(n);
        inputs.push_back(p);
      }
      for (std::uint64_t s : {21u, 22u, 23u}) inputs.push_back(random_tensor({2, 10, 8}, s));
      auto fn = [&](Tape<double>&, std::span<const Var<double>> x) {
        VarMap<double> vars;
        for (std::size_t i = 0; i < names.size(); ++i) vars.emplace(names[i], x[i]);
        const std::size_t o = names.size();
        return weighted_sum(bilinear_attention(x[o], x[o + 1], x[o + 2], vars, cfg), 99);
      };
      GradCheckOptions go;
      go.eps = 1e-4;
      auto r = grad_check(fn, inputs, go);
      EXPECT_LE(r.max_rel_error, kGradTol) << "gate=" << gate << " worst input " << r.worst_input << " coord " << r.worst_coord << " a=" << r.analytic << " n=" << r.numeric;
    }
}

TEST(ProjectionHead, UnitNormOutput) {
  Tape<double> t;
  ParamMap<double> p;
  Rng rng(3);
  p = init_params<double>(projection_param_specs(80, 16), rng);
  auto y = projection_head(t.constant(random_tensor({4, 10, 8}, 1)), bind_params(t, p, false));
  EXPECT_EQ(y.shape(), (Shape{4, 16}));
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < 16; ++j) s += y.value().at({r, j}) * y.value().at({r, j});
    EXPECT_NEAR(std::sqrt(s), 1.0, 1e-6);
  }
}

TEST(ProjectionHead, ZeroWeightsWarn) {
  Tape<double> t;
  ParamMap<double> p{{"proj.weight", Tensor<double>({80, 16})}, {"proj.bias", Tensor<double>({16})}};
  auto y = projection_head(t.constant(random_tensor({2, 10, 8}, 1)), bind_params(t, p, false));
  ASSERT_EQ(t.warnings().size(), 1u);
  for (double v : y.value().vec()) EXPECT_EQ(v, 0.0);
}

TEST(ProjectionHead, Gradient) {
  auto fn = [](Tape<double>&, std::span<const Var<double>> x) {
    VarMap<double> vars{{"proj.weight", x[0]}, {"proj.bias", x[1]}};
    return weighted_sum(projection_head(x[2], vars), 5);
  };
  auto r = grad_check(fn, {random_tensor({20, 6}, 1), random_tensor({6}, 2), random_tensor({3, 4, 5}, 3)});
  EXPECT_LE(r.max_rel_error, kGradTol);
}

TEST(ClassifierHead, ZeroWeightsGiveBias) {
  Tape<double> t;
  ParamMap<double> p{{"cls.weight", Tensor<double>({80, 2})}, {"cls.bias", Tensor<double>({2}, std::vector<double>{0.25, -1.5})}};
  auto y = classifier_head(t.constant(random_tensor({3, 10, 8}, 1)), bind_params(t, p, false));
  for (std::size_t r = 0; r < 3; ++r) {
    EXPECT_EQ(y.value().at({r, 0}), 0.25);
    EXPECT_EQ(y.value().at({r, 1}), -1.5);
  }
}

TEST(ClassifierHead, ArgmaxInvariantToLogitShift) {
  Tape<double> t;
  Rng rng(5);
  auto p = init_params<double>(classifier_param_specs(80, 6), rng);
  auto base = classifier_head(t.constant(random_tensor({8, 10, 8}, 2)), bind_params(t, p, false));
  for (auto& b : p["cls.bias"].data()) b += 3.75;
  auto shifted = classifier_head(t.constant(random_tensor({8, 10, 8}, 2)), bind_params(t, p, false));
  for (std::size_t r = 0; r < 8; ++r) {
    auto row = [&](const Tensor<double>& x) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < 6; ++j)
        if (x.at({r, j}) > x.at({r, best})) best = j;
      return best;
    };
    EXPECT_EQ(row(base.value()), row(shifted.value()));
  }
}

TEST(ClassifierHead, GradientThroughCrossEntropy) {
  const std::vector<std::size_t> targets{0, 2, 1};
  auto fn = [&](Tape<double>&, std::span<const Var<double>> x) {
    VarMap<double> vars{{"cls.weight", x[0]}, {"cls.bias", x[1]}};
    return cross_entropy_from_logits(classifier_head(x[2], vars), targets);
  };
  auto r = grad_check(fn, {random_tensor({20, 3}, 1), random_tensor({3}, 2), random_tensor({3, 4, 5}, 3)});
  EXPECT_LE(r.max_rel_error, kGradTol);
}

}  // namespace
}  // namespace nnc
