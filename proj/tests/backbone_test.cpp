#include <gtest/gtest.h>

#include "ivgf/pipeline.hpp"

using namespace ivgf;

namespace {

ModelConfig small_model() {
  ModelConfig m;
  m.widths = {4, 8, 8, 8};
  m.depth = 3;
  m.mhsa_heads = 2;
  m.head_width = 8;
  m.fem.ratio = 2;
  m.agf.heads = 2;
  return m;
}

void zero_biases(ParamStore& ps) {
  for (auto& [name, t] : ps)
    if (name.ends_with(".b") || name.ends_with(".beta")) t = Tensor::zeros(t.shape());
}

}  // namespace

TEST(Encoder, ScaleShapesAt64) {
  ModelConfig m;
  ParamStore ps = init_model_params(m, 1);
  Rng rng(2);
  Graph g;
  auto f = encoder_forward(g.constant(uniform_tensor({3, 64, 64}, rng, 0, 1)),
                           g.constant(uniform_tensor({3, 64, 64}, rng, 0, 1)), ps, m);
  const Shape want[4] = {{32, 16, 16}, {64, 8, 8}, {128, 4, 4}, {256, 2, 2}};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(f.x[i].shape(), want[i]);
    EXPECT_EQ(f.y[i].shape(), want[i]);
    EXPECT_EQ(f.fused[i].shape(), want[i]);
  }
  EXPECT_EQ(f.tem_calls, 3u);
}

TEST(Encoder, TemCallCountFollowsDepth) {
  ModelConfig m = small_model();
  m.depth = 6;
  m.tem_every = 2;
  ParamStore ps = init_model_params(m, 1);
  Graph g;
  auto f = encoder_forward(g.constant(Tensor::zeros({3, 32, 32})), g.constant(Tensor::zeros({3, 32, 32})), ps, m);
  EXPECT_EQ(f.tem_calls, 3u);
  m.tem_enabled = false;
  ps = init_model_params(m, 1);
  Graph g2;
  EXPECT_EQ(encoder_forward(g2.constant(Tensor::zeros({3, 32, 32})), g2.constant(Tensor::zeros({3, 32, 32})), ps, m)
                .tem_calls,
            0u);
}

TEST(Encoder, TemParametersShared) {
  ParamStore ps = init_model_params(ModelConfig{}, 1);
  EXPECT_FALSE(ps.names_with_prefix("tem.").empty());
  EXPECT_TRUE(ps.names_with_prefix("tem1").empty());
  EXPECT_TRUE(ps.names_with_prefix("tem2").empty());
}

TEST(Encoder, ZeroInputZeroBiasGivesZeroFeatures) {
  ModelConfig m;
  ParamStore ps = init_model_params(m, 3);
  zero_biases(ps);
  Graph g;
  auto f = encoder_forward(g.constant(Tensor::zeros({3, 64, 64})), g.constant(Tensor::zeros({3, 64, 64})), ps, m);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_LE(max_abs(f.x[i].value()), 1e-12) << "scale " << i + 1;
    EXPECT_LE(max_abs(f.fused[i].value()), 1e-12) << "scale " << i + 1;
  }
}

TEST(Encoder, AcceptsMultiplesOf32) {
  ModelConfig m = small_model();
  ParamStore ps = init_model_params(m, 4);
  for (std::size_t s : {32u, 64u, 96u}) {
    Graph g;
    auto f = encoder_forward(g.constant(Tensor::zeros({3, s, s})), g.constant(Tensor::zeros({3, s, s})), ps, m);
    EXPECT_EQ(f.fused[0].shape(), (Shape{4, s / 4, s / 4}));
    EXPECT_EQ(f.fused[3].shape(), (Shape{8, s / 32, s / 32}));
  }
}

TEST(Encoder, RejectsIndivisibleSize) {
  ModelConfig m = small_model();
  ParamStore ps = init_model_params(m, 4);
  Graph g;
  EXPECT_THROW(encoder_forward(g.constant(Tensor::zeros({3, 48, 64})), g.constant(Tensor::zeros({3, 48, 64})), ps, m),
               ConfigError);
  EXPECT_THROW(encoder_forward(g.constant(Tensor::zeros({3, 64, 64})), g.constant(Tensor::zeros({3, 32, 32})), ps, m),
               ConfigError);
  EXPECT_THROW(encoder_forward(g.constant(Tensor::zeros({1, 64, 64})), g.constant(Tensor::zeros({1, 64, 64})), ps, m),
               ConfigError);
}

TEST(Encoder, SumFusionBranchesAgreeOnSharedWeights) {
  ModelConfig m = small_model();
  m.fem_enabled = m.tem_enabled = m.agf_enabled = false;
  ParamStore ps = init_model_params(m, 5);
  for (const auto& name : ps.names_with_prefix("bb.x."))
    ps.get("bb.y." + name.substr(5)) = ps.get(name);
  Rng rng(6);
  const Tensor img = uniform_tensor({3, 32, 32}, rng, 0, 1);
  Graph g;
  auto f = encoder_forward(g.constant(img), g.constant(img), ps, m);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(f.x[i].value(), f.y[i].value());
    EXPECT_LE(max_abs_diff(f.fused[i].value(), kernels::map(f.x[i].value(), [](double v) { return 2.0 * v; })), 1e-12);
  }
}

TEST(Encoder, GatesInOpenUnitInterval) {
  ModelConfig m = small_model();
  ParamStore ps = init_model_params(m, 7);
  Rng rng(8);
  Graph g;
  auto f = encoder_forward(g.constant(uniform_tensor({3, 32, 32}, rng)), g.constant(uniform_tensor({3, 32, 32}, rng)),
                           ps, m);
  ASSERT_FALSE(f.gates.empty());
  for (const Var& v : f.gates)
    for (double x : v.value().data()) {
      EXPECT_GT(x, 0.0);
      EXPECT_LT(x, 1.0);
    }
}

TEST(Encoder, DefaultParameterCount) {
  const std::size_t n = init_model_params(ModelConfig{}, 1).total_elements();
  EXPECT_GT(n, 1'000'000u);
  EXPECT_LT(n, 10'000'000u);
}

TEST(Encoder, InitIsSeedDeterministic) {
  EXPECT_EQ(init_model_params(small_model(), 9), init_model_params(small_model(), 9));
  EXPECT_FALSE(init_model_params(small_model(), 9) == init_model_params(small_model(), 10));
}

TEST(MissingModality, Substitution) {
  Tensor a({3, 4, 4}, 0.25), b({3, 4, 4}, 0.75);
  auto none = substitute_missing(a, b, Modality::none);
  EXPECT_EQ(none.x, a);
  EXPECT_EQ(none.y, b);
  auto no_ir = substitute_missing(a, b, Modality::ir);
  EXPECT_EQ(no_ir.x, b);
  EXPECT_EQ(no_ir.y, b);
  auto no_vis = substitute_missing(a, b, Modality::vis);
  EXPECT_EQ(no_vis.x, a);
  EXPECT_EQ(no_vis.y, a);
}

TEST(MaxProjection, NormalizedChannelMax) {
  Tensor f({2, 1, 3}, std::vector<double>{1, 5, 2, 3, 0, 4});
  Tensor p = max_projection(f);
  EXPECT_EQ(p.shape(), (Shape{1, 1, 3}));
  EXPECT_DOUBLE_EQ(p[0], 0.0);
  EXPECT_DOUBLE_EQ(p[1], 1.0);
  EXPECT_DOUBLE_EQ(p[2], 0.5);
  EXPECT_EQ(max_projection(Tensor({2, 2, 2}, 3.0)), Tensor::zeros({1, 2, 2}));
}
