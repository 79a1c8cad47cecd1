#include <gtest/gtest.h>

#include <cmath>

#include "canf/can.hpp"
#include "canf/ops.hpp"
#include "test_util.hpp"

namespace canf {
namespace {

using testing::random_tensor;

template <typename S>
CondAwareParam<S> dw_layer(Index channels, Index k, Index d, std::mt19937_64& rng) {
  CondAwareParam<S> l;
  l.kind = LayerKind::DwConv;
  l.static_weight = random_tensor<S>({channels, 1, k, k}, rng);
  l.bias = random_tensor<S>({channels}, rng);
  l.conv = {1, k / 2, channels};
  l.generator = std::make_shared<WeightGenerator<S>>(make_generator<S>(l.static_weight.shape(), d));
  l.generator->map_weights = random_tensor<S>(l.generator->map_weights.shape(), rng, 0.1);
  return l;
}

template <typename S>
CondAwareParam<S> linear_layer(Index out, Index in, Index d, std::mt19937_64& rng) {
  CondAwareParam<S> l;
  l.kind = LayerKind::OutProj;
  l.static_weight = random_tensor<S>({out, in}, rng);
  l.bias = random_tensor<S>({out}, rng);
  l.generator = std::make_shared<WeightGenerator<S>>(make_generator<S>({out, in}, d));
  l.generator->map_weights = random_tensor<S>(l.generator->map_weights.shape(), rng, 0.1);
  return l;
}

TEST(Generator, ZeroInitAndParameterCount) {
  auto gen = make_generator<float>({16, 1, 3, 3}, 8);
  EXPECT_EQ(gen.parameter_count(), 1152);
  EXPECT_EQ(gen.weight_size(), 144);
  EXPECT_EQ(gen.condition_dim(), 8);
  for (float v : gen.map_weights.data()) EXPECT_EQ(v, 0.0f);
  std::mt19937_64 rng(1);
  auto wc = generate_conditional_weight(gen, random_tensor<float>({3, 8}, rng));
  EXPECT_EQ(wc.shape(), (Shape{3, 16, 1, 3, 3}));
  for (float v : wc.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Generator, IsLinearInCondition) {
  std::mt19937_64 rng(2);
  auto gen = make_generator<double>({4, 2, 3, 3}, 5);
  gen.map_weights = random_tensor<double>(gen.map_weights.shape(), rng);
  auto c1 = random_tensor<double>({2, 5}, rng), c2 = random_tensor<double>({2, 5}, rng);
  auto lhs = generate_conditional_weight(gen, add(scale(c1, 2.5), scale(c2, -0.5)));
  auto rhs = add(scale(generate_conditional_weight(gen, c1), 2.5),
                 scale(generate_conditional_weight(gen, c2), -0.5));
  EXPECT_LE(max_abs_diff(lhs, rhs), 1e-12);
}

TEST(Generator, MatchesExplicitProduct) {
  std::mt19937_64 rng(3);
  auto gen = make_generator<double>({3, 2}, 4);
  gen.map_weights = random_tensor<double>(gen.map_weights.shape(), rng);
  auto c = random_tensor<double>({2, 4}, rng);
  auto wc = generate_conditional_weight(gen, c);
  for (Index b = 0; b < 2; ++b)
    for (Index p = 0; p < 6; ++p) {
      double want = 0.0;
      for (Index k = 0; k < 4; ++k) want += c[b * 4 + k] * gen.map_weights[p * 4 + k];
      EXPECT_NEAR(wc[b * 6 + p], want, 1e-14);
    }
}

TEST(Generator, RejectsWrongConditionWidth) {
  auto gen = make_generator<float>({4, 4}, 8);
  EXPECT_THROW(generate_conditional_weight(gen, Tensor<float>({2, 7})), DimensionError);
}

TEST(ConditionAware, FusedMatchesPerSampleConv) {
  std::mt19937_64 rng(4);
  for (Index batch : {1, 3, 8}) {
    auto layer = dw_layer<double>(6, 3, 4, rng);
    auto x = random_tensor<double>({batch, 6, 5, 5}, rng);
    auto c = random_tensor<double>({batch, 4}, rng);
    auto wc = conditional_weight(layer, c);
    EXPECT_LE(max_abs_diff(apply_fused_grouped(layer, x, wc), apply_condition_aware_reference(layer, x, wc)),
              1e-12);
  }
}

TEST(ConditionAware, FusedMatchesPerSampleLinear) {
  std::mt19937_64 rng(5);
  auto layer = linear_layer<float>(7, 5, 3, rng);
  auto x = random_tensor<float>({4, 6, 5}, rng);
  auto wc = conditional_weight(layer, random_tensor<float>({4, 3}, rng));
  EXPECT_LE(max_abs_diff(apply_fused_grouped(layer, x, wc), apply_condition_aware_reference(layer, x, wc)),
            1e-5f);
}

TEST(ConditionAware, PerSampleConvEqualsSeparateCalls) {
  std::mt19937_64 rng(6);
  auto x = random_tensor<float>({3, 4, 6, 6}, rng);
  auto k = random_tensor<float>({3, 4, 2, 3, 3}, rng);
  Conv2dParams p{1, 1, 2};
  auto y = conv2d_per_sample(x, k, p);
  for (Index b = 0; b < 3; ++b) {
    auto yb = conv2d(slice(x, 0, b, 1), reshape(slice(k, 0, b, 1), {4, 2, 3, 3}), p);
    EXPECT_TRUE(bitwise_equal(slice(y, 0, b, 1), yb)) << b;
  }
}

TEST(ConditionAware, DistributesOverWeightSum) {
  std::mt19937_64 rng(7);
  auto layer = dw_layer<double>(8, 3, 6, rng);
  auto x = random_tensor<double>({4, 8, 6, 6}, rng);
  auto wc = conditional_weight(layer, random_tensor<double>({4, 6}, rng));
  EXPECT_LE(max_abs_diff(apply_fused_grouped(layer, x, wc), apply_output_sum(layer, x, wc)), 1e-12);
}

TEST(ConditionAware, ZeroGeneratorReducesToStatic) {
  std::mt19937_64 rng(8);
  auto layer = dw_layer<float>(8, 3, 6, rng);
  layer.generator->map_weights = Tensor<float>(layer.generator->map_weights.shape());
  auto x = random_tensor<float>({5, 8, 6, 6}, rng);
  auto c = random_tensor<float>({5, 6}, rng);
  EXPECT_TRUE(bitwise_equal(apply_fused_grouped_from_condition(layer, x, c), apply_static(layer, x)));
}

TEST(ConditionAware, BatchMismatchThrows) {
  std::mt19937_64 rng(9);
  auto layer = dw_layer<float>(4, 3, 2, rng);
  auto x = random_tensor<float>({3, 4, 5, 5}, rng);
  auto wc = conditional_weight(layer, random_tensor<float>({2, 2}, rng));
  EXPECT_THROW(apply_fused_grouped(layer, x, wc), DimensionError);
}

TEST(KernelSelection, CoefficientsAreADistribution) {
  std::mt19937_64 rng(10);
  AdaptiveKernelBank<double> bank{random_tensor<double>({3, 4, 1, 3, 3}, rng), random_tensor<double>({3, 5}, rng)};
  auto c = random_tensor<double>({2, 5}, rng);
  auto coeff = selection_coefficients(bank, c);
  ASSERT_EQ(coeff.shape(), (Shape{2, 3}));
  auto mixed = mix_kernels(bank, c);
  for (Index b = 0; b < 2; ++b) {
    double s = 0.0;
    for (Index k = 0; k < 3; ++k) {
      EXPECT_GT(coeff[b * 3 + k], 0.0);
      s += coeff[b * 3 + k];
    }
    EXPECT_NEAR(s, 1.0, 1e-14);
    for (Index p = 0; p < 36; ++p) {
      double want = 0.0;
      for (Index k = 0; k < 3; ++k) want += coeff[b * 3 + k] * bank.base_kernels[k * 36 + p];
      EXPECT_NEAR(mixed[b * 36 + p], want, 1e-14);
    }
  }
  EXPECT_EQ(bank.parameter_count(), 3 * 36 + 15);
}

TEST(ConditionEmbedding, SinusoidValues) {
  auto s0 = timestep_sinusoid<double>(0, 4);
  EXPECT_EQ(s0, (std::vector<double>{0.0, 0.0, 1.0, 1.0}));
  auto s1 = timestep_sinusoid<double>(1, 4);
  EXPECT_NEAR(s1[0], std::sin(1.0), 1e-15);
  EXPECT_NEAR(s1[1], std::sin(0.01), 1e-15);
  EXPECT_NEAR(s1[2], std::cos(1.0), 1e-15);
  EXPECT_NEAR(s1[3], std::cos(0.01), 1e-15);
  auto odd = timestep_sinusoid<double>(7, 5);
  EXPECT_EQ(odd.size(), 5u);
  EXPECT_EQ(odd[4], 0.0);
}

ConditionEmbedder<double> small_embedder(std::mt19937_64& rng) {
  ConditionEmbedder<double> e;
  e.dim = 4;
  e.n_classes = 3;
  e.n_timesteps = 10;
  e.class_table = random_tensor<double>({4, 4}, rng);
  e.time_w1 = random_tensor<double>({4, 4}, rng);
  e.time_b1 = random_tensor<double>({4}, rng);
  e.time_w2 = random_tensor<double>({4, 4}, rng);
  e.time_b2 = random_tensor<double>({4}, rng);
  return e;
}

TEST(ConditionEmbedding, SourcesSelectParts) {
  std::mt19937_64 rng(11);
  auto e = small_embedder(rng);
  auto cls = embed_condition(e, {2, 2}, {1, 7}, ConditionSources::class_only());
  EXPECT_TRUE(bitwise_equal(slice(cls, 0, 0, 1), slice(cls, 0, 1, 1)));
  for (Index i = 0; i < 4; ++i) EXPECT_EQ(cls[i], e.class_table[2 * 4 + i]);
  auto tim = embed_condition(e, {0, 1}, {5, 5}, ConditionSources::timestep_only());
  EXPECT_TRUE(bitwise_equal(slice(tim, 0, 0, 1), slice(tim, 0, 1, 1)));
  auto all = embed_condition(e, {2}, {5}, ConditionSources::all());
  auto c_only = embed_condition(e, {2}, {5}, ConditionSources::class_only());
  auto t_only = embed_condition(e, {2}, {5}, ConditionSources::timestep_only());
  EXPECT_LE(max_abs_diff(all, add(c_only, t_only)), 1e-14);
}

TEST(ConditionEmbedding, NullClassAndRangeChecks) {
  std::mt19937_64 rng(12);
  auto e = small_embedder(rng);
  auto c = embed_condition(e, {e.null_class()}, {0}, ConditionSources::class_only());
  for (Index i = 0; i < 4; ++i) EXPECT_EQ(c[i], e.class_table[3 * 4 + i]);
  EXPECT_THROW(embed_condition(e, {4}, {0}, ConditionSources::all()), RangeError);
  EXPECT_THROW(embed_condition(e, {0}, {10}, ConditionSources::all()), RangeError);
  EXPECT_THROW(embed_condition(e, {-1}, {0}, ConditionSources::all()), RangeError);
}

TEST(LayerKinds, NamesRoundTrip) {
  for (auto k : {LayerKind::DwConv, LayerKind::PatchEmbed, LayerKind::OutProj, LayerKind::Head, LayerKind::QkvProj,
                 LayerKind::Mlp}) {
    auto back = layer_kind_from_string(to_string(k));
    ASSERT_TRUE(back.has_value());
    EXPECT_EQ(*back, k);
  }
  EXPECT_FALSE(layer_kind_from_string("conv").has_value());
}

}  // namespace
}  // namespace canf
