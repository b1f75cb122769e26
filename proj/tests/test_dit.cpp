#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"

namespace headlab {
namespace {

using testing::noisy_weights;
using testing::random_matrix;

TEST(DitConfig, DefaultsDescribeTheToyModel) {
  const DitConfig c;
  c.validate();
  EXPECT_EQ(c.image_tokens(), 64u);
  EXPECT_EQ(c.sequence_length(), 65u);
  EXPECT_EQ(c.patch_dim(), 4u);
  EXPECT_EQ(c.head_count(), 16u);
  EXPECT_EQ(all_heads(c).size(), 16u);
  EXPECT_EQ(all_heads(c)[5], (HeadId{1, 1}));
}

TEST(DitConfig, RejectsInconsistentExtents) {
  DitConfig c;
  c.head_dim = 8;
  EXPECT_THROW(c.validate(), DomainError);
  c = DitConfig{};
  c.patch = 3;
  EXPECT_THROW(c.validate(), DomainError);
}

TEST(Patchify, ZeroImageRoundTrips) {
  const Tensor tokens = patchify(Tensor::matrix(16, 16), 2);
  EXPECT_EQ(tokens.shape(), (Shape{64, 4}));
  for (double v : tokens.data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(unpatchify(tokens, 2), Tensor::matrix(16, 16));
}

TEST(Patchify, PixelLayout) {
  Tensor img = Tensor::matrix(16, 16);
  img(0, 1) = 1.0;
  img(3, 2) = 2.0;
  const Tensor tokens = patchify(img, 2);
  EXPECT_EQ(tokens(0, 1), 1.0);
  EXPECT_EQ(tokens(9, 2), 2.0);  // patch row 1, patch col 1; slot (1, 0)
}

TEST(Patchify, RandomImageRoundTripsExactly) {
  const Tensor img = random_matrix(16, 16, 1);
  EXPECT_EQ(unpatchify(patchify(img, 2), 2), img);
  EXPECT_THROW(patchify(random_matrix(15, 16, 2), 2), DimensionError);
}

TEST(Activations, GeluMatchesTanhFormula) {
  for (double x : {-4.0, -1.0, -0.1, 0.0, 0.3, 2.0, 7.0}) {
    const double ref = 0.5 * x * (1 + std::tanh(std::sqrt(2 / M_PI) * (x + 0.044715 * x * x * x)));
    EXPECT_NEAR(gelu(x), ref, 1e-15);
    const double h = 1e-6;
    EXPECT_NEAR(gelu_grad(x), (gelu(x + h) - gelu(x - h)) / (2 * h), 1e-8);
    EXPECT_NEAR(silu_grad(x), (silu(x + h) - silu(x - h)) / (2 * h), 1e-8);
  }
  EXPECT_EQ(tanh_fast(1000.0), 1.0);
  EXPECT_EQ(tanh_fast(-1000.0), -1.0);
}

TEST(Init, FreshWeightsHaveZeroOutputProjection) {
  const DitWeights w = init_weights(DitConfig{}, 0);
  EXPECT_TRUE(w.all_finite());
  for (double v : w.out_w.data()) EXPECT_EQ(v, 0.0);
  for (double v : w.out_b.data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(w.class_emb.rows(), 5u);
  EXPECT_EQ(init_weights(DitConfig{}, 0), w);
  EXPECT_FALSE(init_weights(DitConfig{}, 1) == w);
}

TEST(Forward, FreshModelAtMidTimeIsFiniteAndCentered) {
  const DitWeights w = init_weights(DitConfig{}, 0);
  const Tensor v = dit_forward(w, Tensor::matrix(16, 16), 0.5, ClassLabel{0});
  EXPECT_TRUE(v.all_finite());
  EXPECT_LT(std::abs(mean(v)), 10.0);
  EXPECT_EQ(mean(v), 0.0);  // zero-initialized output projection
}

TEST(Forward, Deterministic) {
  const DitWeights w = noisy_weights(DitConfig{}, 3);
  const Tensor x = random_matrix(16, 16, 4);
  EXPECT_EQ(dit_forward(w, x, 0.3, ClassLabel{2}), dit_forward(w, x, 0.3, ClassLabel{2}));
}

TEST(Forward, PerturbingAllHeadsChangesOutput) {
  const DitWeights w = noisy_weights(DitConfig{}, 5);
  const Tensor x = random_matrix(16, 16, 6);
  const Tensor base = dit_forward(w, x, 0.7, ClassLabel{1});
  const Tensor pert = dit_forward(w, x, 0.7, ClassLabel{1}, PerturbSpec::of(all_heads(w.config), PerturbMethod::pag));
  EXPECT_GT(max_abs_diff(base, pert), 0.0);
}

TEST(Forward, EmptyHeadSetMatchesPlainForward) {
  const DitWeights w = noisy_weights(DitConfig{}, 7);
  const Tensor x = random_matrix(16, 16, 8);
  EXPECT_EQ(dit_forward(w, x, 0.2, ClassLabel{3}, PerturbSpec::of({}, PerturbMethod::pag)),
            dit_forward(w, x, 0.2, ClassLabel{3}));
}

TEST(Forward, ConditionTokenParticipates) {
  DitWeights w = noisy_weights(DitConfig{}, 9);
  const Tensor x = random_matrix(16, 16, 10);
  const Tensor before = dit_forward(w, x, 0.5, ClassLabel{2});
  for (std::size_t j = 0; j < w.class_emb.cols(); ++j) w.class_emb(2, j) = 0.0;
  EXPECT_GT(max_abs_diff(before, dit_forward(w, x, 0.5, ClassLabel{2})), 0.0);
  EXPECT_GT(max_abs_diff(before, dit_forward(w, x, 0.5, ClassLabel{})), 0.0);
}

TEST(Forward, RejectsBadInputs) {
  const DitWeights w = init_weights(DitConfig{}, 0);
  const Tensor x = Tensor::matrix(16, 16);
  EXPECT_THROW(dit_forward(w, x, 0.5, ClassLabel{4}), DomainError);
  EXPECT_THROW(dit_forward(w, x, 1.5, ClassLabel{0}), DomainError);
  EXPECT_THROW(dit_forward(w, Tensor::matrix(8, 8), 0.5, ClassLabel{0}), DimensionError);
  EXPECT_THROW(dit_forward(w, x, 0.5, ClassLabel{0}, PerturbSpec::of({{4, 0}}, PerturbMethod::pag)), DomainError);
}

TEST(Forward, LayerOracleMatchesFullLayerHeadSet) {
  const DitWeights w = noisy_weights(DitConfig{}, 11);
  const Tensor x = random_matrix(16, 16, 12);
  for (std::size_t l = 0; l < 4; ++l) {
    PerturbSpec layer;
    layer.pag_layers = {l};
    std::vector<HeadId> heads;
    for (std::size_t h = 0; h < 4; ++h) heads.push_back({l, h});
    EXPECT_EQ(dit_forward(w, x, 0.4, ClassLabel{0}, PerturbSpec::of(heads, PerturbMethod::pag)),
              dit_forward(w, x, 0.4, ClassLabel{0}, layer));
  }
}

TEST(Forward, TimeFeaturesAreSinusoidal) {
  const Tensor f = time_features(0.25, 8);
  EXPECT_EQ(f.size(), 8u);
  EXPECT_EQ(f[0], std::cos(1000.0 * 0.25 * 1.0));
  EXPECT_EQ(f[4], std::sin(1000.0 * 0.25 * 1.0));
}

}  // namespace
}  // namespace headlab
