#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"

namespace headlab {
namespace {

using testing::random_matrix;

double scalar_pearson(const Tensor& a, const Tensor& b) {
  long double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= a.size();
  mb /= b.size();
  long double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return static_cast<double>(sab / std::sqrt(saa * sbb));
}

const ObjectiveId kBright{ObjectiveKind::brightness, 0};
const ObjectiveId kDark{ObjectiveKind::darkness, 0};
const ObjectiveId kSharp{ObjectiveKind::sharpness, 0};
const ObjectiveId kSym{ObjectiveKind::h_symmetry, 0};

TEST(Objectives, ConstantImage) {
  const Tensor img = Tensor::matrix(16, 16, 0.5);
  EXPECT_EQ(score(kBright, img, {}), 0.5);
  EXPECT_EQ(score(kSharp, img, {}), 0.0);
  EXPECT_EQ(score(kSym, img, {}), 0.0);
}

TEST(Objectives, TemplateSelfCorrelation) {
  for (std::size_t c = 0; c < 4; ++c)
    EXPECT_NEAR(score({ObjectiveKind::template_corr, c}, render_template(c), ClassLabel{c}), 1.0, 1e-15);
}

TEST(Objectives, PearsonMatchesScalarOracle) {
  const Tensor img = random_matrix(16, 16, 1);
  for (std::size_t c = 0; c < 4; ++c)
    EXPECT_NEAR(score({ObjectiveKind::template_corr, c}, img, {}), scalar_pearson(img, render_template(c)), 1e-12);
}

TEST(Objectives, PearsonOfConstantIsZero) {
  EXPECT_EQ(pearson(Tensor::matrix(4, 4, 2.0), random_matrix(4, 4, 2)), 0.0);
}

TEST(Objectives, BrightnessAndDarknessCancel) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Tensor img = random_matrix(16, 16, s);
    EXPECT_EQ(score(kBright, img, {}) + score(kDark, img, {}), 0.0);
  }
}

TEST(Objectives, SharpnessByHand) {
  const Tensor img = Tensor::from_rows({{0, 1}, {1, 1}});
  // right diffs: |1-0| + |1-1|, down diffs: |1-0| + |1-1|
  EXPECT_EQ(sharpness(img), 0.5);
}

TEST(Objectives, SymmetryOfAsymmetricImage) {
  const Tensor img = Tensor::from_rows({{1, 0}, {0, 0}});
  EXPECT_EQ(h_symmetry(img), -0.5);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(h_symmetry(render_template(c)), 0.0);
}

TEST(Objectives, ClassConsistency) {
  const ObjectiveId cc{ObjectiveKind::class_consistency, 0};
  const Tensor square = render_template(1);
  EXPECT_EQ(score(cc, square, ClassLabel{1}), 1.0);
  EXPECT_EQ(score(cc, square, ClassLabel{0}), 0.0);
  EXPECT_THROW(score(cc, square, ClassLabel{}), DomainError);
}

TEST(Objectives, ParseAndFormat) {
  for (const char* name : {"brightness", "darkness", "sharpness", "h_symmetry", "class_consistency", "template_corr:2"}) {
    const auto id = parse_objective(name);
    ASSERT_TRUE(id.has_value()) << name;
    EXPECT_EQ(to_string(*id), name);
  }
  EXPECT_FALSE(parse_objective("template_corr:4").has_value());
  EXPECT_FALSE(parse_objective("template_corr:").has_value());
  EXPECT_FALSE(parse_objective("loudness").has_value());
}

TEST(Objectives, RejectsNonImage) {
  EXPECT_THROW(score(kBright, Tensor({4}), {}), DimensionError);
}

}  // namespace
}  // namespace headlab
