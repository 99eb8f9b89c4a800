#include "structobs/sampling.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include <gtest/gtest.h>

#include "dense_gaussian.hpp"
#include "structobs/errors.hpp"
#include "test_checkpoints.hpp"

namespace structobs {
namespace {

using testing::tiny_checkpoint;

LowRankGaussian random_dist(std::uint64_t seed, Index size, Index rank) {
  std::mt19937_64 rng(seed);
  auto inst = oracle::random_instance(rng, size, rank);
  return {inst.mu, inst.factor, inst.diag};
}

ObservationNoise random_noise(std::uint64_t seed, Index size, Index rank) {
  std::mt19937_64 rng(seed);
  return ObservationNoise::standard_normal(rank, size, rng);
}

TEST(DrawTest, VaeDrawFollowsTheDocumentedStream) {
  const LoadedModel model = load_model(tiny_checkpoint());
  ASSERT_EQ(model.latent_dim(), 3);
  const Draw d = draw(model, 9);

  std::mt19937_64 rng(9);
  std::normal_distribution<double> normal;
  Vector z(3);
  for (Index i = 0; i < 3; ++i) z[i] = normal(rng);
  const LowRankGaussian dist = std::get<VaeModel>(model.model).decode(z);
  const ObservationNoise noise = ObservationNoise::standard_normal(3, 36, rng);

  EXPECT_EQ(d.z, z);
  EXPECT_EQ(d.dist.mu(), dist.mu());
  EXPECT_EQ(d.noise.omega_p, noise.omega_p);
  EXPECT_EQ(d.noise.omega_d, noise.omega_d);
  EXPECT_EQ(d.sample, sample(dist, noise));
  EXPECT_EQ(draw(model, 9).sample, d.sample);
  EXPECT_NE(draw(model, 10).sample, d.sample);
}

TEST(DrawTest, DistOnlyDrawHasNoLatent) {
  const LoadedModel model = load_model(tiny_checkpoint(ModelKind::dist_only, 2));
  EXPECT_EQ(model.latent_dim(), 0);
  const Draw d = draw(model, 1);
  EXPECT_EQ(d.z.size(), 0);
  EXPECT_EQ(d.dist.cov_factor(), std::get<DistOnlyModel>(model.model).distribution().cov_factor());
}

TEST(ScaledSampleTest, AllOnesIsTheUnscaledSampleExactly) {
  const auto dist = random_dist(1, 20, 4);
  const auto noise = random_noise(2, 20, 4);
  EXPECT_EQ(scaled_sample(dist, noise, Vector::Ones(4)), sample(dist, noise));
}

TEST(ScaledSampleTest, RankOneMatchesHandScaledFactor) {
  const auto dist = random_dist(3, 12, 1);
  const auto noise = random_noise(4, 12, 1);
  for (double a : {-5.0, -0.5, 0.0, 2.5}) {
    const Vector expected = sample(dist.with_cov_factor(a * dist.cov_factor()), noise);
    const Vector actual = scaled_sample(dist, noise, Vector::Constant(1, a));
    EXPECT_LT((actual - expected).cwiseAbs().maxCoeff(), 1e-12) << "a = " << a;
  }
}

TEST(ScaledSampleTest, ZeroRemovesOneComponent) {
  const auto dist = random_dist(5, 15, 3);
  const auto noise = random_noise(6, 15, 3);
  const auto pcs = principal_components(dist.cov_factor());
  for (Index k = 0; k < 3; ++k) {
    Vector a = Vector::Ones(3);
    a[k] = 0.0;
    const Vector removed = pcs.u.col(k) * pcs.singular_values[k] * pcs.v.col(k).dot(noise.omega_p);
    const Vector expected = sample(dist, noise) - removed;
    EXPECT_LT((scaled_sample(dist, noise, a) - expected).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(ScaledSampleTest, RejectsWrongLength) {
  const auto dist = random_dist(7, 6, 2);
  EXPECT_THROW(scaled_sample(dist, random_noise(1, 6, 2), Vector::Ones(3)), DimensionError);
}

TEST(ParseEditsTest, ReadsLinesSkippingBlanksAndComments) {
  std::istringstream in("# x,y,c,value\n1,2,0,0.5\n\n 3, 4, 1, 1\r\n0,0,0,0\n");
  const auto edits = parse_edits(in);
  ASSERT_EQ(edits.size(), 3u);
  EXPECT_EQ(edits[0].x, 1);
  EXPECT_EQ(edits[0].y, 2);
  EXPECT_EQ(edits[0].value, 0.5);
  EXPECT_EQ(edits[1].c, 1);
  EXPECT_EQ(edits[1].value, 1.0);
  EXPECT_EQ(edits[2].x, 0);
}

TEST(ParseEditsTest, MalformedLinesNameTheLine) {
  for (const char* text : {"1,2,0\n", "1,2,0,0.5,9\n", "a,2,0,0.5\n", "1,2,0,x\n", "1.5,2,0,0.5\n"}) {
    std::istringstream in(std::string("0,0,0,0\n") + text);
    try {
      parse_edits(in);
      ADD_FAILURE() << "accepted " << text;
    } catch (const FormatError& e) {
      EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
    }
  }
}

TEST(ValidateEditsTest, CoordinatesAndValues) {
  const ImageShape shape{4, 3, 2};
  EXPECT_NO_THROW(validate_edits({{3, 2, 1, 0.0}, {0, 0, 0, 1.0}}, shape));
  EXPECT_THROW(validate_edits({{4, 0, 0, 0.5}}, shape), std::out_of_range);
  EXPECT_THROW(validate_edits({{0, 3, 0, 0.5}}, shape), std::out_of_range);
  EXPECT_THROW(validate_edits({{0, 0, 2, 0.5}}, shape), std::out_of_range);
  EXPECT_THROW(validate_edits({{-1, 0, 0, 0.5}}, shape), std::out_of_range);
  EXPECT_THROW(validate_edits({{0, 0, 0, 1.5}}, shape), std::invalid_argument);
  EXPECT_THROW(validate_edits({{0, 0, 0, -0.1}}, shape), std::invalid_argument);
  EXPECT_THROW(validate_edits({{0, 0, 0, std::numeric_limits<double>::quiet_NaN()}}, shape),
               std::invalid_argument);
}

TEST(ApplyEditsTest, EmptyEditReturnsTheBase) {
  const auto dist = random_dist(8, 9, 2);
  const Vector base = sample(dist, random_noise(9, 9, 2));
  EXPECT_EQ(apply_edits(dist, base, {}, {3, 3, 1}), base);
}

TEST(ApplyEditsTest, SinglePixelMatchesDenseConditionalMean) {
  const ImageShape shape{4, 4, 1};
  const auto dist = random_dist(10, 16, 3);
  const Vector base = sample(dist, random_noise(11, 16, 3));
  const Index target = shape.index(2, 1, 0);
  const Vector after = apply_edits(dist, base, {{2, 1, 0, 0.25}}, shape);

  const Eigen::MatrixXd sigma = oracle::dense_covariance(dist.cov_factor(), dist.cov_diag());
  const Vector rest = oracle::conditional_mean(dist.mu(), sigma, {target}, Vector::Constant(1, 0.25));
  EXPECT_EQ(after[target], 0.25);
  for (Index i = 0, j = 0; i < 16; ++i) {
    if (i == target) continue;
    EXPECT_NEAR(after[i], rest[j], 1e-12 * std::max(1.0, std::abs(rest[j])));
    ++j;
  }
}

TEST(ApplyEditsTest, RepeatedPixelTakesItsLastValue) {
  const ImageShape shape{3, 3, 1};
  const auto dist = random_dist(12, 9, 2);
  const Vector base = dist.mu();
  EXPECT_EQ(apply_edits(dist, base, {{1, 1, 0, 0.9}, {0, 0, 0, 0.1}, {1, 1, 0, 0.3}}, shape),
            apply_edits(dist, base, {{0, 0, 0, 0.1}, {1, 1, 0, 0.3}}, shape));
}

TEST(ApplyEditsTest, EveryPixelEditedGivesTheEdits) {
  const ImageShape shape{2, 1, 1};
  const auto dist = random_dist(13, 2, 1);
  const Vector out = apply_edits(dist, dist.mu(), {{1, 0, 0, 0.7}, {0, 0, 0, 0.2}}, shape);
  EXPECT_EQ(out, (Vector(2) << 0.2, 0.7).finished());
}

TEST(ApplyEditsTest, LimitAndShapeErrors) {
  const ImageShape shape{3, 3, 1};
  const auto dist = random_dist(14, 9, 2);
  ConditionOptions options;
  options.max_edits = 1;
  EXPECT_THROW(apply_edits(dist, dist.mu(), {{0, 0, 0, 0.5}, {1, 0, 0, 0.5}}, shape, options),
               LimitExceededError);
  EXPECT_THROW(apply_edits(dist, dist.mu(), {{0, 0, 0, 0.5}}, {2, 2, 1}), DimensionError);
}

}  // namespace
}  // namespace structobs
