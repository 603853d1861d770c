#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "mtgaze/errors.hpp"
#include "mtgaze/gaze_math.hpp"

using namespace mtgaze;
using std::numbers::pi;

namespace {

Tensor col(std::vector<float> v) {
  const auto n = static_cast<std::int64_t>(v.size());
  return Tensor({n, 1}, std::move(v));
}

}  // namespace

TEST(AnglesToVector, Anchors) {
  auto g = angles_to_vector({0.0, 0.0});
  EXPECT_EQ(g.x, 0.0);
  EXPECT_EQ(g.y, 0.0);
  EXPECT_EQ(g.z, 1.0);
  g = angles_to_vector({pi / 2, 0.0});
  EXPECT_NEAR(g.x, 1.0, 1e-12);
  EXPECT_NEAR(g.y, 0.0, 1e-12);
  EXPECT_NEAR(g.z, 0.0, 1e-12);
  g = angles_to_vector({0.0, pi / 2 - 1e-7});
  EXPECT_NEAR(g.x, 0.0, 1e-6);
  EXPECT_NEAR(g.y, 1.0, 1e-6);
  EXPECT_NEAR(g.z, 0.0, 1e-6);
}

TEST(AnglesToVector, UnitNormAndRejectsPole) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> yaw(-pi, pi), pitch(-1.57, 1.57);
  for (int i = 0; i < 10000; ++i) {
    const auto g = angles_to_vector({yaw(rng), pitch(rng)});
    ASSERT_NEAR(std::sqrt(g.x * g.x + g.y * g.y + g.z * g.z), 1.0, 1e-6);
    ASSERT_NEAR(g.norm(), 1.0, 1e-6);
  }
  EXPECT_THROW(angles_to_vector({0.0, pi / 2}), ValidationError);
  EXPECT_THROW(angles_to_vector({0.3, -pi / 2}), ValidationError);
}

TEST(AngularError, Examples) {
  const GazeVector z{0, 0, 1};
  EXPECT_EQ(angular_error(z, z), 0.0);
  EXPECT_NEAR(angular_error(z, GazeVector{1, 0, 0}), 90.0, 1e-6);
  EXPECT_NEAR(angular_error(z, GazeVector{0, 0, -1}), 180.0, 1e-6);
  const double t = 10.0 * pi / 180.0;
  EXPECT_NEAR(angular_error(z, GazeVector{std::sin(t), 0, std::cos(t)}), 10.0, 1e-6);
  EXPECT_THROW(angular_error(z, GazeVector{0, 0, 0}), ValidationError);
}

TEST(AngularError, SymmetricScaleInvariantSelfZero) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> a(-1.2, 1.2), s(0.01, 100.0);
  for (int i = 0; i < 2000; ++i) {
    const GazeAngles p{a(rng), a(rng)}, q{a(rng), a(rng)};
    const auto g = angles_to_vector(p), h = angles_to_vector(q);
    const double e = angular_error(g, h);
    ASSERT_EQ(e, angular_error(h, g));
    const double k = s(rng);
    ASSERT_NEAR(angular_error(GazeVector{k * g.x, k * g.y, k * g.z}, h), e, 1e-6);
    ASSERT_EQ(angular_error(g, g), 0.0);
    ASSERT_EQ(angular_error(p, p), 0.0);
    ASSERT_GE(e, 0.0);
    ASSERT_LE(e, 180.0);
  }
}

TEST(Loss, DocumentedExample) {
  Tensor target({1, 2}, std::vector<float>{0, 0});
  Tensor joint({1, 2}, std::vector<float>{0.2f, 0.1f});
  LossTerms l = multitask_loss(joint, col({0.2f}), col({0.1f}), joint, target);
  EXPECT_NEAR(l.yaw[0], 0.2, 1e-7);
  EXPECT_NEAR(l.pitch[0], 0.1, 1e-7);
  EXPECT_NEAR(l.joint[0], 0.15, 1e-7);
  EXPECT_NEAR(l.total[0], 0.225, 1e-7);
}

TEST(Loss, ZeroAtTargetAndHomogeneous) {
  std::mt19937_64 rng(3);
  std::normal_distribution<float> d;
  Tensor target({5, 2});
  for (auto& v : target.data()) v = d(rng);
  std::vector<float> ty, tp;
  for (int n = 0; n < 5; ++n) {
    ty.push_back(target[n * 2]);
    tp.push_back(target[n * 2 + 1]);
  }
  LossTerms zero = multitask_loss(target, col(ty), col(tp), target, target);
  EXPECT_EQ(zero.total[0], 0.0f);

  // errors of exactly representable sizes so doubling is exact
  Tensor tz({5, 2});
  Tensor j1({5, 2}), j2({5, 2});
  std::vector<float> y1, p1, y2, p2;
  for (int n = 0; n < 5; ++n) {
    const float e = 0.125f * static_cast<float>(n + 1);
    j1[n * 2] = e;
    j1[n * 2 + 1] = -e;
    j2[n * 2] = 2 * e;
    j2[n * 2 + 1] = -2 * e;
    y1.push_back(-e / 2);
    p1.push_back(e / 4);
    y2.push_back(-e);
    p2.push_back(e / 2);
  }
  LossTerms a = multitask_loss(j1, col(y1), col(p1), j1, tz);
  LossTerms b = multitask_loss(j2, col(y2), col(p2), j2, tz);
  EXPECT_FLOAT_EQ(b.total[0], 2 * a.total[0]);
  EXPECT_FLOAT_EQ(b.yaw[0], 2 * a.yaw[0]);
  EXPECT_FLOAT_EQ(b.pitch[0], 2 * a.pitch[0]);
  EXPECT_FLOAT_EQ(b.joint[0], 2 * a.joint[0]);
  EXPECT_GT(a.total[0], 0.0f);
}

TEST(Loss, AcceptsFlatHeadsAndRejectsBatchMismatch) {
  Tensor t({2, 2}, 0.0f);
  Tensor flat({2}, std::vector<float>{0.5f, -0.5f});
  LossTerms l = multitask_loss(t, flat, flat, t, t);
  EXPECT_NEAR(l.yaw[0], 0.5, 1e-7);
  EXPECT_THROW(multitask_loss(t, col({0.1f}), flat, t, t), ShapeError);
  EXPECT_THROW(multitask_loss(Tensor({3, 2}), flat, flat, t, t), ShapeError);
  EXPECT_THROW(multitask_loss(t, flat, flat, Tensor({2, 3}), t), ShapeError);
}

TEST(Loss, WeightsApply) {
  Tensor target({1, 2}, std::vector<float>{0, 0});
  Tensor joint({1, 2}, std::vector<float>{0.2f, 0.1f});
  LossTerms l = multitask_loss(joint, col({0.2f}), col({0.1f}), joint, target, LossWeights{1.0f, 0.0f});
  EXPECT_NEAR(l.total[0], 0.15, 1e-7);
}

TEST(ZeroPredictor, MatchesMonteCarlo) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-0.6, 0.6);
  double s = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) s += angular_error(GazeAngles{u(rng), u(rng)}, GazeAngles{0, 0});
  EXPECT_NEAR(zero_predictor_error(0.6), s / n, 0.05);
  EXPECT_THROW(zero_predictor_error(0.6, 1), ValidationError);
}
