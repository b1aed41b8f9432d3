#include <gtest/gtest.h>

#include <numbers>

#include "branchflow/potential.hpp"
#include "support.hpp"

using namespace branchflow;
using testing_support::rel_diff;

namespace {

// Direct transcription of V = -A/(2 pi s^2) sum exp(-|x - mu|^2 / w).
double reference_value(const std::vector<Vec2>& means, double A, double s, double w, const Vec2& x) {
  double v = 0.0;
  for (const auto& m : means) v += std::exp(-((x[0] - m[0]) * (x[0] - m[0]) + (x[1] - m[1]) * (x[1] - m[1])) / w);
  return -A / (2.0 * std::numbers::pi * s * s) * v;
}

}  // namespace

TEST(Potential, ValueMatchesDirectFormula) {
  const auto p = sample_potential(7, {});
  const double w = 2.0 * std::numbers::pi * 0.01;
  Rng rng(1);
  for (int i = 0; i < 50; ++i) {
    const Vec2 x{rng.uniform(-0.5, 1.5), rng.uniform(-0.5, 1.5)};
    EXPECT_LT(rel_diff(p.value(x), reference_value(p.means(), 0.1, 0.1, w, x), 1e-300), 1e-14);
  }
}

TEST(Potential, ConventionalExponentUsesTwoSigmaSquared) {
  PotentialParams params;
  params.conventional_exponent = true;
  const auto p = sample_potential(7, params);
  EXPECT_DOUBLE_EQ(p.exponent_width(), 0.02);
  const Vec2 x{0.3, 0.4};
  EXPECT_LT(rel_diff(p.value(x), reference_value(p.means(), 0.1, 0.1, 0.02, x), 1e-300), 1e-14);
}

TEST(Potential, SingleBumpDepth) {
  RandomPotential p({{0.5, 0.5}}, 0.1, 0.1, 0, {});
  EXPECT_NEAR(p.value({0.5, 0.5}), -0.1 / (2 * std::numbers::pi * 0.01), 1e-15);
  EXPECT_EQ(p.gradient({0.5, 0.5})[0], 0.0);
}

TEST(Potential, GradientAndHessianMatchFiniteDifferences) {
  for (bool conv : {false, true}) {
    PotentialParams params;
    params.conventional_exponent = conv;
    const auto p = sample_potential(11, params);
    Rng rng(2);
    for (int i = 0; i < 30; ++i) {
      const Vec2 x{rng.uniform(0, 1), rng.uniform(0, 1)};
      const double h = 1e-6;
      const auto g = p.gradient(x);
      const double gx = (p.value({x[0] + h, x[1]}) - p.value({x[0] - h, x[1]})) / (2 * h);
      const double gy = (p.value({x[0], x[1] + h}) - p.value({x[0], x[1] - h})) / (2 * h);
      EXPECT_LT(rel_diff(g[0], gx, 1e-3), 1e-6);
      EXPECT_LT(rel_diff(g[1], gy, 1e-3), 1e-6);

      const auto H = p.hessian(x);
      const auto gxp = p.gradient({x[0] + h, x[1]}), gxm = p.gradient({x[0] - h, x[1]});
      const auto gyp = p.gradient({x[0], x[1] + h}), gym = p.gradient({x[0], x[1] - h});
      EXPECT_LT(rel_diff(H[0], (gxp[0] - gxm[0]) / (2 * h), 1e-2), 1e-6);
      EXPECT_LT(rel_diff(H[1], (gxp[1] - gxm[1]) / (2 * h), 1e-2), 1e-6);
      EXPECT_LT(rel_diff(H[1], (gyp[0] - gym[0]) / (2 * h), 1e-2), 1e-6);
      EXPECT_LT(rel_diff(H[2], (gyp[1] - gym[1]) / (2 * h), 1e-2), 1e-6);
    }
  }
}

TEST(Potential, EmptyPotentialIsFlat) {
  const auto p = sample_potential(3, {0});
  EXPECT_EQ(p.value({0.2, 0.7}), 0.0);
  EXPECT_EQ(p.gradient({0.2, 0.7}), (Vec2{0.0, 0.0}));
}

TEST(Potential, SamplingIsDeterministicAndInsideRect) {
  PotentialParams params;
  params.count = 200;
  params.sampling_rect = {-1.0, 2.0, 3.0, 2.5};
  const auto a = sample_potential(42, params);
  const auto b = sample_potential(42, params);
  const auto c = sample_potential(43, params);
  EXPECT_EQ(a.means(), b.means());
  EXPECT_NE(a.means(), c.means());
  for (const auto& m : a.means()) EXPECT_TRUE(params.sampling_rect.contains(m));
}

TEST(Potential, InvalidParametersRejected) {
  PotentialParams bad;
  bad.sigma = 0.0;
  EXPECT_THROW(sample_potential(0, bad), ConfigError);
  PotentialParams neg;
  neg.count = -1;
  EXPECT_THROW(sample_potential(0, neg), ConfigError);
  PotentialParams flat;
  flat.sampling_rect = {0, 0, 0, 1};
  EXPECT_THROW(sample_potential(0, flat), ConfigError);
  EXPECT_THROW(RandomPotential({}, 1e307, 1e-3, 0, {}), ConfigError);
}

TEST(Potential, JsonRoundTripKeepsHash) {
  const auto p = sample_potential(5, {});
  const auto q = RandomPotential::from_json(nlohmann::json::parse(p.to_json().dump()));
  EXPECT_EQ(p.means(), q.means());
  EXPECT_EQ(p.content_hash(), q.content_hash());
  EXPECT_EQ(p.content_hash().size(), 16u);
  EXPECT_NE(p.content_hash(), sample_potential(6, {}).content_hash());
}

TEST(Potential, JsonCountMismatchRejected) {
  auto j = sample_potential(5, {}).to_json();
  j["K"] = 3;
  EXPECT_THROW(RandomPotential::from_json(j), ConfigError);
}
