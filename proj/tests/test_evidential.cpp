#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "eviatta/evidential.hpp"
#include "support.hpp"

using namespace eviatta;

namespace {

constexpr Real kEulerGamma = 0.57721566490153286060651209;

UncertaintyMaps maps_for(std::vector<Real> alpha) {
  const std::size_t c = alpha.size();
  return decompose(field_from_alpha(1, 1, c, std::move(alpha)));
}

Real entropy(const std::vector<Real>& p) {
  Real h = 0;
  for (Real q : p)
    if (q > 0) h -= q * std::log(q);
  return h;
}

}  // namespace

TEST(Digamma, IntegersMatchHarmonicNumbers) {
  Real harmonic = 0;
  for (int n = 1; n <= 60; ++n) {
    EXPECT_NEAR(digamma(n), -kEulerGamma + harmonic, 1e-13) << n;
    harmonic += 1.0 / n;
  }
}

TEST(Digamma, HalfIntegersMatchClosedForm) {
  Real acc = 0;
  for (int n = 0; n <= 30; ++n) {
    if (n > 0) acc += 2.0 / (2 * n - 1);
    EXPECT_NEAR(digamma(n + 0.5), -kEulerGamma - 2 * std::numbers::ln2 + acc, 1e-13) << n;
  }
}

TEST(Digamma, RejectsNonPositive) {
  EXPECT_THROW(digamma(0), std::domain_error);
  EXPECT_THROW(digamma(-1.5), std::domain_error);
}

TEST(Evidence, ZeroLogitsGiveUniformPosterior) {
  const auto f = evidence_from_logits(Tensor::from({1, 1, 2}, {0, 0}));
  EXPECT_DOUBLE_EQ(f.alpha[0], 2);
  EXPECT_DOUBLE_EQ(f.alpha[1], 2);
  EXPECT_DOUBLE_EQ(f.strength[0], 4);
  EXPECT_DOUBLE_EQ(f.posterior[0], 0.5);
}

TEST(Evidence, LogThreeLogit) {
  const auto f = evidence_from_logits(Tensor::from({1, 1, 2}, {std::log(3.0), 0}));
  EXPECT_NEAR(f.alpha[0], 4, 1e-12);
  EXPECT_DOUBLE_EQ(f.alpha[1], 2);
  EXPECT_NEAR(f.posterior[0], 2.0 / 3, 1e-12);
  EXPECT_NEAR(f.posterior[1], 1.0 / 3, 1e-12);
}

TEST(Evidence, LargeLogitsClamp) {
  const auto f = evidence_from_logits(Tensor::from({1, 1, 2}, {50, -50}));
  EXPECT_DOUBLE_EQ(f.alpha[0], std::exp(30.0) + 1);
  EXPECT_DOUBLE_EQ(f.alpha[1], std::exp(-30.0) + 1);
  EXPECT_TRUE(std::isfinite(f.strength[0]));
}

TEST(Evidence, WrongRankThrows) {
  EXPECT_THROW(evidence_from_logits(Tensor::zeros({4, 2})), ShapeError);
}

TEST(Overall, Examples) {
  EXPECT_NEAR(maps_for({2, 2}).overall.values[0], std::numbers::ln2, 1e-12);
  EXPECT_NEAR(maps_for({1, 1}).overall.values[0], std::numbers::ln2, 1e-12);
  EXPECT_NEAR(maps_for({1001, 1}).overall.values[0], entropy({1001.0 / 1002, 1.0 / 1002}), 1e-12);
  EXPECT_NEAR(maps_for({1001, 1}).overall.values[0], 0.00790, 5e-5);
}

TEST(Data, ExactRecurrenceValues) {
  EXPECT_NEAR(maps_for({2, 2}).data.values[0], 7.0 / 12, 1e-9);
  EXPECT_NEAR(maps_for({1, 1}).data.values[0], 0.5, 1e-9);
}

TEST(Distribution, Examples) {
  EXPECT_NEAR(maps_for({2, 2}).dis.values[0], std::numbers::ln2 - 7.0 / 12, 1e-9);
  EXPECT_NEAR(maps_for({1, 1}).dis.values[0], std::numbers::ln2 - 0.5, 1e-9);
  EXPECT_NEAR(maps_for({1, 1}).dis.values[0], 0.19315, 1e-5);
  EXPECT_LT(maps_for({1000, 1000}).dis.values[0], 1e-3);
}

TEST(Distribution, MaximalAtZeroEvidenceAmongUniformPosteriors) {
  const Real at_zero = maps_for({1, 1}).dis.values[0];
  for (Real a : {1.5, 2.0, 5.0, 50.0}) EXPECT_LT(maps_for({a, a}).dis.values[0], at_zero);
}

TEST(MonteCarlo, AgreesWithClosedForm) {
  const auto two = mc_dirichlet_oracle({2, 2}, 1'000'000, 1);
  EXPECT_NEAR(two.mean, 7.0 / 12, 0.002);
  const auto one = mc_dirichlet_oracle({1, 1}, 1'000'000, 2);
  EXPECT_NEAR(one.mean, 0.5, 0.002);
  const auto three = mc_dirichlet_oracle({5, 5, 5}, 1'000'000, 3);
  const Real closed = digamma(16) - digamma(6);
  EXPECT_LT(std::abs(three.mean - closed), 3 * three.std_err);
  EXPECT_NEAR(maps_for({5, 5, 5}).data.values[0], closed, 1e-12);
}

TEST(MonteCarlo, RejectsBadAlpha) {
  EXPECT_THROW(mc_dirichlet_oracle({}, 10, 0), std::invalid_argument);
  EXPECT_THROW(mc_dirichlet_oracle({1, 0}, 10, 0), std::invalid_argument);
}

TEST(Decomposition, IdentityAndBoundsOnRandomFields) {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<Real> logit(-12, 12);
  std::uniform_int_distribution<std::size_t> classes(2, 5);
  Real worst = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t C = classes(rng);
    std::vector<Real> z(4 * 4 * C);
    for (auto& v : z) v = logit(rng);
    const auto m = decompose(evidence_from_logits(Tensor::from({4, 4, C}, z)));
    for (std::size_t p = 0; p < 16; ++p) {
      worst = std::max(worst, std::abs(m.overall.values[p] - (m.data.values[p] + m.dis.values[p])));
      ASSERT_GE(m.dis.values[p], 0);
      ASSERT_GE(m.data.values[p], 0);
      ASSERT_LE(m.overall.values[p], std::log(static_cast<Real>(C)) + 1e-12);
    }
  }
  EXPECT_LT(worst, 1e-9);
}

TEST(Decomposition, MoreEvidenceAtFixedPosteriorLowersDistributionUncertainty) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<Real> a(1, 6);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Real> alpha{a(rng), a(rng), a(rng)};
    const auto base = maps_for(alpha);
    for (auto& v : alpha) v *= 3;
    const auto scaled = maps_for(alpha);
    EXPECT_NEAR(scaled.overall.values[0], base.overall.values[0], 1e-12);
    EXPECT_LT(scaled.dis.values[0], base.dis.values[0]);
    EXPECT_GT(scaled.data.values[0], base.data.values[0]);
  }
}

TEST(ImageScore, Examples) {
  EXPECT_DOUBLE_EQ(image_distribution_score(RealMap(3, 5, 0.2)), 0.2);
  EXPECT_DOUBLE_EQ(image_distribution_score(RealMap(2, 2, std::vector<Real>{0, 0, 0, 0.4})), 0.1);
}

TEST(ImageScore, MatchesCompensatedSum) {
  std::mt19937_64 rng(3);
  const RealMap m = eviatta::testing::random_map(64, 64, rng, 0, 0.7);
  Real s = 0, comp = 0;
  for (Real v : m.values) {
    const Real y = v - comp;
    const Real t = s + y;
    comp = (t - s) - y;
    s = t;
  }
  EXPECT_NEAR(image_distribution_score(m), s / 4096.0, 1e-12);
}
