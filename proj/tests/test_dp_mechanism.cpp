// Copyright 2026 The dpfedtab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <cmath>

#include <gtest/gtest.h>

#include "dpfedtab/dp_mechanism.hpp"

namespace dpfedtab::dp {
namespace {

TEST(Clip, UnderThresholdUnchanged) {
  GradientVector g({0.3, 0.4});
  auto c = clip(g, 1.0);
  EXPECT_EQ(c.values(), g.values());
}

TEST(Clip, ThreeFourFive) {
  auto c = clip(GradientVector({3.0, 4.0}), 1.0);
  EXPECT_DOUBLE_EQ(c.values()[0], 0.6);
  EXPECT_DOUBLE_EQ(c.values()[1], 0.8);
  EXPECT_LE(c.norm(), 1.0);
}

TEST(Clip, NormNeverExceedsBound) {
  Rng rng(6);
  for (int i = 0; i < 2000; ++i) {
    std::vector<double> v(1 + i % 37);
    for (auto& x : v) x = 10.0 * standard_normal(rng);
    const double c = 0.1 + uniform01(rng);
    EXPECT_LE(clip(GradientVector(v), c).norm(), c);
  }
}

TEST(Clip, RejectsNonPositiveBoundAndNonFinite) {
  EXPECT_THROW(clip(GradientVector({1.0}), 0.0), ValidationError);
  EXPECT_THROW(clip(GradientVector({std::nan("")}), 1.0), DivergenceError);
}

TEST(Privatize, NoNoiseIsClippedMean) {
  std::vector<GradientVector> g{GradientVector({3.0, 4.0}), GradientVector({0.2, 0.0})};
  Rng rng(1);
  auto p = privatize(g, 1.0, 0.0, rng);
  EXPECT_DOUBLE_EQ(p.values()[0], (0.6 + 0.2) / 2.0);
  EXPECT_DOUBLE_EQ(p.values()[1], 0.8 / 2.0);
}

TEST(Privatize, UnitNoiseHasUnitStd) {
  std::vector<GradientVector> g{GradientVector(std::vector<double>(100000, 0.0))};
  Rng rng(2);
  auto p = privatize(g, 1.0, 1.0, rng);
  double s = 0.0, s2 = 0.0;
  for (double v : p.values()) {
    s += v;
    s2 += v * v;
  }
  const double n = static_cast<double>(p.size());
  const double sd = std::sqrt(s2 / n - (s / n) * (s / n));
  EXPECT_NEAR(sd, 1.0, 0.02);
  EXPECT_NEAR(s / n, 0.0, 0.02);
}

TEST(Privatize, SameSeedSameOutput) {
  std::vector<GradientVector> g{GradientVector({1.0, 2.0, 3.0})};
  Rng a(3), b(3);
  EXPECT_EQ(privatize(g, 1.0, 0.7, a).values(), privatize(g, 1.0, 0.7, b).values());
}

TEST(Privatize, ExpectedBatchNormalizer) {
  std::vector<GradientVector> g{GradientVector({0.5}), GradientVector({0.5})};
  Rng rng(0);
  EXPECT_DOUBLE_EQ(privatize(g, 1.0, 0.0, rng, 4.0).values()[0], 0.25);
  // An empty Poisson batch still yields a (zero) gradient of known size.
  EXPECT_EQ(privatize({}, 1.0, 0.0, rng, 4.0, false, 3).values(), (std::vector<double>{0, 0, 0}));
  EXPECT_THROW(privatize({}, 1.0, 0.0, rng), ValidationError);
}

TEST(Privatize, LiteralNoiseIsAddedAfterAveraging) {
  std::vector<GradientVector> g{GradientVector(std::vector<double>(50000, 0.0))};
  Rng rng(4);
  auto p = privatize(g, 1.0, 0.5, rng, 10.0, true);
  double s2 = 0.0;
  for (double v : p.values()) s2 += v * v;
  EXPECT_NEAR(std::sqrt(s2 / 50000.0), 0.5, 0.01);
}

TEST(Rdp, FullBatchClosedForm) {
  EXPECT_DOUBLE_EQ(rdp_subsampled_gaussian(1.0, 1.0, 2.0), 1.0);
  EXPECT_DOUBLE_EQ(rdp_subsampled_gaussian(1.0, 2.0, 8.0), 1.0);
}

TEST(Rdp, SubsampledOrderTwoMatchesBinomialSum) {
  // E[(p/q)^2] = (1-q)^2 + 2q(1-q) + q^2 e^{1/sigma^2} = 1 + q^2 (e^{1/sigma^2} - 1)
  const long double q = 0.01L;
  const long double expected = std::log1p(q * q * (std::exp(1.0L) - 1.0L));
  EXPECT_NEAR(rdp_subsampled_gaussian(0.01, 1.0, 2.0), static_cast<double>(expected), 1e-12);
  EXPECT_NEAR(rdp_subsampled_gaussian(0.01, 1.0, 2.0), 1.7181342207e-4, 1e-12);
}

TEST(Rdp, SubsampledOrderThreeMatchesBinomialSum) {
  const double q = 0.05, s = 1.3;
  double m = 0.0;
  const double c[] = {1, 3, 3, 1};
  for (int k = 0; k <= 3; ++k) {
    m += c[k] * std::pow(1 - q, 3 - k) * std::pow(q, k) * std::exp(k * (k - 1) / (2 * s * s));
  }
  EXPECT_NEAR(rdp_subsampled_gaussian(q, s, 3.0), std::log(m) / 2.0, 1e-13);
}

TEST(Rdp, FractionalOrderBetweenNeighbours) {
  const double lo = rdp_subsampled_gaussian(0.02, 1.0, 4.0);
  const double hi = rdp_subsampled_gaussian(0.02, 1.0, 5.0);
  const double mid = rdp_subsampled_gaussian(0.02, 1.0, 4.5);
  EXPECT_GE(mid, std::min(lo, hi) - 1e-15);
  EXPECT_LE(mid, std::max(lo, hi) + 1e-15);
}

TEST(Accountant, CompositionIsExactlyAdditive) {
  RdpAccountant one, many, grouped;
  one.step(0.03, 1.1);
  for (int i = 0; i < 37; ++i) many.step(0.03, 1.1);
  grouped.compose(0.03, 1.1, 37);
  for (std::size_t i = 0; i < one.orders().size(); ++i) {
    EXPECT_EQ(many.rdp()[i], 37.0 * one.rdp()[i]);
    EXPECT_EQ(grouped.rdp()[i], many.rdp()[i]);
  }
  EXPECT_EQ(many.steps(), 37u);
}

TEST(Accountant, EmptyAccountantRejectsConversion) {
  RdpAccountant a;
  EXPECT_THROW(a.epsilon(1e-5), ValidationError);
}

TEST(Accountant, JsonRoundTrip) {
  RdpAccountant a;
  a.compose(0.01, 1.5, 100);
  a.compose(0.02, 0.9, 3);
  auto b = RdpAccountant::from_json(a.to_json());
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.epsilon(1e-5).epsilon, b.epsilon(1e-5).epsilon);
}

// Golden-section minimum of alpha/2 + log(1/delta)/(alpha - 1).
double continuous_full_batch_epsilon(double delta, double* at) {
  const double g = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = 1.0001, b = 64.0;
  auto f = [&](double x) { return x / 2.0 + std::log(1.0 / delta) / (x - 1.0); };
  for (int i = 0; i < 200; ++i) {
    const double c = b - g * (b - a), d = a + g * (b - a);
    if (f(c) < f(d)) b = d; else a = c;
  }
  *at = 0.5 * (a + b);
  return f(*at);
}

TEST(Epsilon, SingleFullBatchStep) {
  RdpAccountant a;
  a.step(1.0, 1.0);
  double at = 0.0;
  const double oracle = continuous_full_batch_epsilon(1e-5, &at);
  EXPECT_NEAR(at, 5.80, 0.01);
  EXPECT_NEAR(oracle, 5.2985, 1e-4);
  auto r = a.epsilon(1e-5);
  // The order grid has spacing 0.25 below 10, so the grid minimum sits a
  // hair above the continuous one.
  EXPECT_GE(r.epsilon, oracle);
  EXPECT_LT(r.epsilon, oracle + 1e-3);
  EXPECT_NEAR(r.order, 5.75, 1e-12);
}

TEST(Epsilon, DecreasesWhenSigmaDoubles) {
  for (double s : {0.6, 1.0, 2.0, 4.0}) {
    EXPECT_LT(epsilon_after(0.02, 2.0 * s, 500, 1e-5), epsilon_after(0.02, s, 500, 1e-5));
  }
}

TEST(Epsilon, NonDecreasingInSteps) {
  double prev = 0.0;
  for (std::uint64_t k : {1u, 2u, 10u, 100u, 1000u}) {
    const double e = epsilon_after(0.02, 1.0, k, 1e-5);
    EXPECT_GE(e, prev);
    prev = e;
  }
}

TEST(Calibrate, RoundTripLandsJustUnderTarget) {
  const double q = 16.0 / 667.0, delta = 1.0 / 667.0;
  for (double target : {0.2, 1.0, 10.0}) {
    const double sigma = calibrate_sigma(target, delta, q, 1000);
    const double eps = epsilon_after(q, sigma, 1000, delta);
    EXPECT_LE(eps, target) << target;
    EXPECT_GE(eps, 0.95 * target) << target;
  }
}

TEST(Calibrate, MonotoneInTargetAndSteps) {
  const double q = 0.02, delta = 1e-4;
  const double s02 = calibrate_sigma(0.2, delta, q, 500);
  const double s1 = calibrate_sigma(1.0, delta, q, 500);
  const double s10 = calibrate_sigma(10.0, delta, q, 500);
  EXPECT_GT(s02, s1);
  EXPECT_GT(s1, s10);
  EXPECT_GT(calibrate_sigma(1.0, delta, q, 5000), s1);
}

TEST(Calibrate, RejectsBadTargets) {
  EXPECT_THROW(calibrate_sigma(0.0, 1e-5, 0.01, 10), ValidationError);
  EXPECT_THROW(calibrate_sigma(kInfinity, 1e-5, 0.01, 10), ValidationError);
}

TEST(Config, Validation) {
  DpConfig c;
  EXPECT_FALSE(c.enabled());
  c.target_epsilon = 1.0;
  EXPECT_TRUE(c.enabled());
  c.clip_norm = 0.0;
  EXPECT_THROW(c.validate(), ValidationError);
}

}  // namespace
}  // namespace dpfedtab::dp
