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
#include <numeric>

#include <gtest/gtest.h>

#include "dpfedtab/eval_metrics.hpp"
#include "dpfedtab/fixtures.hpp"

namespace dpfedtab::metrics {
namespace {

using data::ColumnKind;

std::vector<std::string> strings(std::initializer_list<const char*> v) { return {v.begin(), v.end()}; }

TEST(Wasserstein, IdenticalColumns) {
  std::vector<double> a{3, 1, 4, 1, 5, 9, 2, 6};
  EXPECT_DOUBLE_EQ(wasserstein_similarity(a, a), 1.0);
}

TEST(Wasserstein, MaximalSeparation) {
  std::vector<double> a(20, 0.0), b(30, 1.0);
  EXPECT_DOUBLE_EQ(wasserstein_similarity(a, b), 0.0);
}

TEST(Wasserstein, ShiftByTenthOfRange) {
  std::vector<double> a, b;
  for (int i = 0; i < 10; ++i) {
    a.push_back(i);
    b.push_back(i + 0.9);
  }
  // W1 of a pure shift is the shift; the joint range grows to 9.9.
  EXPECT_NEAR(wasserstein_similarity(a, b), 1.0 - 0.9 / 9.9, 1e-12);
}

TEST(Wasserstein, UnequalSampleSizes) {
  std::vector<double> a{0, 1, 2, 3}, b{0, 0, 0, 0, 0, 0};
  // W1 = mean |a_i - 0| = 1.5, range 3.
  EXPECT_NEAR(wasserstein_similarity(a, b), 0.5, 1e-12);
}

TEST(Wasserstein, SameConstant) {
  std::vector<double> a(5, 2.0);
  EXPECT_DOUBLE_EQ(wasserstein_similarity(a, a), 1.0);
}

double js_oracle(std::vector<double> p, std::vector<double> q) {
  double js = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = (p[i] + q[i]) / 2;
    if (p[i] > 0) js += 0.5 * p[i] * std::log(p[i] / m) / std::log(2.0);
    if (q[i] > 0) js += 0.5 * q[i] * std::log(q[i] / m) / std::log(2.0);
  }
  return js;
}

TEST(JensenShannon, Identical) {
  auto a = strings({"x", "y", "y", "z"});
  EXPECT_NEAR(js_similarity(a, a), 1.0, 1e-15);
}

TEST(JensenShannon, DisjointSupports) {
  EXPECT_NEAR(js_similarity(strings({"a", "b"}), strings({"c", "d", "c"})), 0.0, 1e-15);
}

TEST(JensenShannon, HalfHalfAgainstPoint) {
  const double expected = 1.0 - js_oracle({0.5, 0.5}, {1.0, 0.0});
  EXPECT_NEAR(expected, 0.6887, 1e-4);
  EXPECT_NEAR(js_similarity(strings({"a", "b"}), strings({"a", "a"})), expected, 1e-12);
}

data::RawTable table(const data::TabularSchema& s, std::vector<std::vector<double>> num,
                     std::vector<std::vector<std::string>> cat) {
  data::RawTable t(s);
  std::size_t ni = 0, ci = 0;
  for (std::size_t c = 0; c < s.size(); ++c) {
    if (s[c].kind == ColumnKind::kNumeric) {
      t.columns[c].numeric = num[ni++];
    } else {
      t.columns[c].categorical = cat[ci++];
    }
  }
  return t;
}

data::TabularSchema num_cat() {
  return data::TabularSchema({{"n", ColumnKind::kNumeric}, {"c", ColumnKind::kCategorical}}, "c");
}

TEST(ColumnFidelity, SelfIsOne) {
  auto t = fixtures::mixture(300, 1);
  EXPECT_NEAR(column_fidelity(t, t).score, 1.0, 1e-15);
}

TEST(ColumnFidelity, MeanOfPerColumnScores) {
  auto real = table(num_cat(), {{0, 1, 2, 3}}, {strings({"a", "a", "b", "b"})});
  auto syn = table(num_cat(), {{0, 0, 0, 0}}, {strings({"a", "a", "a", "a"})});
  const double expected = (0.5 + 1.0 - js_oracle({0.5, 0.5}, {1.0, 0.0})) / 2.0;
  auto f = column_fidelity(real, syn);
  EXPECT_NEAR(f.score, expected, 1e-12);
  EXPECT_NEAR(f.per_column.at("n"), 0.5, 1e-12);
}

TEST(ColumnFidelity, SchemaMismatchRejected) {
  auto a = fixtures::mixture(10, 1);
  auto b = fixtures::separable(10, 1);
  EXPECT_THROW(column_fidelity(a, b), SchemaError);
}

TEST(TheilU, SelfAndIndependent) {
  auto a = strings({"0", "0", "1", "1"});
  auto b = strings({"0", "1", "0", "1"});
  EXPECT_NEAR(theil_u(a, a), 1.0, 1e-15);
  EXPECT_NEAR(theil_u(a, b), 0.0, 1e-15);
  EXPECT_EQ(theil_u(strings({"k", "k"}), strings({"0", "1"})), 1.0);
}

TEST(TheilU, AsymmetricCase) {
  // a determines b but not the other way round.
  auto a = strings({"0", "1", "2", "3"});
  auto b = strings({"x", "x", "y", "y"});
  EXPECT_NEAR(theil_u(b, a), 1.0, 1e-12);                            // H(b | a) = 0
  EXPECT_NEAR(theil_u(a, b), (std::log(4.0) - std::log(2.0)) / std::log(4.0), 1e-12);
}

data::TabularSchema two_num() {
  return data::TabularSchema({{"x", ColumnKind::kNumeric}, {"y", ColumnKind::kNumeric}});
}

TEST(RowFidelity, SelfIsOne) {
  auto t = fixtures::calibration(200, 1);
  auto r = row_fidelity(t, t);
  EXPECT_NEAR(r.score, 1.0, 1e-15);
  // 4 numerics -> 6 pairs, 2 categoricals -> 2 ordered pairs.
  EXPECT_EQ(r.pairs, 8u);
}

TEST(RowFidelity, CorrelatedRealAgainstIndependentSynthetic) {
  Rng rng(3);
  std::vector<double> x(2000), y(2000);
  for (auto& v : x) v = standard_normal(rng);
  for (auto& v : y) v = standard_normal(rng);
  auto real = table(two_num(), {x, x}, {});
  auto syn = table(two_num(), {x, y}, {});
  EXPECT_NEAR(row_fidelity(real, syn).score, 0.0, 0.05);
}

TEST(RowFidelity, ConstantRealColumnSkipped) {
  auto real = table(two_num(), {{1, 2, 3}, {5, 5, 5}}, {});
  auto syn = table(two_num(), {{1, 2, 3}, {1, 2, 3}}, {});
  auto r = row_fidelity(real, syn);
  EXPECT_EQ(r.pairs, 0u);
  EXPECT_EQ(r.skipped, 1u);
  EXPECT_EQ(r.score, 1.0);
  EXPECT_FALSE(r.warnings.empty());
}

TEST(RowFidelity, ConstantSyntheticColumnCountsAsUncorrelated) {
  auto real = table(two_num(), {{1, 2, 3}, {2, 4, 6}}, {});
  auto syn = table(two_num(), {{1, 2, 3}, {5, 5, 5}}, {});
  auto r = row_fidelity(real, syn);
  EXPECT_EQ(r.pairs, 1u);
  EXPECT_NEAR(r.score, 0.0, 1e-12);
  EXPECT_FALSE(r.warnings.empty());
}

TEST(Utility, SeparableSelfTrainingScoresHigh) {
  auto train = fixtures::separable(1000, 3);
  auto test = fixtures::separable(500, 4);
  auto u = utility_score(train, test, 1);
  EXPECT_GE(u.score, 0.95);
  EXPECT_EQ(u.accuracies.size(), 3u);
}

TEST(Utility, IndependentTestLabelsGiveChanceAccuracy) {
  // With test labels independent of everything the classifiers see, any
  // predictor matches a balanced label with probability 1/2.
  auto train = fixtures::separable(1000, 3);
  auto test = fixtures::separable(2000, 4);
  Rng rng(5);
  std::shuffle(test.columns[2].categorical.begin(), test.columns[2].categorical.end(), rng);
  auto u = utility_score(train, test, 1);
  for (const auto& [name, a] : u.accuracies) EXPECT_NEAR(a, 0.5, 0.05) << name;
}

TEST(Utility, SingleClassTrainingTargetIsSkipped) {
  auto train = fixtures::separable(50, 3);
  for (auto& v : train.columns[2].categorical) v = "pos";
  auto u = utility_score(train, fixtures::separable(50, 4), 1);
  EXPECT_EQ(u.score, 0.0);
  EXPECT_TRUE(u.accuracies.empty());
  EXPECT_FALSE(u.warnings.empty());
}

TEST(Utility, MissingTargetRejected) {
  auto t = table(two_num(), {{1, 2}, {3, 4}}, {});
  EXPECT_THROW(utility_score(t, t, 1), ValidationError);
}

TEST(Utility, Deterministic) {
  auto train = fixtures::separable(300, 3);
  auto test = fixtures::separable(100, 4);
  EXPECT_EQ(utility_score(train, test, 9).accuracies, utility_score(train, test, 9).accuracies);
}

AttackOptions attack_options(std::uint64_t seed = 1) {
  AttackOptions o;
  o.n_attacks = 500;
  o.seed = seed;
  return o;
}

TEST(SinglingOut, LeakEverythingIsHighRisk) {
  auto real = fixtures::calibration(500, 11);
  auto r = singling_out_risk(real, real, attack_options());
  EXPECT_GE(r.risk, 0.8);
  EXPECT_LE(r.ci_low, r.risk);
  EXPECT_GE(r.ci_high, r.risk);
}

TEST(SinglingOut, IndependentDrawIsLowRisk) {
  auto real = fixtures::calibration(500, 11);
  auto syn = fixtures::calibration(500, 12);
  EXPECT_LE(singling_out_risk(real, syn, attack_options()).risk, 0.1);
}

TEST(SinglingOut, DegenerateTableWarns) {
  auto t = table(num_cat(), {std::vector<double>(20, 1.0)}, {std::vector<std::string>(20, "a")});
  auto r = singling_out_risk(t, t, attack_options());
  EXPECT_EQ(r.risk, 0.0);
  EXPECT_FALSE(r.warnings.empty());
}

TEST(Linkability, LeakEverythingLinks) {
  auto real = fixtures::calibration(500, 11);
  EXPECT_GE(linkability_risk(real, real, attack_options()).risk, 0.9);
}

TEST(Linkability, DecoupledHalvesDoNotLink) {
  auto real = fixtures::calibration(500, 11);
  auto syn = real;
  // Column set B comes from the next record, cyclically.
  for (std::size_t c = 0; c < syn.schema.size(); c += 2) {
    if (c + 1 >= syn.schema.size()) break;
    auto& col = syn.columns[c + 1];
    if (syn.schema[c + 1].kind == ColumnKind::kNumeric) {
      std::rotate(col.numeric.begin(), col.numeric.begin() + 1, col.numeric.end());
    } else {
      std::rotate(col.categorical.begin(), col.categorical.begin() + 1, col.categorical.end());
    }
  }
  EXPECT_LE(linkability_risk(real, syn, attack_options()).risk, 0.05);
}

TEST(Linkability, ExplicitSplitValidated) {
  auto real = fixtures::calibration(50, 11);
  using Split = std::pair<std::vector<std::size_t>, std::vector<std::size_t>>;
  EXPECT_THROW(linkability_risk(real, real, attack_options(), Split{{0, 1}, {1}}), ValidationError);
  EXPECT_THROW(linkability_risk(real, real, attack_options(), Split{{0}, {9}}), ValidationError);
  EXPECT_GE(linkability_risk(real, real, attack_options(), Split{{0, 2}, {4, 5}}).risk, 0.9);
}

TEST(Inference, LeakEverythingIsHighRisk) {
  auto real = fixtures::calibration(500, 11);
  EXPECT_GE(inference_risk(real, real, attack_options()).risk, 0.8);
}

TEST(Inference, IndependentSecretIsLowRisk) {
  auto real = fixtures::calibration(500, 11);
  auto syn = fixtures::calibration(500, 13);
  auto r = inference_risk(real, syn, attack_options());
  EXPECT_LE(r.risk, 0.1);
  EXPECT_EQ(r.per_column.size(), 6u);
}

TEST(Attacks, FixedSeedsGiveIdenticalRisks) {
  auto real = fixtures::calibration(200, 11);
  auto syn = fixtures::calibration(200, 12);
  EXPECT_EQ(singling_out_risk(real, syn, attack_options(4)).successes,
            singling_out_risk(real, syn, attack_options(4)).successes);
  EXPECT_EQ(linkability_risk(real, syn, attack_options(4)).successes,
            linkability_risk(real, syn, attack_options(4)).successes);
  EXPECT_EQ(inference_risk(real, syn, attack_options(4)).per_column,
            inference_risk(real, syn, attack_options(4)).per_column);
}

TEST(PrivacyScore, MeanOfRisks) {
  EXPECT_EQ(privacy_score(0, 0, 0), 0.0);
  EXPECT_EQ(privacy_score(1, 1, 1), 1.0);
  EXPECT_NEAR(privacy_score(0.3, 0.6, 0.0), 0.3, 1e-15);
  EXPECT_THROW(privacy_score(1.5, 0, 0), ValidationError);
}

TEST(Report, DefinitionalIdentities) {
  auto real = fixtures::mixture(300, 1);
  auto syn = fixtures::mixture(300, 2);
  EvaluateOptions opt;
  opt.attack = attack_options();
  auto m = evaluate(real, syn, opt);
  EXPECT_NEAR(m.privacy_risk, (m.singling_out.risk + m.linkability.risk + m.inference.risk) / 3.0, 1e-12);
  double acc = 0.0;
  for (const auto& [_, a] : m.utility.accuracies) acc += a;
  ASSERT_EQ(m.utility.accuracies.size(), 3u);
  EXPECT_NEAR(m.utility.score, acc / 3.0, 1e-12);
  EXPECT_NEAR(m.fidelity, (m.column.score + m.row.score) / 2.0, 1e-12);
  EXPECT_NEAR(m.privacy_protection(), 1.0 - m.privacy_risk, 1e-15);
}

TEST(Report, JsonRoundTripIsIdentical) {
  auto real = fixtures::mixture(200, 1);
  auto syn = fixtures::mixture(200, 2);
  EvaluateOptions opt;
  opt.attack = attack_options();
  auto m = evaluate(real, syn, opt);
  m.dataset = "mixture";
  m.config_hash = "0123456789abcdef";
  m.seeds = {{"model", 1}, {"data", 2}, {"attack", 3}};
  const std::string once = m.to_json().dump();
  const std::string twice = MetricsReport::from_json(nlohmann::json::parse(once)).to_json().dump();
  EXPECT_EQ(once, twice);
}

TEST(Report, SelfEvaluationAgainstNull) {
  auto real = fixtures::calibration(500, 11);
  auto null = fixtures::calibration(500, 21);
  EvaluateOptions opt;
  opt.attack = attack_options();
  auto self = evaluate(real, real, opt);
  auto other = evaluate(real, null, opt);
  EXPECT_NEAR(self.fidelity, 1.0, 1e-12);
  EXPECT_GE(self.privacy_risk, 0.8);
  EXPECT_LE(other.privacy_risk, 0.1);
  EXPECT_LT(other.fidelity, self.fidelity);
}

}  // namespace
}  // namespace dpfedtab::metrics
