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

// Seeded synthetic tables used by tests, the acceptance runner and the
// `fixture` CLI command.

#pragma once

#include <array>
#include <string>

#include "dpfedtab/common.hpp"
#include "dpfedtab/data_pipeline.hpp"

namespace dpfedtab::fixtures {

using data::ColumnKind;
using data::RawTable;
using data::TabularSchema;

inline TabularSchema mixture_schema() {
  return TabularSchema({{"x", ColumnKind::kNumeric},
                        {"y", ColumnKind::kNumeric},
                        {"cluster", ColumnKind::kCategorical}},
                       "cluster", "cluster");
}

// Three isotropic Gaussian clusters in 2-d, weights (0.5, 0.3, 0.2), with
// the cluster label as the categorical column.
inline RawTable mixture(std::size_t n = 2000, std::uint64_t seed = 7) {
  struct Component {
    const char* label;
    double weight, mx, my;
  };
  static constexpr std::array<Component, 3> kComponents{
      {{"a", 0.5, -2.0, -1.0}, {"b", 0.3, 1.5, 2.0}, {"c", 0.2, 2.0, -2.0}}};
  static constexpr double kStd = 0.6;
  RawTable t(mixture_schema());
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = uniform01(rng);
    std::size_t k = 0;
    for (double acc = kComponents[0].weight; u >= acc && k + 1 < kComponents.size();) {
      acc += kComponents[++k].weight;
    }
    t.columns[0].numeric.push_back(kComponents[k].mx + kStd * standard_normal(rng));
    t.columns[1].numeric.push_back(kComponents[k].my + kStd * standard_normal(rng));
    t.columns[2].categorical.push_back(kComponents[k].label);
  }
  return t;
}

inline TabularSchema calibration_schema() {
  return TabularSchema({{"n1", ColumnKind::kNumeric},
                        {"c1", ColumnKind::kCategorical},
                        {"n2", ColumnKind::kNumeric},
                        {"c2", ColumnKind::kCategorical},
                        {"n3", ColumnKind::kNumeric},
                        {"n4", ColumnKind::kNumeric}},
                       "c1", "c1");
}

// Six mutually independent columns: Gaussian and log-normal numerics plus
// two skewed categoricals. A fresh seed gives an independent draw from the
// same distribution (the null synthetic table for attack calibration).
inline RawTable calibration(std::size_t n = 500, std::uint64_t seed = 11) {
  RawTable t(calibration_schema());
  Rng rng(seed);
  auto pick = [&](std::span<const double> w) {
    double u = uniform01(rng);
    for (std::size_t k = 0; k < w.size(); ++k) {
      if (u < w[k]) return k;
      u -= w[k];
    }
    return w.size() - 1;
  };
  static constexpr std::array<double, 8> kW1{0.3, 0.2, 0.15, 0.1, 0.1, 0.07, 0.05, 0.03};
  static constexpr std::array<double, 5> kW2{0.4, 0.25, 0.15, 0.12, 0.08};
  for (std::size_t i = 0; i < n; ++i) {
    t.columns[0].numeric.push_back(50.0 + 10.0 * standard_normal(rng));
    t.columns[1].categorical.push_back("k" + std::to_string(pick(kW1)));
    t.columns[2].numeric.push_back(std::exp(1.0 + 0.5 * standard_normal(rng)));
    t.columns[3].categorical.push_back("m" + std::to_string(pick(kW2)));
    t.columns[4].numeric.push_back(-3.0 + 2.0 * standard_normal(rng));
    t.columns[5].numeric.push_back(100.0 * uniform01(rng));
  }
  return t;
}

inline TabularSchema separable_schema() {
  return TabularSchema({{"u", ColumnKind::kNumeric},
                        {"v", ColumnKind::kNumeric},
                        {"label", ColumnKind::kCategorical}},
                       "label");
}

// Two balanced classes on either side of the line u + v = 0, with a margin.
inline RawTable separable(std::size_t n = 1000, std::uint64_t seed = 3) {
  RawTable t(separable_schema());
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const bool pos = i % 2 == 0;
    double u, v;
    do {
      u = 4.0 * uniform01(rng) - 2.0;
      v = 4.0 * uniform01(rng) - 2.0;
    } while (std::abs(u + v) < 0.3 || (u + v > 0.0) != pos);
    t.columns[0].numeric.push_back(u);
    t.columns[1].numeric.push_back(v);
    t.columns[2].categorical.push_back(pos ? "pos" : "neg");
  }
  return t;
}

}  // namespace dpfedtab::fixtures
