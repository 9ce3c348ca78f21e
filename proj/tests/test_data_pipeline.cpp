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

#include <algorithm>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "dpfedtab/data_pipeline.hpp"
#include "dpfedtab/fixtures.hpp"

namespace dpfedtab::data {
namespace {

TabularSchema age_job_schema() {
  return TabularSchema({{"age", ColumnKind::kNumeric}, {"job", ColumnKind::kCategorical}}, "job",
                       "job");
}

template <typename F>
std::string error_message(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  return {};
}

TEST(Csv, ParsesRowsAndColumns) {
  std::istringstream in("age,job\n31,clerk\n45,nurse\n27,clerk\n");
  auto t = read_csv(in, age_job_schema());
  EXPECT_EQ(t.rows(), 3u);
  EXPECT_EQ(t.schema.size(), 2u);
  EXPECT_DOUBLE_EQ(t.numeric(0)[1], 45.0);
  EXPECT_EQ(t.categorical(1)[2], "clerk");
}

TEST(Csv, HeaderOrderMayDifferFromSchema) {
  std::istringstream in("job,age\nclerk,31\n");
  auto t = read_csv(in, age_job_schema());
  EXPECT_DOUBLE_EQ(t.numeric(0)[0], 31.0);
}

TEST(Csv, MissingColumnNamesIt) {
  std::istringstream in("age\n31\n");
  std::string msg;
  EXPECT_THROW(
      {
        try {
          read_csv(in, age_job_schema());
        } catch (const SchemaError& e) {
          msg = e.what();
          throw;
        }
      },
      SchemaError);
  EXPECT_NE(msg.find("\"job\""), std::string::npos) << msg;
}

TEST(Csv, BadNumberCitesRow) {
  std::istringstream in("age,job\n31,clerk\nabc,nurse\n");
  std::string msg;
  EXPECT_THROW(
      {
        try {
          read_csv(in, age_job_schema());
        } catch (const ParseError& e) {
          msg = e.what();
          throw;
        }
      },
      ParseError);
  EXPECT_NE(msg.find("row 2"), std::string::npos) << msg;
  EXPECT_NE(msg.find("abc"), std::string::npos) << msg;
}

TEST(Csv, EmptyFileIsAnError) {
  std::istringstream in("");
  EXPECT_THROW(read_csv(in, age_job_schema()), ParseError);
}

TEST(Csv, QuotedFieldsRoundTrip) {
  RawTable t(age_job_schema());
  t.columns[0].numeric = {1.5, -2.25};
  t.columns[1].categorical = {"a, b", "say \"hi\""};
  std::ostringstream out;
  write_csv(out, t);
  std::istringstream in(out.str());
  auto back = read_csv(in, age_job_schema());
  EXPECT_EQ(back.categorical(1), t.categorical(1));
  EXPECT_EQ(back.numeric(0), t.numeric(0));
}

TEST(Schema, JsonRoundTrip) {
  auto s = age_job_schema();
  EXPECT_EQ(TabularSchema::from_json(s.to_json()), s);
}

TEST(Schema, RejectsNumericPartitionColumn) {
  EXPECT_THROW(TabularSchema({{"age", ColumnKind::kNumeric}}, std::nullopt, "age"), SchemaError);
}

TEST(QuantileMap, MedianMapsToMidpoint) {
  std::vector<double> v{1, 2, 3, 4, 5};
  auto q = QuantileMap::fit(v, 5);
  EXPECT_DOUBLE_EQ(q.transform(3.0), 0.5);
  EXPECT_DOUBLE_EQ(q.transform(1.0), 0.0);
  EXPECT_DOUBLE_EQ(q.transform(5.0), 1.0);
  EXPECT_DOUBLE_EQ(q.transform(-10.0), 0.0);
  EXPECT_DOUBLE_EQ(q.transform(10.0), 1.0);
}

TEST(QuantileMap, RoundTripOnTrainingValues) {
  Rng rng(42);
  std::vector<double> v(1000);
  for (auto& x : v) x = standard_normal(rng);
  auto q = QuantileMap::fit(v, 1000);
  for (double x : v) EXPECT_NEAR(q.inverse(q.transform(x)), x, 1e-6);
}

TEST(QuantileMap, FewerQuantilesStillMonotone) {
  Rng rng(1);
  std::vector<double> v(500);
  for (auto& x : v) x = std::exp(standard_normal(rng));
  auto q = QuantileMap::fit(v, 50);
  std::sort(v.begin(), v.end());
  for (std::size_t i = 1; i < v.size(); ++i) EXPECT_LE(q.transform(v[i - 1]), q.transform(v[i]));
}

TEST(CategoryCodec, VocabularyInFirstSeenOrder) {
  std::vector<std::string> v{"a", "b", "a"};
  auto c = CategoryCodec::fit(v, 3);
  EXPECT_EQ(c.vocabulary(), (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(c.embeddings().size(), 2u);
  EXPECT_EQ(c.embeddings()[0].size(), 2u);
}

TEST(CategoryCodec, SameSeedSameTable) {
  std::vector<std::string> v{"x", "y", "z"};
  auto a = CategoryCodec::fit(v, 99);
  auto b = CategoryCodec::fit(v, 99);
  EXPECT_EQ(a.embeddings(), b.embeddings());
  auto c = CategoryCodec::fit(v, 100);
  EXPECT_NE(a.embeddings(), c.embeddings());
}

TEST(CategoryCodec, FiftyEightDistinctValues) {
  std::vector<std::string> v;
  for (int i = 0; i < 58; ++i) v.push_back("dept_" + std::to_string(i));
  auto c = CategoryCodec::fit(v, 5);
  EXPECT_EQ(c.size(), 58u);
  EXPECT_EQ(c.embeddings().size(), 58u);
}

TEST(CategoryCodec, MidpointTieGoesToLowerIndex) {
  std::vector<std::string> v{"p", "q"};
  auto c = CategoryCodec::fit(v, 1);
  c.set_embeddings({Embedding{1.0, 0.0}, Embedding{-1.0, 0.0}});
  EXPECT_EQ(c.nearest(0.0, 0.0), 0u);
  c.set_embeddings({Embedding{-1.0, 0.0}, Embedding{1.0, 0.0}});
  EXPECT_EQ(c.nearest(0.0, 0.0), 0u);
  EXPECT_EQ(c.nearest(0.9, 0.0), 1u);
}

RawTable ten_rows() {
  RawTable t(age_job_schema());
  for (int i = 0; i < 10; ++i) {
    t.columns[0].numeric.push_back(20.0 + i);
    t.columns[1].categorical.push_back(i % 3 == 0 ? "clerk" : (i % 3 == 1 ? "nurse" : "chef"));
  }
  return t;
}

TEST(Pipeline, EncodedShape) {
  auto t = ten_rows();
  auto p = Pipeline::fit(t, 10, 1);
  auto e = p.encode(t);
  EXPECT_EQ(e.rows, 10u);
  EXPECT_EQ(e.width, 3u);
  EXPECT_EQ(e.values.size(), 30u);
}

TEST(Pipeline, MedianEncodesToZero) {
  RawTable t(age_job_schema());
  t.columns[0].numeric = {1, 2, 3, 4, 5};
  t.columns[1].categorical = {"a", "a", "b", "b", "a"};
  auto p = Pipeline::fit(t, 5, 1);
  EXPECT_DOUBLE_EQ(p.encode_numeric(0, 3.0), 0.0);
  EXPECT_DOUBLE_EQ(p.encode_numeric(0, 1.0), -1.0);
  EXPECT_DOUBLE_EQ(p.encode_numeric(0, 5.0), 1.0);
}

TEST(Pipeline, UnseenCategoryNamesValueAndColumn) {
  auto t = ten_rows();
  auto p = Pipeline::fit(t, 10, 1);
  t.columns[1].categorical[4] = "zzz";
  auto msg = error_message([&] { p.encode(t); });
  EXPECT_NE(msg.find("zzz"), std::string::npos) << msg;
  EXPECT_NE(msg.find("job"), std::string::npos) << msg;
}

TEST(Pipeline, DecodeInvertsEncode) {
  auto t = fixtures::mixture(400, 5);
  auto p = Pipeline::fit(t, 1000, 17);
  // Distinct embeddings are a precondition for exact categorical recovery.
  const auto& emb = p.codecs()[0].embeddings();
  for (std::size_t i = 0; i < emb.size(); ++i) {
    for (std::size_t j = i + 1; j < emb.size(); ++j) ASSERT_NE(emb[i], emb[j]);
  }
  auto back = p.decode(p.encode(t).values);
  EXPECT_EQ(back.categorical(2), t.categorical(2));
  for (std::size_t c = 0; c < 2; ++c) {
    for (std::size_t r = 0; r < t.rows(); ++r) EXPECT_NEAR(back.numeric(c)[r], t.numeric(c)[r], 1e-6);
  }
}

TEST(Pipeline, DecodeRejectsWidthMismatch) {
  auto t = ten_rows();
  auto p = Pipeline::fit(t, 10, 1);
  std::vector<double> bad(7, 0.0);
  EXPECT_THROW(p.decode(bad), ValidationError);
}

TEST(Pipeline, DecodeClampsOutOfRange) {
  auto t = ten_rows();
  auto p = Pipeline::fit(t, 10, 1);
  std::vector<double> row{5.0, 0.0, 0.0, -5.0, 0.0, 0.0};
  auto back = p.decode(row);
  EXPECT_DOUBLE_EQ(back.numeric(0)[0], 29.0);
  EXPECT_DOUBLE_EQ(back.numeric(0)[1], 20.0);
}

TEST(Pipeline, JsonRoundTripIsExact) {
  auto t = fixtures::mixture(300, 2);
  auto p = Pipeline::fit(t, 100, 8);
  auto q = Pipeline::from_json(p.to_json());
  EXPECT_EQ(p, q);
  EXPECT_EQ(p.encode(t).values, q.encode(t).values);
}

TEST(Pipeline, SameSeedSameCodecs) {
  auto t = fixtures::mixture(300, 2);
  EXPECT_EQ(Pipeline::fit(t, 100, 8), Pipeline::fit(t, 100, 8));
}

RawTable with_counts(const std::vector<std::pair<std::string, std::size_t>>& groups) {
  TabularSchema s({{"v", ColumnKind::kNumeric}, {"g", ColumnKind::kCategorical}}, std::nullopt, "g");
  RawTable t(s);
  std::size_t i = 0;
  // Interleave so group membership is not contiguous in row order.
  std::vector<std::size_t> left;
  for (const auto& g : groups) left.push_back(g.second);
  for (bool any = true; any;) {
    any = false;
    for (std::size_t k = 0; k < groups.size(); ++k) {
      if (left[k] == 0) continue;
      --left[k];
      any = true;
      t.columns[0].numeric.push_back(static_cast<double>(i++));
      t.columns[1].categorical.push_back(groups[k].first);
    }
  }
  return t;
}

std::vector<std::size_t> sizes(const std::vector<ClientPartition>& parts) {
  std::vector<std::size_t> out;
  for (const auto& p : parts) out.push_back(p.size());
  return out;
}

void expect_disjoint_cover(const std::vector<ClientPartition>& parts, std::size_t n) {
  std::set<std::size_t> seen;
  std::size_t total = 0;
  for (const auto& p : parts) {
    total += p.size();
    seen.insert(p.rows.begin(), p.rows.end());
  }
  EXPECT_EQ(total, n);
  EXPECT_EQ(seen.size(), n);
  if (!seen.empty()) EXPECT_EQ(*seen.rbegin(), n - 1);
}

TEST(Partition, NonIidOneGroupPerClient) {
  auto t = with_counts({{"small", 10}, {"big", 100}, {"mid", 50}});
  auto parts = partition_noniid(t, "g", 3, 1);
  EXPECT_EQ(sizes(parts), (std::vector<std::size_t>{100, 50, 10}));
  for (const auto& p : parts) {
    std::set<std::string> labels;
    for (std::size_t r : p.rows) labels.insert(t.categorical(1)[r]);
    EXPECT_EQ(labels.size(), 1u);
  }
  expect_disjoint_cover(parts, t.rows());
}

TEST(Partition, NonIidSplitsLargestGroupWhenShort) {
  auto t = with_counts({{"a", 60}, {"b", 30}});
  auto parts = partition_noniid(t, "g", 3, 4);
  for (const auto& p : parts) EXPECT_GT(p.size(), 0u);
  expect_disjoint_cover(parts, t.rows());
  EXPECT_EQ(parts[1].size(), 30u);
  EXPECT_EQ(parts[0].size() + parts[2].size(), 60u);
}

TEST(Partition, NonIidIsDeterministic) {
  auto t = with_counts({{"a", 60}, {"b", 30}});
  EXPECT_EQ(partition_noniid(t, "g", 4, 9), partition_noniid(t, "g", 4, 9));
}

TEST(Partition, IidNearEqualSizes) {
  auto parts = partition_iid(10, 3, 5);
  EXPECT_EQ(sizes(parts), (std::vector<std::size_t>{4, 3, 3}));
  expect_disjoint_cover(parts, 10);
}

TEST(Partition, IidIsDeterministic) {
  EXPECT_EQ(partition_iid(100, 4, 5), partition_iid(100, 4, 5));
  EXPECT_NE(partition_iid(100, 4, 5), partition_iid(100, 4, 6));
}

TEST(Partition, RejectsBadClientCounts) {
  EXPECT_THROW(partition_iid(10, 1, 0), ValidationError);
  EXPECT_THROW(partition_iid(3, 4, 0), ValidationError);
}

TEST(Partition, JsonRoundTrip) {
  auto parts = partition_iid(50, 3, 2);
  EXPECT_EQ(partitions_from_json(partitions_to_json(parts)), parts);
}

}  // namespace
}  // namespace dpfedtab::data
