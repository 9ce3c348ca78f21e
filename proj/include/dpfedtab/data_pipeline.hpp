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

// Tabular ingestion and the reversible mixed-type encoding consumed by the
// diffusion model. Numeric columns go through an empirical quantile map and
// are rescaled to [-1, 1]; categorical columns are replaced by a trainable
// 2-d embedding. Also hosts IID / non-IID client partitioning.

#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <fstream>
#include <istream>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "dpfedtab/common.hpp"

namespace dpfedtab::data {

using nlohmann::json;

enum class ColumnKind { kNumeric, kCategorical };

inline std::string to_string(ColumnKind kind) {
  return kind == ColumnKind::kNumeric ? "numeric" : "categorical";
}

inline ColumnKind parse_column_kind(const std::string& s) {
  if (s == "numeric") return ColumnKind::kNumeric;
  if (s == "categorical") return ColumnKind::kCategorical;
  throw SchemaError("unknown column kind \"" + s + "\"");
}

struct ColumnSpec {
  std::string name;
  ColumnKind kind = ColumnKind::kNumeric;
  bool operator==(const ColumnSpec&) const = default;
};

class TabularSchema {
 public:
  TabularSchema() = default;
  TabularSchema(std::vector<ColumnSpec> columns,
                std::optional<std::string> target = std::nullopt,
                std::optional<std::string> partition = std::nullopt)
      : columns_(std::move(columns)),
        target_(std::move(target)),
        partition_(std::move(partition)) {
    validate();
  }

  const std::vector<ColumnSpec>& columns() const { return columns_; }
  std::size_t size() const { return columns_.size(); }
  const ColumnSpec& operator[](std::size_t i) const { return columns_[i]; }
  const std::optional<std::string>& target_column() const { return target_; }
  const std::optional<std::string>& partition_column() const { return partition_; }

  std::optional<std::size_t> find(std::string_view name) const {
    for (std::size_t i = 0; i < columns_.size(); ++i) {
      if (columns_[i].name == name) return i;
    }
    return std::nullopt;
  }

  std::size_t index_of(std::string_view name) const {
    auto idx = find(name);
    if (!idx) throw SchemaError("no column named \"" + std::string(name) + "\"");
    return *idx;
  }

  std::size_t numeric_count() const { return count(ColumnKind::kNumeric); }
  std::size_t categorical_count() const { return count(ColumnKind::kCategorical); }

  // Schema positions of numeric (resp. categorical) columns, in schema order.
  std::vector<std::size_t> indices_of(ColumnKind kind) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < columns_.size(); ++i) {
      if (columns_[i].kind == kind) out.push_back(i);
    }
    return out;
  }

  bool operator==(const TabularSchema&) const = default;

  json to_json() const {
    json cols = json::array();
    for (const auto& c : columns_) cols.push_back({{"name", c.name}, {"kind", to_string(c.kind)}});
    json j = {{"columns", cols}};
    j["target"] = target_ ? json(*target_) : json(nullptr);
    j["partition"] = partition_ ? json(*partition_) : json(nullptr);
    return j;
  }

  static TabularSchema from_json(const json& j) {
    if (!j.contains("columns") || !j["columns"].is_array()) {
      throw SchemaError("schema must contain a \"columns\" array");
    }
    std::vector<ColumnSpec> cols;
    for (const auto& c : j["columns"]) {
      cols.push_back({c.at("name").get<std::string>(),
                      parse_column_kind(c.at("kind").get<std::string>())});
    }
    auto opt = [&](const char* key) -> std::optional<std::string> {
      if (!j.contains(key) || j[key].is_null()) return std::nullopt;
      return j[key].get<std::string>();
    };
    return TabularSchema(std::move(cols), opt("target"), opt("partition"));
  }

 private:
  std::size_t count(ColumnKind kind) const {
    return static_cast<std::size_t>(std::count_if(
        columns_.begin(), columns_.end(), [&](const auto& c) { return c.kind == kind; }));
  }

  void validate() const {
    if (columns_.empty()) throw SchemaError("schema needs at least one column");
    std::set<std::string> seen;
    for (const auto& c : columns_) {
      if (!seen.insert(c.name).second) throw SchemaError("duplicate column \"" + c.name + "\"");
    }
    if (target_ && !seen.contains(*target_)) {
      throw SchemaError("target column \"" + *target_ + "\" not in columns");
    }
    if (partition_) {
      if (!seen.contains(*partition_)) {
        throw SchemaError("partition column \"" + *partition_ + "\" not in columns");
      }
      if (columns_[index_of(*partition_)].kind != ColumnKind::kCategorical) {
        throw SchemaError("partition column \"" + *partition_ + "\" must be categorical");
      }
    }
  }

  std::vector<ColumnSpec> columns_;
  std::optional<std::string> target_;
  std::optional<std::string> partition_;
};

inline TabularSchema load_schema(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open schema file " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  return TabularSchema::from_json(j);
}

// Column-major table. Numeric columns hold doubles, categorical columns
// strings; the unused vector of each column stays empty.
struct RawTable {
  struct Column {
    std::vector<double> numeric;
    std::vector<std::string> categorical;
    bool operator==(const Column&) const = default;
  };

  TabularSchema schema;
  std::vector<Column> columns;

  RawTable() = default;
  explicit RawTable(TabularSchema s) : schema(std::move(s)), columns(schema.size()) {}

  std::size_t rows() const {
    if (columns.empty()) return 0;
    return schema[0].kind == ColumnKind::kNumeric ? columns[0].numeric.size()
                                                  : columns[0].categorical.size();
  }

  const std::vector<double>& numeric(std::size_t col) const { return columns[col].numeric; }
  const std::vector<std::string>& categorical(std::size_t col) const {
    return columns[col].categorical;
  }

  RawTable select(std::span<const std::size_t> row_indices) const {
    RawTable out(schema);
    for (std::size_t c = 0; c < columns.size(); ++c) {
      for (std::size_t r : row_indices) {
        if (schema[c].kind == ColumnKind::kNumeric) {
          out.columns[c].numeric.push_back(columns[c].numeric.at(r));
        } else {
          out.columns[c].categorical.push_back(columns[c].categorical.at(r));
        }
      }
    }
    return out;
  }

  bool operator==(const RawTable&) const = default;
};

namespace detail {

// Splits one CSV record. Supports double-quoted fields with "" escapes.
inline std::vector<std::string> split_csv_line(const std::string& line, std::size_t line_no) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  bool was_quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char ch = line[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(ch);
      }
    } else if (ch == '"' && cur.empty() && !was_quoted) {
      quoted = true;
      was_quoted = true;
    } else if (ch == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
      was_quoted = false;
    } else {
      cur.push_back(ch);
    }
  }
  if (quoted) throw ParseError("unterminated quote on line " + std::to_string(line_no));
  fields.push_back(std::move(cur));
  return fields;
}

inline std::string format_double(double v) {
  std::array<char, 64> buf{};
  auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

inline std::string quote_csv(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  out += "\"";
  return out;
}

}  // namespace detail

// Parses CSV text. Row numbers in errors are 1-based data rows (the header
// is not counted).
inline RawTable read_csv(std::istream& in, const TabularSchema& schema,
                         const std::string& source = "<csv>") {
  std::string line;
  std::size_t line_no = 0;
  auto next_line = [&]() -> bool {
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) return true;
    }
    return false;
  };
  if (!next_line()) throw ParseError(source + ": empty file");

  auto header = detail::split_csv_line(line, line_no);
  if (!header.empty() && header[0].starts_with("\xEF\xBB\xBF")) header[0].erase(0, 3);
  std::vector<std::size_t> field_of_column(schema.size());
  for (std::size_t c = 0; c < schema.size(); ++c) {
    auto it = std::find(header.begin(), header.end(), schema[c].name);
    if (it == header.end()) {
      throw SchemaError(source + ": missing column \"" + schema[c].name + "\"");
    }
    field_of_column[c] = static_cast<std::size_t>(it - header.begin());
  }
  for (const auto& h : header) {
    if (!schema.find(h)) throw SchemaError(source + ": unexpected column \"" + h + "\"");
  }

  RawTable table(schema);
  std::size_t row = 0;
  while (next_line()) {
    ++row;
    auto fields = detail::split_csv_line(line, line_no);
    if (fields.size() != header.size()) {
      throw ParseError(source + ": row " + std::to_string(row) + " (line " +
                       std::to_string(line_no) + ") has " + std::to_string(fields.size()) +
                       " fields, expected " + std::to_string(header.size()));
    }
    for (std::size_t c = 0; c < schema.size(); ++c) {
      const std::string& cell = fields[field_of_column[c]];
      if (cell.empty()) {
        throw ParseError(source + ": row " + std::to_string(row) + " column \"" +
                         schema[c].name + "\" is empty");
      }
      if (schema[c].kind == ColumnKind::kNumeric) {
        double v = 0.0;
        const char* first = cell.data();
        const char* last = cell.data() + cell.size();
        while (first < last && *first == ' ') ++first;
        if (first < last && *first == '+') ++first;
        auto res = std::from_chars(first, last, v);
        if (res.ec != std::errc() || res.ptr != last || !std::isfinite(v)) {
          throw ParseError(source + ": row " + std::to_string(row) + " column \"" +
                           schema[c].name + "\": cannot parse \"" + cell + "\" as a number");
        }
        table.columns[c].numeric.push_back(v);
      } else {
        table.columns[c].categorical.push_back(cell);
      }
    }
  }
  if (row == 0) throw ParseError(source + ": no data rows");
  return table;
}

inline RawTable load_csv(const std::string& path, const TabularSchema& schema) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open CSV file " + path);
  return read_csv(in, schema, path);
}

// Writes the table with the schema's header. Doubles use the shortest
// round-trip representation, so output is byte-stable.
inline void write_csv(std::ostream& out, const RawTable& table) {
  for (std::size_t c = 0; c < table.schema.size(); ++c) {
    if (c) out << ',';
    out << detail::quote_csv(table.schema[c].name);
  }
  out << '\n';
  for (std::size_t r = 0; r < table.rows(); ++r) {
    for (std::size_t c = 0; c < table.schema.size(); ++c) {
      if (c) out << ',';
      if (table.schema[c].kind == ColumnKind::kNumeric) {
        out << detail::format_double(table.columns[c].numeric[r]);
      } else {
        out << detail::quote_csv(table.columns[c].categorical[r]);
      }
    }
    out << '\n';
  }
}

inline void save_csv(const std::string& path, const RawTable& table) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write CSV file " + path);
  write_csv(out, table);
}

// Empirical CDF map for one numeric column.
class QuantileMap {
 public:
  QuantileMap() = default;

  static QuantileMap fit(std::span<const double> values, std::size_t n_quantiles) {
    if (values.empty()) throw ValidationError("quantile map: empty input");
    if (n_quantiles < 2) throw ValidationError("quantile map: n_quantiles must be >= 2");
    if (!all_finite(values.data(), values.size())) {
      throw ValidationError("quantile map: non-finite value");
    }
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = std::min(n_quantiles, sorted.size());
    QuantileMap m;
    m.references_.resize(n);
    if (n == 1) {
      m.references_[0] = sorted[0];
      return m;
    }
    // Reference k sits at level k/(n-1); linear interpolation between order
    // statistics, as in numpy's default percentile.
    const double last = static_cast<double>(sorted.size() - 1);
    for (std::size_t k = 0; k < n; ++k) {
      double pos = last * static_cast<double>(k) / static_cast<double>(n - 1);
      std::size_t lo = static_cast<std::size_t>(std::floor(pos));
      std::size_t hi = std::min(lo + 1, sorted.size() - 1);
      double frac = pos - static_cast<double>(lo);
      m.references_[k] = frac == 0.0 ? sorted[lo] : sorted[lo] + frac * (sorted[hi] - sorted[lo]);
    }
    return m;
  }

  std::size_t n_quantiles() const { return references_.size(); }
  const std::vector<double>& references() const { return references_; }

  // Position of x in the empirical CDF, in [0, 1]. Values tied with a run of
  // equal references map to the middle of that run.
  double transform(double x) const {
    const auto& ref = references_;
    if (ref.size() == 1) return x < ref[0] ? 0.0 : (x > ref[0] ? 1.0 : 0.5);
    if (x < ref.front()) return 0.0;
    if (x > ref.back()) return 1.0;
    const double denom = static_cast<double>(ref.size() - 1);
    auto lo = std::lower_bound(ref.begin(), ref.end(), x);
    auto hi = std::upper_bound(ref.begin(), ref.end(), x);
    if (lo != hi) {
      double first = static_cast<double>(lo - ref.begin());
      double last = static_cast<double>(hi - ref.begin() - 1);
      return 0.5 * (first + last) / denom;
    }
    std::size_t k = static_cast<std::size_t>(hi - ref.begin());  // ref[k-1] < x < ref[k]
    double frac = (x - ref[k - 1]) / (ref[k] - ref[k - 1]);
    return (static_cast<double>(k - 1) + frac) / denom;
  }

  // Inverse of transform; p is clamped to [0, 1] first.
  double inverse(double p) const {
    const auto& ref = references_;
    if (ref.size() == 1) return ref[0];
    p = std::clamp(p, 0.0, 1.0);
    double pos = p * static_cast<double>(ref.size() - 1);
    std::size_t k = static_cast<std::size_t>(std::floor(pos));
    if (k >= ref.size() - 1) return ref.back();
    double frac = pos - static_cast<double>(k);
    if (frac == 0.0) return ref[k];
    return ref[k] + frac * (ref[k + 1] - ref[k]);
  }

  json to_json() const { return json{{"references", references_}}; }
  static QuantileMap from_json(const json& j) {
    QuantileMap m;
    m.references_ = j.at("references").get<std::vector<double>>();
    if (m.references_.empty() || !std::is_sorted(m.references_.begin(), m.references_.end())) {
      throw ParseError("quantile references must be non-empty and sorted");
    }
    return m;
  }

  bool operator==(const QuantileMap&) const = default;

 private:
  std::vector<double> references_;
};

inline constexpr std::size_t kEmbeddingDim = 2;
using Embedding = std::array<double, kEmbeddingDim>;

// Vocabulary plus initial 2-d embedding table for one categorical column.
class CategoryCodec {
 public:
  CategoryCodec() = default;

  // Vocabulary in first-occurrence order; embedding rows drawn i.i.d. from
  // N(0, (1/sqrt 2)^2) so each embedding has unit expected squared norm.
  static CategoryCodec fit(std::span<const std::string> values, std::uint64_t seed) {
    if (values.empty()) throw ValidationError("category codec: empty input");
    CategoryCodec codec;
    for (const auto& v : values) {
      if (!codec.lookup_.contains(v)) {
        codec.lookup_.emplace(v, codec.vocabulary_.size());
        codec.vocabulary_.push_back(v);
      }
    }
    codec.init_embeddings(seed);
    return codec;
  }

  std::size_t size() const { return vocabulary_.size(); }
  const std::vector<std::string>& vocabulary() const { return vocabulary_; }
  const std::vector<Embedding>& embeddings() const { return embeddings_; }
  void set_embeddings(std::vector<Embedding> e) {
    if (e.size() != vocabulary_.size()) throw ValidationError("embedding table size mismatch");
    embeddings_ = std::move(e);
  }

  std::optional<std::size_t> find(const std::string& value) const {
    auto it = lookup_.find(value);
    if (it == lookup_.end()) return std::nullopt;
    return it->second;
  }

  // Index of the embedding nearest to (x, y); ties go to the lower index.
  std::size_t nearest(double x, double y) const {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < embeddings_.size(); ++k) {
      double dx = x - embeddings_[k][0];
      double dy = y - embeddings_[k][1];
      double d = dx * dx + dy * dy;
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    return best;
  }

  json to_json() const { return json{{"vocabulary", vocabulary_}}; }

  static CategoryCodec from_json(const json& j, std::uint64_t seed) {
    auto vocab = j.at("vocabulary").get<std::vector<std::string>>();
    CategoryCodec codec;
    for (auto& v : vocab) {
      if (!codec.lookup_.emplace(v, codec.vocabulary_.size()).second) {
        throw ParseError("duplicate vocabulary entry \"" + v + "\"");
      }
      codec.vocabulary_.push_back(std::move(v));
    }
    codec.init_embeddings(seed);
    return codec;
  }

  bool operator==(const CategoryCodec& o) const {
    return vocabulary_ == o.vocabulary_ && embeddings_ == o.embeddings_;
  }

 private:
  void init_embeddings(std::uint64_t seed) {
    Rng rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(2.0));
    embeddings_.resize(vocabulary_.size());
    for (auto& e : embeddings_) {
      for (auto& x : e) x = dist(rng);
    }
  }

  std::vector<std::string> vocabulary_;
  std::unordered_map<std::string, std::size_t> lookup_;
  std::vector<Embedding> embeddings_;
};

class Pipeline;

// Row-major encoded matrix. Numerics first (schema order), then one 2-d
// embedding pair per categorical column (schema order). The category codes
// are kept alongside so training can rebuild rows from trained embeddings.
struct EncodedDataset {
  std::size_t rows = 0;
  std::size_t width = 0;
  std::size_t numeric_width = 0;
  std::size_t categorical_columns = 0;
  std::vector<double> values;      // rows * width
  std::vector<std::size_t> codes;  // rows * categorical_columns
  std::shared_ptr<const Pipeline> pipeline;

  std::span<const double> row(std::size_t r) const {
    return {values.data() + r * width, width};
  }
  std::span<const std::size_t> row_codes(std::size_t r) const {
    return {codes.data() + r * categorical_columns, categorical_columns};
  }
};

// Fitted numeric maps plus categorical codecs for a schema.
class Pipeline {
 public:
  static constexpr std::size_t kDefaultQuantiles = 1000;

  Pipeline() = default;

  static Pipeline fit(const RawTable& table, std::size_t n_quantiles = kDefaultQuantiles,
                      std::uint64_t embedding_seed = 0) {
    if (table.rows() == 0) throw ValidationError("pipeline: empty table");
    Pipeline p;
    p.schema_ = table.schema;
    p.n_quantiles_ = n_quantiles;
    p.embedding_seed_ = embedding_seed;
    std::size_t cat_index = 0;
    for (std::size_t c = 0; c < table.schema.size(); ++c) {
      if (table.schema[c].kind == ColumnKind::kNumeric) {
        p.quantiles_.push_back(QuantileMap::fit(table.numeric(c), n_quantiles));
      } else {
        p.codecs_.push_back(
            CategoryCodec::fit(table.categorical(c), column_seed(embedding_seed, cat_index++)));
      }
    }
    return p;
  }

  // Per-column embedding seed: seed + categorical column index, mixed.
  static std::uint64_t column_seed(std::uint64_t seed, std::size_t cat_index) {
    return derive_seed(seed, cat_index);
  }

  const TabularSchema& schema() const { return schema_; }
  const std::vector<QuantileMap>& quantile_maps() const { return quantiles_; }
  const std::vector<CategoryCodec>& codecs() const { return codecs_; }
  std::size_t n_quantiles() const { return n_quantiles_; }
  std::uint64_t embedding_seed() const { return embedding_seed_; }

  std::size_t numeric_width() const { return quantiles_.size(); }
  std::size_t encoded_width() const { return quantiles_.size() + kEmbeddingDim * codecs_.size(); }
  std::vector<std::size_t> vocabulary_sizes() const {
    std::vector<std::size_t> out;
    for (const auto& c : codecs_) out.push_back(c.size());
    return out;
  }

  // Copy with the embedding tables replaced (e.g. by trained ones).
  Pipeline with_embeddings(const std::vector<std::vector<Embedding>>& tables) const {
    if (tables.size() != codecs_.size()) throw ValidationError("embedding table count mismatch");
    Pipeline p = *this;
    for (std::size_t k = 0; k < tables.size(); ++k) p.codecs_[k].set_embeddings(tables[k]);
    return p;
  }

  double encode_numeric(std::size_t numeric_index, double x) const {
    return 2.0 * quantiles_[numeric_index].transform(x) - 1.0;
  }
  double decode_numeric(std::size_t numeric_index, double v) const {
    return quantiles_[numeric_index].inverse(std::clamp(0.5 * (v + 1.0), 0.0, 1.0));
  }

  EncodedDataset encode(const RawTable& table) const {
    check_schema(table.schema);
    EncodedDataset out;
    out.rows = table.rows();
    out.width = encoded_width();
    out.numeric_width = numeric_width();
    out.categorical_columns = codecs_.size();
    out.values.resize(out.rows * out.width);
    out.codes.resize(out.rows * out.categorical_columns);
    out.pipeline = std::make_shared<const Pipeline>(*this);
    std::size_t num_i = 0, cat_i = 0;
    for (std::size_t c = 0; c < schema_.size(); ++c) {
      if (schema_[c].kind == ColumnKind::kNumeric) {
        const auto& col = table.numeric(c);
        for (std::size_t r = 0; r < out.rows; ++r) {
          out.values[r * out.width + num_i] = encode_numeric(num_i, col[r]);
        }
        ++num_i;
      } else {
        const auto& col = table.categorical(c);
        const auto& codec = codecs_[cat_i];
        const std::size_t offset = out.numeric_width + kEmbeddingDim * cat_i;
        for (std::size_t r = 0; r < out.rows; ++r) {
          auto code = codec.find(col[r]);
          if (!code) {
            throw ValidationError("column \"" + schema_[c].name + "\": unseen category \"" +
                                  col[r] + "\"");
          }
          out.codes[r * out.categorical_columns + cat_i] = *code;
          const auto& e = codec.embeddings()[*code];
          out.values[r * out.width + offset] = e[0];
          out.values[r * out.width + offset + 1] = e[1];
        }
        ++cat_i;
      }
    }
    return out;
  }

  // values is row-major with encoded_width() columns.
  RawTable decode(std::span<const double> values) const {
    const std::size_t width = encoded_width();
    if (width == 0 || values.size() % width != 0) {
      throw ValidationError("decode: data size " + std::to_string(values.size()) +
                            " is not a multiple of encoded width " + std::to_string(width));
    }
    const std::size_t rows = values.size() / width;
    RawTable table(schema_);
    std::size_t num_i = 0, cat_i = 0;
    for (std::size_t c = 0; c < schema_.size(); ++c) {
      if (schema_[c].kind == ColumnKind::kNumeric) {
        auto& col = table.columns[c].numeric;
        col.reserve(rows);
        for (std::size_t r = 0; r < rows; ++r) {
          col.push_back(decode_numeric(num_i, values[r * width + num_i]));
        }
        ++num_i;
      } else {
        auto& col = table.columns[c].categorical;
        const auto& codec = codecs_[cat_i];
        const std::size_t offset = numeric_width() + kEmbeddingDim * cat_i;
        col.reserve(rows);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* v = values.data() + r * width + offset;
          col.push_back(codec.vocabulary()[codec.nearest(v[0], v[1])]);
        }
        ++cat_i;
      }
    }
    return table;
  }

  // Persisted form: schema, quantile references, vocabularies and the
  // embedding seed (initial tables are regenerated from it).
  json to_json() const {
    json j;
    j["schema"] = schema_.to_json();
    j["n_quantiles"] = n_quantiles_;
    j["embedding_seed"] = embedding_seed_;
    json q = json::array();
    for (const auto& m : quantiles_) q.push_back(m.to_json());
    j["quantile_maps"] = q;
    json v = json::array();
    for (const auto& c : codecs_) v.push_back(c.to_json());
    j["codecs"] = v;
    return j;
  }

  static Pipeline from_json(const json& j) {
    Pipeline p;
    p.schema_ = TabularSchema::from_json(j.at("schema"));
    p.n_quantiles_ = j.at("n_quantiles").get<std::size_t>();
    p.embedding_seed_ = j.at("embedding_seed").get<std::uint64_t>();
    for (const auto& q : j.at("quantile_maps")) p.quantiles_.push_back(QuantileMap::from_json(q));
    std::size_t k = 0;
    for (const auto& c : j.at("codecs")) {
      p.codecs_.push_back(CategoryCodec::from_json(c, column_seed(p.embedding_seed_, k++)));
    }
    if (p.quantiles_.size() != p.schema_.numeric_count() ||
        p.codecs_.size() != p.schema_.categorical_count()) {
      throw ParseError("pipeline file does not match its schema");
    }
    return p;
  }

  bool operator==(const Pipeline& o) const {
    return schema_ == o.schema_ && quantiles_ == o.quantiles_ && codecs_ == o.codecs_ &&
           n_quantiles_ == o.n_quantiles_ && embedding_seed_ == o.embedding_seed_;
  }

 private:
  void check_schema(const TabularSchema& s) const {
    if (s.columns() != schema_.columns()) throw SchemaError("table schema differs from pipeline");
  }

  TabularSchema schema_;
  std::vector<QuantileMap> quantiles_;
  std::vector<CategoryCodec> codecs_;
  std::size_t n_quantiles_ = kDefaultQuantiles;
  std::uint64_t embedding_seed_ = 0;
};

struct ClientPartition {
  std::size_t client_id = 0;
  std::vector<std::size_t> rows;  // ascending indices into the parent table
  std::size_t size() const { return rows.size(); }
  bool operator==(const ClientPartition&) const = default;
};

namespace detail {

inline void check_client_count(std::size_t clients, std::size_t n) {
  if (clients < 2) throw ValidationError("client count must be >= 2");
  if (clients > n) {
    throw ValidationError("client count " + std::to_string(clients) + " exceeds row count " +
                          std::to_string(n));
  }
}

}  // namespace detail

// Uniform shuffle split into near-equal shards; the first n % clients shards
// get one extra row.
inline std::vector<ClientPartition> partition_iid(std::size_t n_rows, std::size_t clients,
                                                  std::uint64_t seed) {
  detail::check_client_count(clients, n_rows);
  std::vector<std::size_t> idx(n_rows);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<ClientPartition> parts(clients);
  std::size_t pos = 0;
  for (std::size_t i = 0; i < clients; ++i) {
    std::size_t len = n_rows / clients + (i < n_rows % clients ? 1 : 0);
    parts[i].client_id = i;
    parts[i].rows.assign(idx.begin() + static_cast<std::ptrdiff_t>(pos),
                         idx.begin() + static_cast<std::ptrdiff_t>(pos + len));
    std::sort(parts[i].rows.begin(), parts[i].rows.end());
    pos += len;
  }
  return parts;
}

// Label-skewed split on a categorical column. Value groups are taken in
// descending size (ties: first occurrence) and each goes to the client with
// the fewest rows (ties: lowest id). Clients left empty are filled by
// randomly splitting the currently largest client.
inline std::vector<ClientPartition> partition_noniid(const RawTable& table,
                                                     const std::string& column,
                                                     std::size_t clients, std::uint64_t seed) {
  const std::size_t n = table.rows();
  detail::check_client_count(clients, n);
  const std::size_t col = table.schema.index_of(column);
  if (table.schema[col].kind != ColumnKind::kCategorical) {
    throw SchemaError("partition column \"" + column + "\" must be categorical");
  }
  std::vector<std::string> order;
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t r = 0; r < n; ++r) {
    const auto& v = table.categorical(col)[r];
    auto [it, inserted] = groups.try_emplace(v);
    if (inserted) order.push_back(v);
    it->second.push_back(r);
  }
  std::stable_sort(order.begin(), order.end(), [&](const auto& a, const auto& b) {
    return groups[a].size() > groups[b].size();
  });

  std::vector<std::vector<std::size_t>> assigned(clients);
  for (const auto& v : order) {
    auto smallest = std::min_element(assigned.begin(), assigned.end(),
                                      [](const auto& a, const auto& b) { return a.size() < b.size(); });
    auto& g = groups[v];
    smallest->insert(smallest->end(), g.begin(), g.end());
  }

  Rng rng(seed);
  for (;;) {
    std::vector<std::size_t> empty;
    for (std::size_t i = 0; i < clients; ++i) {
      if (assigned[i].empty()) empty.push_back(i);
    }
    if (empty.empty()) break;
    auto largest = static_cast<std::size_t>(
        std::max_element(assigned.begin(), assigned.end(),
                         [](const auto& a, const auto& b) { return a.size() < b.size(); }) -
        assigned.begin());
    std::vector<std::size_t> pool = std::move(assigned[largest]);
    std::shuffle(pool.begin(), pool.end(), rng);
    std::vector<std::size_t> targets{largest};
    for (std::size_t e : empty) {
      if (targets.size() >= pool.size()) break;
      targets.push_back(e);
    }
    assigned[largest].clear();
    for (std::size_t i = 0; i < pool.size(); ++i) {
      assigned[targets[i % targets.size()]].push_back(pool[i]);
    }
  }

  std::vector<ClientPartition> parts(clients);
  for (std::size_t i = 0; i < clients; ++i) {
    parts[i].client_id = i;
    parts[i].rows = std::move(assigned[i]);
    std::sort(parts[i].rows.begin(), parts[i].rows.end());
  }
  return parts;
}

inline json partitions_to_json(const std::vector<ClientPartition>& parts) {
  json arr = json::array();
  for (const auto& p : parts) arr.push_back({{"client", p.client_id}, {"rows", p.rows}});
  return arr;
}

inline std::vector<ClientPartition> partitions_from_json(const json& j) {
  std::vector<ClientPartition> parts;
  for (const auto& p : j) {
    parts.push_back({p.at("client").get<std::size_t>(), p.at("rows").get<std::vector<std::size_t>>()});
  }
  return parts;
}

}  // namespace dpfedtab::data
