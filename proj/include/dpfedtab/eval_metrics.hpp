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

// Synthetic-data scores: fidelity (column marginals and pairwise
// association), utility (train on synthetic, test on real) and attack-based
// privacy risk. Every function is a pure function of its inputs and seed.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "dpfedtab/common.hpp"
#include "dpfedtab/data_pipeline.hpp"

namespace dpfedtab::metrics {

using data::ColumnKind;
using data::RawTable;
using data::TabularSchema;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Fidelity

// 1 - W1 after joint min-max normalization. W1 is the integral of
// |F_real - F_syn| over the merged sample support.
inline double wasserstein_similarity(std::span<const double> real, std::span<const double> syn) {
  if (real.empty() || syn.empty()) throw ValidationError("wasserstein: empty column");
  std::vector<double> a(real.begin(), real.end());
  std::vector<double> b(syn.begin(), syn.end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double lo = std::min(a.front(), b.front());
  const double hi = std::max(a.back(), b.back());
  if (!(hi > lo)) return 1.0;  // both columns are the same constant
  const double range = hi - lo;

  std::vector<double> all;
  all.reserve(a.size() + b.size());
  std::merge(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(all));
  double w = 0.0;
  std::size_t ia = 0, ib = 0;
  for (std::size_t k = 0; k + 1 < all.size(); ++k) {
    while (ia < a.size() && a[ia] <= all[k]) ++ia;
    while (ib < b.size() && b[ib] <= all[k]) ++ib;
    const double fa = static_cast<double>(ia) / static_cast<double>(a.size());
    const double fb = static_cast<double>(ib) / static_cast<double>(b.size());
    w += std::abs(fa - fb) * (all[k + 1] - all[k]);
  }
  return std::clamp(1.0 - w / range, 0.0, 1.0);
}

// 1 - JS(p, q) with base-2 logs over the union vocabulary.
inline double js_similarity(std::span<const std::string> real, std::span<const std::string> syn) {
  if (real.empty() || syn.empty()) throw ValidationError("js_similarity: empty column");
  std::map<std::string, std::pair<double, double>> freq;
  for (const auto& v : real) freq[v].first += 1.0;
  for (const auto& v : syn) freq[v].second += 1.0;
  const double na = static_cast<double>(real.size());
  const double nb = static_cast<double>(syn.size());
  double js = 0.0;
  for (const auto& [_, f] : freq) {
    const double p = f.first / na;
    const double q = f.second / nb;
    const double m = 0.5 * (p + q);
    if (p > 0.0) js += 0.5 * p * std::log2(p / m);
    if (q > 0.0) js += 0.5 * q * std::log2(q / m);
  }
  return std::clamp(1.0 - js, 0.0, 1.0);
}

inline void check_same_schema(const RawTable& real, const RawTable& syn) {
  if (real.schema.columns() != syn.schema.columns()) {
    throw SchemaError("real and synthetic tables have different schemas");
  }
  if (real.rows() == 0 || syn.rows() == 0) throw ValidationError("empty table");
}

struct ColumnFidelity {
  double score = 0.0;
  std::map<std::string, double> per_column;
};

inline ColumnFidelity column_fidelity(const RawTable& real, const RawTable& syn) {
  check_same_schema(real, syn);
  ColumnFidelity out;
  for (std::size_t c = 0; c < real.schema.size(); ++c) {
    const double s = real.schema[c].kind == ColumnKind::kNumeric
                         ? wasserstein_similarity(real.numeric(c), syn.numeric(c))
                         : js_similarity(real.categorical(c), syn.categorical(c));
    out.per_column[real.schema[c].name] = s;
    out.score += s;
  }
  out.score /= static_cast<double>(real.schema.size());
  return out;
}

// Pearson correlation; nullopt when either column is constant.
inline std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
  const std::size_t n = x.size();
  if (n != y.size() || n < 2) return std::nullopt;
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (!(sxx > 0.0) || !(syy > 0.0)) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// Uncertainty coefficient U(a -> b) = (H(a) - H(a|b)) / H(a), natural logs;
// 1 when H(a) = 0.
inline double theil_u(std::span<const std::string> a, std::span<const std::string> b) {
  if (a.size() != b.size() || a.empty()) throw ValidationError("theil_u: length mismatch");
  const double n = static_cast<double>(a.size());
  std::map<std::string, double> ca, cb;
  std::map<std::pair<std::string, std::string>, double> cab;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ca[a[i]] += 1.0;
    cb[b[i]] += 1.0;
    cab[{a[i], b[i]}] += 1.0;
  }
  double ha = 0.0;
  for (const auto& [_, c] : ca) ha -= (c / n) * std::log(c / n);
  if (!(ha > 0.0)) return 1.0;
  double ha_given_b = 0.0;
  for (const auto& [k, c] : cab) ha_given_b -= (c / n) * std::log(c / cb[k.second]);
  return std::clamp((ha - ha_given_b) / ha, 0.0, 1.0);
}

struct RowFidelity {
  double score = 0.0;
  std::size_t pairs = 0;
  std::size_t skipped = 0;
  std::vector<std::string> warnings;
};

// Numeric pairs (unordered) by Pearson gap, categorical pairs (ordered) by
// Theil U gap; mixed pairs are not compared. A pair whose real correlation
// is undefined is skipped; a constant synthetic column counts as rho = 0.
// With no comparable pair the score is 1 and a warning is recorded.
inline RowFidelity row_fidelity(const RawTable& real, const RawTable& syn) {
  check_same_schema(real, syn);
  const auto& schema = real.schema;
  if (schema.size() < 2) throw ValidationError("row fidelity needs at least two columns");
  RowFidelity out;
  double total = 0.0;
  const auto num = schema.indices_of(ColumnKind::kNumeric);
  const auto cat = schema.indices_of(ColumnKind::kCategorical);
  for (std::size_t i = 0; i < num.size(); ++i) {
    for (std::size_t j = i + 1; j < num.size(); ++j) {
      const auto& na = schema[num[i]].name;
      const auto& nb = schema[num[j]].name;
      auto rr = pearson(real.numeric(num[i]), real.numeric(num[j]));
      if (!rr) {
        ++out.skipped;
        out.warnings.push_back("pair (" + na + ", " + nb + "): constant real column, skipped");
        continue;
      }
      auto rs = pearson(syn.numeric(num[i]), syn.numeric(num[j]));
      if (!rs) out.warnings.push_back("pair (" + na + ", " + nb + "): constant synthetic column");
      total += std::clamp(1.0 - std::abs(*rr - rs.value_or(0.0)), 0.0, 1.0);
      ++out.pairs;
    }
  }
  for (std::size_t a : cat) {
    for (std::size_t b : cat) {
      if (a == b) continue;
      const double ur = theil_u(real.categorical(a), real.categorical(b));
      const double us = theil_u(syn.categorical(a), syn.categorical(b));
      total += std::clamp(1.0 - std::abs(ur - us), 0.0, 1.0);
      ++out.pairs;
    }
  }
  if (out.pairs == 0) {
    out.warnings.push_back("no comparable column pairs; row fidelity set to 1");
    out.score = 1.0;
  } else {
    out.score = total / static_cast<double>(out.pairs);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Utility

namespace detail {

// Quantile-transformed numerics plus one-hot categoricals, fitted on the
// training table. Categories unseen at fit time encode as all zeros.
class FeatureEncoder {
 public:
  FeatureEncoder(const RawTable& train, std::size_t target) : target_(target) {
    for (std::size_t c = 0; c < train.schema.size(); ++c) {
      if (c == target) continue;
      if (train.schema[c].kind == ColumnKind::kNumeric) {
        maps_.emplace(c, data::QuantileMap::fit(train.numeric(c), 1000));
        width_ += 1;
      } else {
        std::map<std::string, std::size_t> vocab;
        for (const auto& v : train.categorical(c)) vocab.try_emplace(v, 0);
        std::size_t k = 0;
        for (auto& [_, idx] : vocab) idx = k++;
        width_ += vocab.size();
        vocab_.emplace(c, std::move(vocab));
      }
    }
  }

  std::size_t width() const { return width_; }

  Eigen::MatrixXd transform(const RawTable& t) const {
    Eigen::MatrixXd x = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(t.rows()),
                                              static_cast<Eigen::Index>(width_));
    Eigen::Index col = 0;
    for (std::size_t c = 0; c < t.schema.size(); ++c) {
      if (c == target_) continue;
      if (t.schema[c].kind == ColumnKind::kNumeric) {
        const auto& m = maps_.at(c);
        for (std::size_t r = 0; r < t.rows(); ++r) {
          x(static_cast<Eigen::Index>(r), col) = m.transform(t.numeric(c)[r]);
        }
        col += 1;
      } else {
        const auto& vocab = vocab_.at(c);
        for (std::size_t r = 0; r < t.rows(); ++r) {
          auto it = vocab.find(t.categorical(c)[r]);
          if (it != vocab.end()) {
            x(static_cast<Eigen::Index>(r), col + static_cast<Eigen::Index>(it->second)) = 1.0;
          }
        }
        col += static_cast<Eigen::Index>(vocab.size());
      }
    }
    return x;
  }

 private:
  std::size_t target_;
  std::size_t width_ = 0;
  std::map<std::size_t, data::QuantileMap> maps_;
  std::map<std::size_t, std::map<std::string, std::size_t>> vocab_;
};

inline Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& z) {
  Eigen::MatrixXd p = z;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const double mx = p.row(i).maxCoeff();
    p.row(i) = (p.row(i).array() - mx).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

inline Eigen::MatrixXd one_hot(std::span<const std::size_t> y, std::size_t k) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(y.size()),
                                              static_cast<Eigen::Index>(k));
  for (std::size_t i = 0; i < y.size(); ++i) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(y[i])) = 1.0;
  return out;
}

inline std::vector<std::size_t> argmax_rows(const Eigen::MatrixXd& s) {
  std::vector<std::size_t> out(static_cast<std::size_t>(s.rows()));
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    Eigen::Index best = 0;
    s.row(i).maxCoeff(&best);
    out[static_cast<std::size_t>(i)] = static_cast<std::size_t>(best);
  }
  return out;
}

}  // namespace detail

// Multinomial logistic regression, full-batch gradient descent from zero.
class LogisticRegression {
 public:
  void fit(const Eigen::MatrixXd& x, std::span<const std::size_t> y, std::size_t classes,
           std::uint64_t /*seed*/) {
    const Eigen::Index d = x.cols();
    w_ = Eigen::MatrixXd::Zero(d, static_cast<Eigen::Index>(classes));
    b_ = Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(classes));
    const Eigen::MatrixXd t = detail::one_hot(y, classes);
    const double n = static_cast<double>(x.rows());
    for (int it = 0; it < kIterations; ++it) {
      Eigen::MatrixXd p = detail::softmax_rows((x * w_).rowwise() + b_);
      Eigen::MatrixXd err = (p - t) / n;
      w_ -= kLearningRate * (x.transpose() * err + kL2 * w_);
      b_ -= kLearningRate * err.colwise().sum();
    }
  }
  std::vector<std::size_t> predict(const Eigen::MatrixXd& x) const {
    return detail::argmax_rows((x * w_).rowwise() + b_);
  }

 private:
  static constexpr int kIterations = 500;
  static constexpr double kLearningRate = 1.0;
  static constexpr double kL2 = 1e-4;
  Eigen::MatrixXd w_;
  Eigen::RowVectorXd b_;
};

// CART with Gini impurity. Thresholds are midpoints between consecutive
// distinct values; ties in gain keep the first (feature, threshold) found.
class DecisionTree {
 public:
  explicit DecisionTree(std::size_t max_depth = 8) : max_depth_(max_depth) {}

  void fit(const Eigen::MatrixXd& x, std::span<const std::size_t> y, std::size_t classes,
           std::uint64_t /*seed*/) {
    classes_ = classes;
    nodes_.clear();
    std::vector<std::size_t> idx(y.size());
    std::iota(idx.begin(), idx.end(), 0);
    build(x, y, idx, 0);
  }

  std::vector<std::size_t> predict(const Eigen::MatrixXd& x) const {
    std::vector<std::size_t> out(static_cast<std::size_t>(x.rows()));
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      std::size_t n = 0;
      while (!nodes_[n].leaf) {
        n = x(i, static_cast<Eigen::Index>(nodes_[n].feature)) <= nodes_[n].threshold ? nodes_[n].left
                                                                                      : nodes_[n].right;
      }
      out[static_cast<std::size_t>(i)] = nodes_[n].label;
    }
    return out;
  }

  std::size_t depth() const { return depth_; }

 private:
  struct Node {
    bool leaf = true;
    std::size_t feature = 0;
    double threshold = 0.0;
    std::size_t left = 0, right = 0;
    std::size_t label = 0;
  };

  static double gini(const std::vector<double>& counts, double n) {
    if (n <= 0.0) return 0.0;
    double s = 1.0;
    for (double c : counts) s -= (c / n) * (c / n);
    return s;
  }

  std::size_t build(const Eigen::MatrixXd& x, std::span<const std::size_t> y,
                    std::vector<std::size_t>& idx, std::size_t depth) {
    depth_ = std::max(depth_, depth);
    const std::size_t id = nodes_.size();
    nodes_.push_back({});
    std::vector<double> counts(classes_, 0.0);
    for (std::size_t i : idx) counts[y[i]] += 1.0;
    nodes_[id].label = static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
    const double n = static_cast<double>(idx.size());
    const double parent = gini(counts, n);
    if (depth >= max_depth_ || idx.size() < 2 || parent <= 0.0) return id;

    double best_gain = 1e-12;
    std::size_t best_f = 0;
    double best_t = 0.0;
    bool found = false;
    std::vector<std::size_t> order = idx;
    for (Eigen::Index f = 0; f < x.cols(); ++f) {
      std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return x(static_cast<Eigen::Index>(a), f) < x(static_cast<Eigen::Index>(b), f);
      });
      std::vector<double> left(classes_, 0.0);
      std::vector<double> right = counts;
      for (std::size_t k = 0; k + 1 < order.size(); ++k) {
        left[y[order[k]]] += 1.0;
        right[y[order[k]]] -= 1.0;
        const double v0 = x(static_cast<Eigen::Index>(order[k]), f);
        const double v1 = x(static_cast<Eigen::Index>(order[k + 1]), f);
        if (!(v1 > v0)) continue;
        const double nl = static_cast<double>(k + 1);
        const double nr = n - nl;
        const double gain = parent - (nl / n) * gini(left, nl) - (nr / n) * gini(right, nr);
        if (gain > best_gain) {
          best_gain = gain;
          best_f = static_cast<std::size_t>(f);
          best_t = 0.5 * (v0 + v1);
          found = true;
        }
      }
    }
    if (!found) return id;

    std::vector<std::size_t> li, ri;
    for (std::size_t i : idx) {
      (x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(best_f)) <= best_t ? li : ri).push_back(i);
    }
    idx.clear();
    idx.shrink_to_fit();
    const std::size_t l = build(x, y, li, depth + 1);
    const std::size_t r = build(x, y, ri, depth + 1);
    nodes_[id].leaf = false;
    nodes_[id].feature = best_f;
    nodes_[id].threshold = best_t;
    nodes_[id].left = l;
    nodes_[id].right = r;
    return id;
  }

  std::size_t max_depth_;
  std::size_t classes_ = 0;
  std::size_t depth_ = 0;
  std::vector<Node> nodes_;
};

// One hidden ReLU layer of width 64, softmax output, Adam on minibatches.
class MlpClassifier {
 public:
  void fit(const Eigen::MatrixXd& x, std::span<const std::size_t> y, std::size_t classes,
           std::uint64_t seed) {
    const Eigen::Index d = x.cols();
    const Eigen::Index k = static_cast<Eigen::Index>(classes);
    Rng rng(seed);
    auto uniform = [&](Eigen::Index rows, Eigen::Index cols, double bound) {
      std::uniform_real_distribution<double> u(-bound, bound);
      Eigen::MatrixXd m(rows, cols);
      for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = u(rng);
      return m;
    };
    const double b1 = 1.0 / std::sqrt(static_cast<double>(std::max<Eigen::Index>(d, 1)));
    const double b2 = 1.0 / std::sqrt(static_cast<double>(kHidden));
    w1_ = uniform(d, kHidden, b1);
    c1_ = uniform(1, kHidden, b1).row(0);
    w2_ = uniform(kHidden, k, b2);
    c2_ = uniform(1, k, b2).row(0);

    Eigen::MatrixXd mw1 = Eigen::MatrixXd::Zero(d, kHidden), vw1 = mw1;
    Eigen::MatrixXd mw2 = Eigen::MatrixXd::Zero(kHidden, k), vw2 = mw2;
    Eigen::RowVectorXd mc1 = Eigen::RowVectorXd::Zero(kHidden), vc1 = mc1;
    Eigen::RowVectorXd mc2 = Eigen::RowVectorXd::Zero(k), vc2 = mc2;
    auto adam = [&](auto& p, auto& m, auto& v, const auto& g, int t) {
      m = kBeta1 * m + (1.0 - kBeta1) * g;
      v = kBeta2 * v + (1.0 - kBeta2) * g.cwiseProduct(g);
      const double s1 = 1.0 - std::pow(kBeta1, t);
      const double s2 = 1.0 - std::pow(kBeta2, t);
      p -= (kLearningRate * (m / s1).array() / ((v / s2).array().sqrt() + 1e-8)).matrix();
    };

    const Eigen::MatrixXd t_all = detail::one_hot(y, classes);
    std::vector<Eigen::Index> order(static_cast<std::size_t>(x.rows()));
    std::iota(order.begin(), order.end(), 0);
    int step = 0;
    for (int epoch = 0; epoch < kEpochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t start = 0; start < order.size(); start += kBatch) {
        const std::size_t end = std::min(order.size(), start + kBatch);
        const Eigen::Index bn = static_cast<Eigen::Index>(end - start);
        Eigen::MatrixXd xb(bn, d), tb(bn, k);
        for (Eigen::Index i = 0; i < bn; ++i) {
          xb.row(i) = x.row(order[start + static_cast<std::size_t>(i)]);
          tb.row(i) = t_all.row(order[start + static_cast<std::size_t>(i)]);
        }
        Eigen::MatrixXd h = ((xb * w1_).rowwise() + c1_).cwiseMax(0.0);
        Eigen::MatrixXd p = detail::softmax_rows((h * w2_).rowwise() + c2_);
        Eigen::MatrixXd dz2 = (p - tb) / static_cast<double>(bn);
        Eigen::MatrixXd gw2 = h.transpose() * dz2;
        Eigen::RowVectorXd gc2 = dz2.colwise().sum();
        Eigen::MatrixXd dh = (dz2 * w2_.transpose()).cwiseProduct((h.array() > 0.0).cast<double>().matrix());
        Eigen::MatrixXd gw1 = xb.transpose() * dh;
        Eigen::RowVectorXd gc1 = dh.colwise().sum();
        ++step;
        adam(w1_, mw1, vw1, gw1, step);
        adam(c1_, mc1, vc1, gc1, step);
        adam(w2_, mw2, vw2, gw2, step);
        adam(c2_, mc2, vc2, gc2, step);
      }
    }
  }

  std::vector<std::size_t> predict(const Eigen::MatrixXd& x) const {
    Eigen::MatrixXd h = ((x * w1_).rowwise() + c1_).cwiseMax(0.0);
    return detail::argmax_rows((h * w2_).rowwise() + c2_);
  }

 private:
  static constexpr Eigen::Index kHidden = 64;
  static constexpr int kEpochs = 60;
  static constexpr std::size_t kBatch = 64;
  static constexpr double kLearningRate = 1e-3;
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  Eigen::MatrixXd w1_, w2_;
  Eigen::RowVectorXd c1_, c2_;
};

struct UtilityResult {
  double score = 0.0;
  std::map<std::string, double> accuracies;
  std::vector<std::string> warnings;
};

inline const std::vector<std::string>& classifier_names() {
  static const std::vector<std::string> names{"decision_tree", "logistic_regression", "mlp"};
  return names;
}

// Trains each built-in classifier on `train` and scores accuracy on `test`.
// The score is the mean over classifiers that ran; a single-class training
// target skips all of them and yields 0 with a warning.
inline UtilityResult utility_score(const RawTable& train, const RawTable& test, std::uint64_t seed) {
  check_same_schema(test, train);
  const auto& target = train.schema.target_column();
  if (!target) throw ValidationError("utility needs a target column in the schema");
  const std::size_t tc = train.schema.index_of(*target);
  if (train.schema[tc].kind != ColumnKind::kCategorical) {
    throw ValidationError("utility target \"" + *target + "\" must be categorical");
  }
  std::map<std::string, std::size_t> labels;
  for (const auto& v : train.categorical(tc)) labels.try_emplace(v, 0);
  for (const auto& v : test.categorical(tc)) labels.try_emplace(v, 0);
  std::size_t k = 0;
  for (auto& [_, i] : labels) i = k++;
  auto encode_y = [&](const RawTable& t) {
    std::vector<std::size_t> y;
    for (const auto& v : t.categorical(tc)) y.push_back(labels.at(v));
    return y;
  };
  const auto ytr = encode_y(train);
  const auto yte = encode_y(test);

  UtilityResult out;
  std::vector<std::size_t> distinct(ytr);
  std::sort(distinct.begin(), distinct.end());
  if (std::unique(distinct.begin(), distinct.end()) - distinct.begin() < 2) {
    out.warnings.push_back("single-class target in training data; classifiers skipped");
    return out;
  }

  detail::FeatureEncoder enc(train, tc);
  const Eigen::MatrixXd xtr = enc.transform(train);
  const Eigen::MatrixXd xte = enc.transform(test);
  auto accuracy = [&](const std::vector<std::size_t>& pred) {
    std::size_t hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == yte[i];
    return static_cast<double>(hit) / static_cast<double>(pred.size());
  };
  auto run = [&](auto model, const std::string& name, std::uint64_t stream) {
    model.fit(xtr, ytr, k, derive_seed(seed, stream));
    out.accuracies[name] = accuracy(model.predict(xte));
  };
  run(DecisionTree(8), "decision_tree", 1);
  run(LogisticRegression(), "logistic_regression", 2);
  run(MlpClassifier(), "mlp", 3);
  for (const auto& [_, a] : out.accuracies) out.score += a;
  out.score /= static_cast<double>(out.accuracies.size());
  return out;
}

// ---------------------------------------------------------------------------
// Privacy attacks

namespace detail {

// Real and synthetic tables in one comparable form: numeric columns scaled
// by the joint range, categorical columns as codes of the joint vocabulary.
struct GowerSpace {
  std::vector<bool> numeric;
  std::vector<double> range;
  std::vector<std::vector<double>> real, syn;  // column-major

  GowerSpace(const RawTable& r, const RawTable& s) {
    const std::size_t d = r.schema.size();
    numeric.resize(d);
    range.assign(d, 0.0);
    real.resize(d);
    syn.resize(d);
    for (std::size_t c = 0; c < d; ++c) {
      if (r.schema[c].kind == ColumnKind::kNumeric) {
        numeric[c] = true;
        const auto& a = r.numeric(c);
        const auto& b = s.numeric(c);
        const auto [alo, ahi] = std::minmax_element(a.begin(), a.end());
        const auto [blo, bhi] = std::minmax_element(b.begin(), b.end());
        range[c] = std::max(*ahi, *bhi) - std::min(*alo, *blo);
        real[c] = a;
        syn[c] = b;
      } else {
        std::map<std::string, double> codes;
        for (const auto& v : r.categorical(c)) codes.try_emplace(v, static_cast<double>(codes.size()));
        for (const auto& v : s.categorical(c)) codes.try_emplace(v, static_cast<double>(codes.size()));
        for (const auto& v : r.categorical(c)) real[c].push_back(codes.at(v));
        for (const auto& v : s.categorical(c)) syn[c].push_back(codes.at(v));
      }
    }
  }

  double term(std::size_t c, double a, double b) const {
    if (!numeric[c]) return a == b ? 0.0 : 1.0;
    return range[c] > 0.0 ? std::abs(a - b) / range[c] : 0.0;
  }

  // Nearest synthetic row to real row `r` over `cols`; ties broken
  // uniformly at random.
  std::size_t nearest(std::size_t r, std::span<const std::size_t> cols, Rng& rng) const {
    const std::size_t n = syn.front().size();
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0, ties = 0;
    for (std::size_t j = 0; j < n; ++j) {
      double dist = 0.0;
      for (std::size_t c : cols) dist += term(c, real[c][r], syn[c][j]);
      if (dist < best) {
        best = dist;
        arg = j;
        ties = 1;
      } else if (dist == best) {
        ++ties;
        if (uniform_index(rng, 1, ties) == 1) arg = j;
      }
    }
    return arg;
  }
};

inline std::pair<double, double> wilson_interval(std::size_t successes, std::size_t trials,
                                                 double z = 1.959963984540054) {
  if (trials == 0) return {0.0, 1.0};
  const double n = static_cast<double>(trials);
  const double p = static_cast<double>(successes) / n;
  const double denom = 1.0 + z * z / n;
  const double centre = (p + z * z / (2.0 * n)) / denom;
  const double half = z * std::sqrt(p * (1.0 - p) / n + z * z / (4.0 * n * n)) / denom;
  return {std::max(0.0, centre - half), std::min(1.0, centre + half)};
}

inline double normalize_risk(double raw, double baseline) {
  if (!(baseline < 1.0)) return 0.0;
  return std::clamp((raw - baseline) / (1.0 - baseline), 0.0, 1.0);
}

}  // namespace detail

struct AttackResult {
  double risk = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  double raw = 0.0;
  double baseline = 0.0;
  std::size_t attacks = 0;
  std::size_t successes = 0;
  std::map<std::string, double> per_column;  // inference only
  std::vector<std::string> warnings;
};

struct AttackOptions {
  std::size_t n_attacks = 500;
  std::uint64_t seed = 0;
  std::size_t max_tries = 20;  // singling out: candidate predicates per attack
};

namespace detail {

struct Predicate {
  struct Term {
    std::size_t column;
    int op;  // -1: <=, 0: ==, +1: >=
    double value;
  };
  std::vector<Term> terms;

  bool matches(const std::vector<std::vector<double>>& table, std::size_t r) const {
    for (const auto& t : terms) {
      const double v = table[t.column][r];
      if ((t.op == 0 && v != t.value) || (t.op < 0 && v > t.value) || (t.op > 0 && v < t.value)) {
        return false;
      }
    }
    return true;
  }

  std::size_t count(const std::vector<std::vector<double>>& table, std::size_t limit) const {
    std::size_t n = 0;
    for (std::size_t r = 0; r < table.front().size() && n < limit; ++r) n += matches(table, r);
    return n;
  }
};

// Attack loop shared by the attack and its baseline: predicates come from
// `source` and must single out one row of `source`; success means exactly
// one match in `real`.
inline std::pair<std::size_t, std::size_t> singling_out_trials(
    const std::vector<std::vector<double>>& source, const std::vector<std::vector<double>>& real,
    const std::vector<bool>& numeric, const AttackOptions& opt) {
  const std::size_t d = source.size();
  const std::size_t n = source.front().size();
  std::vector<double> median(d, 0.0);
  for (std::size_t c = 0; c < d; ++c) {
    if (!numeric[c]) continue;
    std::vector<double> v = source[c];
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2), v.end());
    median[c] = v[v.size() / 2];
  }
  std::vector<std::size_t> cols(d);
  std::iota(cols.begin(), cols.end(), 0);
  const std::size_t kmin = std::min<std::size_t>(2, d);
  const std::size_t kmax = std::min<std::size_t>(4, d);

  std::size_t made = 0, success = 0;
  for (std::size_t a = 0; a < opt.n_attacks; ++a) {
    Rng rng(derive_seed(opt.seed, a));
    for (std::size_t tryi = 0; tryi < opt.max_tries; ++tryi) {
      const std::size_t r = uniform_index(rng, 0, n - 1);
      const std::size_t k = uniform_index(rng, kmin, kmax);
      std::shuffle(cols.begin(), cols.end(), rng);
      Predicate p;
      for (std::size_t i = 0; i < k; ++i) {
        const std::size_t c = cols[i];
        const double v = source[c][r];
        p.terms.push_back({c, numeric[c] ? (v >= median[c] ? 1 : -1) : 0, v});
      }
      if (p.count(source, 2) != 1) continue;
      ++made;
      success += p.count(real, 2) == 1;
      break;
    }
  }
  return {made, success};
}

}  // namespace detail

// Predicates are conjunctions over 2-4 random columns of a random synthetic
// record (numerics as a tail bound away from the synthetic median,
// categoricals as equality), kept only if they single out that record in
// the synthetic table. Success: exactly one real match. The baseline runs
// the same attack from a copy of the synthetic table with every column
// shuffled independently, which keeps marginals but drops record structure.
inline AttackResult singling_out_risk(const RawTable& real, const RawTable& syn,
                                      const AttackOptions& opt = {}) {
  check_same_schema(real, syn);
  detail::GowerSpace g(real, syn);
  AttackResult out;
  auto permuted = g.syn;
  Rng prng(derive_seed(opt.seed, 0x5eedULL));
  for (auto& col : permuted) std::shuffle(col.begin(), col.end(), prng);

  const auto [made, success] = detail::singling_out_trials(g.syn, g.real, g.numeric, opt);
  const auto [bmade, bsuccess] = detail::singling_out_trials(permuted, g.real, g.numeric, opt);
  out.attacks = made;
  out.successes = success;
  if (made == 0) {
    out.warnings.push_back("no singling-out predicate could be built; risk set to 0");
    return out;
  }
  out.raw = static_cast<double>(success) / static_cast<double>(made);
  out.baseline = bmade ? static_cast<double>(bsuccess) / static_cast<double>(bmade) : 0.0;
  out.risk = detail::normalize_risk(out.raw, out.baseline);
  const auto [lo, hi] = detail::wilson_interval(success, made);
  out.ci_low = detail::normalize_risk(lo, out.baseline);
  out.ci_high = detail::normalize_risk(hi, out.baseline);
  return out;
}

// Columns split into A and B (default: first min(10, D) columns,
// alternating). An attacked real record is linked when its nearest
// synthetic row on A equals its nearest on B. Baseline: 1 / |syn|.
inline AttackResult linkability_risk(const RawTable& real, const RawTable& syn,
                                     const AttackOptions& opt = {},
                                     std::optional<std::pair<std::vector<std::size_t>, std::vector<std::size_t>>>
                                         split = std::nullopt) {
  check_same_schema(real, syn);
  const std::size_t d = real.schema.size();
  if (d < 2) throw ValidationError("linkability needs at least two columns");
  std::vector<std::size_t> a, b;
  if (split) {
    std::tie(a, b) = *split;
    for (std::size_t c : a) {
      if (c >= d || std::find(b.begin(), b.end(), c) != b.end()) {
        throw ValidationError("linkability column sets must be disjoint and in range");
      }
    }
    for (std::size_t c : b) {
      if (c >= d) throw ValidationError("linkability column sets must be disjoint and in range");
    }
    if (a.empty() || b.empty()) throw ValidationError("linkability column sets must be non-empty");
  } else {
    for (std::size_t c = 0; c < std::min<std::size_t>(10, d); ++c) (c % 2 ? b : a).push_back(c);
  }
  detail::GowerSpace g(real, syn);
  Rng rng(derive_seed(opt.seed, 0x11c4ULL));
  const std::size_t n_real = real.rows();
  std::size_t success = 0;
  for (std::size_t i = 0; i < opt.n_attacks; ++i) {
    const std::size_t r = uniform_index(rng, 0, n_real - 1);
    success += g.nearest(r, a, rng) == g.nearest(r, b, rng);
  }
  AttackResult out;
  out.attacks = opt.n_attacks;
  out.successes = success;
  out.raw = opt.n_attacks ? static_cast<double>(success) / static_cast<double>(opt.n_attacks) : 0.0;
  out.baseline = 1.0 / static_cast<double>(syn.rows());
  out.risk = detail::normalize_risk(out.raw, out.baseline);
  const auto [lo, hi] = detail::wilson_interval(success, opt.n_attacks);
  out.ci_low = detail::normalize_risk(lo, out.baseline);
  out.ci_high = detail::normalize_risk(hi, out.baseline);
  return out;
}

// Each column in turn is the secret, predicted from the nearest synthetic
// row on the other columns. Categorical: exact match; numeric: within 5% of
// the joint range. Baseline: synthetic mode or median for every record.
inline AttackResult inference_risk(const RawTable& real, const RawTable& syn,
                                   const AttackOptions& opt = {}) {
  check_same_schema(real, syn);
  const std::size_t d = real.schema.size();
  if (d < 2) throw ValidationError("inference needs at least two columns");
  detail::GowerSpace g(real, syn);
  AttackResult out;
  const std::size_t n_real = real.rows();
  double total = 0.0, raw_total = 0.0, base_total = 0.0;
  for (std::size_t c = 0; c < d; ++c) {
    std::vector<std::size_t> aux;
    for (std::size_t k = 0; k < d; ++k) {
      if (k != c) aux.push_back(k);
    }
    double guess = 0.0;
    if (g.numeric[c]) {
      std::vector<double> v = g.syn[c];
      std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2), v.end());
      guess = v[v.size() / 2];
    } else {
      std::map<double, std::size_t> counts;
      for (double v : g.syn[c]) counts[v] += 1;
      guess = std::max_element(counts.begin(), counts.end(), [](const auto& x, const auto& y) {
                return x.second < y.second;
              })->first;
    }
    auto hit = [&](double pred, double truth) {
      return g.numeric[c] ? std::abs(pred - truth) <= 0.05 * g.range[c] : pred == truth;
    };
    Rng rng(derive_seed(opt.seed, 0x1f4ULL, c));
    std::size_t success = 0, base = 0;
    for (std::size_t i = 0; i < opt.n_attacks; ++i) {
      const std::size_t r = uniform_index(rng, 0, n_real - 1);
      const double truth = g.real[c][r];
      success += hit(g.syn[c][g.nearest(r, aux, rng)], truth);
      base += hit(guess, truth);
    }
    const double nn = static_cast<double>(std::max<std::size_t>(opt.n_attacks, 1));
    const double raw = static_cast<double>(success) / nn;
    const double bl = static_cast<double>(base) / nn;
    const double risk = detail::normalize_risk(raw, bl);
    out.per_column[real.schema[c].name] = risk;
    out.successes += success;
    out.attacks += opt.n_attacks;
    total += risk;
    raw_total += raw;
    base_total += bl;
  }
  out.risk = total / static_cast<double>(d);
  out.raw = raw_total / static_cast<double>(d);
  out.baseline = base_total / static_cast<double>(d);
  out.ci_low = out.ci_high = out.risk;
  return out;
}

inline double privacy_score(double sor, double lr, double ir) {
  for (double v : {sor, lr, ir}) {
    if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("privacy_score: risks must lie in [0, 1]");
  }
  return (sor + lr + ir) / 3.0;
}

// ---------------------------------------------------------------------------
// Report

struct MetricsReport {
  // privacy (risk: lower is more private)
  AttackResult singling_out;
  AttackResult linkability;
  AttackResult inference;
  double privacy_risk = 0.0;
  // utility
  UtilityResult utility;
  // fidelity
  ColumnFidelity column;
  RowFidelity row;
  double fidelity = 0.0;
  // metadata
  std::string dataset;
  std::string config_hash;
  std::map<std::string, std::uint64_t> seeds;

  double privacy_protection() const { return 1.0 - privacy_risk; }

  json to_json() const {
    auto attack = [](const AttackResult& a) {
      json j{{"risk", a.risk},       {"ci_low", a.ci_low},       {"ci_high", a.ci_high},
             {"raw", a.raw},         {"baseline", a.baseline},   {"attacks", a.attacks},
             {"successes", a.successes}, {"warnings", a.warnings}};
      if (!a.per_column.empty()) j["per_column"] = a.per_column;
      return j;
    };
    json j;
    j["privacy"] = {{"risk", privacy_risk},
                    {"protection", privacy_protection()},
                    {"singling_out", attack(singling_out)},
                    {"linkability", attack(linkability)},
                    {"inference", attack(inference)}};
    j["utility"] = {{"score", utility.score},
                    {"accuracies", utility.accuracies},
                    {"warnings", utility.warnings}};
    j["fidelity"] = {{"score", fidelity},
                     {"column", {{"score", column.score}, {"per_column", column.per_column}}},
                     {"row",
                      {{"score", row.score},
                       {"pairs", row.pairs},
                       {"skipped", row.skipped},
                       {"warnings", row.warnings}}}};
    j["metadata"] = {{"dataset", dataset}, {"config_hash", config_hash}, {"seeds", seeds}};
    return j;
  }

  static MetricsReport from_json(const json& j) {
    auto attack = [](const json& a) {
      AttackResult r;
      r.risk = a.at("risk").get<double>();
      r.ci_low = a.at("ci_low").get<double>();
      r.ci_high = a.at("ci_high").get<double>();
      r.raw = a.at("raw").get<double>();
      r.baseline = a.at("baseline").get<double>();
      r.attacks = a.at("attacks").get<std::size_t>();
      r.successes = a.at("successes").get<std::size_t>();
      r.warnings = a.at("warnings").get<std::vector<std::string>>();
      if (a.contains("per_column")) r.per_column = a.at("per_column").get<std::map<std::string, double>>();
      return r;
    };
    MetricsReport m;
    const auto& p = j.at("privacy");
    m.privacy_risk = p.at("risk").get<double>();
    m.singling_out = attack(p.at("singling_out"));
    m.linkability = attack(p.at("linkability"));
    m.inference = attack(p.at("inference"));
    const auto& u = j.at("utility");
    m.utility.score = u.at("score").get<double>();
    m.utility.accuracies = u.at("accuracies").get<std::map<std::string, double>>();
    m.utility.warnings = u.at("warnings").get<std::vector<std::string>>();
    const auto& f = j.at("fidelity");
    m.fidelity = f.at("score").get<double>();
    m.column.score = f.at("column").at("score").get<double>();
    m.column.per_column = f.at("column").at("per_column").get<std::map<std::string, double>>();
    m.row.score = f.at("row").at("score").get<double>();
    m.row.pairs = f.at("row").at("pairs").get<std::size_t>();
    m.row.skipped = f.at("row").at("skipped").get<std::size_t>();
    m.row.warnings = f.at("row").at("warnings").get<std::vector<std::string>>();
    const auto& md = j.at("metadata");
    m.dataset = md.at("dataset").get<std::string>();
    m.config_hash = md.at("config_hash").get<std::string>();
    m.seeds = md.at("seeds").get<std::map<std::string, std::uint64_t>>();
    return m;
  }
};

struct EvaluateOptions {
  AttackOptions attack;
  std::uint64_t utility_seed = 0;
  std::uint64_t split_seed = 0;
  double test_fraction = 0.2;
};

// Real rows are split into train/test (unless `real_test` is given); the
// synthetic training table is cut to the real training size. Fidelity and
// attacks compare the full real table with the full synthetic table.
inline MetricsReport evaluate(const RawTable& real, const RawTable& syn,
                              const EvaluateOptions& opt = {},
                              const std::optional<RawTable>& real_test = std::nullopt) {
  check_same_schema(real, syn);
  MetricsReport m;
  m.column = column_fidelity(real, syn);
  m.row = row_fidelity(real, syn);
  m.fidelity = 0.5 * (m.column.score + m.row.score);

  m.singling_out = singling_out_risk(real, syn, opt.attack);
  m.linkability = linkability_risk(real, syn, opt.attack);
  m.inference = inference_risk(real, syn, opt.attack);
  m.privacy_risk = privacy_score(m.singling_out.risk, m.linkability.risk, m.inference.risk);

  if (real.schema.target_column()) {
    RawTable train_real, test_real;
    if (real_test) {
      train_real = real;
      test_real = *real_test;
    } else {
      std::vector<std::size_t> idx(real.rows());
      std::iota(idx.begin(), idx.end(), 0);
      Rng rng(opt.split_seed);
      std::shuffle(idx.begin(), idx.end(), rng);
      const auto n_test = static_cast<std::size_t>(
          std::llround(opt.test_fraction * static_cast<double>(idx.size())));
      if (n_test == 0 || n_test >= idx.size()) throw ValidationError("utility split leaves an empty side");
      std::vector<std::size_t> te(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
      std::vector<std::size_t> tr(idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
      std::sort(te.begin(), te.end());
      std::sort(tr.begin(), tr.end());
      train_real = real.select(tr);
      test_real = real.select(te);
    }
    std::vector<std::size_t> keep(std::min(syn.rows(), train_real.rows()));
    std::iota(keep.begin(), keep.end(), 0);
    m.utility = utility_score(syn.select(keep), test_real, opt.utility_seed);
  } else {
    m.utility.warnings.push_back("schema has no target column; utility not computed");
  }
  return m;
}

}  // namespace dpfedtab::metrics
