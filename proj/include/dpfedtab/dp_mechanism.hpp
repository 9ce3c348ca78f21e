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

// DP-SGD building blocks: per-sample clipping, the Gaussian mechanism on the
// clipped sum, and a Renyi-DP accountant for the Poisson-subsampled Gaussian
// mechanism with conversion to (epsilon, delta).

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "json.hpp"

#include "dpfedtab/common.hpp"
#include "dpfedtab/tensor_nn.hpp"

namespace dpfedtab::dp {

using nlohmann::json;
using nn::GradientVector;

inline constexpr double kInfinity = std::numeric_limits<double>::infinity();

struct DpConfig {
  // Infinite target disables DP unless noise_multiplier is set explicitly.
  double target_epsilon = kInfinity;
  // 0 means "1 / client sample count".
  double delta = 0.0;
  double clip_norm = 1.0;
  // Explicit sigma; calibrated from target_epsilon when unset.
  std::optional<double> noise_multiplier;
  // Add N(0, sigma^2) after averaging instead of N(0, (sigma C)^2) before.
  // Not covered by the accountant.
  bool literal_noise = false;

  bool enabled() const { return std::isfinite(target_epsilon) || noise_multiplier.has_value(); }

  void validate() const {
    if (!(target_epsilon > 0.0)) throw ValidationError("target epsilon must be > 0");
    if (delta < 0.0 || delta >= 1.0) throw ValidationError("delta must lie in (0, 1)");
    if (!(clip_norm > 0.0)) throw ValidationError("clip norm must be > 0");
    if (noise_multiplier && !(*noise_multiplier >= 0.0)) {
      throw ValidationError("noise multiplier must be >= 0");
    }
  }

  bool operator==(const DpConfig&) const = default;
};

inline GradientVector clip(const GradientVector& grad, double clip_norm) {
  if (!(clip_norm > 0.0)) throw ValidationError("clip norm must be > 0");
  if (!all_finite(grad.values().data(), grad.size())) throw DivergenceError("non-finite gradient");
  if (grad.norm() <= clip_norm) return grad;
  const double scale = clip_norm / grad.norm();
  std::vector<double> out(grad.values());
  for (auto& v : out) v *= scale;
  GradientVector g(std::move(out));
  // Rounding can leave the rescaled norm a hair above C.
  while (g.norm() > clip_norm) {
    const double fix = std::nextafter(clip_norm / g.norm(), 0.0);
    for (auto& v : g.mutable_values()) v *= fix;
    g.recompute_norm();
  }
  return g;
}

// (1/n) [sum_i clip(g_i, C) + N(0, (sigma C)^2 I)] where n is `normalizer`
// (the expected batch size under Poisson sampling) or the batch size.
inline GradientVector privatize(std::span<const GradientVector> grads, double clip_norm,
                                double sigma, Rng& rng,
                                std::optional<double> normalizer = std::nullopt,
                                bool literal_noise = false, std::size_t dim = 0) {
  if (grads.empty() && !normalizer) throw ValidationError("privatize: empty batch");
  if (!(sigma >= 0.0)) throw ValidationError("privatize: sigma must be >= 0");
  const std::size_t n = grads.empty() ? dim : grads.front().size();
  if (n == 0) throw ValidationError("privatize: unknown gradient dimension");
  const double denom = normalizer ? *normalizer : static_cast<double>(grads.size());
  if (!(denom > 0.0)) throw ValidationError("privatize: normalizer must be > 0");

  std::vector<double> sum(n, 0.0);
  for (const auto& g : grads) {
    if (g.size() != n) throw ValidationError("privatize: gradient length mismatch");
    GradientVector c = clip(g, clip_norm);
    for (std::size_t i = 0; i < n; ++i) sum[i] += c.values()[i];
  }
  if (sigma > 0.0 && !literal_noise) {
    const double std_dev = sigma * clip_norm;
    for (auto& v : sum) v += std_dev * standard_normal(rng);
  }
  for (auto& v : sum) v /= denom;
  if (sigma > 0.0 && literal_noise) {
    for (auto& v : sum) v += sigma * standard_normal(rng);
  }
  return GradientVector(std::move(sum));
}

namespace detail {

inline double log_add(double a, double b) {
  if (a == -kInfinity) return b;
  if (b == -kInfinity) return a;
  double hi = std::max(a, b);
  return hi + std::log1p(std::exp(std::min(a, b) - hi));
}

// log E[(p/q)^alpha] for integer alpha >= 2 (the binomial expansion).
inline double log_moment_integer(double q, double sigma, std::size_t alpha) {
  if (q == 1.0) {
    double a = static_cast<double>(alpha);
    return a * (a - 1.0) / (2.0 * sigma * sigma);
  }
  const double a = static_cast<double>(alpha);
  const double log_q = std::log(q);
  const double log_1mq = std::log1p(-q);
  double acc = -kInfinity;
  for (std::size_t k = 0; k <= alpha; ++k) {
    double kk = static_cast<double>(k);
    double log_binom = std::lgamma(a + 1.0) - std::lgamma(kk + 1.0) - std::lgamma(a - kk + 1.0);
    double term = log_binom + (a - kk) * log_1mq + kk * log_q + kk * (kk - 1.0) / (2.0 * sigma * sigma);
    acc = log_add(acc, term);
  }
  return std::max(acc, 0.0);
}

}  // namespace detail

// RDP of one step of the Poisson-subsampled Gaussian mechanism at order
// alpha. Integer orders use the binomial bound; fractional orders linearly
// interpolate the log-moment (alpha - 1) * RDP between neighbouring integers,
// which upper-bounds it by convexity.
inline double rdp_subsampled_gaussian(double q, double sigma, double alpha) {
  if (!(q > 0.0 && q <= 1.0)) throw ValidationError("sampling rate must lie in (0, 1]");
  if (!(sigma > 0.0)) throw ValidationError("noise multiplier must be > 0");
  if (!(alpha > 1.0)) throw ValidationError("RDP order must be > 1");
  if (q == 1.0) return alpha / (2.0 * sigma * sigma);
  const double lo = std::floor(alpha);
  if (lo == alpha) {
    return detail::log_moment_integer(q, sigma, static_cast<std::size_t>(alpha)) / (alpha - 1.0);
  }
  const double hi = lo + 1.0;
  const double a_lo = lo < 2.0 ? 0.0 : detail::log_moment_integer(q, sigma, static_cast<std::size_t>(lo));
  const double a_hi = detail::log_moment_integer(q, sigma, static_cast<std::size_t>(hi));
  const double w = alpha - lo;
  return ((1.0 - w) * a_lo + w * a_hi) / (alpha - 1.0);
}

inline std::vector<double> default_orders() {
  std::vector<double> orders;
  for (int i = 5; i <= 40; ++i) orders.push_back(0.25 * i);  // 1.25 .. 10
  for (int a = 11; a <= 64; ++a) orders.push_back(a);
  for (double a : {128.0, 256.0, 512.0}) orders.push_back(a);
  return orders;
}

struct EpsilonResult {
  double epsilon = kInfinity;
  double order = 0.0;
};

// Classic conversion: eps = min_alpha RDP(alpha) + log(1/delta) / (alpha - 1).
inline EpsilonResult rdp_to_epsilon(std::span<const double> orders, std::span<const double> rdp,
                                    double delta) {
  if (!(delta > 0.0 && delta < 1.0)) throw ValidationError("delta must lie in (0, 1)");
  EpsilonResult best;
  for (std::size_t i = 0; i < orders.size(); ++i) {
    double eps = rdp[i] + std::log(1.0 / delta) / (orders[i] - 1.0);
    if (eps < best.epsilon) best = {eps, orders[i]};
  }
  return best;
}

// Accumulates RDP over composed steps. Steps are kept as (q, sigma, count)
// groups, so k identical steps contribute exactly k * RDP(one step).
class RdpAccountant {
 public:
  struct Entry {
    double q = 1.0;
    double sigma = 1.0;
    std::uint64_t count = 0;
    bool operator==(const Entry&) const = default;
  };

  RdpAccountant() : RdpAccountant(default_orders()) {}
  explicit RdpAccountant(std::vector<double> orders) : orders_(std::move(orders)) {
    if (orders_.empty()) throw ValidationError("accountant needs at least one order");
    for (std::size_t i = 0; i < orders_.size(); ++i) {
      if (!(orders_[i] > 1.0) || (i && orders_[i] <= orders_[i - 1])) {
        throw ValidationError("RDP orders must be > 1 and strictly increasing");
      }
    }
  }

  const std::vector<double>& orders() const { return orders_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::uint64_t steps() const { return steps_; }

  void step(double q, double sigma) { compose(q, sigma, 1); }

  void compose(double q, double sigma, std::uint64_t count) {
    if (!(sigma > 0.0)) throw ValidationError("account_step: sigma must be > 0");
    if (!(q > 0.0 && q <= 1.0)) throw ValidationError("sampling rate must lie in (0, 1]");
    if (count == 0) return;
    auto it = std::find_if(entries_.begin(), entries_.end(),
                           [&](const Entry& e) { return e.q == q && e.sigma == sigma; });
    if (it == entries_.end()) {
      entries_.push_back({q, sigma, count});
      cache_.push_back(single_step(q, sigma));
    } else {
      it->count += count;
    }
    steps_ += count;
  }

  // Accumulated RDP per order.
  std::vector<double> rdp() const {
    std::vector<double> total(orders_.size(), 0.0);
    for (std::size_t e = 0; e < entries_.size(); ++e) {
      const double k = static_cast<double>(entries_[e].count);
      for (std::size_t i = 0; i < orders_.size(); ++i) total[i] += k * cache_[e][i];
    }
    return total;
  }

  EpsilonResult epsilon(double delta) const {
    if (steps_ == 0) throw ValidationError("accountant has no recorded steps");
    auto r = rdp();
    return rdp_to_epsilon(orders_, r, delta);
  }

  json to_json() const {
    json e = json::array();
    for (const auto& x : entries_) e.push_back({{"q", x.q}, {"sigma", x.sigma}, {"count", x.count}});
    return json{{"orders", orders_}, {"entries", e}};
  }
  static RdpAccountant from_json(const json& j) {
    RdpAccountant a(j.at("orders").get<std::vector<double>>());
    for (const auto& e : j.at("entries")) {
      a.compose(e.at("q").get<double>(), e.at("sigma").get<double>(),
                e.at("count").get<std::uint64_t>());
    }
    return a;
  }

  bool operator==(const RdpAccountant& o) const {
    return orders_ == o.orders_ && entries_ == o.entries_;
  }

 private:
  std::vector<double> single_step(double q, double sigma) const {
    std::vector<double> r(orders_.size());
    for (std::size_t i = 0; i < orders_.size(); ++i) {
      r[i] = rdp_subsampled_gaussian(q, sigma, orders_[i]);
    }
    return r;
  }

  std::vector<double> orders_;
  std::vector<Entry> entries_;
  std::vector<std::vector<double>> cache_;  // single-step RDP per entry
  std::uint64_t steps_ = 0;
};

// epsilon after `steps` identical steps at (q, sigma).
inline double epsilon_after(double q, double sigma, std::uint64_t steps, double delta,
                            const std::vector<double>& orders = default_orders()) {
  RdpAccountant acc(orders);
  acc.compose(q, sigma, steps);
  return acc.epsilon(delta).epsilon;
}

inline constexpr double kSigmaMin = 1e-2;
inline constexpr double kSigmaMax = 1e4;

// Smallest bisection-tested sigma in [1e-2, 1e4] whose accounted epsilon
// after `steps` lies in [0.99 target, target] (or is below target at the
// bracket's lower end).
inline double calibrate_sigma(double target_epsilon, double delta, double q, std::uint64_t steps,
                              const std::vector<double>& orders = default_orders()) {
  if (!(target_epsilon > 0.0) || !std::isfinite(target_epsilon)) {
    throw ValidationError("calibration needs a finite target epsilon > 0");
  }
  if (steps < 1) throw ValidationError("calibration needs at least one planned step");
  auto eps_at = [&](double s) { return epsilon_after(q, s, steps, delta, orders); };
  double hi = kSigmaMax;
  if (eps_at(hi) > target_epsilon) {
    throw BudgetError("epsilon " + std::to_string(target_epsilon) +
                      " unreachable with sigma <= 1e4 for " + std::to_string(steps) + " steps");
  }
  double lo = kSigmaMin;
  if (eps_at(lo) <= target_epsilon) return lo;
  for (int iter = 0; iter < 200; ++iter) {
    double mid = std::sqrt(lo * hi);
    double e = eps_at(mid);
    if (e <= target_epsilon) {
      hi = mid;
      if (e >= 0.99 * target_epsilon) break;
    } else {
      lo = mid;
    }
  }
  return hi;
}

}  // namespace dpfedtab::dp
