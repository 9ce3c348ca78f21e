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

#pragma once

#include <cmath>
#include <concepts>
#include <span>
#include <vector>

#include "json.hpp"

#include "dpfedtab/common.hpp"
#include "dpfedtab/tensor_nn.hpp"

namespace dpfedtab::diffusion {

using nlohmann::json;

// Linear beta schedule. Timesteps are 1-based: beta(1) = beta_start,
// beta(T) = beta_end.
class NoiseSchedule {
 public:
  NoiseSchedule() = default;

  static NoiseSchedule linear(std::size_t steps, double beta_start, double beta_end) {
    if (steps < 1) throw ValidationError("noise schedule needs T >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
      throw ValidationError("noise schedule needs 0 < beta_start <= beta_end < 1");
    }
    NoiseSchedule s;
    s.beta_start_ = beta_start;
    s.beta_end_ = beta_end;
    s.beta_.resize(steps);
    s.alpha_.resize(steps);
    s.alpha_bar_.resize(steps);
    double cumulative = 1.0;
    for (std::size_t i = 0; i < steps; ++i) {
      double frac = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
      s.beta_[i] = beta_start + frac * (beta_end - beta_start);
      s.alpha_[i] = 1.0 - s.beta_[i];
      cumulative *= s.alpha_[i];
      s.alpha_bar_[i] = cumulative;
    }
    return s;
  }

  std::size_t steps() const { return beta_.size(); }
  double beta_start() const { return beta_start_; }
  double beta_end() const { return beta_end_; }
  double beta(std::size_t t) const { return beta_[check(t)]; }
  double alpha(std::size_t t) const { return alpha_[check(t)]; }
  double alpha_bar(std::size_t t) const { return alpha_bar_[check(t)]; }

  json to_json() const {
    return json{{"steps", steps()}, {"beta_start", beta_start_}, {"beta_end", beta_end_}};
  }
  static NoiseSchedule from_json(const json& j) {
    return linear(j.at("steps").get<std::size_t>(), j.at("beta_start").get<double>(),
                  j.at("beta_end").get<double>());
  }

 private:
  std::size_t check(std::size_t t) const {
    if (t < 1 || t > beta_.size()) {
      throw ValidationError("timestep " + std::to_string(t) + " outside [1, " +
                            std::to_string(beta_.size()) + "]");
    }
    return t - 1;
  }

  double beta_start_ = 0.0;
  double beta_end_ = 0.0;
  std::vector<double> beta_;
  std::vector<double> alpha_;
  std::vector<double> alpha_bar_;
};

// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps
inline std::vector<double> q_sample(std::span<const double> x0, std::size_t t,
                                    std::span<const double> eps, const NoiseSchedule& schedule) {
  if (x0.size() != eps.size()) throw ValidationError("q_sample: noise width mismatch");
  const double ab = schedule.alpha_bar(t);
  const double a = std::sqrt(ab);
  const double b = std::sqrt(1.0 - ab);
  std::vector<double> out(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

// Draws t ~ U{1..T} and eps ~ N(0, I), returns (x_t, t, eps).
inline nn::TrainingExample make_training_example(std::span<const double> x0,
                                                 const NoiseSchedule& schedule, Rng& rng) {
  nn::TrainingExample ex;
  ex.t = uniform_index(rng, 1, schedule.steps());
  ex.noise.resize(x0.size());
  for (auto& e : ex.noise) e = standard_normal(rng);
  ex.x_t = q_sample(x0, ex.t, ex.noise, schedule);
  ex.signal_scale = std::sqrt(schedule.alpha_bar(ex.t));
  return ex;
}

// Anything callable as eps(x, t) -> vector<double>.
template <typename F>
concept Denoiser = requires(F f, std::span<const double> x, std::size_t t) {
  { f(x, t) } -> std::convertible_to<std::vector<double>>;
};

// One ancestral step with the given noise z:
// x_{t-1} = (x_t - beta_t / sqrt(1 - alpha_bar_t) eps) / sqrt(alpha_t) + sigma_t z,
// sigma_t^2 = beta_t, and z ignored at t = 1.
inline std::vector<double> p_sample_step_with_noise(std::span<const double> x_t,
                                                    std::span<const double> eps_pred,
                                                    std::size_t t, const NoiseSchedule& schedule,
                                                    std::span<const double> z) {
  const double beta = schedule.beta(t);
  const double coef = beta / std::sqrt(1.0 - schedule.alpha_bar(t));
  const double inv_sqrt_alpha = 1.0 / std::sqrt(schedule.alpha(t));
  const double sigma = t > 1 ? std::sqrt(beta) : 0.0;
  std::vector<double> out(x_t.size());
  for (std::size_t i = 0; i < x_t.size(); ++i) {
    out[i] = inv_sqrt_alpha * (x_t[i] - coef * eps_pred[i]);
    if (t > 1) out[i] += sigma * z[i];
    if (!std::isfinite(out[i])) {
      throw DivergenceError("non-finite sample at timestep " + std::to_string(t));
    }
  }
  return out;
}

template <Denoiser F>
std::vector<double> p_sample_step(F&& eps_model, std::span<const double> x_t, std::size_t t,
                                  const NoiseSchedule& schedule, Rng& rng) {
  std::vector<double> eps = eps_model(x_t, t);
  if (eps.size() != x_t.size()) throw ValidationError("denoiser output width mismatch");
  std::vector<double> z(x_t.size(), 0.0);
  if (t > 1) {
    for (auto& v : z) v = standard_normal(rng);
  }
  return p_sample_step_with_noise(x_t, eps, t, schedule, z);
}

inline std::vector<double> p_sample_step(const nn::DenoiserParams& params,
                                         std::span<const double> x_t, std::size_t t,
                                         const NoiseSchedule& schedule, Rng& rng) {
  return p_sample_step(
      [&](std::span<const double> x, std::size_t s) { return nn::forward(params, x, s); }, x_t, t,
      schedule, rng);
}

inline constexpr std::size_t kGenerateBlockRows = 256;

// Reverse diffusion from x_T ~ N(0, I) down to x_0. Row r draws from
// Rng(derive_seed(seed, r)); rows are batched through the network in blocks
// of kGenerateBlockRows.
inline std::vector<double> generate(const nn::DenoiserParams& params, std::size_t n_rows,
                                    const NoiseSchedule& schedule, std::uint64_t seed) {
  const std::size_t d = params.layout().data_width();
  std::vector<double> out(n_rows * d);
  for (std::size_t start = 0; start < n_rows; start += kGenerateBlockRows) {
    const std::size_t rows = std::min(kGenerateBlockRows, n_rows - start);
    // One stream per row, so the first k rows do not depend on n_rows.
    std::vector<Rng> rngs;
    rngs.reserve(rows);
    for (std::size_t r = 0; r < rows; ++r) rngs.emplace_back(derive_seed(seed, start + r));
    std::vector<double> x(rows * d);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < d; ++j) x[r * d + j] = standard_normal(rngs[r]);
    }
    std::vector<double> z(rows * d, 0.0);
    for (std::size_t t = schedule.steps(); t >= 1; --t) {
      std::vector<double> eps = nn::forward_batch(params, x, rows, t);
      if (t > 1) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < d; ++j) z[r * d + j] = standard_normal(rngs[r]);
        }
      }
      x = p_sample_step_with_noise(x, eps, t, schedule, z);
    }
    std::copy(x.begin(), x.end(), out.begin() + static_cast<std::ptrdiff_t>(start * d));
  }
  return out;
}

}  // namespace dpfedtab::diffusion
