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

// Dense MLP denoiser eps(x_t, t) with a hand-written backward pass that
// yields one gradient per sample, plus Adam.
//
// All trainable state is one flat vector of doubles described by a
// ParamLayout: for each layer a row-major weight matrix followed by its
// bias, then one (vocabulary x 2) table per categorical column.

#pragma once

#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "dpfedtab/common.hpp"

namespace dpfedtab::nn {

using nlohmann::json;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstRowMap = Eigen::Map<const RowMatrix>;
using RowMap = Eigen::Map<RowMatrix>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;
using VecMap = Eigen::Map<Eigen::VectorXd>;

struct ModelConfig {
  std::size_t hidden_layers = 3;
  std::size_t width = 1024;
  std::size_t time_embedding_dim = 64;
  bool operator==(const ModelConfig&) const = default;
};

// Sinusoidal embedding: [sin(t/10000^(2k/dim)), cos(t/10000^(2k/dim))]_k.
inline std::vector<double> time_embed(std::size_t t, std::size_t dim) {
  if (dim % 2 != 0) throw ValidationError("time embedding dimension must be even");
  std::vector<double> out(dim);
  for (std::size_t k = 0; k < dim / 2; ++k) {
    double freq = std::pow(10000.0, static_cast<double>(2 * k) / static_cast<double>(dim));
    double arg = static_cast<double>(t) / freq;
    out[2 * k] = std::sin(arg);
    out[2 * k + 1] = std::cos(arg);
  }
  return out;
}

class ParamLayout {
 public:
  struct Tensor {
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t offset = 0;
    std::size_t size() const { return rows * cols; }
    bool operator==(const Tensor&) const = default;
  };

  ParamLayout() = default;

  // data_width: encoded row width D. numeric_width: leading numeric slots;
  // the remaining 2 * vocab_sizes.size() slots are embedding pairs.
  ParamLayout(std::size_t data_width, std::size_t numeric_width,
              std::vector<std::size_t> vocab_sizes, const ModelConfig& config)
      : data_width_(data_width),
        numeric_width_(numeric_width),
        vocab_sizes_(std::move(vocab_sizes)),
        config_(config) {
    if (data_width_ == 0) throw ValidationError("model input width must be positive");
    if (numeric_width_ + 2 * vocab_sizes_.size() != data_width_) {
      throw ValidationError("layout: numeric width + 2 * categoricals != data width");
    }
    if (config_.time_embedding_dim % 2 != 0) {
      throw ValidationError("time embedding dimension must be even");
    }
    if (config_.hidden_layers > 0 && config_.width == 0) {
      throw ValidationError("hidden width must be positive");
    }
    std::size_t in = data_width_ + config_.time_embedding_dim;
    for (std::size_t l = 0; l <= config_.hidden_layers; ++l) {
      std::size_t out = l < config_.hidden_layers ? config_.width : data_width_;
      add("layer" + std::to_string(l) + ".weight", out, in);
      add("layer" + std::to_string(l) + ".bias", out, 1);
      in = out;
    }
    for (std::size_t k = 0; k < vocab_sizes_.size(); ++k) {
      add("embedding" + std::to_string(k), vocab_sizes_[k], 2);
    }
  }

  std::size_t size() const { return size_; }
  std::size_t data_width() const { return data_width_; }
  std::size_t numeric_width() const { return numeric_width_; }
  std::size_t input_width() const { return data_width_ + config_.time_embedding_dim; }
  const std::vector<std::size_t>& vocab_sizes() const { return vocab_sizes_; }
  const ModelConfig& config() const { return config_; }
  std::size_t layer_count() const { return config_.hidden_layers + 1; }
  const std::vector<Tensor>& tensors() const { return tensors_; }

  const Tensor& weight(std::size_t layer) const { return tensors_[2 * layer]; }
  const Tensor& bias(std::size_t layer) const { return tensors_[2 * layer + 1]; }
  const Tensor& embedding(std::size_t k) const { return tensors_[2 * layer_count() + k]; }

  json to_json() const {
    json t = json::array();
    for (const auto& x : tensors_) t.push_back({{"name", x.name}, {"shape", {x.rows, x.cols}}});
    return json{{"data_width", data_width_},
                {"numeric_width", numeric_width_},
                {"vocab_sizes", vocab_sizes_},
                {"hidden_layers", config_.hidden_layers},
                {"width", config_.width},
                {"time_embedding_dim", config_.time_embedding_dim},
                {"tensors", t}};
  }

  static ParamLayout from_json(const json& j) {
    ModelConfig c{j.at("hidden_layers").get<std::size_t>(), j.at("width").get<std::size_t>(),
                  j.at("time_embedding_dim").get<std::size_t>()};
    ParamLayout layout(j.at("data_width").get<std::size_t>(),
                       j.at("numeric_width").get<std::size_t>(),
                       j.at("vocab_sizes").get<std::vector<std::size_t>>(), c);
    if (j.contains("tensors") && j["tensors"].size() != layout.tensors_.size()) {
      throw ParseError("parameter manifest does not match layout");
    }
    return layout;
  }

  bool operator==(const ParamLayout& o) const {
    return data_width_ == o.data_width_ && numeric_width_ == o.numeric_width_ &&
           vocab_sizes_ == o.vocab_sizes_ && config_ == o.config_;
  }

 private:
  void add(std::string name, std::size_t rows, std::size_t cols) {
    tensors_.push_back({std::move(name), rows, cols, size_});
    size_ += rows * cols;
  }

  std::size_t data_width_ = 0;
  std::size_t numeric_width_ = 0;
  std::vector<std::size_t> vocab_sizes_;
  ModelConfig config_;
  std::vector<Tensor> tensors_;
  std::size_t size_ = 0;
};

// Flat parameter vector plus the layout that gives it shape. This is the
// value exchanged between clients and server.
class DenoiserParams {
 public:
  DenoiserParams() = default;
  explicit DenoiserParams(std::shared_ptr<const ParamLayout> layout)
      : layout_(std::move(layout)), values_(layout_->size(), 0.0) {}

  // unflatten
  DenoiserParams(std::shared_ptr<const ParamLayout> layout, std::vector<double> values)
      : layout_(std::move(layout)), values_(std::move(values)) {
    if (values_.size() != layout_->size()) {
      throw ValidationError("parameter vector length " + std::to_string(values_.size()) +
                            " does not match layout size " + std::to_string(layout_->size()));
    }
  }

  const ParamLayout& layout() const { return *layout_; }
  const std::shared_ptr<const ParamLayout>& layout_ptr() const { return layout_; }
  std::size_t size() const { return values_.size(); }

  const std::vector<double>& flatten() const { return values_; }
  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }

  ConstRowMap weight(std::size_t l) const { return cmat(layout_->weight(l)); }
  ConstVecMap bias(std::size_t l) const {
    const auto& t = layout_->bias(l);
    return ConstVecMap(values_.data() + t.offset, static_cast<Eigen::Index>(t.rows));
  }

  // Embedding entry (code, dim) of categorical column k.
  double embedding(std::size_t k, std::size_t code, std::size_t dim) const {
    return values_[embedding_index(k, code, dim)];
  }
  std::size_t embedding_index(std::size_t k, std::size_t code, std::size_t dim) const {
    return layout_->embedding(k).offset + 2 * code + dim;
  }

  bool all_finite() const { return dpfedtab::all_finite(values_.data(), values_.size()); }

  bool operator==(const DenoiserParams& o) const {
    return *layout_ == *o.layout_ && values_ == o.values_;
  }

 private:
  ConstRowMap cmat(const ParamLayout::Tensor& t) const {
    return ConstRowMap(values_.data() + t.offset, static_cast<Eigen::Index>(t.rows),
                       static_cast<Eigen::Index>(t.cols));
  }

  std::shared_ptr<const ParamLayout> layout_;
  std::vector<double> values_;
};

// Linear layers get PyTorch's default Kaiming-uniform init: weights and
// biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)). Embedding tables are copied
// from `embeddings` (one table per categorical column, flattened pairs)
// when given, else drawn from N(0, 1/2).
inline DenoiserParams init_params(std::shared_ptr<const ParamLayout> layout, std::uint64_t seed,
                                  const std::vector<std::vector<double>>& embeddings = {}) {
  DenoiserParams p(layout);
  Rng rng(seed);
  auto& v = p.values();
  for (std::size_t l = 0; l < layout->layer_count(); ++l) {
    const auto& w = layout->weight(l);
    const double bound = 1.0 / std::sqrt(static_cast<double>(w.cols));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (std::size_t i = 0; i < w.size(); ++i) v[w.offset + i] = dist(rng);
    const auto& b = layout->bias(l);
    for (std::size_t i = 0; i < b.size(); ++i) v[b.offset + i] = dist(rng);
  }
  std::normal_distribution<double> emb(0.0, 1.0 / std::sqrt(2.0));
  for (std::size_t k = 0; k < layout->vocab_sizes().size(); ++k) {
    const auto& t = layout->embedding(k);
    if (k < embeddings.size()) {
      if (embeddings[k].size() != t.size()) throw ValidationError("embedding init size mismatch");
      std::copy(embeddings[k].begin(), embeddings[k].end(), v.begin() + t.offset);
    } else {
      for (std::size_t i = 0; i < t.size(); ++i) v[t.offset + i] = emb(rng);
    }
  }
  return p;
}

inline void check_input(const DenoiserParams& params, std::span<const double> x) {
  if (x.size() != params.layout().data_width()) {
    throw ValidationError("input width " + std::to_string(x.size()) + " != model width " +
                          std::to_string(params.layout().data_width()));
  }
}

// eps_theta(x, t): MLP on concat(x, time_embed(t)), ReLU hidden units and a
// linear output of width D.
inline std::vector<double> forward(const DenoiserParams& params, std::span<const double> x,
                                   std::size_t t) {
  check_input(params, x);
  const auto& layout = params.layout();
  const std::size_t d = layout.data_width();
  Eigen::VectorXd a(static_cast<Eigen::Index>(layout.input_width()));
  for (std::size_t i = 0; i < d; ++i) a[static_cast<Eigen::Index>(i)] = x[i];
  auto temb = time_embed(t, layout.config().time_embedding_dim);
  for (std::size_t i = 0; i < temb.size(); ++i) a[static_cast<Eigen::Index>(d + i)] = temb[i];
  for (std::size_t l = 0; l < layout.layer_count(); ++l) {
    Eigen::VectorXd z = params.weight(l) * a + params.bias(l);
    if (l + 1 < layout.layer_count()) z = z.cwiseMax(0.0);
    a = std::move(z);
  }
  return std::vector<double>(a.data(), a.data() + a.size());
}

// Batched forward for n rows sharing one timestep. x is row-major n x D;
// returns row-major n x D.
inline std::vector<double> forward_batch(const DenoiserParams& params, std::span<const double> x,
                                         std::size_t n, std::size_t t) {
  const auto& layout = params.layout();
  const std::size_t d = layout.data_width();
  if (x.size() != n * d) throw ValidationError("forward_batch: shape mismatch");
  const std::size_t td = layout.config().time_embedding_dim;
  Eigen::MatrixXd a(static_cast<Eigen::Index>(d + td), static_cast<Eigen::Index>(n));
  a.topRows(static_cast<Eigen::Index>(d)) =
      Eigen::Map<const RowMatrix>(x.data(), static_cast<Eigen::Index>(n),
                                  static_cast<Eigen::Index>(d))
          .transpose();
  auto temb = time_embed(t, td);
  for (std::size_t i = 0; i < td; ++i) {
    a.row(static_cast<Eigen::Index>(d + i)).setConstant(temb[i]);
  }
  for (std::size_t l = 0; l < layout.layer_count(); ++l) {
    Eigen::MatrixXd z = params.weight(l) * a;
    z.colwise() += params.bias(l);
    if (l + 1 < layout.layer_count()) z = z.cwiseMax(0.0);
    a = std::move(z);
  }
  std::vector<double> out(n * d);
  Eigen::Map<RowMatrix>(out.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d)) =
      a.transpose();
  return out;
}

// Flat gradient aligned with the parameter vector, with its L2 norm cached.
class GradientVector {
 public:
  GradientVector() = default;
  explicit GradientVector(std::vector<double> values) : values_(std::move(values)) {
    recompute_norm();
  }

  const std::vector<double>& values() const { return values_; }
  std::size_t size() const { return values_.size(); }
  double norm() const { return norm_; }

  // Mutating access invalidates the cache; call recompute_norm() after.
  std::vector<double>& mutable_values() { return values_; }
  void recompute_norm() {
    double s = 0.0;
    for (double v : values_) s += v * v;
    norm_ = std::sqrt(s);
  }

 private:
  std::vector<double> values_;
  double norm_ = 0.0;
};

// One denoising training example. x_t is the noised input, already built
// from the current embedding tables. When `codes` is non-empty the input
// gradient on each categorical slot is routed back into the embedding row
// that produced it, scaled by signal_scale (= sqrt(alpha_bar_t)).
struct TrainingExample {
  std::vector<double> x_t;
  std::size_t t = 1;
  std::vector<double> noise;
  std::vector<std::size_t> codes;
  double signal_scale = 0.0;
};

struct PerSampleGradients {
  std::vector<GradientVector> grads;
  std::vector<double> losses;
  double mean_loss = 0.0;
};

// Per-sample loss is mean_j (noise_j - eps_theta(x_t, t)_j)^2. One backward
// pass per sample, so no gradient mixes two samples.
inline PerSampleGradients per_sample_grads(const DenoiserParams& params,
                                           std::span<const TrainingExample> batch) {
  if (batch.empty()) throw ValidationError("per_sample_grads: empty batch");
  const auto& layout = params.layout();
  const std::size_t d = layout.data_width();
  const std::size_t layers = layout.layer_count();
  const std::size_t td = layout.config().time_embedding_dim;

  PerSampleGradients out;
  out.grads.reserve(batch.size());
  out.losses.reserve(batch.size());
  std::vector<Eigen::VectorXd> acts(layers + 1);
  std::vector<Eigen::VectorXd> pre(layers);

  for (const auto& ex : batch) {
    check_input(params, ex.x_t);
    if (ex.noise.size() != d) throw ValidationError("per_sample_grads: target width mismatch");

    Eigen::VectorXd& a0 = acts[0];
    a0.resize(static_cast<Eigen::Index>(d + td));
    for (std::size_t i = 0; i < d; ++i) a0[static_cast<Eigen::Index>(i)] = ex.x_t[i];
    auto temb = time_embed(ex.t, td);
    for (std::size_t i = 0; i < td; ++i) a0[static_cast<Eigen::Index>(d + i)] = temb[i];
    for (std::size_t l = 0; l < layers; ++l) {
      pre[l] = params.weight(l) * acts[l] + params.bias(l);
      acts[l + 1] = l + 1 < layers ? pre[l].cwiseMax(0.0) : pre[l];
    }

    ConstVecMap target(ex.noise.data(), static_cast<Eigen::Index>(d));
    Eigen::VectorXd diff = acts[layers] - target;
    const double loss = diff.squaredNorm() / static_cast<double>(d);
    if (!std::isfinite(loss)) throw DivergenceError("non-finite training loss");

    std::vector<double> g(layout.size(), 0.0);
    Eigen::VectorXd delta = diff * (2.0 / static_cast<double>(d));
    for (std::size_t l = layers; l-- > 0;) {
      const auto& wt = layout.weight(l);
      RowMap(g.data() + wt.offset, static_cast<Eigen::Index>(wt.rows),
             static_cast<Eigen::Index>(wt.cols))
          .noalias() = delta * acts[l].transpose();
      const auto& bt = layout.bias(l);
      VecMap(g.data() + bt.offset, static_cast<Eigen::Index>(bt.rows)) = delta;
      if (l == 0 && ex.codes.empty()) break;
      Eigen::VectorXd back = params.weight(l).transpose() * delta;
      if (l > 0) {
        delta = back.cwiseProduct((pre[l - 1].array() > 0.0).cast<double>().matrix());
      } else {
        // Input gradient: route categorical slots into their embedding rows.
        const std::size_t nw = layout.numeric_width();
        for (std::size_t k = 0; k < ex.codes.size(); ++k) {
          for (std::size_t dim = 0; dim < 2; ++dim) {
            g[params.embedding_index(k, ex.codes[k], dim)] +=
                ex.signal_scale * back[static_cast<Eigen::Index>(nw + 2 * k + dim)];
          }
        }
      }
    }
    out.grads.emplace_back(std::move(g));
    out.losses.push_back(loss);
    out.mean_loss += loss;
  }
  out.mean_loss /= static_cast<double>(batch.size());
  return out;
}

struct AdamState {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
  std::vector<double> m;
  std::vector<double> v;

  AdamState() = default;
  AdamState(std::size_t n, double lr) : learning_rate(lr), m(n, 0.0), v(n, 0.0) {}

  json to_json() const {
    return json{{"learning_rate", learning_rate}, {"beta1", beta1}, {"beta2", beta2},
                {"epsilon", epsilon},             {"step", step},   {"m", m},
                {"v", v}};
  }
  static AdamState from_json(const json& j) {
    AdamState s;
    s.learning_rate = j.at("learning_rate").get<double>();
    s.beta1 = j.at("beta1").get<double>();
    s.beta2 = j.at("beta2").get<double>();
    s.epsilon = j.at("epsilon").get<double>();
    s.step = j.at("step").get<std::uint64_t>();
    s.m = j.at("m").get<std::vector<double>>();
    s.v = j.at("v").get<std::vector<double>>();
    return s;
  }
  bool operator==(const AdamState&) const = default;
};

// Bias-corrected Adam update, in place.
inline void adam_step(DenoiserParams& params, AdamState& state, std::span<const double> grad) {
  const std::size_t n = params.size();
  if (grad.size() != n || state.m.size() != n || state.v.size() != n) {
    throw ValidationError("adam_step: shape mismatch");
  }
  if (!all_finite(grad.data(), n)) throw DivergenceError("non-finite gradient");
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  auto& w = params.values();
  for (std::size_t i = 0; i < n; ++i) {
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad[i];
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
    const double m_hat = state.m[i] / c1;
    const double v_hat = state.v[i] / c2;
    w[i] -= state.learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
  }
}

inline void adam_step(DenoiserParams& params, AdamState& state, const GradientVector& grad) {
  adam_step(params, state, std::span<const double>(grad.values()));
}

inline json params_to_json(const DenoiserParams& p) {
  return json{{"layout", p.layout().to_json()}, {"values", p.values()}};
}

inline DenoiserParams params_from_json(const json& j) {
  auto layout = std::make_shared<const ParamLayout>(ParamLayout::from_json(j.at("layout")));
  return DenoiserParams(layout, j.at("values").get<std::vector<double>>());
}

}  // namespace dpfedtab::nn
