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

// In-process federated simulation. Clients and server exchange plain
// parameter vectors; each selected client runs DP-SGD locally and the server
// combines the results with FedAvg, FedProx (FedAvg aggregation with a
// proximal local term), FedAdam or FedYogi.
//
// Randomness: client selection in round r uses derive_seed(seed, kSelect, r)
// and client i in round r uses derive_seed(seed, kClient, r, i), so a run
// resumed from a checkpoint replays the same streams.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "dpfedtab/common.hpp"
#include "dpfedtab/data_pipeline.hpp"
#include "dpfedtab/diffusion.hpp"
#include "dpfedtab/dp_mechanism.hpp"
#include "dpfedtab/tensor_nn.hpp"

namespace dpfedtab::fed {

using nlohmann::json;

enum class Strategy { kFedAvg, kFedAdam, kFedProx, kFedYogi };

inline std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::kFedAvg: return "fedavg";
    case Strategy::kFedAdam: return "fedadam";
    case Strategy::kFedProx: return "fedprox";
    case Strategy::kFedYogi: return "fedyogi";
  }
  return "fedavg";
}

inline Strategy parse_strategy(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  if (s == "fedavg") return Strategy::kFedAvg;
  if (s == "fedadam") return Strategy::kFedAdam;
  if (s == "fedprox") return Strategy::kFedProx;
  if (s == "fedyogi") return Strategy::kFedYogi;
  throw ValidationError("unknown strategy \"" + s + "\"");
}

struct FedConfig {
  std::size_t clients = 5;
  std::size_t rounds = 3000;
  std::size_t local_steps = 100;
  std::size_t clients_per_round = 1;
  Strategy strategy = Strategy::kFedAvg;
  double prox_mu = 0.01;
  double server_learning_rate = 1e-3;
  double server_beta1 = 0.9;
  double server_beta2 = 0.999;
  double server_epsilon = 1e-8;
  // Normalize FedAvg by the total sample count of all clients rather than of
  // the participating ones.
  bool literal_fedavg = false;
  // Local optimizer.
  std::size_t batch_size = 16;
  double learning_rate = 1e-4;
  // Update categorical embedding tables from the denoising loss. Off by
  // default: the loss alone pulls all embeddings of a column together.
  bool train_embeddings = false;

  void validate() const {
    if (clients < 1) throw ValidationError("need at least one client");
    if (rounds < 1) throw ValidationError("rounds must be >= 1");
    if (local_steps < 1) throw ValidationError("local steps must be >= 1");
    if (clients_per_round < 1 || clients_per_round > clients) {
      throw ValidationError("clients per round must lie in [1, clients]");
    }
    if (batch_size < 1) throw ValidationError("batch size must be >= 1");
    if (!(learning_rate > 0.0)) throw ValidationError("learning rate must be > 0");
    if (!(server_learning_rate > 0.0)) throw ValidationError("server learning rate must be > 0");
    if (prox_mu < 0.0) throw ValidationError("proximal mu must be >= 0");
  }

  bool operator==(const FedConfig&) const = default;
};

// One client's training rows, stored as the parts of x0 that do not depend
// on parameters: encoded numerics and category codes.
struct ClientData {
  std::size_t rows = 0;
  std::size_t numeric_width = 0;
  std::size_t categorical_columns = 0;
  std::vector<double> numeric;
  std::vector<std::size_t> codes;

  static ClientData from(const data::EncodedDataset& ds, std::span<const std::size_t> row_ids) {
    ClientData c;
    c.rows = row_ids.size();
    c.numeric_width = ds.numeric_width;
    c.categorical_columns = ds.categorical_columns;
    for (std::size_t r : row_ids) {
      auto row = ds.row(r);
      c.numeric.insert(c.numeric.end(), row.begin(), row.begin() + static_cast<std::ptrdiff_t>(ds.numeric_width));
      auto codes = ds.row_codes(r);
      c.codes.insert(c.codes.end(), codes.begin(), codes.end());
    }
    return c;
  }

  std::span<const std::size_t> row_codes(std::size_t r) const {
    return {codes.data() + r * categorical_columns, categorical_columns};
  }
};

// x0 for one row: numerics followed by the current embedding of each code.
inline std::vector<double> build_x0(const nn::DenoiserParams& params, const ClientData& data,
                                    std::size_t r) {
  std::vector<double> x(params.layout().data_width());
  std::copy_n(data.numeric.begin() + static_cast<std::ptrdiff_t>(r * data.numeric_width),
              data.numeric_width, x.begin());
  auto codes = data.row_codes(r);
  for (std::size_t k = 0; k < codes.size(); ++k) {
    x[data.numeric_width + 2 * k] = params.embedding(k, codes[k], 0);
    x[data.numeric_width + 2 * k + 1] = params.embedding(k, codes[k], 1);
  }
  return x;
}

// Per-client privacy parameters after resolution against the client's size.
struct ClientPrivacy {
  bool enabled = false;  // clip + noise + Poisson batches
  bool accounted = false;  // sigma > 0
  double sigma = 0.0;
  // Multiplier on the clipped sum seen by the accountant. Equals sigma except
  // in the literal variant, where noise sigma is added after averaging and
  // corresponds to sigma * expected_batch / C on the sum.
  double accounting_sigma = 0.0;
  double clip_norm = 1.0;
  double sampling_rate = 1.0;
  double delta = 0.0;
  double target_epsilon = dp::kInfinity;
  bool literal_noise = false;

  json to_json() const {
    return json{{"enabled", enabled},     {"accounted", accounted},
                {"sigma", sigma},         {"accounting_sigma", accounting_sigma},
                {"clip_norm", clip_norm},
                {"sampling_rate", sampling_rate}, {"delta", delta},
                {"target_epsilon", std::isfinite(target_epsilon) ? json(target_epsilon) : json(nullptr)},
                {"literal_noise", literal_noise}};
  }
  static ClientPrivacy from_json(const json& j) {
    ClientPrivacy p;
    p.enabled = j.at("enabled").get<bool>();
    p.accounted = j.at("accounted").get<bool>();
    p.sigma = j.at("sigma").get<double>();
    p.accounting_sigma = j.at("accounting_sigma").get<double>();
    p.clip_norm = j.at("clip_norm").get<double>();
    p.sampling_rate = j.at("sampling_rate").get<double>();
    p.delta = j.at("delta").get<double>();
    p.target_epsilon = j.at("target_epsilon").is_null() ? dp::kInfinity : j.at("target_epsilon").get<double>();
    p.literal_noise = j.at("literal_noise").get<bool>();
    return p;
  }
};

struct ClientState {
  std::size_t id = 0;
  ClientData data;
  nn::AdamState adam;
  dp::RdpAccountant accountant;
  ClientPrivacy privacy;
  std::size_t participations = 0;

  double epsilon() const {
    if (!privacy.accounted) return dp::kInfinity;
    if (accountant.steps() == 0) return 0.0;
    return accountant.epsilon(privacy.delta).epsilon;
  }

  // Whether `steps` more local steps keep epsilon within the target.
  bool can_afford(std::size_t steps) const {
    if (!std::isfinite(privacy.target_epsilon)) return true;
    if (!privacy.accounted) return false;
    dp::RdpAccountant trial = accountant;
    trial.compose(privacy.sampling_rate, privacy.accounting_sigma, steps);
    return trial.epsilon(privacy.delta).epsilon <= privacy.target_epsilon;
  }
};

// Zeroes the embedding-table coordinates of a gradient (including any DP
// noise placed on them).
inline void freeze_embeddings(const nn::ParamLayout& layout, std::vector<double>& grad) {
  for (std::size_t k = 0; k < layout.vocab_sizes().size(); ++k) {
    const auto& t = layout.embedding(k);
    std::fill_n(grad.begin() + static_cast<std::ptrdiff_t>(t.offset), t.size(), 0.0);
  }
}

struct LocalUpdate {
  nn::DenoiserParams params;
  std::size_t steps = 0;
  double loss_mean = 0.0;
  double grad_norm_pre = 0.0;   // mean per-sample norm before clipping
  double grad_norm_post = 0.0;  // mean per-sample norm after clipping
};

// Runs `steps` local optimizer steps starting from the global parameters.
// With privacy enabled each step draws a Poisson batch, clips per-sample
// gradients and adds Gaussian noise to their sum; the accountant is advanced
// by the same number of steps. FedProx adds mu (theta - theta_global) to the
// privatized gradient.
inline LocalUpdate client_local_update(const nn::DenoiserParams& global, ClientState& client,
                                       std::size_t steps, const FedConfig& config,
                                       const diffusion::NoiseSchedule& schedule, Rng& rng) {
  if (client.data.rows == 0) throw ValidationError("client " + std::to_string(client.id) + " has no data");
  if (steps < 1) throw ValidationError("local steps must be >= 1");
  const auto& priv = client.privacy;
  const bool prox = config.strategy == Strategy::kFedProx;

  LocalUpdate out{global, 0, 0.0, 0.0, 0.0};
  nn::DenoiserParams& params = out.params;
  std::size_t norm_count = 0;
  std::vector<std::size_t> batch;
  std::vector<std::size_t> all_rows(client.data.rows);
  std::iota(all_rows.begin(), all_rows.end(), 0);

  for (std::size_t step = 0; step < steps; ++step) {
    batch.clear();
    if (priv.enabled) {
      std::bernoulli_distribution keep(priv.sampling_rate);
      for (std::size_t r = 0; r < client.data.rows; ++r) {
        if (keep(rng)) batch.push_back(r);
      }
    } else {
      const std::size_t b = std::min(config.batch_size, client.data.rows);
      std::sample(all_rows.begin(), all_rows.end(), std::back_inserter(batch), b, rng);
    }

    std::vector<nn::TrainingExample> examples;
    examples.reserve(batch.size());
    for (std::size_t r : batch) {
      auto x0 = build_x0(params, client.data, r);
      auto ex = diffusion::make_training_example(x0, schedule, rng);
      if (config.train_embeddings) {
        auto codes = client.data.row_codes(r);
        ex.codes.assign(codes.begin(), codes.end());
      }
      examples.push_back(std::move(ex));
    }

    nn::PerSampleGradients psg;
    if (!examples.empty()) {
      psg = nn::per_sample_grads(params, examples);
      out.loss_mean += psg.mean_loss;
      for (const auto& g : psg.grads) {
        out.grad_norm_pre += g.norm();
        out.grad_norm_post += priv.enabled ? std::min(g.norm(), priv.clip_norm) : g.norm();
        ++norm_count;
      }
    }

    std::vector<double> grad;
    if (priv.enabled) {
      const double expected = priv.sampling_rate * static_cast<double>(client.data.rows);
      grad = dp::privatize(psg.grads, priv.clip_norm, priv.sigma, rng, expected,
                           priv.literal_noise, params.size())
                 .values();
    } else {
      grad.assign(params.size(), 0.0);
      for (const auto& g : psg.grads) {
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += g.values()[i];
      }
      for (auto& v : grad) v /= static_cast<double>(psg.grads.size());
    }
    if (!config.train_embeddings) freeze_embeddings(params.layout(), grad);
    if (prox) {
      const auto& w = params.values();
      const auto& anchor = global.values();
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += config.prox_mu * (w[i] - anchor[i]);
    }
    nn::adam_step(params, client.adam, grad);
    ++out.steps;
  }

  if (priv.accounted) {
    client.accountant.compose(priv.sampling_rate, priv.accounting_sigma, out.steps);
  }
  if (!params.all_finite()) {
    throw DivergenceError("client " + std::to_string(client.id) + " produced non-finite parameters");
  }
  out.loss_mean /= static_cast<double>(steps);
  if (norm_count) {
    out.grad_norm_pre /= static_cast<double>(norm_count);
    out.grad_norm_post /= static_cast<double>(norm_count);
  }
  return out;
}

struct WeightedParams {
  std::span<const double> params;
  double weight = 0.0;
};

// sum_i w_i theta_i / sum_i w_i, evaluated as theta_0 + sum_i p_i (theta_i -
// theta_0) and clamped to the coordinate-wise range of the inputs, so equal
// inputs come back bit-identical and the mean never leaves the hull.
inline std::vector<double> fedavg_aggregate(std::span<const WeightedParams> clients,
                                            std::optional<double> total_weight = std::nullopt) {
  if (clients.empty()) throw ValidationError("fedavg: no client updates");
  const std::size_t n = clients.front().params.size();
  double total = 0.0;
  for (const auto& c : clients) {
    if (c.params.size() != n) throw ValidationError("fedavg: parameter length mismatch");
    if (c.weight < 0.0) throw ValidationError("fedavg: negative weight");
    total += c.weight;
  }
  if (!(total > 0.0)) throw ValidationError("fedavg: zero total weight");

  if (total_weight) {
    // Literal form: normalize by the whole federation's sample count.
    if (!(*total_weight > 0.0)) throw ValidationError("fedavg: zero total weight");
    std::vector<double> out(n, 0.0);
    for (const auto& c : clients) {
      const double p = c.weight / *total_weight;
      for (std::size_t i = 0; i < n; ++i) out[i] += p * c.params[i];
    }
    return out;
  }

  const auto& base = clients.front().params;
  std::vector<double> out(base.begin(), base.end());
  for (std::size_t k = 1; k < clients.size(); ++k) {
    const double p = clients[k].weight / total;
    for (std::size_t i = 0; i < n; ++i) out[i] += p * (clients[k].params[i] - base[i]);
  }
  for (std::size_t i = 0; i < n; ++i) {
    double lo = base[i], hi = base[i];
    for (const auto& c : clients) {
      lo = std::min(lo, c.params[i]);
      hi = std::max(hi, c.params[i]);
    }
    out[i] = std::clamp(out[i], lo, hi);
  }
  return out;
}

// Server-side adaptive optimizer state (FedAdam / FedYogi).
struct ServerState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;

  json to_json() const { return json{{"m", m}, {"v", v}, {"step", step}}; }
  static ServerState from_json(const json& j) {
    return {j.at("m").get<std::vector<double>>(), j.at("v").get<std::vector<double>>(),
            j.at("step").get<std::uint64_t>()};
  }
  bool operator==(const ServerState&) const = default;
};

// Delta = theta - fedavg(clients); m, v updated Adam- or Yogi-style;
// theta' = theta - eta m_hat / (sqrt(v) + eps) with bias correction on m only.
inline std::vector<double> server_opt_aggregate(ServerState& state, std::span<const double> global,
                                                std::span<const WeightedParams> clients,
                                                Strategy strategy, const FedConfig& config) {
  if (strategy != Strategy::kFedAdam && strategy != Strategy::kFedYogi) {
    throw ValidationError("server optimizer needs FedAdam or FedYogi");
  }
  const std::size_t n = global.size();
  if (state.m.size() != n || state.v.size() != n) {
    throw ValidationError("server optimizer state is not initialized for this model");
  }
  const auto avg = fedavg_aggregate(clients);
  if (avg.size() != n) throw ValidationError("server optimizer: parameter length mismatch");
  const double b1 = config.server_beta1;
  const double b2 = config.server_beta2;
  state.step += 1;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double delta = global[i] - avg[i];
    const double d2 = delta * delta;
    state.m[i] = b1 * state.m[i] + (1.0 - b1) * delta;
    if (strategy == Strategy::kFedAdam) {
      state.v[i] = b2 * state.v[i] + (1.0 - b2) * d2;
    } else {
      const double diff = state.v[i] - d2;
      const double sign = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
      state.v[i] = state.v[i] - (1.0 - b2) * d2 * sign;
    }
    const double m_hat = state.m[i] / c1;
    out[i] = global[i] - config.server_learning_rate * m_hat / (std::sqrt(state.v[i]) + config.server_epsilon);
  }
  return out;
}

struct ClientRoundRecord {
  std::size_t client = 0;
  std::size_t steps = 0;
  double loss_mean = 0.0;
  double grad_norm_pre = 0.0;
  double grad_norm_post = 0.0;
  double sigma = 0.0;
  double sampling_rate = 0.0;
  double delta = 0.0;
  double epsilon = dp::kInfinity;  // after this round, at delta

  json to_json() const {
    auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
    return json{{"client", client},
                {"steps", steps},
                {"loss_mean", num(loss_mean)},
                {"grad_norm_pre", num(grad_norm_pre)},
                {"grad_norm_post", num(grad_norm_post)},
                {"sigma", sigma},
                {"sampling_rate", sampling_rate},
                {"delta", delta},
                {"epsilon", num(epsilon)}};
  }
  static ClientRoundRecord from_json(const json& j) {
    auto num = [](const json& v) { return v.is_null() ? dp::kInfinity : v.get<double>(); };
    return {j.at("client").get<std::size_t>(), j.at("steps").get<std::size_t>(),
            num(j.at("loss_mean")),            num(j.at("grad_norm_pre")),
            num(j.at("grad_norm_post")),       j.at("sigma").get<double>(),
            j.at("sampling_rate").get<double>(), j.at("delta").get<double>(),
            num(j.at("epsilon"))};
  }
};

struct RoundRecord {
  std::size_t round = 0;  // 1-based
  std::vector<ClientRoundRecord> clients;
  double loss_mean = 0.0;

  json to_json() const {
    json c = json::array();
    for (const auto& x : clients) c.push_back(x.to_json());
    return json{{"round", round}, {"clients", c}, {"loss_mean", loss_mean}};
  }
  static RoundRecord from_json(const json& j) {
    RoundRecord r;
    r.round = j.at("round").get<std::size_t>();
    for (const auto& c : j.at("clients")) r.clients.push_back(ClientRoundRecord::from_json(c));
    r.loss_mean = j.at("loss_mean").get<double>();
    return r;
  }
};

struct FederatedState {
  std::size_t round = 0;  // completed rounds
  nn::DenoiserParams global;
  std::vector<ClientState> clients;
  ServerState server;
  std::vector<RoundRecord> log;
  bool stopped_early = false;

  double max_epsilon() const {
    double e = 0.0;
    for (const auto& c : clients) e = std::max(e, c.epsilon());
    return e;
  }

  // Everything except the client data, which is rebuilt from the partitions.
  json to_json() const {
    json cs = json::array();
    for (const auto& c : clients) {
      cs.push_back({{"id", c.id},
                    {"adam", c.adam.to_json()},
                    {"accountant", c.accountant.to_json()},
                    {"privacy", c.privacy.to_json()},
                    {"participations", c.participations}});
    }
    json lg = json::array();
    for (const auto& r : log) lg.push_back(r.to_json());
    return json{{"round", round},   {"global", nn::params_to_json(global)},
                {"clients", cs},    {"server", server.to_json()},
                {"log", lg},        {"stopped_early", stopped_early}};
  }

  // `data` holds one ClientData per client id.
  static FederatedState from_json(const json& j, std::vector<ClientData> data) {
    FederatedState s;
    s.round = j.at("round").get<std::size_t>();
    s.global = nn::params_from_json(j.at("global"));
    const auto& cs = j.at("clients");
    if (cs.size() != data.size()) throw ParseError("checkpoint client count does not match partitions");
    for (std::size_t i = 0; i < cs.size(); ++i) {
      ClientState c;
      c.id = cs[i].at("id").get<std::size_t>();
      c.data = std::move(data[i]);
      c.adam = nn::AdamState::from_json(cs[i].at("adam"));
      c.accountant = dp::RdpAccountant::from_json(cs[i].at("accountant"));
      c.privacy = ClientPrivacy::from_json(cs[i].at("privacy"));
      c.participations = cs[i].at("participations").get<std::size_t>();
      s.clients.push_back(std::move(c));
    }
    s.server = ServerState::from_json(j.at("server"));
    for (const auto& r : j.at("log")) s.log.push_back(RoundRecord::from_json(r));
    s.stopped_early = j.at("stopped_early").get<bool>();
    return s;
  }
};

enum SeedStream : std::uint64_t { kSelectStream = 1, kClientStream = 2 };

// Resolves per-client sigma, sampling rate and delta. With a finite target
// and no explicit sigma, sigma is calibrated so that the client's planned
// steps (local_steps * ceil(rounds * per_round / clients)) meet the target.
inline ClientPrivacy resolve_privacy(const dp::DpConfig& dpc, const FedConfig& fc,
                                     std::size_t client_rows) {
  dpc.validate();
  ClientPrivacy p;
  p.clip_norm = dpc.clip_norm;
  p.literal_noise = dpc.literal_noise;
  p.target_epsilon = dpc.target_epsilon;
  p.delta = dpc.delta > 0.0 ? dpc.delta : 1.0 / static_cast<double>(client_rows);
  p.sampling_rate = std::min(1.0, static_cast<double>(fc.batch_size) / static_cast<double>(client_rows));
  if (!dpc.enabled()) return p;
  p.enabled = true;
  const double literal_scale =
      p.sampling_rate * static_cast<double>(client_rows) / p.clip_norm;
  if (dpc.noise_multiplier) {
    p.sigma = *dpc.noise_multiplier;
    p.accounting_sigma = p.literal_noise ? p.sigma * literal_scale : p.sigma;
  } else {
    const std::size_t per_round = std::min(fc.clients_per_round, fc.clients);
    const std::size_t participations = (fc.rounds * per_round + fc.clients - 1) / fc.clients;
    p.accounting_sigma = dp::calibrate_sigma(dpc.target_epsilon, p.delta, p.sampling_rate,
                                             static_cast<std::uint64_t>(participations) * fc.local_steps);
    p.sigma = p.literal_noise ? p.accounting_sigma / literal_scale : p.accounting_sigma;
  }
  p.accounted = p.sigma > 0.0;
  return p;
}

inline FederatedState initialize_federation(nn::DenoiserParams initial,
                                            std::vector<ClientData> data, const FedConfig& fc,
                                            const dp::DpConfig& dpc) {
  fc.validate();
  if (data.empty()) throw ValidationError("need at least one client partition");
  if (data.size() != fc.clients) {
    throw ValidationError("partition count " + std::to_string(data.size()) +
                          " does not match client count " + std::to_string(fc.clients));
  }
  FederatedState s;
  s.global = std::move(initial);
  const std::size_t n = s.global.size();
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].rows == 0) throw ValidationError("client " + std::to_string(i) + " has no data");
    ClientState c;
    c.id = i;
    c.privacy = resolve_privacy(dpc, fc, data[i].rows);
    c.data = std::move(data[i]);
    c.adam = nn::AdamState(n, fc.learning_rate);
    s.clients.push_back(std::move(c));
  }
  if (fc.strategy == Strategy::kFedAdam || fc.strategy == Strategy::kFedYogi) {
    s.server.m.assign(n, 0.0);
    s.server.v.assign(n, 0.0);
  }
  return s;
}

// One synchronous round. Returns false (and sets stopped_early) when no
// client can afford another round within its privacy budget.
inline bool run_round(FederatedState& state, const FedConfig& config,
                      const diffusion::NoiseSchedule& schedule, std::uint64_t seed) {
  std::vector<std::size_t> eligible;
  for (const auto& c : state.clients) {
    if (c.can_afford(config.local_steps)) eligible.push_back(c.id);
  }
  if (eligible.empty()) {
    if (state.round == 0) {
      throw BudgetError("no client can run a single round within its privacy budget");
    }
    state.stopped_early = true;
    return false;
  }

  const std::size_t r = state.round;
  Rng select_rng(derive_seed(seed, kSelectStream, r));
  std::shuffle(eligible.begin(), eligible.end(), select_rng);
  eligible.resize(std::min(config.clients_per_round, eligible.size()));
  std::sort(eligible.begin(), eligible.end());

  RoundRecord record;
  record.round = r + 1;
  std::vector<LocalUpdate> updates;
  for (std::size_t id : eligible) {
    auto& client = state.clients[id];
    Rng rng(derive_seed(seed, kClientStream, r, id));
    updates.push_back(client_local_update(state.global, client, config.local_steps, config, schedule, rng));
    client.participations += 1;
    const auto& u = updates.back();
    record.clients.push_back({id, u.steps, u.loss_mean, u.grad_norm_pre, u.grad_norm_post,
                              client.privacy.sigma, client.privacy.sampling_rate,
                              client.privacy.delta, client.epsilon()});
    record.loss_mean += u.loss_mean;
  }
  record.loss_mean /= static_cast<double>(updates.size());

  std::vector<WeightedParams> weighted;
  for (std::size_t k = 0; k < updates.size(); ++k) {
    weighted.push_back({updates[k].params.values(),
                        static_cast<double>(state.clients[eligible[k]].data.rows)});
  }
  std::vector<double> next;
  switch (config.strategy) {
    case Strategy::kFedAvg:
    case Strategy::kFedProx: {
      std::optional<double> total;
      if (config.literal_fedavg) {
        double all = 0.0;
        for (const auto& c : state.clients) all += static_cast<double>(c.data.rows);
        total = all;
      }
      next = fedavg_aggregate(weighted, total);
      break;
    }
    case Strategy::kFedAdam:
    case Strategy::kFedYogi:
      next = server_opt_aggregate(state.server, state.global.values(), weighted, config.strategy, config);
      break;
  }
  state.global = nn::DenoiserParams(state.global.layout_ptr(), std::move(next));
  if (!state.global.all_finite()) {
    throw DivergenceError("aggregated parameters are non-finite in round " + std::to_string(r + 1));
  }
  state.round += 1;
  state.log.push_back(std::move(record));
  return true;
}

// Runs rounds until config.rounds have completed, the budget is exhausted,
// or `stop_after` more rounds have run. on_round is called after each round.
inline void train(FederatedState& state, const FedConfig& config,
                  const diffusion::NoiseSchedule& schedule, std::uint64_t seed,
                  const std::function<void(const FederatedState&)>& on_round = {},
                  std::optional<std::size_t> stop_after = std::nullopt) {
  config.validate();
  std::size_t ran = 0;
  while (state.round < config.rounds && !state.stopped_early) {
    if (stop_after && ran >= *stop_after) break;
    if (!run_round(state, config, schedule, seed)) break;
    ++ran;
    if (on_round) on_round(state);
  }
}

}  // namespace dpfedtab::fed
