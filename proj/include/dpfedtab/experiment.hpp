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

// Experiment configuration and the commands behind the CLI. Each command
// reads and writes JSON artifacts in the run's output directory:
//
//   config.json             resolved configuration and its hash
//   pipeline.json           fitted encoder
//   partitions/client_K.json, partition_summary.json
//   checkpoint.json         full federated state (resumable)
//   audit.jsonl             one line per (round, client)
//   manifest.json           hash, version, wall time
//   synthetic.csv, synthetic.meta.json
//   report.json             metrics
//
// Everything except manifest.json is a deterministic function of the
// configuration.

#pragma once

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "dpfedtab/common.hpp"
#include "dpfedtab/data_pipeline.hpp"
#include "dpfedtab/diffusion.hpp"
#include "dpfedtab/dp_mechanism.hpp"
#include "dpfedtab/eval_metrics.hpp"
#include "dpfedtab/fed_core.hpp"
#include "dpfedtab/tensor_nn.hpp"

namespace dpfedtab::experiment {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kVersion = "0.1.0";
inline constexpr const char* kOutputRootEnv = "DPFEDTAB_OUTPUT_ROOT";

struct DatasetConfig {
  std::string name = "dataset";
  std::string csv;
  std::string schema;
  bool operator==(const DatasetConfig&) const = default;
};

struct DiffusionConfig {
  std::size_t steps = 500;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  bool operator==(const DiffusionConfig&) const = default;
};

struct Seeds {
  std::uint64_t model = 0;
  std::uint64_t data = 0;
  std::uint64_t attack = 0;
  bool operator==(const Seeds&) const = default;
};

struct EvalConfig {
  std::size_t n_attacks = 500;
  std::size_t synthetic_rows = 0;  // 0: as many as the real table
  std::size_t n_quantiles = 1000;
  bool operator==(const EvalConfig&) const = default;
};

struct SweepAxes {
  std::vector<std::size_t> local_steps;
  std::vector<std::size_t> clients;
  std::vector<double> epsilon;
  std::vector<fed::Strategy> strategy;
  bool empty() const {
    return local_steps.empty() && clients.empty() && epsilon.empty() && strategy.empty();
  }
  bool operator==(const SweepAxes&) const = default;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  fed::FedConfig fed;
  bool full_participation = false;  // clients_per_round follows clients
  std::string partition = "noniid";  // or "iid"
  dp::DpConfig dp;
  DiffusionConfig diffusion;
  nn::ModelConfig model;
  Seeds seeds;
  EvalConfig evaluation;
  std::size_t checkpoint_every = 10;
  SweepAxes sweep;
  std::size_t parallelism = 1;
  std::string output_dir = "runs/default";

  bool operator==(const ExperimentConfig&) const = default;

  std::size_t clients_per_round() const {
    return full_participation ? fed.clients : fed.clients_per_round;
  }

  fed::FedConfig resolved_fed() const {
    fed::FedConfig f = fed;
    f.clients_per_round = clients_per_round();
    return f;
  }

  void validate(bool check_files = true) const {
    resolved_fed().validate();
    dp.validate();
    if (partition != "noniid" && partition != "iid") {
      throw ValidationError("partition must be \"noniid\" or \"iid\"");
    }
    nn::ParamLayout(2, 2, {}, model);  // shape checks
    diffusion::NoiseSchedule::linear(diffusion.steps, diffusion.beta_start, diffusion.beta_end);
    if (evaluation.n_attacks < 1) throw ValidationError("evaluation.n_attacks must be >= 1");
    if (evaluation.n_quantiles < 2) throw ValidationError("evaluation.n_quantiles must be >= 2");
    if (checkpoint_every < 1) throw ValidationError("checkpoint_every must be >= 1");
    if (parallelism < 1) throw ValidationError("parallelism must be >= 1");
    if (output_dir.empty()) throw ValidationError("output_dir must be set");
    if (check_files) {
      if (dataset.csv.empty()) throw ValidationError("dataset.csv must be set");
      if (dataset.schema.empty()) throw ValidationError("dataset.schema must be set");
      if (!fs::exists(dataset.schema)) throw ValidationError("schema file not found: " + dataset.schema);
      if (!fs::exists(dataset.csv)) throw ValidationError("dataset file not found: " + dataset.csv);
    }
  }
};

// ---------------------------------------------------------------------------
// JSON form

namespace detail {

inline json epsilon_to_json(double e) { return std::isfinite(e) ? json(e) : json("inf"); }

inline double epsilon_from_json(const json& j) {
  if (j.is_string()) {
    if (j.get<std::string>() == "inf") return dp::kInfinity;
    throw ValidationError("epsilon must be a number or \"inf\"");
  }
  return j.get<double>();
}

}  // namespace detail

inline json to_json(const ExperimentConfig& c) {
  json strategies = json::array();
  for (auto s : c.sweep.strategy) strategies.push_back(fed::to_string(s));
  json eps = json::array();
  for (double e : c.sweep.epsilon) eps.push_back(detail::epsilon_to_json(e));
  return json{
      {"dataset", {{"name", c.dataset.name}, {"csv", c.dataset.csv}, {"schema", c.dataset.schema}}},
      {"federation",
       {{"clients", c.fed.clients},
        {"rounds", c.fed.rounds},
        {"local_steps", c.fed.local_steps},
        {"clients_per_round", c.full_participation ? json("all") : json(c.fed.clients_per_round)},
        {"strategy", fed::to_string(c.fed.strategy)},
        {"prox_mu", c.fed.prox_mu},
        {"server_learning_rate", c.fed.server_learning_rate},
        {"server_beta1", c.fed.server_beta1},
        {"server_beta2", c.fed.server_beta2},
        {"server_epsilon", c.fed.server_epsilon},
        {"literal_fedavg", c.fed.literal_fedavg},
        {"batch_size", c.fed.batch_size},
        {"learning_rate", c.fed.learning_rate},
        {"train_embeddings", c.fed.train_embeddings},
        {"partition", c.partition}}},
      {"privacy",
       {{"target_epsilon", detail::epsilon_to_json(c.dp.target_epsilon)},
        {"delta", c.dp.delta},
        {"clip_norm", c.dp.clip_norm},
        {"noise_multiplier", c.dp.noise_multiplier ? json(*c.dp.noise_multiplier) : json("auto")},
        {"literal_noise", c.dp.literal_noise}}},
      {"diffusion",
       {{"steps", c.diffusion.steps},
        {"beta_start", c.diffusion.beta_start},
        {"beta_end", c.diffusion.beta_end}}},
      {"model",
       {{"hidden_layers", c.model.hidden_layers},
        {"width", c.model.width},
        {"time_embedding_dim", c.model.time_embedding_dim}}},
      {"seeds", {{"model", c.seeds.model}, {"data", c.seeds.data}, {"attack", c.seeds.attack}}},
      {"evaluation",
       {{"n_attacks", c.evaluation.n_attacks},
        {"synthetic_rows", c.evaluation.synthetic_rows},
        {"n_quantiles", c.evaluation.n_quantiles}}},
      {"checkpoint_every", c.checkpoint_every},
      {"sweep",
       {{"local_steps", c.sweep.local_steps},
        {"clients", c.sweep.clients},
        {"epsilon", eps},
        {"strategy", strategies}}},
      {"parallelism", c.parallelism},
      {"output_dir", c.output_dir}};
}

namespace detail {

// Copies the keys of `patch` over `into`, one level of sections deep.
// Keys that `into` does not have are rejected.
inline void overlay(json& into, const json& patch, const std::string& where) {
  if (!patch.is_object()) throw ValidationError(where + " must be an object");
  for (const auto& [k, v] : patch.items()) {
    if (!into.contains(k)) throw ValidationError("unknown key \"" + k + "\" in " + where);
    if (into[k].is_object()) {
      overlay(into[k], v, k);
    } else {
      into[k] = v;
    }
  }
}

template <typename T>
T get(const json& j, const char* key, const std::string& where) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ValidationError(where + "." + key + " has the wrong type");
  }
}

}  // namespace detail

// Overlays `j` on `base`. Keys absent from `j` keep their base value;
// unknown keys and wrongly typed values are rejected.
inline ExperimentConfig from_json(const json& j, const ExperimentConfig& base = {}) {
  using detail::get;
  json m = to_json(base);
  detail::overlay(m, j, "config");
  ExperimentConfig c;
  const auto& d = m.at("dataset");
  c.dataset = {get<std::string>(d, "name", "dataset"), get<std::string>(d, "csv", "dataset"),
               get<std::string>(d, "schema", "dataset")};
  const auto& f = m.at("federation");
  const std::string w = "federation";
  c.fed.clients = get<std::size_t>(f, "clients", w);
  c.fed.rounds = get<std::size_t>(f, "rounds", w);
  c.fed.local_steps = get<std::size_t>(f, "local_steps", w);
  if (f.at("clients_per_round").is_string()) {
    if (f.at("clients_per_round").get<std::string>() != "all") {
      throw ValidationError("federation.clients_per_round must be an integer or \"all\"");
    }
    c.full_participation = true;
    c.fed.clients_per_round = c.fed.clients;
  } else {
    c.fed.clients_per_round = get<std::size_t>(f, "clients_per_round", w);
  }
  c.fed.strategy = fed::parse_strategy(get<std::string>(f, "strategy", w));
  c.fed.prox_mu = get<double>(f, "prox_mu", w);
  c.fed.server_learning_rate = get<double>(f, "server_learning_rate", w);
  c.fed.server_beta1 = get<double>(f, "server_beta1", w);
  c.fed.server_beta2 = get<double>(f, "server_beta2", w);
  c.fed.server_epsilon = get<double>(f, "server_epsilon", w);
  c.fed.literal_fedavg = get<bool>(f, "literal_fedavg", w);
  c.fed.batch_size = get<std::size_t>(f, "batch_size", w);
  c.fed.learning_rate = get<double>(f, "learning_rate", w);
  c.fed.train_embeddings = get<bool>(f, "train_embeddings", w);
  c.partition = get<std::string>(f, "partition", w);
  const auto& p = m.at("privacy");
  c.dp.target_epsilon = detail::epsilon_from_json(p.at("target_epsilon"));
  c.dp.delta = get<double>(p, "delta", "privacy");
  c.dp.clip_norm = get<double>(p, "clip_norm", "privacy");
  const auto& nm = p.at("noise_multiplier");
  if (nm.is_string()) {
    if (nm.get<std::string>() != "auto") {
      throw ValidationError("privacy.noise_multiplier must be a number or \"auto\"");
    }
  } else {
    c.dp.noise_multiplier = get<double>(p, "noise_multiplier", "privacy");
  }
  c.dp.literal_noise = get<bool>(p, "literal_noise", "privacy");
  const auto& df = m.at("diffusion");
  c.diffusion = {get<std::size_t>(df, "steps", "diffusion"), get<double>(df, "beta_start", "diffusion"),
                 get<double>(df, "beta_end", "diffusion")};
  const auto& md = m.at("model");
  c.model = {get<std::size_t>(md, "hidden_layers", "model"), get<std::size_t>(md, "width", "model"),
             get<std::size_t>(md, "time_embedding_dim", "model")};
  const auto& sd = m.at("seeds");
  c.seeds = {get<std::uint64_t>(sd, "model", "seeds"), get<std::uint64_t>(sd, "data", "seeds"),
             get<std::uint64_t>(sd, "attack", "seeds")};
  const auto& ev = m.at("evaluation");
  c.evaluation = {get<std::size_t>(ev, "n_attacks", "evaluation"),
                  get<std::size_t>(ev, "synthetic_rows", "evaluation"),
                  get<std::size_t>(ev, "n_quantiles", "evaluation")};
  c.checkpoint_every = get<std::size_t>(m, "checkpoint_every", "config");
  const auto& sw = m.at("sweep");
  c.sweep.local_steps = get<std::vector<std::size_t>>(sw, "local_steps", "sweep");
  c.sweep.clients = get<std::vector<std::size_t>>(sw, "clients", "sweep");
  for (const auto& e : sw.at("epsilon")) c.sweep.epsilon.push_back(detail::epsilon_from_json(e));
  for (const auto& s : sw.at("strategy")) c.sweep.strategy.push_back(fed::parse_strategy(s.get<std::string>()));
  c.parallelism = get<std::size_t>(m, "parallelism", "config");
  c.output_dir = get<std::string>(m, "output_dir", "config");
  return c;
}

// Hash over everything that affects results (not output_dir, parallelism).
inline std::string config_hash(const ExperimentConfig& c) {
  json j = to_json(c);
  j.erase("output_dir");
  j.erase("parallelism");
  return hex64(fnv1a(j.dump()));
}

// Hash over the inputs of `prepare`.
inline std::string data_hash(const ExperimentConfig& c) {
  json j = to_json(c);
  json d{{"dataset", j["dataset"]},
         {"clients", c.fed.clients},
         {"partition", c.partition},
         {"seed", c.seeds.data},
         {"n_quantiles", c.evaluation.n_quantiles}};
  return hex64(fnv1a(d.dump()));
}

// ---------------------------------------------------------------------------
// Presets

inline std::vector<std::string> preset_names() { return {"desk", "full"}; }

// desk: minutes on one core. full: 5 clients, 3000 rounds, width 1024.
inline ExperimentConfig preset(const std::string& name) {
  ExperimentConfig c;
  c.fed.batch_size = 16;
  c.diffusion = {500, 1e-4, 0.02};
  if (name == "desk") {
    c.fed.clients = 3;
    c.fed.rounds = 50;
    c.fed.local_steps = 20;
    c.full_participation = true;
    c.fed.clients_per_round = 3;
    c.fed.learning_rate = 1e-3;
    c.model = {3, 128, 64};
    c.checkpoint_every = 10;
    c.output_dir = "runs/desk";
  } else if (name == "full") {
    c.fed.clients = 5;
    c.fed.rounds = 3000;
    c.fed.local_steps = 100;
    c.fed.clients_per_round = 1;
    c.fed.learning_rate = 1e-4;
    c.model = {3, 1024, 64};
    c.checkpoint_every = 100;
    c.output_dir = "runs/full";
  } else {
    throw ValidationError("unknown preset \"" + name + "\"");
  }
  return c;
}

// ---------------------------------------------------------------------------
// Files

inline fs::path resolve_output_dir(const std::string& dir) {
  fs::path p(dir);
  if (p.is_relative()) {
    if (const char* root = std::getenv(kOutputRootEnv); root && *root) return fs::path(root) / p;
  }
  return p;
}

inline json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

// Writes via a temporary file so an interrupted write never leaves a
// truncated artifact behind.
inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw ValidationError("cannot write " + path.string());
    out << text;
    if (!out) throw ValidationError("write failed: " + path.string());
  }
  fs::rename(tmp, path);
}

inline void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

inline std::string file_hash(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return hex64(fnv1a(ss.str()));
}

struct RunPaths {
  fs::path root;
  fs::path config() const { return root / "config.json"; }
  fs::path pipeline() const { return root / "pipeline.json"; }
  fs::path partition(std::size_t k) const {
    return root / "partitions" / ("client_" + std::to_string(k) + ".json");
  }
  fs::path partition_summary() const { return root / "partition_summary.json"; }
  fs::path checkpoint() const { return root / "checkpoint.json"; }
  fs::path audit() const { return root / "audit.jsonl"; }
  fs::path manifest() const { return root / "manifest.json"; }
  fs::path synthetic() const { return root / "synthetic.csv"; }
  fs::path synthetic_meta() const { return root / "synthetic.meta.json"; }
  fs::path report() const { return root / "report.json"; }
};

inline RunPaths paths_for(const ExperimentConfig& c) { return {resolve_output_dir(c.output_dir)}; }

// ---------------------------------------------------------------------------
// prepare

struct Prepared {
  data::RawTable table;
  data::Pipeline pipeline;
  std::vector<data::ClientPartition> partitions;
};

inline std::uint64_t embedding_seed(const ExperimentConfig& c) { return derive_seed(c.seeds.data, 1); }
inline std::uint64_t partition_seed(const ExperimentConfig& c) { return derive_seed(c.seeds.data, 2); }
inline std::uint64_t split_seed(const ExperimentConfig& c) { return derive_seed(c.seeds.data, 3); }
inline std::uint64_t init_seed(const ExperimentConfig& c) { return derive_seed(c.seeds.model, 1); }
inline std::uint64_t train_seed(const ExperimentConfig& c) { return derive_seed(c.seeds.model, 2); }
inline std::uint64_t generate_seed(const ExperimentConfig& c) { return derive_seed(c.seeds.model, 3); }
inline std::uint64_t attack_seed(const ExperimentConfig& c) { return derive_seed(c.seeds.attack, 1); }
inline std::uint64_t classifier_seed(const ExperimentConfig& c) { return derive_seed(c.seeds.attack, 2); }

inline data::RawTable load_dataset(const ExperimentConfig& c) {
  auto schema = data::load_schema(c.dataset.schema);
  return data::load_csv(c.dataset.csv, schema);
}

inline std::vector<data::ClientPartition> make_partitions(const ExperimentConfig& c,
                                                          const data::RawTable& table) {
  if (c.fed.clients == 1) {
    data::ClientPartition all{0, std::vector<std::size_t>(table.rows())};
    std::iota(all.rows.begin(), all.rows.end(), 0);
    return {all};
  }
  if (c.partition == "iid") return data::partition_iid(table.rows(), c.fed.clients, partition_seed(c));
  const auto& col = table.schema.partition_column();
  if (!col) throw ValidationError("non-IID partitioning needs a partition column in the schema");
  return data::partition_noniid(table, *col, c.fed.clients, partition_seed(c));
}

inline Prepared cmd_prepare(const ExperimentConfig& c) {
  c.validate();
  const auto paths = paths_for(c);
  Prepared p;
  p.table = load_dataset(c);
  p.pipeline = data::Pipeline::fit(p.table, c.evaluation.n_quantiles, embedding_seed(c));
  p.partitions = make_partitions(c, p.table);

  const std::string hash = config_hash(c);
  const std::string dhash = data_hash(c);
  write_json(paths.config(), {{"config_hash", hash}, {"config", to_json(c)}});
  write_json(paths.pipeline(), {{"data_hash", dhash}, {"pipeline", p.pipeline.to_json()}});
  json summary = json::array();
  for (const auto& part : p.partitions) {
    write_json(paths.partition(part.client_id),
               {{"data_hash", dhash}, {"client", part.client_id}, {"rows", part.rows}});
    json counts = json::object();
    if (const auto& pc = p.table.schema.partition_column()) {
      const auto& col = p.table.categorical(p.table.schema.index_of(*pc));
      for (std::size_t r : part.rows) counts[col[r]] = counts.value(col[r], 0) + 1;
    }
    summary.push_back({{"client", part.client_id}, {"rows", part.size()}, {"categories", counts}});
  }
  write_json(paths.partition_summary(),
             {{"data_hash", dhash}, {"total_rows", p.table.rows()}, {"clients", summary}});
  return p;
}

inline Prepared load_prepared(const ExperimentConfig& c) {
  const auto paths = paths_for(c);
  if (!fs::exists(paths.pipeline())) {
    throw ValidationError("no prepared artifacts in " + paths.root.string() + "; run prepare first");
  }
  const std::string dhash = data_hash(c);
  Prepared p;
  p.table = load_dataset(c);
  const json pj = read_json(paths.pipeline());
  if (pj.at("data_hash").get<std::string>() != dhash) {
    throw ValidationError("pipeline.json was prepared from a different dataset configuration");
  }
  p.pipeline = data::Pipeline::from_json(pj.at("pipeline"));
  for (std::size_t k = 0; k < c.fed.clients; ++k) {
    const json j = read_json(paths.partition(k));
    if (j.at("data_hash").get<std::string>() != dhash) {
      throw ValidationError("partition " + std::to_string(k) + " was prepared from a different configuration");
    }
    p.partitions.push_back({j.at("client").get<std::size_t>(), j.at("rows").get<std::vector<std::size_t>>()});
  }
  return p;
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
  bool resume = false;
  std::optional<std::size_t> stop_after;  // rounds to run in this call
};

struct TrainResult {
  fed::FederatedState state;
  double wall_seconds = 0.0;
};

inline std::shared_ptr<const nn::ParamLayout> make_layout(const data::Pipeline& p, const nn::ModelConfig& m) {
  return std::make_shared<const nn::ParamLayout>(p.encoded_width(), p.numeric_width(),
                                                 p.vocabulary_sizes(), m);
}

inline std::vector<std::vector<double>> initial_embeddings(const data::Pipeline& p) {
  std::vector<std::vector<double>> out;
  for (const auto& codec : p.codecs()) {
    std::vector<double> flat;
    for (const auto& e : codec.embeddings()) flat.insert(flat.end(), e.begin(), e.end());
    out.push_back(std::move(flat));
  }
  return out;
}

inline std::vector<fed::ClientData> client_data(const Prepared& p) {
  const auto encoded = p.pipeline.encode(p.table);
  std::vector<fed::ClientData> out;
  for (const auto& part : p.partitions) out.push_back(fed::ClientData::from(encoded, part.rows));
  return out;
}

inline diffusion::NoiseSchedule make_schedule(const ExperimentConfig& c) {
  return diffusion::NoiseSchedule::linear(c.diffusion.steps, c.diffusion.beta_start, c.diffusion.beta_end);
}

inline json checkpoint_json(const ExperimentConfig& c, const std::string& pipeline_hash,
                            const fed::FederatedState& s) {
  return {{"config_hash", config_hash(c)},
          {"pipeline_hash", pipeline_hash},
          {"layout", s.global.layout().to_json()},
          {"state", s.to_json()}};
}

inline void write_audit(const fs::path& path, const fed::FederatedState& s) {
  std::string text;
  for (const auto& r : s.log) {
    for (const auto& c : r.clients) {
      json line = c.to_json();
      line["round"] = r.round;
      text += line.dump() + "\n";
    }
  }
  write_text(path, text);
}

inline TrainResult cmd_train(const ExperimentConfig& c, const TrainOptions& opt = {}) {
  c.validate();
  const auto start = std::chrono::steady_clock::now();
  const auto paths = paths_for(c);
  const Prepared prep = load_prepared(c);
  const std::string pipeline_hash = file_hash(paths.pipeline());
  const auto fc = c.resolved_fed();
  const auto schedule = make_schedule(c);

  fed::FederatedState state;
  if (opt.resume && fs::exists(paths.checkpoint())) {
    const json ck = read_json(paths.checkpoint());
    if (ck.at("config_hash").get<std::string>() != config_hash(c)) {
      throw ValidationError("checkpoint was written under a different configuration");
    }
    if (ck.at("pipeline_hash").get<std::string>() != pipeline_hash) {
      throw ValidationError("checkpoint does not belong to this pipeline");
    }
    state = fed::FederatedState::from_json(ck.at("state"), client_data(prep));
  } else {
    auto layout = make_layout(prep.pipeline, c.model);
    auto params = nn::init_params(layout, init_seed(c), initial_embeddings(prep.pipeline));
    state = fed::initialize_federation(std::move(params), client_data(prep), fc, c.dp);
  }

  auto save = [&](const fed::FederatedState& s) {
    write_json(paths.checkpoint(), checkpoint_json(c, pipeline_hash, s));
    write_audit(paths.audit(), s);
  };
  try {
    fed::train(
        state, fc, schedule, train_seed(c),
        [&](const fed::FederatedState& s) {
          if (s.round % c.checkpoint_every == 0) save(s);
        },
        opt.stop_after);
  } catch (const Error& e) {
    throw Error("round " + std::to_string(state.round + 1) + ": " + e.what(), e.code());
  }
  save(state);

  TrainResult out{std::move(state), 0.0};
  out.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const double eps = out.state.max_epsilon();
  write_json(paths.manifest(), {{"config_hash", config_hash(c)},
                                {"version", kVersion},
                                {"wall_time_seconds", out.wall_seconds},
                                {"rounds_completed", out.state.round},
                                {"stopped_early", out.state.stopped_early},
                                {"max_epsilon", detail::epsilon_to_json(eps)}});
  return out;
}

// ---------------------------------------------------------------------------
// generate

struct Model {
  nn::DenoiserParams params;
  data::Pipeline pipeline;  // with trained embedding tables
  std::string pipeline_hash;
  std::string checkpoint_hash;
  std::string config_hash;
};

inline Model load_model(const RunPaths& paths) {
  if (!fs::exists(paths.checkpoint())) throw ValidationError("no checkpoint in " + paths.root.string());
  const json ck = read_json(paths.checkpoint());
  const std::string phash = file_hash(paths.pipeline());
  if (ck.at("pipeline_hash").get<std::string>() != phash) {
    throw ValidationError("checkpoint and pipeline.json do not belong together");
  }
  Model m;
  m.pipeline_hash = phash;
  m.checkpoint_hash = file_hash(paths.checkpoint());
  m.config_hash = ck.at("config_hash").get<std::string>();
  m.params = nn::params_from_json(ck.at("state").at("global"));
  auto base = data::Pipeline::from_json(read_json(paths.pipeline()).at("pipeline"));
  const auto& layout = m.params.layout();
  if (layout.data_width() != base.encoded_width() || layout.vocab_sizes() != base.vocabulary_sizes()) {
    throw ValidationError("checkpoint model width does not match the pipeline schema");
  }
  std::vector<std::vector<data::Embedding>> tables;
  for (std::size_t k = 0; k < layout.vocab_sizes().size(); ++k) {
    std::vector<data::Embedding> t;
    for (std::size_t code = 0; code < layout.vocab_sizes()[k]; ++code) {
      t.push_back({m.params.embedding(k, code, 0), m.params.embedding(k, code, 1)});
    }
    tables.push_back(std::move(t));
  }
  m.pipeline = base.with_embeddings(tables);
  return m;
}

inline data::RawTable cmd_generate(const ExperimentConfig& c, std::optional<std::size_t> n_rows = std::nullopt,
                                   std::optional<std::uint64_t> seed = std::nullopt) {
  c.validate(false);
  const auto paths = paths_for(c);
  const Model m = load_model(paths);
  std::size_t rows = n_rows.value_or(c.evaluation.synthetic_rows);
  if (rows == 0) rows = load_dataset(c).rows();
  const std::uint64_t s = seed.value_or(generate_seed(c));
  const auto encoded = diffusion::generate(m.params, rows, make_schedule(c), s);
  auto table = m.pipeline.decode(encoded);
  data::save_csv(paths.synthetic().string(), table);
  write_json(paths.synthetic_meta(), {{"config_hash", m.config_hash},
                                      {"pipeline_hash", m.pipeline_hash},
                                      {"checkpoint_hash", m.checkpoint_hash},
                                      {"seed", s},
                                      {"rows", rows}});
  return table;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateInputs {
  std::string real_csv;
  std::string synthetic_csv;
  std::string schema;
  std::string dataset = "dataset";
  std::string config_hash;
  Seeds seeds;
  std::size_t n_attacks = 500;
  std::optional<std::string> real_test_csv;
};

inline metrics::MetricsReport evaluate_files(const EvaluateInputs& in) {
  if (!fs::exists(in.schema)) throw ValidationError("schema file not found: " + in.schema);
  const auto schema = data::load_schema(in.schema);
  const auto real = data::load_csv(in.real_csv, schema);
  const auto syn = data::load_csv(in.synthetic_csv, schema);
  std::optional<data::RawTable> test;
  if (in.real_test_csv) test = data::load_csv(*in.real_test_csv, schema);
  metrics::EvaluateOptions opt;
  opt.attack.n_attacks = in.n_attacks;
  opt.attack.seed = derive_seed(in.seeds.attack, 1);
  opt.utility_seed = derive_seed(in.seeds.attack, 2);
  opt.split_seed = derive_seed(in.seeds.data, 3);
  auto report = metrics::evaluate(real, syn, opt, test);
  report.dataset = in.dataset;
  report.config_hash = in.config_hash;
  report.seeds = {{"model", in.seeds.model}, {"data", in.seeds.data}, {"attack", in.seeds.attack}};
  return report;
}

inline metrics::MetricsReport cmd_evaluate(const ExperimentConfig& c) {
  c.validate();
  const auto paths = paths_for(c);
  if (!fs::exists(paths.synthetic_meta())) throw ValidationError("no synthetic data in " + paths.root.string());
  const json meta = read_json(paths.synthetic_meta());
  if (meta.at("config_hash").get<std::string>() != config_hash(c)) {
    throw ValidationError("synthetic data was produced under a different configuration");
  }
  EvaluateInputs in{c.dataset.csv, paths.synthetic().string(), c.dataset.schema, c.dataset.name,
                    config_hash(c), c.seeds, c.evaluation.n_attacks, std::nullopt};
  auto report = evaluate_files(in);
  write_json(paths.report(), report.to_json());
  return report;
}

// ---------------------------------------------------------------------------
// report

inline std::string format_report(const metrics::MetricsReport& m) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(4);
  out << "dataset            " << m.dataset << "\n";
  out << "config hash        " << m.config_hash << "\n";
  out << "privacy risk       " << m.privacy_risk << "   (protection " << m.privacy_protection() << ")\n";
  out << "  singling out     " << m.singling_out.risk << "   95% CI [" << m.singling_out.ci_low << ", "
      << m.singling_out.ci_high << "]\n";
  out << "  linkability      " << m.linkability.risk << "\n";
  out << "  inference        " << m.inference.risk << "\n";
  out << "utility            " << m.utility.score << "\n";
  for (const auto& [k, v] : m.utility.accuracies) out << "  " << std::left << std::setw(17) << k << " " << v << "\n";
  out << "fidelity           " << m.fidelity << "\n";
  out << "  column           " << m.column.score << "\n";
  out << "  row              " << m.row.score << "\n";
  for (const auto* w : {&m.singling_out.warnings, &m.linkability.warnings, &m.inference.warnings,
                        &m.utility.warnings, &m.row.warnings}) {
    for (const auto& s : *w) out << "warning: " << s << "\n";
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// sweep

struct SweepCell {
  std::size_t index = 0;
  ExperimentConfig config;
  json axes;
};

inline std::vector<SweepCell> sweep_cells(const ExperimentConfig& base) {
  if (base.sweep.empty()) throw ValidationError("sweep needs at least one non-empty axis");
  std::vector<SweepCell> cells{{0, base, json::object()}};
  cells.front().config.sweep = {};
  auto expand = [&](auto values, auto apply) {
    if (values.empty()) return;
    std::vector<SweepCell> next;
    for (const auto& cell : cells) {
      for (const auto& v : values) {
        SweepCell n = cell;
        apply(n, v);
        next.push_back(std::move(n));
      }
    }
    cells = std::move(next);
  };
  expand(base.sweep.local_steps, [](SweepCell& s, std::size_t v) {
    s.config.fed.local_steps = v;
    s.axes["local_steps"] = v;
  });
  expand(base.sweep.clients, [](SweepCell& s, std::size_t v) {
    s.config.fed.clients = v;
    s.config.fed.clients_per_round = std::min(s.config.fed.clients_per_round, v);
    s.axes["clients"] = v;
  });
  expand(base.sweep.epsilon, [](SweepCell& s, double v) {
    s.config.dp.target_epsilon = v;
    s.axes["epsilon"] = detail::epsilon_to_json(v);
  });
  expand(base.sweep.strategy, [](SweepCell& s, fed::Strategy v) {
    s.config.fed.strategy = v;
    s.axes["strategy"] = fed::to_string(v);
  });
  const fs::path root = resolve_output_dir(base.output_dir);
  for (std::size_t i = 0; i < cells.size(); ++i) {
    cells[i].index = i;
    cells[i].config.output_dir = (root / "cells" / ("cell_" + std::to_string(i))).string();
  }
  return cells;
}

// Runs prepare, train, generate and evaluate for one configuration.
inline metrics::MetricsReport run_pipeline(const ExperimentConfig& c) {
  cmd_prepare(c);
  cmd_train(c);
  cmd_generate(c);
  return cmd_evaluate(c);
}

// Cells already recorded as ok under the same cell hash are skipped.
// A failing cell is recorded with its error and the sweep moves on.
inline json cmd_sweep(const ExperimentConfig& base) {
  base.validate();
  const auto cells = sweep_cells(base);
  const fs::path root = resolve_output_dir(base.output_dir);
  const fs::path results_path = root / "sweep_results.json";

  std::map<std::string, json> done;
  if (fs::exists(results_path)) {
    for (const auto& row : read_json(results_path).at("rows")) {
      if (row.at("status") == "ok") done[row.at("config_hash").get<std::string>()] = row;
    }
  }

  std::vector<json> rows(cells.size());
  std::atomic<std::size_t> next{0};
  std::mutex write_mutex;
  auto flush = [&]() {
    json all = json::array();
    for (const auto& r : rows) {
      if (!r.is_null()) all.push_back(r);
    }
    write_json(results_path, {{"config_hash", config_hash(base)}, {"rows", all}});
  };
  auto worker = [&]() {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      const auto& cell = cells[i];
      const std::string hash = config_hash(cell.config);
      json row;
      if (auto it = done.find(hash); it != done.end()) {
        row = it->second;
      } else {
        row = {{"cell", cell.index},
               {"axes", cell.axes},
               {"config_hash", hash},
               {"seeds", {{"model", cell.config.seeds.model},
                          {"data", cell.config.seeds.data},
                          {"attack", cell.config.seeds.attack}}},
               {"output_dir", cell.config.output_dir}};
        try {
          const auto report = run_pipeline(cell.config);
          const json manifest = read_json(paths_for(cell.config).manifest());
          row["status"] = "ok";
          row["privacy_risk"] = report.privacy_risk;
          row["privacy_protection"] = report.privacy_protection();
          row["utility"] = report.utility.score;
          row["fidelity"] = report.fidelity;
          row["max_epsilon"] = manifest.at("max_epsilon");
          row["rounds_completed"] = manifest.at("rounds_completed");
        } catch (const std::exception& e) {
          row["status"] = "failed";
          row["error"] = e.what();
        }
      }
      std::lock_guard lock(write_mutex);
      rows[i] = std::move(row);
      flush();
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < std::min(base.parallelism, cells.size()); ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  flush();
  return read_json(results_path);
}

}  // namespace dpfedtab::experiment
