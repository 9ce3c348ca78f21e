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

// dpfedtab command-line front end.
//
// Configuration precedence: built-in defaults < --preset < --config file <
// individual flags.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "dpfedtab/experiment.hpp"
#include "dpfedtab/fixtures.hpp"

namespace {

using dpfedtab::experiment::ExperimentConfig;
using nlohmann::json;
namespace ex = dpfedtab::experiment;

struct ConfigFlags {
  std::string preset;
  std::string config_file;
  std::optional<std::string> output, dataset, schema, name;
  std::optional<std::size_t> rounds, local_steps, clients, batch_size, width, layers, attacks;
  std::optional<std::string> clients_per_round, strategy, epsilon, partition;
  std::optional<double> noise_multiplier, clip_norm, delta, learning_rate, server_lr;
  std::optional<std::uint64_t> seed, model_seed, data_seed, attack_seed;
  std::optional<std::size_t> checkpoint_every;

  void attach(CLI::App& app) {
    app.add_option("--preset", preset, "Base preset (desk, full)");
    app.add_option("--config", config_file, "JSON configuration file");
    app.add_option("--output", output, "Output directory (relative to $DPFEDTAB_OUTPUT_ROOT if set)");
    app.add_option("--dataset", dataset, "Dataset CSV");
    app.add_option("--schema", schema, "Schema JSON");
    app.add_option("--name", name, "Dataset name used in reports");
    app.add_option("--rounds", rounds, "Communication rounds R");
    app.add_option("--local-steps", local_steps, "Local updates per round");
    app.add_option("--clients", clients, "Client count");
    app.add_option("--clients-per-round", clients_per_round, "Integer or \"all\"");
    app.add_option("--strategy", strategy, "fedavg, fedadam, fedprox or fedyogi");
    app.add_option("--partition", partition, "noniid or iid");
    app.add_option("--batch-size", batch_size, "Expected local batch size");
    app.add_option("--lr", learning_rate, "Client learning rate");
    app.add_option("--server-lr", server_lr, "Server learning rate (FedAdam/FedYogi)");
    app.add_option("--epsilon", epsilon, "Target epsilon per client, or \"inf\"");
    app.add_option("--noise-multiplier", noise_multiplier, "Explicit sigma (skips calibration)");
    app.add_option("--clip-norm", clip_norm, "Per-sample clipping norm C");
    app.add_option("--delta", delta, "Delta (0 = 1/|D_i|)");
    app.add_option("--width", width, "Hidden layer width");
    app.add_option("--layers", layers, "Hidden layer count");
    app.add_option("--seed", seed, "Set model, data and attack seeds at once");
    app.add_option("--model-seed", model_seed, "Model seed");
    app.add_option("--data-seed", data_seed, "Data seed");
    app.add_option("--attack-seed", attack_seed, "Attack seed");
    app.add_option("--attacks", attacks, "Attacks per privacy evaluator");
    app.add_option("--checkpoint-every", checkpoint_every, "Checkpoint interval in rounds");
  }

  ExperimentConfig resolve() const {
    ExperimentConfig c = preset.empty() ? ExperimentConfig{} : ex::preset(preset);
    if (!config_file.empty()) c = ex::from_json(ex::read_json(config_file), c);
    json p = json::object();
    auto set = [&](const char* section, const char* key, const auto& v) {
      if (v) p[section][key] = *v;
    };
    if (output) p["output_dir"] = *output;
    set("dataset", "csv", dataset);
    set("dataset", "schema", schema);
    set("dataset", "name", name);
    set("federation", "rounds", rounds);
    set("federation", "local_steps", local_steps);
    set("federation", "clients", clients);
    set("federation", "strategy", strategy);
    set("federation", "partition", partition);
    set("federation", "batch_size", batch_size);
    set("federation", "learning_rate", learning_rate);
    set("federation", "server_learning_rate", server_lr);
    if (clients_per_round) {
      if (*clients_per_round == "all") {
        p["federation"]["clients_per_round"] = "all";
      } else {
        p["federation"]["clients_per_round"] = std::stoul(*clients_per_round);
      }
    }
    if (epsilon) {
      p["privacy"]["target_epsilon"] = *epsilon == "inf" ? json("inf") : json(std::stod(*epsilon));
    }
    set("privacy", "noise_multiplier", noise_multiplier);
    set("privacy", "clip_norm", clip_norm);
    set("privacy", "delta", delta);
    set("model", "width", width);
    set("model", "hidden_layers", layers);
    if (seed) p["seeds"] = {{"model", *seed}, {"data", *seed}, {"attack", *seed}};
    if (model_seed) p["seeds"]["model"] = *model_seed;
    if (data_seed) p["seeds"]["data"] = *data_seed;
    if (attack_seed) p["seeds"]["attack"] = *attack_seed;
    set("evaluation", "n_attacks", attacks);
    if (checkpoint_every) p["checkpoint_every"] = *checkpoint_every;
    return ex::from_json(p, c);
  }
};

int run(int argc, char** argv) {
  CLI::App app{"Federated differentially private diffusion for tabular data"};
  app.require_subcommand(1);

  ConfigFlags flags;
  auto* prepare = app.add_subcommand("prepare", "Fit the encoder and write client partitions");
  auto* train = app.add_subcommand("train", "Run federated training");
  auto* generate = app.add_subcommand("generate", "Sample synthetic rows from a checkpoint");
  auto* evaluate = app.add_subcommand("evaluate", "Score synthetic data against real data");
  auto* sweep = app.add_subcommand("sweep", "Run prepare/train/generate/evaluate over a grid");
  auto* report = app.add_subcommand("report", "Pretty-print a report file");
  auto* fixture = app.add_subcommand("fixture", "Write a bundled synthetic fixture");
  for (auto* sub : {prepare, train, generate, evaluate, sweep}) flags.attach(*sub);

  bool resume = false;
  std::optional<std::size_t> stop_after;
  train->add_flag("--resume", resume, "Continue from checkpoint.json if present");
  train->add_option("--stop-after", stop_after, "Stop after this many rounds (simulated interrupt)");

  std::optional<std::size_t> rows;
  std::optional<std::uint64_t> gen_seed;
  generate->add_option("--rows", rows, "Rows to generate (default: evaluation.synthetic_rows)");
  generate->add_option("--gen-seed", gen_seed, "Sampling seed (default: derived from the model seed)");

  std::string real_csv, syn_csv, real_test, out_report;
  evaluate->add_option("--real", real_csv, "Real CSV (with --synthetic: evaluate files directly)");
  evaluate->add_option("--synthetic", syn_csv, "Synthetic CSV");
  evaluate->add_option("--real-test", real_test, "Held-out real CSV for utility");
  evaluate->add_option("--out", out_report, "Report path (default: <output>/report.json)");

  std::vector<std::string> sweep_eps, sweep_strategy;
  std::vector<std::size_t> sweep_steps, sweep_clients;
  std::optional<std::size_t> parallelism;
  sweep->add_option("--sweep-epsilon", sweep_eps, "Epsilon axis (numbers or inf)");
  sweep->add_option("--sweep-local-steps", sweep_steps, "Local-steps axis");
  sweep->add_option("--sweep-clients", sweep_clients, "Client-count axis");
  sweep->add_option("--sweep-strategy", sweep_strategy, "Strategy axis");
  sweep->add_option("--parallelism", parallelism, "Concurrent cells");

  std::string report_path;
  bool report_json = false;
  report->add_option("path", report_path, "report.json")->required();
  report->add_flag("--json", report_json, "Print canonical JSON instead of text");

  std::string fixture_kind = "mixture", fixture_csv, fixture_schema;
  std::size_t fixture_rows = 0;
  std::uint64_t fixture_seed = 7;
  fixture->add_option("--kind", fixture_kind, "mixture, calibration or separable");
  fixture->add_option("--rows", fixture_rows, "Row count (default per kind)");
  fixture->add_option("--seed", fixture_seed, "Generator seed");
  fixture->add_option("--csv", fixture_csv, "Output CSV")->required();
  fixture->add_option("--schema-out", fixture_schema, "Output schema JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  if (*prepare) {
    const auto c = flags.resolve();
    const auto p = ex::cmd_prepare(c);
    std::cout << "prepared " << p.table.rows() << " rows into " << p.partitions.size()
              << " partitions in " << ex::paths_for(c).root.string() << "\n";
    for (const auto& part : p.partitions) {
      std::cout << "  client " << part.client_id << ": " << part.size() << " rows\n";
    }
  } else if (*train) {
    const auto c = flags.resolve();
    const auto r = ex::cmd_train(c, {resume, stop_after});
    const double eps = r.state.max_epsilon();
    std::cout << "rounds completed " << r.state.round << "/" << c.fed.rounds
              << (r.state.stopped_early ? " (stopped early: privacy budget)" : "") << "\n";
    if (!r.state.log.empty()) std::cout << "last round loss " << r.state.log.back().loss_mean << "\n";
    std::cout << "max client epsilon " << (std::isfinite(eps) ? std::to_string(eps) : "inf") << "\n";
  } else if (*generate) {
    const auto c = flags.resolve();
    const auto t = ex::cmd_generate(c, rows, gen_seed);
    std::cout << "wrote " << t.rows() << " rows to " << ex::paths_for(c).synthetic().string() << "\n";
  } else if (*evaluate) {
    dpfedtab::metrics::MetricsReport m;
    if (!real_csv.empty() || !syn_csv.empty()) {
      if (real_csv.empty() || syn_csv.empty()) {
        throw dpfedtab::ValidationError("--real and --synthetic must be given together");
      }
      const auto c = flags.resolve();
      if (c.dataset.schema.empty()) throw dpfedtab::ValidationError("--schema is required");
      ex::EvaluateInputs in{real_csv, syn_csv, c.dataset.schema, c.dataset.name, ex::config_hash(c),
                            c.seeds, c.evaluation.n_attacks, std::nullopt};
      if (!real_test.empty()) in.real_test_csv = real_test;
      m = ex::evaluate_files(in);
      ex::write_json(out_report.empty() ? ex::paths_for(c).report() : ex::fs::path(out_report), m.to_json());
    } else {
      const auto c = flags.resolve();
      m = ex::cmd_evaluate(c);
      if (!out_report.empty()) ex::write_json(out_report, m.to_json());
    }
    std::cout << ex::format_report(m);
  } else if (*sweep) {
    auto c = flags.resolve();
    for (const auto& e : sweep_eps) c.sweep.epsilon.push_back(e == "inf" ? dpfedtab::dp::kInfinity : std::stod(e));
    for (const auto& s : sweep_strategy) c.sweep.strategy.push_back(dpfedtab::fed::parse_strategy(s));
    for (auto v : sweep_steps) c.sweep.local_steps.push_back(v);
    for (auto v : sweep_clients) c.sweep.clients.push_back(v);
    if (parallelism) c.parallelism = *parallelism;
    const json results = ex::cmd_sweep(c);
    std::size_t failed = 0;
    for (const auto& row : results.at("rows")) {
      std::cout << "cell " << row.at("cell") << " " << row.at("axes").dump() << " " << row.at("status").get<std::string>();
      if (row.at("status") == "ok") {
        std::cout << " fidelity=" << row.at("fidelity") << " utility=" << row.at("utility")
                  << " privacy_risk=" << row.at("privacy_risk");
      } else {
        ++failed;
        std::cout << " error=" << row.at("error").get<std::string>();
      }
      std::cout << "\n";
    }
    if (failed) std::cout << failed << " cell(s) failed\n";
  } else if (*report) {
    const auto m = dpfedtab::metrics::MetricsReport::from_json(ex::read_json(report_path));
    if (report_json) {
      std::cout << m.to_json().dump(2) << "\n";
    } else {
      std::cout << ex::format_report(m);
    }
  } else if (*fixture) {
    dpfedtab::data::RawTable t;
    if (fixture_kind == "mixture") {
      t = dpfedtab::fixtures::mixture(fixture_rows ? fixture_rows : 2000, fixture_seed);
    } else if (fixture_kind == "calibration") {
      t = dpfedtab::fixtures::calibration(fixture_rows ? fixture_rows : 500, fixture_seed);
    } else if (fixture_kind == "separable") {
      t = dpfedtab::fixtures::separable(fixture_rows ? fixture_rows : 1000, fixture_seed);
    } else {
      throw dpfedtab::ValidationError("unknown fixture kind \"" + fixture_kind + "\"");
    }
    dpfedtab::data::save_csv(fixture_csv, t);
    if (!fixture_schema.empty()) ex::write_json(fixture_schema, t.schema.to_json());
    std::cout << "wrote " << t.rows() << " rows to " << fixture_csv << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const dpfedtab::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(dpfedtab::ExitCode::kValidation);
  }
}
