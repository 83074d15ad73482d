#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlmkd/trainer.hpp"

namespace vlmkd {

/// One configuration of an experiment grid.
struct GridRow {
  std::string label;
  /// JSON merge patch applied to the grid's base training config.
  nlohmann::json train = nlohmann::json::object();
  /// Toy caption prompts, one hashed cache each (or one concatenated cache).
  std::vector<std::string> prompts;
  bool concat = false;
};

struct GridSpec {
  std::string name = "grid";
  std::vector<std::uint64_t> seeds{1, 2, 3};
  DataConfig data;
  nlohmann::json base = nlohmann::json::object();
  std::size_t encoder_dim = 64;
  std::vector<GridRow> rows;
  std::size_t workers = 1;
};

GridSpec grid_spec_from_json(const nlohmann::json& j);
GridSpec load_grid_spec(const std::string& path);
nlohmann::json to_json(const GridSpec& spec);

/// Resolved training config of a row for one seed.
TrainConfig row_config(const GridSpec& spec, const GridRow& row, std::uint64_t seed);

struct GridRowResult {
  std::string label;
  bool failed = false;
  std::string error;
  std::vector<EvalReport> reports;  // one per seed, in seed order
  double top1_overall = 0.0;
  std::optional<double> top1_many;
  std::optional<double> top1_medium;
  std::optional<double> top1_few;
};

struct GridResult {
  std::string name;
  std::vector<std::uint64_t> seeds;
  std::vector<GridRowResult> rows;
  const GridRowResult& row(const std::string& label) const;
};

/// Trains every row over every seed. Rows whose runs throw are marked failed
/// and the grid carries on. Teachers for KD-Image rows are trained once per
/// seed from the base config. Runs are spread over `spec.workers` threads;
/// the result does not depend on the worker count.
GridResult run_experiment_grid(const GridSpec& spec);
GridResult run_experiment_grid(const GridSpec& spec, const SyntheticDataset& dataset);

nlohmann::json to_json(const GridResult& result);
std::string grid_markdown(const GridResult& result);

}  // namespace vlmkd
