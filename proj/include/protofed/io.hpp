#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "protofed/data.hpp"
#include "protofed/engine.hpp"
#include "protofed/metrics.hpp"

namespace protofed {

struct DatasetConfig {
  PartitionSpec partition;
  /// IDX files backing label_shard and dirichlet partitions.
  std::optional<std::string> idx_images;
  std::optional<std::string> idx_labels;

  friend bool operator==(const DatasetConfig&, const DatasetConfig&) = default;
};

/// One (strategy, delta) entry of the experiment grid.
struct CellSpec {
  StrategyConfig strategy;
  double delta = 0.0;
  std::optional<ClientSampling> sampling;
  /// Defaults to a name derived from the strategy settings.
  std::optional<std::string> name;

  std::string label() const;

  friend bool operator==(const CellSpec&, const CellSpec&) = default;
};

struct ExperimentManifest {
  DatasetConfig dataset;
  std::vector<std::size_t> hidden_dims{128, 256};
  /// Shared training settings; strategy, delta and seed come from the cells.
  SimConfig training;
  /// Epochs for the centralized reference model; 0 skips it (and MMD/FFD).
  std::size_t centralized_epochs = 100;
  std::vector<CellSpec> cells;
  std::vector<std::uint64_t> seeds{1};
  std::string output_dir = "runs";

  /// Throws ConfigError when a field is out of range.
  void validate() const;

  friend bool operator==(const ExperimentManifest&, const ExperimentManifest&) = default;
};

/// Parses YAML text; `origin` names the source in error messages.
ExperimentManifest parse_config_text(const std::string& text, const std::string& origin = "<config>");
ExperimentManifest parse_config(const std::filesystem::path& path);
/// Canonical YAML that parses back to an equal manifest.
std::string emit_config(const ExperimentManifest& m);
/// Commented description of every key and its default.
std::string config_reference();

struct RunSummary {
  std::string cell;
  std::string strategy;
  double delta = 0.0;
  std::uint64_t seed = 0;
  double final_accuracy = 0.0;
  double final_loss = 0.0;
  double final_amm = 0.0;
  std::optional<double> final_mmd;
  std::optional<double> ffd_vs_fedavg;
  double wall_time_s = 0.0;

  friend bool operator==(const RunSummary&, const RunSummary&) = default;
};

void to_json(nlohmann::json& j, const RunSummary& s);
void from_json(const nlohmann::json& j, RunSummary& s);
void to_json(nlohmann::json& j, const ParamSet& p);
void from_json(const nlohmann::json& j, ParamSet& p);

/// Header plus one line per record; doubles with 6 significant digits.
std::string rounds_csv(const std::vector<RoundRecord>& records);

struct RunOptions {
  /// Comma-separated glob patterns over cell labels; empty runs all.
  std::string cell_filter;
  std::size_t threads = 1;
};

/// Model spec for the manifest's dataset shape.
ModelSpec model_spec(const ExperimentManifest& m, const FederatedDataset& d);

/// Builds the dataset or loads it from <output_dir>/cache/<content hash>.
FederatedDataset load_or_build_dataset(const ExperimentManifest& m, const std::filesystem::path& cache_root);

/// Runs every selected cell for every seed and writes its artifacts. Returns
/// 0 on success and 1 if any cell failed; finished cells are kept.
int run_experiment(const ExperimentManifest& m, const RunOptions& opts = {});

/// Reads every summary.json below `output_dir`.
std::vector<RunSummary> collect_summaries(const std::filesystem::path& output_dir);

struct ReportTables {
  std::string text;
  std::string csv;
};

/// Per-cell accuracy by delta plus mean and sample std across deltas, and
/// loss mean and std. Seeds are averaged within each delta first.
ReportTables report(const std::vector<RunSummary>& runs);

}  // namespace protofed
