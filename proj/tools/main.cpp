#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "property_suites.hpp"
#include "protofed/errors.hpp"
#include "protofed/io.hpp"

namespace fs = std::filesystem;
using namespace protofed;

namespace {

// --output beats the environment, which beats the config file.
void apply_output_override(ExperimentManifest& m, const std::string& flag) {
  if (!flag.empty()) {
    m.output_dir = flag;
  } else if (const char* env = std::getenv("PROTOFED_OUTPUT_DIR"); env && *env) {
    m.output_dir = env;
  }
}

ExperimentManifest load(const std::string& config, const std::string& output, std::optional<std::uint64_t> seed) {
  auto m = parse_config(config);
  apply_output_override(m, output);
  if (seed) m.seeds = {*seed};
  return m;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated learning simulator with prototype-margin aggregation"};
  app.footer("\n" + config_reference());
  app.require_subcommand(1);

  std::string config, output, cells;
  std::size_t threads = 1;
  std::optional<std::uint64_t> seed_override;

  auto* gen = app.add_subcommand("generate-data", "Build (or load from cache) the configured federated dataset");
  gen->add_option("--config", config, "Experiment config (YAML)")->required()->check(CLI::ExistingFile);
  gen->add_option("--output", output, "Output directory (overrides config and PROTOFED_OUTPUT_DIR)");

  auto* run = app.add_subcommand("run", "Run every (strategy, delta, seed) cell of a config");
  run->add_option("--config", config, "Experiment config (YAML)")->required()->check(CLI::ExistingFile);
  run->add_option("--output", output, "Output directory (overrides config and PROTOFED_OUTPUT_DIR)");
  run->add_option("--cells", cells, "Comma-separated glob patterns over cell labels, e.g. 'fedavg,fedproto*'");
  run->add_option("--threads", threads, "Cells run in parallel")->check(CLI::PositiveNumber);
  run->add_option("--seed-override", seed_override, "Run only this seed");

  auto* rep = app.add_subcommand("report", "Summarize finished runs as accuracy/loss tables");
  rep->add_option("--config", config, "Experiment config; its output_dir is used when --output is absent");
  rep->add_option("--output", output, "Directory holding the runs");

  auto* self = app.add_subcommand("selftest", "Run the built-in oracle and property checks");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const auto m = load(config, output, seed_override);
      const auto data = load_or_build_dataset(m, fs::path(m.output_dir) / "cache");
      std::cout << "clients: " << data.clients.size() << ", samples: " << data.total_samples()
                << ", train: " << data.total_train() << ", cached under " << (fs::path(m.output_dir) / "cache") << "\n";
      return 0;
    }
    if (*run) {
      const auto m = load(config, output, seed_override);
      return run_experiment(m, RunOptions{cells, threads});
    }
    if (*rep) {
      fs::path dir = output;
      if (dir.empty()) {
        if (config.empty()) {
          const char* env = std::getenv("PROTOFED_OUTPUT_DIR");
          if (!env || !*env) throw UsageError("report needs --output or --config");
          dir = env;
        } else {
          dir = load(config, "", std::nullopt).output_dir;
        }
      }
      const auto tables = report(collect_summaries(dir));
      std::cout << tables.text;
      if (fs::is_directory(dir)) {
        std::ofstream(dir / "report.csv") << tables.csv;
        std::ofstream(dir / "report.txt") << tables.text;
      }
      return 0;
    }
    if (*self) return run_property_suites(std::cout) ? 0 : 1;
  } catch (const ConfigError& e) {
    spdlog::error("config error: {}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
