#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "protofed/errors.hpp"
#include "protofed/io.hpp"

using namespace protofed;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int n = 0;
    path = fs::temp_directory_path() / ("protofed-io-" + std::to_string(::getpid()) + "-" + std::to_string(n++));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

const char* kTiny = R"(
dataset:
  scheme: synthetic
  num_clients: 5
  total_samples: 200
model:
  hidden: [6]
training:
  rounds: 2
  local_epochs: 1
  clients_per_round: 2
  centralized_epochs: 1
  mmd_every: 1
strategy: [fedavg, fedproto]
)";

std::string error_of(const std::string& text) {
  try {
    parse_config_text(text, "cfg.yaml");
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("minimal config takes the documented defaults") {
  const auto m = parse_config_text("dataset: synthetic\nstrategy: fedproto\n");
  CHECK(m.training.rounds == 200);
  CHECK(m.training.local_epochs == 20);
  CHECK(m.training.clients_per_round == 10);
  CHECK(m.training.lr == 0.01);
  CHECK(m.training.batch_size == 10);
  CHECK(m.dataset.partition.num_clients == 30);
  CHECK(m.dataset.partition.phi1 == 1.0);
  REQUIRE(m.cells.size() == 1);
  CHECK(m.cells[0].strategy.kind == StrategyKind::fedproto);
  CHECK(m.cells[0].strategy.tolerate_stragglers);
  CHECK(m.cells[0].delta == 0.0);
  CHECK(m.hidden_dims == std::vector<std::size_t>{128, 256});
}

TEST_CASE("config errors name the key and line") {
  const auto unknown = error_of("dataset: synthetic\nstrategy: fedavg\ntraining:\n  learnig_rate: 0.1\n");
  CHECK(unknown.find("learnig_rate") != std::string::npos);
  CHECK(unknown.find("cfg.yaml:4") != std::string::npos);
  const auto type = error_of("dataset: synthetic\nstrategy: fedavg\ntraining:\n  rounds: many\n");
  CHECK(type.find("training.rounds") != std::string::npos);
  CHECK(type.find(":4") != std::string::npos);
  CHECK(error_of("dataset: synthetic\nstrategy: fedavgg\n").find("fedavgg") != std::string::npos);
  CHECK(error_of("dataset: synthetic\nstrategy: fedavg\ntraining:\n  rounds: -3\n").find("rounds") != std::string::npos);
  CHECK(error_of("dataset: label_shard\nstrategy: fedavg\n").find("idx_images") != std::string::npos);
  CHECK(error_of("dataset: synthetic\n").find("strategy") != std::string::npos);
  CHECK(error_of("dataset: synthetic\ncells:\n  - strategy: fedavg\n    variant: lpm_only\n").find("variant") !=
        std::string::npos);
  CHECK_THROWS_AS(parse_config("/nonexistent/protofed.yaml"), ConfigError);
}

TEST_CASE("emitted configs parse back to the same manifest") {
  const char* configs[] = {
      "dataset: synthetic\nstrategy: fedproto\n",
      kTiny,
      R"(
dataset:
  scheme: label_shard
  num_clients: 100
  total_samples: 3000
  power_law_gamma: 0.85
  idx_images: a.idx
  idx_labels: b.idx
model:
  hidden: [256]
training:
  lr: 0.03
  sampling: iid
  moving_avg_window_frac: 0.1
cells:
  - strategy: fedproto
    delta: 0.5
    variant: dplus_only
  - strategy: fedprox
    prox_mu: 0.01
    delta: 0.8
  - {strategy: fairness, sampling: proportional, name: fair-prop, tolerate_stragglers: true}
seeds: [3, 4]
output_dir: out/x
)",
      "dataset: {scheme: dirichlet, alpha: 0.1, idx_images: i, idx_labels: l}\nstrategy: fedavg\ndeltas: [0, 0.5, 0.8]\n"};
  for (const char* c : configs) {
    const auto m = parse_config_text(c);
    const auto text = emit_config(m);
    CHECK(parse_config_text(text) == m);
    CHECK(emit_config(parse_config_text(text)) == text);
  }
  const auto m = parse_config_text(configs[2]);
  CHECK(m.cells[0].label() == "fedproto-dplus_only");
  CHECK(m.cells[1].label() == "fedprox-mu0.01");
  CHECK(m.cells[2].label() == "fair-prop");
}

TEST_CASE("cell labels") {
  CellSpec c;
  c.strategy = StrategyConfig::defaults_for(StrategyKind::fedavg);
  CHECK(c.label() == "fedavg");
  c.strategy.tolerate_stragglers = true;
  CHECK(c.label() == "fedavg-tol");
  c.strategy = StrategyConfig::defaults_for(StrategyKind::fedproto);
  c.strategy.tolerate_stragglers = false;
  CHECK(c.label() == "fedproto-notol");
  c.sampling = ClientSampling::iid;
  CHECK(c.label() == "fedproto-notol-iid");
}

TEST_CASE("run_experiment writes artifacts deterministically") {
  TempDir a, b;
  auto m = parse_config_text(kTiny);
  m.output_dir = a.path.string();
  REQUIRE(run_experiment(m) == 0);
  const auto dir = a.path / "fedproto_delta0_seed1";
  const auto csv = slurp(dir / "rounds.csv");
  CHECK(csv.starts_with("t,accuracy,loss,grad_dissimilarity,amm,mmd,attention_entropy\n"));
  CHECK(count_lines(csv) == 4);
  CHECK(fs::exists(dir / "plotdata" / "accuracy.csv"));
  CHECK(fs::exists(dir / "plotdata" / "mmd.csv"));
  CHECK(fs::exists(a.path / "centralized.json"));
  const auto summary = nlohmann::json::parse(slurp(dir / "summary.json")).get<RunSummary>();
  CHECK(summary.strategy == "fedproto");
  CHECK(summary.final_mmd.has_value());
  CHECK(summary.ffd_vs_fedavg.has_value());
  const auto fedavg = nlohmann::json::parse(slurp(a.path / "fedavg_delta0_seed1" / "summary.json"));
  CHECK(fedavg["ffd_vs_fedavg"].get<double>() == 0.0);

  m.output_dir = b.path.string();
  REQUIRE(run_experiment(m) == 0);
  CHECK(slurp(b.path / "fedproto_delta0_seed1" / "rounds.csv") == csv);
  CHECK(slurp(b.path / "fedavg_delta0_seed1" / "rounds.csv") == slurp(a.path / "fedavg_delta0_seed1" / "rounds.csv"));

  SUBCASE("cell filter") {
    TempDir c;
    m.output_dir = c.path.string();
    REQUIRE(run_experiment(m, RunOptions{"fedavg*", 2}) == 0);
    CHECK(fs::exists(c.path / "fedavg_delta0_seed1" / "rounds.csv"));
    CHECK_FALSE(fs::exists(c.path / "fedproto_delta0_seed1"));
    CHECK(run_experiment(m, RunOptions{"nothing", 1}) != 0);
  }
}

TEST_CASE("missing IDX files fail before any round is written") {
  TempDir a;
  auto m = parse_config_text(
      "dataset: {scheme: label_shard, num_clients: 4, total_samples: 40, idx_images: /nonexistent/i, idx_labels: "
      "/nonexistent/l}\nstrategy: fedavg\ntraining: {clients_per_round: 2, rounds: 1}\n");
  m.output_dir = a.path.string();
  CHECK_THROWS(run_experiment(m));
  CHECK_FALSE(fs::exists(a.path / "fedavg_delta0_seed1" / "rounds.csv"));
}

TEST_CASE("dataset cache is content addressed") {
  TempDir a;
  auto m = parse_config_text(kTiny);
  const auto first = load_or_build_dataset(m, a.path);
  std::size_t entries = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(a.path)) ++entries;
  CHECK(entries == 1);
  const auto again = load_or_build_dataset(m, a.path);
  CHECK(again.clients.size() == first.clients.size());
  CHECK(again.clients[0].train == first.clients[0].train);
  m.dataset.partition.seed = 2;
  load_or_build_dataset(m, a.path);
  entries = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(a.path)) ++entries;
  CHECK(entries == 2);
}

TEST_CASE("report") {
  CHECK(report({}).text.find("no runs") != std::string::npos);
  std::vector<RunSummary> runs;
  const double accs[] = {0.927, 0.887, 0.851};
  const double deltas[] = {0.0, 0.5, 0.8};
  for (int i = 0; i < 3; ++i) {
    RunSummary s;
    s.cell = s.strategy = "fedavg";
    s.delta = deltas[i];
    s.seed = 1;
    s.final_accuracy = accs[i];
    s.final_loss = 0.4;
    runs.push_back(s);
  }
  const auto t = report(runs);
  CHECK(t.text.find("88.8 ± 3.8") != std::string::npos);
  CHECK(t.csv.find("fedavg,fedavg,92.7,88.7,85.1,88.8") != std::string::npos);
  const auto single = report({runs[0]});
  CHECK(single.text.find("92.7 ± 0.0") != std::string::npos);
}

TEST_CASE("summaries and parameters round-trip through JSON") {
  RunSummary s{"fedproto", "fedproto", 0.5, 7, 0.1 + 0.2, 1.0 / 3.0, 2.5, 0.0123456789012345, std::nullopt, 12.5};
  CHECK(nlohmann::json::parse(nlohmann::json(s).dump()).get<RunSummary>() == s);
  s.ffd_vs_fedavg = -12.75;
  CHECK(nlohmann::json::parse(nlohmann::json(s).dump()).get<RunSummary>() == s);
  const auto p = ParamSet::glorot(ModelSpec{5, {4, 3}, 2}, 9);
  CHECK(nlohmann::json::parse(nlohmann::json(p).dump()).get<ParamSet>() == p);
}

TEST_CASE("rounds.csv formatting") {
  RoundRecord r{4, 0.123456789, 1.5, 2e-7, 3.0, std::nullopt, 0.5};
  CHECK(rounds_csv({r}) == "t,accuracy,loss,grad_dissimilarity,amm,mmd,attention_entropy\n4,0.123457,1.5,2e-07,3,,0.5\n");
}
