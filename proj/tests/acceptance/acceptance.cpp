// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits nonzero if any fails.
//
// Environment:
//   PROTOFED_ACCEPTANCE_DIR      work directory (default: ./acceptance_runs)
//   PROTOFED_ACCEPTANCE_THREADS  cells run in parallel (default: hardware threads)
//   PROTOFED_ACCEPTANCE_REUSE    1 = keep finished cells from an earlier run
//   PROTOFED_ACCEPTANCE_ROUNDS   override T for smoke runs (results not comparable)
//   PROTOFED_MNIST_DIR           directory with train-images-idx3-ubyte and
//                                train-labels-idx1-ubyte (default: data/mnist
//                                under the source tree)

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <thread>

#include "property_suites.hpp"
#include "protofed/io.hpp"

#ifndef PROTOFED_SOURCE_DIR
#define PROTOFED_SOURCE_DIR "."
#endif

using namespace protofed;
namespace fs = std::filesystem;

namespace {

std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v && *v ? std::string(v) : fallback;
}

struct Outcome {
  int failures = 0;
  void line(int id, bool pass, const std::string& what, const std::string& detail) {
    failures += pass ? 0 : 1;
    std::cout << fmt::format("{} criterion {}: {} | {}", pass ? "PASS" : "FAIL", id, what, detail) << std::endl;
  }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Column `col` of rounds.csv as numbers, skipping blanks.
std::vector<double> csv_column(const fs::path& file, std::size_t col) {
  std::ifstream in(file);
  std::string line;
  std::getline(in, line);
  std::vector<double> out;
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string cell;
    for (std::size_t i = 0; i <= col && std::getline(ss, cell, ','); ++i)
      if (i == col && !cell.empty()) out.push_back(std::stod(cell));
  }
  return out;
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

const std::vector<double> kDeltas{0.0, 0.5, 0.8};

CellSpec cell(StrategyKind kind, double delta, FedProtoVariant variant = FedProtoVariant::full,
              std::optional<bool> tolerate = std::nullopt) {
  CellSpec c;
  c.strategy = StrategyConfig::defaults_for(kind);
  c.strategy.fedproto_variant = variant;
  if (tolerate) c.strategy.tolerate_stragglers = *tolerate;
  c.delta = delta;
  return c;
}

class Runs {
 public:
  explicit Runs(fs::path root) : root_(std::move(root)) {}

  std::optional<RunSummary> get(const std::string& label, double delta) const {
    const fs::path f = dir(label, delta) / "summary.json";
    if (!fs::exists(f)) return std::nullopt;
    return nlohmann::json::parse(slurp(f)).get<RunSummary>();
  }
  fs::path dir(const std::string& label, double delta) const {
    return root_ / fmt::format("{}_delta{:g}_seed1", label, delta);
  }
  // Final accuracies in percent across kDeltas; empty if any cell is missing.
  std::vector<double> accuracies(const std::string& label) const {
    std::vector<double> out;
    for (double d : kDeltas) {
      auto s = get(label, d);
      if (!s) return {};
      out.push_back(100.0 * s->final_accuracy);
    }
    return out;
  }

 private:
  fs::path root_;
};

std::string fmt_accs(const std::vector<double>& a) {
  if (a.empty()) return "missing";
  return fmt::format("[{:.1f}, {:.1f}, {:.1f}] -> {:.2f} ± {:.2f}", a[0], a[1], a[2], mean(a), sample_std(a));
}

ExperimentManifest synthetic_manifest(const fs::path& out, std::size_t rounds) {
  ExperimentManifest m;
  m.dataset.partition = PartitionSpec{};
  m.dataset.partition.phi1 = 1.0;
  m.dataset.partition.phi2 = 1.0;
  m.hidden_dims = {128, 256};
  m.training.rounds = rounds;
  m.training.mmd_every = 10;
  m.centralized_epochs = 100;
  for (double d : kDeltas) {
    for (auto k : {StrategyKind::fedavg, StrategyKind::fedprox, StrategyKind::fairness, StrategyKind::fedproto})
      m.cells.push_back(cell(k, d));
    for (auto v : {FedProtoVariant::lpm_only, FedProtoVariant::apm_only, FedProtoVariant::dplus_only})
      m.cells.push_back(cell(StrategyKind::fedproto, d, v));
    // Without stragglers toleration changes nothing, so delta 0 reuses full FedProto.
    if (d > 0.0) m.cells.push_back(cell(StrategyKind::fedproto, d, FedProtoVariant::full, false));
  }
  m.output_dir = out.string();
  return m;
}

ExperimentManifest mnist_manifest(const fs::path& out, const fs::path& mnist, std::size_t rounds) {
  ExperimentManifest m;
  auto& p = m.dataset.partition;
  p.scheme = PartitionScheme::label_shard;
  p.num_clients = 1000;
  p.total_samples = 8000;
  p.power_law_gamma = 0.85;
  p.shards_per_client = 2;
  m.dataset.idx_images = (mnist / "train-images-idx3-ubyte").string();
  m.dataset.idx_labels = (mnist / "train-labels-idx1-ubyte").string();
  m.hidden_dims = {200, 200};
  m.training.rounds = rounds;
  m.training.mmd_every = 0;
  m.centralized_epochs = 0;
  m.cells = {cell(StrategyKind::fedproto, 0.5), cell(StrategyKind::fedavg, 0.5),
             cell(StrategyKind::fedavg, 0.5, FedProtoVariant::full, true)};
  m.output_dir = out.string();
  return m;
}

// Runs the cells of `m` that have no summary yet.
bool run_missing(ExperimentManifest m, std::size_t threads) {
  std::vector<CellSpec> todo;
  for (const auto& c : m.cells)
    if (!fs::exists(fs::path(m.output_dir) / fmt::format("{}_delta{:g}_seed1", c.label(), c.delta) / "summary.json"))
      todo.push_back(c);
  if (todo.empty()) return true;
  m.cells = todo;
  return run_experiment(m, RunOptions{"", threads}) == 0;
}

}  // namespace

int main() {
  const fs::path work = env_or("PROTOFED_ACCEPTANCE_DIR", "acceptance_runs");
  const fs::path mnist = env_or("PROTOFED_MNIST_DIR", std::string(PROTOFED_SOURCE_DIR) + "/data/mnist");
  const auto threads = static_cast<std::size_t>(
      std::stoul(env_or("PROTOFED_ACCEPTANCE_THREADS", std::to_string(std::max(1u, std::thread::hardware_concurrency())))));
  const std::size_t rounds = std::stoul(env_or("PROTOFED_ACCEPTANCE_ROUNDS", "200"));
  if (env_or("PROTOFED_ACCEPTANCE_REUSE", "0") != "1") fs::remove_all(work);
  if (rounds != 200) std::cout << "note: T overridden to " << rounds << "; results are not comparable\n";
  Outcome out;

  {
    std::ostringstream log;
    const auto start = std::chrono::steady_clock::now();
    const bool ok = run_property_suites(log);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::cout << log.str();
    out.line(7, ok && secs < 60.0, "property suites (a)-(j) pass in under 60 s", fmt::format("{:.1f} s", secs));
  }

  const fs::path syn_dir = work / "synthetic";
  const auto syn = synthetic_manifest(syn_dir, rounds);
  const auto syn_start = std::chrono::steady_clock::now();
  const bool syn_ok = run_missing(syn, threads);
  std::cout << fmt::format("synthetic grid: {:.0f} s{}\n",
                           std::chrono::duration<double>(std::chrono::steady_clock::now() - syn_start).count(),
                           syn_ok ? "" : " (some cells failed)");
  const Runs runs(syn_dir);
  std::cout << report(collect_summaries(syn_dir)).text;

  const auto fedavg = runs.accuracies("fedavg");
  const auto fedproto = runs.accuracies("fedproto");
  {
    const bool have = !fedavg.empty() && !fedproto.empty();
    const bool a = have && mean(fedproto) >= mean(fedavg) + 2.0;
    const bool b = have && sample_std(fedproto) < sample_std(fedavg);
    const bool c = have && mean(fedproto) >= 74.0 && mean(fedproto) <= 83.0;
    out.line(1, a && b && c,
             "(a) FedProto mean >= FedAvg mean + 2; (b) FedProto std < FedAvg std; (c) FedProto mean in [74, 83]",
             fmt::format("fedproto {}, fedavg {}, fedprox {}, fairness {}; a={} b={} c={}", fmt_accs(fedproto),
                         fmt_accs(fedavg), fmt_accs(runs.accuracies("fedprox")), fmt_accs(runs.accuracies("fairness")),
                         a, b, c));
  }
  {
    std::vector<double> notol;
    if (auto s0 = runs.get("fedproto", 0.0)) notol.push_back(100.0 * s0->final_accuracy);
    for (double d : {0.5, 0.8})
      if (auto s = runs.get("fedproto-notol", d)) notol.push_back(100.0 * s->final_accuracy);
    if (notol.size() != 3) notol.clear();
    bool ok = !fedproto.empty() && !fedavg.empty() && sample_std(fedproto) <= sample_std(fedavg);
    std::string detail = fmt::format("fedproto {:.2f}", mean(fedproto));
    const std::map<std::string, std::vector<double>> variants{{"lpm_only", runs.accuracies("fedproto-lpm_only")},
                                                              {"apm_only", runs.accuracies("fedproto-apm_only")},
                                                              {"dplus_only", runs.accuracies("fedproto-dplus_only")},
                                                              {"no_toleration", notol}};
    for (const auto& [name, accs] : variants) {
      ok = ok && !accs.empty() && mean(fedproto) >= mean(accs) - 0.5;
      detail += fmt::format(", {} {}", name, fmt_accs(accs));
    }
    detail += fmt::format("; std fedproto {:.2f} vs fedavg {:.2f}", sample_std(fedproto), sample_std(fedavg));
    out.line(2, ok, "full FedProto >= each ablation - 0.5 and std <= FedAvg std", detail);
  }
  {
    const auto p = runs.get("fedproto", 0.0), a = runs.get("fedavg", 0.0);
    const bool ok = p && a && p->final_amm > a->final_amm;
    out.line(3, ok, "final AMM FedProto > FedAvg at delta 0",
             p && a ? fmt::format("{:.4f} vs {:.4f}", p->final_amm, a->final_amm) : "missing");
  }
  {
    const auto p = runs.get("fedproto", 0.0);
    double central = -1.0;
    if (fs::exists(syn_dir / "centralized.json"))
      central = 100.0 * nlohmann::json::parse(slurp(syn_dir / "centralized.json"))["1"]["accuracy"].get<double>();
    const bool have = p && p->ffd_vs_fedavg;
    const bool ok = have && *p->ffd_vs_fedavg > 0.0 && central >= 76.0;
    out.line(4, ok, "FFD(FedProto, FedAvg) > 0 at delta 0 and centralized accuracy >= 76%",
             have ? fmt::format("FFD {:.2f}%, centralized {:.2f}%", *p->ffd_vs_fedavg, central)
                  : fmt::format("FFD missing, centralized {:.2f}%", central));
  }
  {
    auto tail = [&](const std::string& label) {
      const auto gd = csv_column(runs.dir(label, 0.5) / "rounds.csv", 3);
      const std::size_t n = std::max<std::size_t>(1, (gd.size() + 9) / 10);
      return gd.size() < n ? std::vector<double>{} : std::vector<double>(gd.end() - static_cast<std::ptrdiff_t>(n), gd.end());
    };
    const auto p = tail("fedproto"), a = tail("fedavg");
    const bool ok = !p.empty() && !a.empty() && mean(p) <= mean(a);
    out.line(5, ok, "mean grad dissimilarity over last 10% rounds FedProto <= FedAvg at delta 0.5",
             fmt::format("{:.3f} vs {:.3f}", mean(p), mean(a)));
  }
  {
    const fs::path mn_dir = work / "mnist";
    std::string detail;
    bool ok = false;
    if (!fs::exists(mnist / "train-images-idx3-ubyte") || !fs::exists(mnist / "train-labels-idx1-ubyte")) {
      detail = fmt::format("IDX files not found in {} (run tools/fetch_mnist.py or set PROTOFED_MNIST_DIR)",
                           mnist.string());
    } else {
      const auto start = std::chrono::steady_clock::now();
      try {
        run_missing(mnist_manifest(mn_dir, mnist, rounds), threads);
      } catch (const std::exception& e) {
        detail = e.what();
      }
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      const Runs mn(mn_dir);
      const auto p = mn.get("fedproto", 0.5), a = mn.get("fedavg", 0.5), at = mn.get("fedavg-tol", 0.5);
      if (p && a && at) {
        ok = p->final_accuracy > a->final_accuracy && at->final_accuracy > a->final_accuracy;
        detail = fmt::format("fedproto {:.2f}%, fedavg {:.2f}%, fedavg+toleration {:.2f}% ({:.0f} s)",
                             100.0 * p->final_accuracy, 100.0 * a->final_accuracy, 100.0 * at->final_accuracy, secs);
      } else if (detail.empty()) {
        detail = "runs missing";
      }
    }
    out.line(6, ok, "MNIST delta 0.5: FedProto > FedAvg and FedAvg+toleration > FedAvg", detail);
  }

  std::cout << fmt::format("{} of 7 criteria passed\n", 7 - out.failures);
  return out.failures == 0 ? 0 : 1;
}
