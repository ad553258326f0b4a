#include <fmt/format.h>
#include <fmt/ranges.h>
#include <fnmatch.h>
#include <spdlog/spdlog.h>

#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "protofed/errors.hpp"
#include "protofed/io.hpp"

namespace protofed {

namespace fs = std::filesystem;

namespace {

void write_file(const fs::path& path, const std::string& content) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << content;
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string g6(double v) { return fmt::format("{:.6g}", v); }

bool matches_filter(const std::string& label, const std::string& filter) {
  if (filter.empty()) return true;
  std::stringstream ss(filter);
  std::string pattern;
  while (std::getline(ss, pattern, ','))
    if (!pattern.empty() && fnmatch(pattern.c_str(), label.c_str(), 0) == 0) return true;
  return false;
}

fs::path cell_dir(const fs::path& root, const CellSpec& c, std::uint64_t seed) {
  return root / fmt::format("{}_delta{:g}_seed{}", c.label(), c.delta, seed);
}

std::string series_csv(const std::vector<std::size_t>& rounds, const std::vector<double>& values) {
  std::string out = "round,value\n";
  for (std::size_t i = 0; i < rounds.size(); ++i) out += fmt::format("{},{}\n", rounds[i], g6(values[i]));
  return out;
}

void write_plotdata(const fs::path& dir, const std::vector<RoundRecord>& records, double window_frac) {
  fs::create_directories(dir);
  auto emit = [&](const std::string& name, auto&& get) {
    std::vector<std::size_t> rounds;
    std::vector<double> values;
    for (const auto& r : records) {
      const std::optional<double> v = get(r);
      if (!v) continue;
      rounds.push_back(r.t);
      values.push_back(*v);
    }
    write_file(dir / (name + ".csv"), series_csv(rounds, moving_average(values, window_frac)));
  };
  emit("accuracy", [](const RoundRecord& r) { return std::optional<double>(r.accuracy); });
  emit("loss", [](const RoundRecord& r) { return std::optional<double>(r.loss); });
  emit("grad_dissimilarity", [](const RoundRecord& r) { return std::optional<double>(r.grad_dissimilarity); });
  emit("amm", [](const RoundRecord& r) { return std::optional<double>(r.amm); });
  emit("mmd", [](const RoundRecord& r) { return r.mmd; });
  emit("attention_entropy", [](const RoundRecord& r) { return std::optional<double>(r.attention_entropy); });
}

std::string hex(std::uint64_t h) { return fmt::format("{:016x}", h); }

std::uint64_t dataset_key(const DatasetConfig& d) {
  std::uint64_t h = d.partition.content_hash();
  // Fold in the IDX sources so a different file never hits the same entry.
  for (const auto& s : {d.idx_images.value_or(""), d.idx_labels.value_or("")})
    for (unsigned char ch : s) h = (h ^ ch) * 0x100000001b3ULL;
  return h;
}

struct Centralized {
  ParamSet params;
  double accuracy = 0.0;
};

Centralized load_or_train_centralized(const ExperimentManifest& m, const FederatedDataset& data,
                                      const ModelSpec& spec, const fs::path& cache, std::uint64_t seed) {
  const auto& t = m.training;
  const fs::path file = cache / fmt::format("centralized_e{}_lr{:g}_b{}_h{}_s{}.json", m.centralized_epochs, t.lr,
                                            t.batch_size, fmt::join(m.hidden_dims, "x"), seed);
  Centralized c;
  if (fs::exists(file)) {
    c.params = nlohmann::json::parse(read_file(file)).get<ParamSet>();
  } else {
    spdlog::info("training centralized reference model ({} epochs, seed {})", m.centralized_epochs, seed);
    c.params = train_centralized(data.pooled_train(), spec, m.centralized_epochs, t.lr, t.batch_size, seed);
    write_file(file, nlohmann::json(c.params).dump());
  }
  c.accuracy = accuracy(c.params, spec, data);
  return c;
}

struct Job {
  const CellSpec* cell;
  std::uint64_t seed;
};

RunSummary run_cell(const ExperimentManifest& m, const Job& job, const FederatedDataset& data, const ModelSpec& spec,
                    const ParamSet* centralized, const fs::path& root) {
  SimConfig cfg = m.training;
  cfg.strategy = job.cell->strategy;
  cfg.delta = job.cell->delta;
  cfg.seed = job.seed;
  if (job.cell->sampling) cfg.sampling = *job.cell->sampling;
  cfg.threads = 1;

  const fs::path dir = cell_dir(root, *job.cell, job.seed);
  fs::create_directories(dir);
  const std::string tag = dir.filename().string();
  const auto start = std::chrono::steady_clock::now();
  const std::size_t total = cfg.rounds_executed();
  const std::size_t step = std::max<std::size_t>(1, total / 10);
  const auto log = run_simulation(cfg, spec, data, centralized, [&](const RoundRecord& r) {
    if ((r.t + 1) % step == 0) spdlog::info("[{}] round {}/{} accuracy {:.4f}", tag, r.t + 1, total, r.accuracy);
  });
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  write_file(dir / "rounds.csv", rounds_csv(log.records));
  write_plotdata(dir / "plotdata", log.records, cfg.moving_avg_window_frac);
  const auto& last = log.records.back();
  RunSummary s;
  s.cell = job.cell->label();
  s.strategy = to_string(cfg.strategy.kind);
  s.delta = cfg.delta;
  s.seed = cfg.seed;
  s.final_accuracy = last.accuracy;
  s.final_loss = last.loss;
  s.final_amm = last.amm;
  s.final_mmd = last.mmd;
  s.wall_time_s = wall;
  write_file(dir / "summary.json", nlohmann::json(s).dump(2) + "\n");
  spdlog::info("[{}] done: accuracy {:.4f}, loss {:.4f} ({:.0f} s)", tag, s.final_accuracy, s.final_loss, wall);
  return s;
}

// Fills in FFD against the plain FedAvg cell with the same delta and seed.
void attach_ffd(std::vector<std::pair<fs::path, RunSummary>>& done) {
  for (auto& [dir, s] : done) {
    if (!s.final_mmd) continue;
    for (const auto& [bdir, b] : done) {
      if (b.cell != "fedavg" || b.delta != s.delta || b.seed != s.seed || !b.final_mmd || !(*b.final_mmd > 0.0))
        continue;
      s.ffd_vs_fedavg = ffd(*s.final_mmd, *b.final_mmd);
      write_file(dir / "summary.json", nlohmann::json(s).dump(2) + "\n");
      break;
    }
  }
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double mu = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - mu) * (x - mu);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace

std::string rounds_csv(const std::vector<RoundRecord>& records) {
  std::string out = "t,accuracy,loss,grad_dissimilarity,amm,mmd,attention_entropy\n";
  for (const auto& r : records)
    out += fmt::format("{},{},{},{},{},{},{}\n", r.t, g6(r.accuracy), g6(r.loss), g6(r.grad_dissimilarity), g6(r.amm),
                       r.mmd ? g6(*r.mmd) : std::string(), g6(r.attention_entropy));
  return out;
}

void to_json(nlohmann::json& j, const RunSummary& s) {
  j = {{"cell", s.cell},
       {"strategy", s.strategy},
       {"delta", s.delta},
       {"seed", s.seed},
       {"final_accuracy", s.final_accuracy},
       {"final_loss", s.final_loss},
       {"final_amm", s.final_amm},
       {"final_mmd", s.final_mmd ? nlohmann::json(*s.final_mmd) : nlohmann::json()},
       {"wall_time_s", s.wall_time_s}};
  if (s.ffd_vs_fedavg) j["ffd_vs_fedavg"] = *s.ffd_vs_fedavg;
}

void from_json(const nlohmann::json& j, RunSummary& s) {
  s.cell = j.value("cell", j.at("strategy").get<std::string>());
  j.at("strategy").get_to(s.strategy);
  j.at("delta").get_to(s.delta);
  j.at("seed").get_to(s.seed);
  j.at("final_accuracy").get_to(s.final_accuracy);
  j.at("final_loss").get_to(s.final_loss);
  j.at("final_amm").get_to(s.final_amm);
  s.final_mmd.reset();
  if (j.contains("final_mmd") && !j["final_mmd"].is_null()) s.final_mmd = j["final_mmd"].get<double>();
  s.ffd_vs_fedavg.reset();
  if (j.contains("ffd_vs_fedavg")) s.ffd_vs_fedavg = j["ffd_vs_fedavg"].get<double>();
  j.at("wall_time_s").get_to(s.wall_time_s);
}

void to_json(nlohmann::json& j, const ParamSet& p) {
  j = nlohmann::json::object();
  auto layers = nlohmann::json::array();
  for (std::size_t i = 0; i < p.num_layers(); ++i) layers.push_back({p.layer_in(i), p.layer_out(i)});
  j["layers"] = layers;
  j["values"] = std::vector<double>(p.values().begin(), p.values().end());
}

void from_json(const nlohmann::json& j, ParamSet& p) {
  const auto layers = j.at("layers");
  if (layers.empty()) throw FormatError("parameter file lists no layers", 0);
  ModelSpec spec;
  spec.input_dim = layers.front().at(0).get<std::size_t>();
  for (std::size_t i = 0; i + 1 < layers.size(); ++i) spec.hidden_dims.push_back(layers[i].at(1).get<std::size_t>());
  spec.num_classes = layers.back().at(1).get<std::size_t>();
  p = ParamSet(spec);
  const auto values = j.at("values").get<std::vector<double>>();
  if (values.size() != p.total_dim()) throw FormatError("parameter count does not match layer shapes", 0);
  std::copy(values.begin(), values.end(), p.values().begin());
}

ModelSpec model_spec(const ExperimentManifest& m, const FederatedDataset& d) {
  return ModelSpec{d.input_dim, m.hidden_dims, d.num_classes};
}

FederatedDataset load_or_build_dataset(const ExperimentManifest& m, const fs::path& cache_root) {
  const fs::path dir = cache_root / hex(dataset_key(m.dataset));
  if (fs::exists(dir / "meta.json")) return load_dataset(dir);
  std::optional<LabeledPool> pool;
  if (m.dataset.partition.scheme != PartitionScheme::synthetic)
    pool = load_idx(*m.dataset.idx_images, *m.dataset.idx_labels);
  auto data = build_dataset(m.dataset.partition, pool ? &*pool : nullptr);
  const fs::path tmp = dir.string() + ".tmp";
  fs::remove_all(tmp);
  save_dataset(data, tmp);
  fs::create_directories(cache_root);
  fs::rename(tmp, dir);
  return data;
}

int run_experiment(const ExperimentManifest& m, const RunOptions& opts) {
  m.validate();
  const fs::path root = m.output_dir;
  fs::create_directories(root);
  write_file(root / "manifest.yaml", emit_config(m));
  const fs::path cache = root / "cache";

  const FederatedDataset data = load_or_build_dataset(m, cache);
  const ModelSpec spec = model_spec(m, data);
  const fs::path data_cache = cache / hex(dataset_key(m.dataset));

  std::vector<Job> jobs;
  for (std::uint64_t seed : m.seeds)
    for (const auto& c : m.cells)
      if (matches_filter(c.label(), opts.cell_filter)) jobs.push_back({&c, seed});
  if (jobs.empty()) {
    spdlog::error("no cells match '{}'", opts.cell_filter);
    return 1;
  }

  std::map<std::uint64_t, Centralized> central;
  if (m.centralized_epochs > 0) {
    nlohmann::json info = nlohmann::json::object();
    for (std::uint64_t seed : m.seeds) {
      central[seed] = load_or_train_centralized(m, data, spec, data_cache, seed);
      info[std::to_string(seed)] = {{"accuracy", central[seed].accuracy}, {"epochs", m.centralized_epochs}};
      spdlog::info("centralized reference accuracy (seed {}): {:.4f}", seed, central[seed].accuracy);
    }
    write_file(root / "centralized.json", info.dump(2) + "\n");
  }

  std::vector<std::optional<RunSummary>> results(jobs.size());
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      const auto it = central.find(jobs[i].seed);
      try {
        results[i] = run_cell(m, jobs[i], data, spec, it == central.end() ? nullptr : &it->second.params, root);
      } catch (const std::exception& e) {
        spdlog::error("cell {} (seed {}) failed: {}", jobs[i].cell->label(), jobs[i].seed, e.what());
        failed = true;
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < std::min(std::max<std::size_t>(opts.threads, 1), jobs.size()); ++w)
      pool.emplace_back(worker);
  }

  std::vector<std::pair<fs::path, RunSummary>> done;
  for (std::size_t i = 0; i < jobs.size(); ++i)
    if (results[i]) done.emplace_back(cell_dir(root, *jobs[i].cell, jobs[i].seed), *results[i]);
  attach_ffd(done);
  return failed ? 1 : 0;
}

std::vector<RunSummary> collect_summaries(const fs::path& output_dir) {
  std::vector<RunSummary> out;
  if (!fs::is_directory(output_dir)) return out;
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(output_dir))
    if (e.is_directory() && fs::exists(e.path() / "summary.json")) files.push_back(e.path() / "summary.json");
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    try {
      out.push_back(nlohmann::json::parse(read_file(f)).get<RunSummary>());
    } catch (const std::exception& e) {
      spdlog::warn("skipping {}: {}", f.string(), e.what());
    }
  }
  return out;
}

ReportTables report(const std::vector<RunSummary>& runs) {
  if (runs.empty()) return {"no runs found\n", "cell,strategy\n"};
  std::vector<double> deltas;
  std::vector<std::string> cells;
  for (const auto& r : runs) {
    if (std::find(deltas.begin(), deltas.end(), r.delta) == deltas.end()) deltas.push_back(r.delta);
    if (std::find(cells.begin(), cells.end(), r.cell) == cells.end()) cells.push_back(r.cell);
  }
  std::sort(deltas.begin(), deltas.end());

  struct Row {
    std::string cell, strategy;
    std::vector<std::optional<double>> acc_by_delta;
    double acc_mean, acc_std, loss_mean, loss_std, amm_mean;
    std::optional<double> ffd_mean;
  };
  std::vector<Row> rows;
  for (const auto& cell : cells) {
    Row row{cell, "", {}, 0, 0, 0, 0, 0, std::nullopt};
    std::vector<double> accs, losses, amms, ffds;
    for (double d : deltas) {
      std::vector<double> a, l;
      for (const auto& r : runs) {
        if (r.cell != cell || r.delta != d) continue;
        row.strategy = r.strategy;
        a.push_back(100.0 * r.final_accuracy);
        l.push_back(r.final_loss);
        amms.push_back(r.final_amm);
        if (r.ffd_vs_fedavg) ffds.push_back(*r.ffd_vs_fedavg);
      }
      if (a.empty()) {
        row.acc_by_delta.push_back(std::nullopt);
        continue;
      }
      row.acc_by_delta.push_back(mean(a));
      accs.push_back(mean(a));
      losses.push_back(mean(l));
    }
    row.acc_mean = mean(accs);
    row.acc_std = sample_std(accs);
    row.loss_mean = mean(losses);
    row.loss_std = sample_std(losses);
    row.amm_mean = mean(amms);
    if (!ffds.empty()) row.ffd_mean = mean(ffds);
    rows.push_back(row);
  }

  std::string text = fmt::format("{:<24}", "cell");
  std::string csv = "cell,strategy";
  for (double d : deltas) {
    text += fmt::format("{:>10}", fmt::format("d={:g}%", 100.0 * d));
    csv += fmt::format(",acc_delta_{:g}", d);
  }
  text += fmt::format("{:>16}{:>16}{:>9}{:>9}\n", "acc avg±std", "loss avg±std", "amm", "ffd%");
  csv += ",acc_mean,acc_std,loss_mean,loss_std,amm_mean,ffd_mean\n";
  for (const auto& r : rows) {
    text += fmt::format("{:<24}", r.cell);
    csv += r.cell + "," + r.strategy;
    for (const auto& a : r.acc_by_delta) {
      text += fmt::format("{:>10}", a ? fmt::format("{:.1f}", *a) : "-");
      csv += "," + (a ? g6(*a) : std::string());
    }
    text += fmt::format("{:>16}{:>16}{:>9.2f}{:>9}\n", fmt::format("{:.1f} ± {:.1f}", r.acc_mean, r.acc_std),
                        fmt::format("{:.2f} ± {:.2f}", r.loss_mean, r.loss_std), r.amm_mean,
                        r.ffd_mean ? fmt::format("{:.1f}", *r.ffd_mean) : "-");
    csv += fmt::format(",{},{},{},{},{},{}\n", g6(r.acc_mean), g6(r.acc_std), g6(r.loss_mean), g6(r.loss_std),
                       g6(r.amm_mean), r.ffd_mean ? g6(*r.ffd_mean) : "");
  }
  return {text, csv};
}

}  // namespace protofed
