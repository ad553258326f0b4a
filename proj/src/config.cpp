#include <fmt/format.h>
#include <yaml-cpp/yaml.h>

#include <fstream>
#include <set>
#include <sstream>

#include "protofed/errors.hpp"
#include "protofed/io.hpp"

namespace protofed {

namespace {

class Reader {
 public:
  explicit Reader(std::string origin) : origin_(std::move(origin)) {}

  [[noreturn]] void fail(const YAML::Node& at, const std::string& path, const std::string& what) const {
    const auto mark = at.Mark();
    if (mark.is_null()) throw ConfigError(fmt::format("{}: '{}': {}", origin_, path, what));
    throw ConfigError(fmt::format("{}:{}: '{}': {}", origin_, mark.line + 1, path, what));
  }

  void expect_map(const YAML::Node& n, const std::string& path) const {
    if (!n.IsMap()) fail(n, path, "expected a mapping");
  }

  void check_keys(const YAML::Node& n, const std::string& path, const std::set<std::string>& allowed) const {
    for (const auto& kv : n) {
      const auto key = kv.first.as<std::string>();
      if (!allowed.contains(key)) fail(kv.first, join(path, key), "unknown key");
    }
  }

  template <class T>
  T scalar(const YAML::Node& n, const std::string& path, const char* type_name) const {
    if (!n.IsScalar()) fail(n, path, fmt::format("expected {}", type_name));
    try {
      return n.as<T>();
    } catch (const YAML::Exception&) {
      fail(n, path, fmt::format("expected {}, got '{}'", type_name, n.Scalar()));
    }
  }

  std::size_t count(const YAML::Node& n, const std::string& path) const {
    const auto v = scalar<long long>(n, path, "a nonnegative integer");
    if (v < 0) fail(n, path, "expected a nonnegative integer");
    return static_cast<std::size_t>(v);
  }
  std::uint64_t u64(const YAML::Node& n, const std::string& path) const {
    if (!n.IsScalar() || n.Scalar().starts_with('-')) fail(n, path, "expected a nonnegative integer");
    return scalar<std::uint64_t>(n, path, "a nonnegative integer");
  }
  double real(const YAML::Node& n, const std::string& path) const { return scalar<double>(n, path, "a number"); }
  bool flag(const YAML::Node& n, const std::string& path) const { return scalar<bool>(n, path, "true or false"); }
  std::string text(const YAML::Node& n, const std::string& path) const {
    return scalar<std::string>(n, path, "a string");
  }

  // Runs `parse` and re-raises its errors with the node's location.
  template <class F>
  auto named(const YAML::Node& n, const std::string& path, F&& parse) const {
    try {
      return parse(text(n, path));
    } catch (const std::exception& e) {
      fail(n, path, e.what());
    }
  }

  // A scalar or a list of scalars.
  template <class F>
  auto list(const YAML::Node& n, const std::string& path, F&& item) const {
    std::vector<decltype(item(n, path))> out;
    if (n.IsSequence()) {
      for (std::size_t i = 0; i < n.size(); ++i) out.push_back(item(n[i], fmt::format("{}[{}]", path, i)));
    } else {
      out.push_back(item(n, path));
    }
    return out;
  }

  static std::string join(const std::string& path, const std::string& key) {
    return path.empty() ? key : path + "." + key;
  }

 private:
  std::string origin_;
};

void apply_scheme_defaults(PartitionSpec& p) {
  switch (p.scheme) {
    case PartitionScheme::synthetic:
      if (!p.phi1) p.phi1 = 1.0;
      if (!p.phi2) p.phi2 = 1.0;
      break;
    case PartitionScheme::label_shard:
      if (!p.shards_per_client) p.shards_per_client = 2;
      break;
    case PartitionScheme::dirichlet:
      if (!p.alpha) p.alpha = 0.5;
      break;
  }
}

DatasetConfig parse_dataset(const Reader& r, const YAML::Node& n) {
  DatasetConfig d;
  auto& p = d.partition;
  if (n.IsScalar()) {
    p.scheme = r.named(n, "dataset", [](const std::string& s) { return parse_partition_scheme(s); });
    apply_scheme_defaults(p);
    return d;
  }
  r.expect_map(n, "dataset");
  r.check_keys(n, "dataset",
               {"scheme", "num_clients", "total_samples", "power_law_gamma", "min_per_client", "seed", "phi1", "phi2",
                "shards_per_client", "alpha", "idx_images", "idx_labels"});
  if (n["scheme"])
    p.scheme = r.named(n["scheme"], "dataset.scheme", [](const std::string& s) { return parse_partition_scheme(s); });
  if (n["num_clients"]) p.num_clients = r.count(n["num_clients"], "dataset.num_clients");
  if (n["total_samples"]) p.total_samples = r.count(n["total_samples"], "dataset.total_samples");
  if (n["power_law_gamma"]) p.power_law_gamma = r.real(n["power_law_gamma"], "dataset.power_law_gamma");
  if (n["min_per_client"]) p.min_per_client = r.count(n["min_per_client"], "dataset.min_per_client");
  if (n["seed"]) p.seed = r.u64(n["seed"], "dataset.seed");
  if (n["phi1"]) p.phi1 = r.real(n["phi1"], "dataset.phi1");
  if (n["phi2"]) p.phi2 = r.real(n["phi2"], "dataset.phi2");
  if (n["shards_per_client"]) p.shards_per_client = r.count(n["shards_per_client"], "dataset.shards_per_client");
  if (n["alpha"]) p.alpha = r.real(n["alpha"], "dataset.alpha");
  if (n["idx_images"]) d.idx_images = r.text(n["idx_images"], "dataset.idx_images");
  if (n["idx_labels"]) d.idx_labels = r.text(n["idx_labels"], "dataset.idx_labels");
  apply_scheme_defaults(p);
  try {
    p.validate();
  } catch (const std::exception& e) {
    r.fail(n, "dataset", e.what());
  }
  return d;
}

void parse_training(const Reader& r, const YAML::Node& n, ExperimentManifest& m) {
  r.expect_map(n, "training");
  r.check_keys(n, "training",
               {"rounds", "local_epochs", "clients_per_round", "lr", "lr_schedule", "batch_size", "eval_every",
                "mmd_every", "moving_avg_window_frac", "sampling", "centralized_epochs"});
  auto& t = m.training;
  if (n["rounds"]) t.rounds = r.count(n["rounds"], "training.rounds");
  if (n["local_epochs"]) t.local_epochs = r.count(n["local_epochs"], "training.local_epochs");
  if (n["clients_per_round"]) t.clients_per_round = r.count(n["clients_per_round"], "training.clients_per_round");
  if (n["lr"]) t.lr = r.real(n["lr"], "training.lr");
  if (n["lr_schedule"] && r.text(n["lr_schedule"], "training.lr_schedule") != "constant")
    r.fail(n["lr_schedule"], "training.lr_schedule", "only 'constant' is supported");
  if (n["batch_size"]) t.batch_size = r.count(n["batch_size"], "training.batch_size");
  if (n["eval_every"]) t.eval_every = r.count(n["eval_every"], "training.eval_every");
  if (n["mmd_every"]) t.mmd_every = r.count(n["mmd_every"], "training.mmd_every");
  if (n["moving_avg_window_frac"])
    t.moving_avg_window_frac = r.real(n["moving_avg_window_frac"], "training.moving_avg_window_frac");
  if (n["sampling"])
    t.sampling = r.named(n["sampling"], "training.sampling", [](const std::string& s) { return parse_client_sampling(s); });
  if (n["centralized_epochs"]) m.centralized_epochs = r.count(n["centralized_epochs"], "training.centralized_epochs");
}

CellSpec parse_cell(const Reader& r, const YAML::Node& n, const std::string& path) {
  CellSpec c;
  if (n.IsScalar()) {
    c.strategy = StrategyConfig::defaults_for(
        r.named(n, path, [](const std::string& s) { return parse_strategy_kind(s); }));
    return c;
  }
  r.expect_map(n, path);
  r.check_keys(n, path, {"strategy", "delta", "variant", "tolerate_stragglers", "prox_mu", "sampling", "name"});
  if (!n["strategy"]) r.fail(n, path, "missing 'strategy'");
  c.strategy = StrategyConfig::defaults_for(r.named(n["strategy"], path + ".strategy", [](const std::string& s) {
    return parse_strategy_kind(s);
  }));
  if (n["delta"]) c.delta = r.real(n["delta"], path + ".delta");
  if (n["variant"]) {
    if (c.strategy.kind != StrategyKind::fedproto) r.fail(n["variant"], path + ".variant", "only valid for fedproto");
    c.strategy.fedproto_variant = r.named(n["variant"], path + ".variant",
                                          [](const std::string& s) { return parse_fedproto_variant(s); });
  }
  if (n["tolerate_stragglers"])
    c.strategy.tolerate_stragglers = r.flag(n["tolerate_stragglers"], path + ".tolerate_stragglers");
  if (n["prox_mu"]) {
    if (c.strategy.kind != StrategyKind::fedprox) r.fail(n["prox_mu"], path + ".prox_mu", "only valid for fedprox");
    c.strategy.prox_mu = r.real(n["prox_mu"], path + ".prox_mu");
  }
  if (n["sampling"])
    c.sampling = r.named(n["sampling"], path + ".sampling", [](const std::string& s) { return parse_client_sampling(s); });
  if (n["name"]) c.name = r.text(n["name"], path + ".name");
  return c;
}

}  // namespace

std::string CellSpec::label() const {
  if (name) return *name;
  std::string s = to_string(strategy.kind);
  if (strategy.kind == StrategyKind::fedproto && strategy.fedproto_variant != FedProtoVariant::full)
    s += "-" + to_string(strategy.fedproto_variant);
  if (strategy.tolerate_stragglers != StrategyConfig::default_toleration(strategy.kind))
    s += strategy.tolerate_stragglers ? "-tol" : "-notol";
  if (strategy.kind == StrategyKind::fedprox && strategy.prox_mu != 0.1) s += fmt::format("-mu{:g}", strategy.prox_mu);
  if (sampling) s += "-" + to_string(*sampling);
  return s;
}

void ExperimentManifest::validate() const {
  if (cells.empty()) throw ConfigError("no cells to run");
  if (seeds.empty()) throw ConfigError("no seeds");
  if (hidden_dims.empty()) throw ConfigError("model.hidden must list at least one layer");
  for (auto h : hidden_dims)
    if (h == 0) throw ConfigError("model.hidden sizes must be positive");
  try {
    dataset.partition.validate();
    SimConfig probe = training;
    probe.validate(dataset.partition.num_clients);
    for (const auto& c : cells) {
      probe.delta = c.delta;
      probe.strategy = c.strategy;
      probe.validate(dataset.partition.num_clients);
    }
  } catch (const UsageError& e) {
    throw ConfigError(e.what());
  }
  if (dataset.partition.scheme != PartitionScheme::synthetic && (!dataset.idx_images || !dataset.idx_labels))
    throw ConfigError("dataset.idx_images and dataset.idx_labels are required for " +
                      to_string(dataset.partition.scheme));
  std::set<std::string> labels;
  for (const auto& c : cells)
    if (!labels.insert(fmt::format("{}@{}", c.label(), c.delta)).second)
      throw ConfigError(fmt::format("duplicate cell '{}' at delta {}", c.label(), c.delta));
}

ExperimentManifest parse_config_text(const std::string& text, const std::string& origin) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError(fmt::format("{}:{}: {}", origin, e.mark.line + 1, e.msg));
  }
  const Reader r(origin);
  if (!root.IsMap()) r.fail(root, "", "expected a mapping at the top level");
  r.check_keys(root, "",
               {"dataset", "model", "training", "cells", "strategy", "deltas", "seeds", "output_dir"});
  ExperimentManifest m;
  if (!root["dataset"]) r.fail(root, "dataset", "missing");
  m.dataset = parse_dataset(r, root["dataset"]);
  if (const auto model = root["model"]) {
    r.expect_map(model, "model");
    r.check_keys(model, "model", {"hidden"});
    if (model["hidden"])
      m.hidden_dims = r.list(model["hidden"], "model.hidden",
                             [&](const YAML::Node& n, const std::string& p) { return r.count(n, p); });
  }
  if (root["training"]) parse_training(r, root["training"], m);

  if (root["cells"]) {
    if (root["strategy"] || root["deltas"]) r.fail(root["cells"], "cells", "cannot be combined with strategy/deltas");
    const auto cells = root["cells"];
    if (!cells.IsSequence()) r.fail(cells, "cells", "expected a list");
    for (std::size_t i = 0; i < cells.size(); ++i) m.cells.push_back(parse_cell(r, cells[i], fmt::format("cells[{}]", i)));
  } else {
    if (!root["strategy"]) r.fail(root, "strategy", "missing (give 'strategy' or 'cells')");
    auto strategies = r.list(root["strategy"], "strategy",
                             [&](const YAML::Node& n, const std::string& p) { return parse_cell(r, n, p); });
    std::vector<double> deltas{0.0};
    if (root["deltas"])
      deltas = r.list(root["deltas"], "deltas", [&](const YAML::Node& n, const std::string& p) { return r.real(n, p); });
    for (const auto& s : strategies)
      for (double d : deltas) {
        CellSpec c = s;
        c.delta = d;
        m.cells.push_back(c);
      }
  }
  if (root["seeds"])
    m.seeds = r.list(root["seeds"], "seeds", [&](const YAML::Node& n, const std::string& p) { return r.u64(n, p); });
  if (root["output_dir"]) m.output_dir = r.text(root["output_dir"], "output_dir");
  try {
    m.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(fmt::format("{}: {}", origin, e.what()));
  }
  return m;
}

ExperimentManifest parse_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("{}: cannot open config file", path.string()));
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path.string());
}

std::string emit_config(const ExperimentManifest& m) {
  YAML::Emitter out;
  out.SetDoublePrecision(17);
  const auto& p = m.dataset.partition;
  out << YAML::BeginMap;
  out << YAML::Key << "dataset" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "scheme" << YAML::Value << to_string(p.scheme);
  out << YAML::Key << "num_clients" << YAML::Value << p.num_clients;
  out << YAML::Key << "total_samples" << YAML::Value << p.total_samples;
  out << YAML::Key << "power_law_gamma" << YAML::Value << p.power_law_gamma;
  out << YAML::Key << "min_per_client" << YAML::Value << p.min_per_client;
  out << YAML::Key << "seed" << YAML::Value << p.seed;
  if (p.phi1) out << YAML::Key << "phi1" << YAML::Value << *p.phi1;
  if (p.phi2) out << YAML::Key << "phi2" << YAML::Value << *p.phi2;
  if (p.shards_per_client) out << YAML::Key << "shards_per_client" << YAML::Value << *p.shards_per_client;
  if (p.alpha) out << YAML::Key << "alpha" << YAML::Value << *p.alpha;
  if (m.dataset.idx_images) out << YAML::Key << "idx_images" << YAML::Value << *m.dataset.idx_images;
  if (m.dataset.idx_labels) out << YAML::Key << "idx_labels" << YAML::Value << *m.dataset.idx_labels;
  out << YAML::EndMap;

  out << YAML::Key << "model" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "hidden" << YAML::Value << YAML::Flow << m.hidden_dims;
  out << YAML::EndMap;

  const auto& t = m.training;
  out << YAML::Key << "training" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "rounds" << YAML::Value << t.rounds;
  out << YAML::Key << "local_epochs" << YAML::Value << t.local_epochs;
  out << YAML::Key << "clients_per_round" << YAML::Value << t.clients_per_round;
  out << YAML::Key << "lr" << YAML::Value << t.lr;
  out << YAML::Key << "lr_schedule" << YAML::Value << "constant";
  out << YAML::Key << "batch_size" << YAML::Value << t.batch_size;
  out << YAML::Key << "eval_every" << YAML::Value << t.eval_every;
  out << YAML::Key << "mmd_every" << YAML::Value << t.mmd_every;
  out << YAML::Key << "moving_avg_window_frac" << YAML::Value << t.moving_avg_window_frac;
  out << YAML::Key << "sampling" << YAML::Value << to_string(t.sampling);
  out << YAML::Key << "centralized_epochs" << YAML::Value << m.centralized_epochs;
  out << YAML::EndMap;

  out << YAML::Key << "cells" << YAML::Value << YAML::BeginSeq;
  for (const auto& c : m.cells) {
    out << YAML::BeginMap;
    out << YAML::Key << "strategy" << YAML::Value << to_string(c.strategy.kind);
    out << YAML::Key << "delta" << YAML::Value << c.delta;
    if (c.strategy.kind == StrategyKind::fedproto)
      out << YAML::Key << "variant" << YAML::Value << to_string(c.strategy.fedproto_variant);
    out << YAML::Key << "tolerate_stragglers" << YAML::Value << c.strategy.tolerate_stragglers;
    if (c.strategy.kind == StrategyKind::fedprox) out << YAML::Key << "prox_mu" << YAML::Value << c.strategy.prox_mu;
    if (c.sampling) out << YAML::Key << "sampling" << YAML::Value << to_string(*c.sampling);
    if (c.name) out << YAML::Key << "name" << YAML::Value << *c.name;
    out << YAML::EndMap;
  }
  out << YAML::EndSeq;
  out << YAML::Key << "seeds" << YAML::Value << YAML::Flow << m.seeds;
  out << YAML::Key << "output_dir" << YAML::Value << m.output_dir;
  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

std::string config_reference() {
  return R"(Configuration (YAML). Unknown keys are rejected.

dataset: synthetic | label_shard | dirichlet     # shorthand, or a mapping:
dataset:
  scheme: synthetic
  num_clients: 30
  total_samples: 9600
  power_law_gamma: 1.9          # sample counts follow rank^-gamma
  min_per_client: 2
  seed: 1
  phi1: 1.0                     # synthetic: variance of per-client model means
  phi2: 1.0                     # synthetic: variance of per-client input means
  shards_per_client: 2          # label_shard: distinct labels per client
  alpha: 0.5                    # dirichlet: concentration
  idx_images: <path>            # label_shard / dirichlet: IDX image file
  idx_labels: <path>            # label_shard / dirichlet: IDX label file
model:
  hidden: [128, 256]
training:
  rounds: 200                   # nominal T; the loop runs ceil(1.1 T) rounds
  local_epochs: 20              # F
  clients_per_round: 10         # K'
  lr: 0.01
  lr_schedule: constant
  batch_size: 10
  eval_every: 1
  mmd_every: 10                 # 0 disables MMD
  moving_avg_window_frac: 0.1
  sampling: proportional        # proportional | iid
  centralized_epochs: 100       # reference model for MMD/FFD; 0 skips it
strategy: fedproto              # shorthand: one strategy or a list, crossed with
deltas: [0.0]                   # these straggler fractions
cells:                          # or an explicit list
  - strategy: fedproto          # fedavg | fairness | fedprox | fedproto
    delta: 0.5
    variant: full               # fedproto: full | lpm_only | apm_only | dplus_only
    tolerate_stragglers: true   # default: true for fedprox/fedproto, false otherwise
    prox_mu: 0.1                # fedprox only
    sampling: iid               # overrides training.sampling
    name: my-cell               # overrides the derived label
seeds: [1]
output_dir: runs                # overridden by PROTOFED_OUTPUT_DIR, then --output
)";
}

}  // namespace protofed
