#include "protofed/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <set>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "json.hpp"
#include "protofed/errors.hpp"
#include "protofed/rng.hpp"

namespace protofed {

namespace {

enum : std::uint64_t { kSubSplit = 1, kSubCounts = 2, kSubClasses = 3, kSubDraw = 4, kSubClient = 5 };

std::size_t train_size(std::size_t n) { return (4 * n + 4) / 5; }  // ceil(0.8 n)

// Per-class index lists drawn without replacement until empty, then with
// replacement from the full class list.
class ClassPools {
 public:
  ClassPools(const LabeledPool& pool, Rng& rng) : by_class_(pool.num_classes), cursor_(pool.num_classes, 0) {
    for (std::size_t i = 0; i < pool.samples.size(); ++i)
      by_class_[static_cast<std::size_t>(pool.samples[i].label)].push_back(i);
    for (auto& v : by_class_) std::shuffle(v.begin(), v.end(), rng);
    warned_.assign(pool.num_classes, false);
  }

  bool has(std::size_t c) const { return !by_class_[c].empty(); }

  std::size_t take(std::size_t c, Rng& rng) {
    auto& v = by_class_[c];
    if (cursor_[c] < v.size()) return v[cursor_[c]++];
    if (!warned_[c]) {
      spdlog::warn("class {} exhausted in pool; sampling it with replacement", c);
      warned_[c] = true;
    }
    std::uniform_int_distribution<std::size_t> pick(0, v.size() - 1);
    return v[pick(rng)];
  }

 private:
  std::vector<std::vector<std::size_t>> by_class_;
  std::vector<std::size_t> cursor_;
  std::vector<bool> warned_;
};

void check_pool(const LabeledPool& pool) {
  if (pool.samples.empty()) throw UsageError("sample pool is empty");
  std::set<int> labels;
  for (const auto& s : pool.samples) {
    if (s.label < 0 || static_cast<std::size_t>(s.label) >= pool.num_classes)
      throw UsageError("pool label out of range");
    labels.insert(s.label);
  }
  if (labels.size() < pool.num_classes)
    throw UsageError(fmt::format("pool covers {} of {} classes", labels.size(), pool.num_classes));
}

void check_counts(std::span<const std::size_t> counts, std::size_t num_clients) {
  if (counts.size() != num_clients) throw UsageError("counts length differs from num_clients");
  for (auto c : counts)
    if (c < 2) throw UsageError("every client needs at least 2 samples for the 80/20 split");
}

// Splits `total` across weights by largest remainder; ties go to lower index.
std::vector<std::size_t> apportion(std::span<const double> weights, std::size_t total) {
  const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::vector<std::size_t> out(weights.size(), 0);
  std::vector<std::pair<double, std::size_t>> rema;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double exact = static_cast<double>(total) * weights[i] / wsum;
    out[i] = static_cast<std::size_t>(std::floor(exact));
    assigned += out[i];
    rema.emplace_back(exact - std::floor(exact), i);
  }
  std::stable_sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < total; ++i, ++assigned) out[rema[i % rema.size()].second] += 1;
  return out;
}

ClientDataset make_client(std::size_t id, std::vector<Sample> samples, std::uint64_t seed) {
  auto [train, test] = split_80_20(std::move(samples), derive_seed(seed, {kStreamData, kSubSplit, id}));
  return ClientDataset{id, std::move(train), std::move(test)};
}

FederatedDataset assemble(const LabeledPool& pool, std::vector<std::vector<std::size_t>> per_client_indices,
                          std::uint64_t seed) {
  FederatedDataset out;
  out.num_classes = pool.num_classes;
  out.input_dim = pool.input_dim;
  for (std::size_t k = 0; k < per_client_indices.size(); ++k) {
    std::vector<Sample> samples;
    samples.reserve(per_client_indices[k].size());
    for (auto i : per_client_indices[k]) samples.push_back(pool.samples[i]);
    out.clients.push_back(make_client(k, std::move(samples), seed));
  }
  return out;
}

std::vector<double> sample_dirichlet(double alpha, std::size_t k, Rng& rng) {
  std::gamma_distribution<double> g(alpha, 1.0);
  std::vector<double> q(k);
  double s = 0.0;
  for (auto& v : q) s += (v = g(rng));
  if (!(s > 0.0) || !std::isfinite(s)) {
    // every component underflowed: the draw is a vertex of the simplex
    std::uniform_int_distribution<std::size_t> pick(0, k - 1);
    std::fill(q.begin(), q.end(), 0.0);
    q[pick(rng)] = 1.0;
    return q;
  }
  for (auto& v : q) v /= s;
  return q;
}

std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t off, const std::string& what) {
  if (off + 4 > buf.size()) throw FormatError(what + ": truncated header", buf.size());
  return (std::uint32_t{buf[off]} << 24) | (std::uint32_t{buf[off + 1]} << 16) | (std::uint32_t{buf[off + 2]} << 8) |
         std::uint32_t{buf[off + 3]};
}

std::vector<unsigned char> read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw FormatError("cannot open " + p.string(), 0);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

std::size_t FederatedDataset::total_samples() const {
  std::size_t n = 0;
  for (const auto& c : clients) n += c.size();
  return n;
}

std::size_t FederatedDataset::total_train() const {
  std::size_t n = 0;
  for (const auto& c : clients) n += c.n_train();
  return n;
}

void FederatedDataset::validate() const {
  if (clients.empty()) throw UsageError("dataset has no clients");
  for (std::size_t k = 0; k < clients.size(); ++k) {
    const auto& c = clients[k];
    if (c.client_id != k) throw UsageError("client ids must be dense and ordered");
    if (c.train.empty()) throw UsageError(fmt::format("client {} has an empty training split", k));
    for (const auto* split : {&c.train, &c.test})
      for (const auto& s : *split) {
        if (s.x.size() != input_dim) throw UsageError(fmt::format("client {} sample has wrong dimension", k));
        if (s.label < 0 || static_cast<std::size_t>(s.label) >= num_classes)
          throw UsageError(fmt::format("client {} label {} out of range", k, s.label));
      }
  }
}

std::vector<Sample> FederatedDataset::pooled_train() const {
  std::vector<Sample> out;
  out.reserve(total_train());
  for (const auto& c : clients) out.insert(out.end(), c.train.begin(), c.train.end());
  return out;
}

std::vector<Sample> FederatedDataset::pooled_test() const {
  std::vector<Sample> out;
  for (const auto& c : clients) out.insert(out.end(), c.test.begin(), c.test.end());
  return out;
}

std::string to_string(PartitionScheme s) {
  switch (s) {
    case PartitionScheme::synthetic: return "synthetic";
    case PartitionScheme::label_shard: return "label_shard";
    case PartitionScheme::dirichlet: return "dirichlet";
  }
  return "?";
}

PartitionScheme parse_partition_scheme(const std::string& s) {
  if (s == "synthetic") return PartitionScheme::synthetic;
  if (s == "label_shard") return PartitionScheme::label_shard;
  if (s == "dirichlet") return PartitionScheme::dirichlet;
  throw UsageError("unknown partition scheme '" + s + "'");
}

void PartitionSpec::validate() const {
  const bool syn = scheme == PartitionScheme::synthetic;
  const bool shard = scheme == PartitionScheme::label_shard;
  const bool dir = scheme == PartitionScheme::dirichlet;
  if (syn != (phi1.has_value() && phi2.has_value()) || (!syn && (phi1 || phi2)))
    throw UsageError("phi1/phi2 are required for, and only for, the synthetic scheme");
  if (shard != shards_per_client.has_value())
    throw UsageError("shards_per_client is required for, and only for, the label_shard scheme");
  if (dir != alpha.has_value()) throw UsageError("alpha is required for, and only for, the dirichlet scheme");
  if (alpha && !(*alpha > 0.0)) throw UsageError("alpha must be positive");
  if (shards_per_client && *shards_per_client == 0) throw UsageError("shards_per_client must be >= 1");
  if (phi1 && (*phi1 < 0.0 || *phi2 < 0.0)) throw UsageError("phi1 and phi2 must be non-negative");
  if (num_clients == 0) throw UsageError("num_clients must be positive");
  if (min_per_client < 2) throw UsageError("min_per_client must be >= 2");
  if (total_samples < num_clients * min_per_client) throw UsageError("total_samples too small for min_per_client");
}

std::uint64_t PartitionSpec::content_hash() const {
  auto opt = [](const auto& o) { return o ? fmt::format("{:.17g}", static_cast<double>(*o)) : std::string("-"); };
  const std::string canon =
      fmt::format("v1|{}|{}|{}|{:.17g}|{}|{}|{}|{}|{}|{}", to_string(scheme), num_clients, total_samples,
                  power_law_gamma, min_per_client, seed, opt(phi1), opt(phi2), opt(shards_per_client), opt(alpha));
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : canon) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

FederatedDataset gen_synthetic(std::size_t num_clients, double phi1, double phi2,
                               std::span<const std::size_t> samples_per_client, std::uint64_t seed) {
  if (phi1 < 0.0 || phi2 < 0.0) throw UsageError("phi1 and phi2 must be non-negative");
  check_counts(samples_per_client, num_clients);
  constexpr std::size_t dim = kSyntheticDim;
  constexpr std::size_t classes = kSyntheticClasses;

  std::vector<double> sigma_sd(dim);
  for (std::size_t j = 0; j < dim; ++j) sigma_sd[j] = std::sqrt(std::pow(static_cast<double>(j + 1), -1.2));

  FederatedDataset out;
  out.num_classes = classes;
  out.input_dim = dim;
  std::normal_distribution<double> std_normal(0.0, 1.0);
  for (std::size_t k = 0; k < num_clients; ++k) {
    Rng rng(derive_seed(seed, {kStreamData, kSubClient, k}));
    const double u = std::sqrt(phi1) * std_normal(rng);
    const double big_b = std::sqrt(phi2) * std_normal(rng);
    std::vector<double> w(classes * dim), b(classes), v(dim);
    for (auto& x : w) x = u + std_normal(rng);
    for (auto& x : b) x = u + std_normal(rng);
    for (auto& x : v) x = big_b + std_normal(rng);

    std::vector<Sample> samples(samples_per_client[k]);
    for (auto& s : samples) {
      s.x.resize(dim);
      for (std::size_t j = 0; j < dim; ++j) s.x[j] = v[j] + sigma_sd[j] * std_normal(rng);
      // argmax of softmax(Wx+b) is argmax of Wx+b
      double best = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < classes; ++c) {
        double z = b[c];
        for (std::size_t j = 0; j < dim; ++j) z += w[c * dim + j] * s.x[j];
        if (z > best) {
          best = z;
          s.label = static_cast<int>(c);
        }
      }
    }
    out.clients.push_back(make_client(k, std::move(samples), seed));
  }
  return out;
}

std::vector<std::size_t> power_law_counts(std::size_t num_clients, std::size_t total, double gamma,
                                          std::size_t min_per_client, std::uint64_t seed) {
  if (num_clients == 0) throw UsageError("power_law_counts: no clients");
  if (total < num_clients * min_per_client)
    throw UsageError(fmt::format("power_law_counts: total {} < {} clients x {} minimum", total, num_clients,
                                 min_per_client));
  std::vector<std::size_t> rank(num_clients);
  std::iota(rank.begin(), rank.end(), 0);
  Rng rng(derive_seed(seed, {kStreamData, kSubCounts}));
  std::shuffle(rank.begin(), rank.end(), rng);
  std::vector<double> w(num_clients);
  for (std::size_t k = 0; k < num_clients; ++k) w[k] = std::pow(static_cast<double>(rank[k] + 1), -gamma);
  auto counts = apportion(w, total - num_clients * min_per_client);
  for (auto& c : counts) c += min_per_client;
  return counts;
}

FederatedDataset label_shard_partition(const LabeledPool& pool, std::size_t num_clients,
                                       std::size_t shards_per_client, std::span<const std::size_t> counts,
                                       std::uint64_t seed) {
  check_pool(pool);
  if (shards_per_client == 0) throw UsageError("shards_per_client must be >= 1");
  check_counts(counts, num_clients);
  const std::size_t s = std::min(shards_per_client, pool.num_classes);

  Rng rng(derive_seed(seed, {kStreamData, kSubDraw}));
  ClassPools pools(pool, rng);
  std::vector<std::size_t> all_classes(pool.num_classes);
  std::iota(all_classes.begin(), all_classes.end(), 0);

  std::vector<std::vector<std::size_t>> picks(num_clients);
  for (std::size_t k = 0; k < num_clients; ++k) {
    std::vector<std::size_t> mine;
    std::sample(all_classes.begin(), all_classes.end(), std::back_inserter(mine), static_cast<std::ptrdiff_t>(s), rng);
    for (std::size_t i = 0; i < counts[k]; ++i) picks[k].push_back(pools.take(mine[i % s], rng));
  }
  return assemble(pool, std::move(picks), seed);
}

FederatedDataset dirichlet_partition(const LabeledPool& pool, std::size_t num_clients, double alpha,
                                     std::span<const std::size_t> counts, std::uint64_t seed,
                                     std::vector<std::vector<double>>* proportions) {
  check_pool(pool);
  if (!(alpha > 0.0)) throw UsageError("alpha must be positive");
  check_counts(counts, num_clients);

  Rng rng(derive_seed(seed, {kStreamData, kSubDraw}));
  ClassPools pools(pool, rng);
  if (proportions) proportions->clear();

  std::vector<std::vector<std::size_t>> picks(num_clients);
  for (std::size_t k = 0; k < num_clients; ++k) {
    const auto q = sample_dirichlet(alpha, pool.num_classes, rng);
    const auto per_class = apportion(q, counts[k]);
    for (std::size_t c = 0; c < per_class.size(); ++c)
      for (std::size_t i = 0; i < per_class[c]; ++i) picks[k].push_back(pools.take(c, rng));
    if (proportions) proportions->push_back(q);
  }
  return assemble(pool, std::move(picks), seed);
}

LabeledPool load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);
  if (img.empty()) throw FormatError("image file " + images_path.string() + " is empty", 0);
  if (lab.empty()) throw FormatError("label file " + labels_path.string() + " is empty", 0);

  const auto img_magic = read_be32(img, 0, "image file");
  if (img_magic != 0x00000803u) throw FormatError(fmt::format("bad image magic 0x{:08x}", img_magic), 0);
  const auto lab_magic = read_be32(lab, 0, "label file");
  if (lab_magic != 0x00000801u) throw FormatError(fmt::format("bad label magic 0x{:08x}", lab_magic), 0);

  const std::size_t n = read_be32(img, 4, "image file");
  const std::size_t rows = read_be32(img, 8, "image file");
  const std::size_t cols = read_be32(img, 12, "image file");
  const std::size_t nl = read_be32(lab, 4, "label file");
  if (n != nl) throw FormatError(fmt::format("image count {} differs from label count {}", n, nl), 4);
  const std::size_t pix = rows * cols;
  if (img.size() < 16 + n * pix) throw FormatError("image file truncated", img.size());
  if (lab.size() < 8 + n) throw FormatError("label file truncated", lab.size());

  LabeledPool pool;
  pool.input_dim = pix;
  pool.samples.resize(n);
  int max_label = -1;
  for (std::size_t i = 0; i < n; ++i) {
    auto& s = pool.samples[i];
    s.x.resize(pix);
    for (std::size_t j = 0; j < pix; ++j) s.x[j] = static_cast<double>(img[16 + i * pix + j]) / 255.0;
    s.label = lab[8 + i];
    max_label = std::max(max_label, s.label);
  }
  pool.num_classes = static_cast<std::size_t>(max_label + 1);
  return pool;
}

std::pair<std::vector<Sample>, std::vector<Sample>> split_80_20(std::vector<Sample> samples, std::uint64_t seed) {
  if (samples.size() < 2) throw UsageError("split_80_20 needs at least 2 samples");
  Rng rng(seed);
  std::shuffle(samples.begin(), samples.end(), rng);
  const auto cut = static_cast<std::ptrdiff_t>(train_size(samples.size()));
  std::vector<Sample> test(std::make_move_iterator(samples.begin() + cut), std::make_move_iterator(samples.end()));
  samples.resize(static_cast<std::size_t>(cut));
  return {std::move(samples), std::move(test)};
}

FederatedDataset build_dataset(const PartitionSpec& spec, const LabeledPool* pool) {
  spec.validate();
  const auto counts =
      power_law_counts(spec.num_clients, spec.total_samples, spec.power_law_gamma, spec.min_per_client, spec.seed);
  switch (spec.scheme) {
    case PartitionScheme::synthetic: return gen_synthetic(spec.num_clients, *spec.phi1, *spec.phi2, counts, spec.seed);
    case PartitionScheme::label_shard:
      if (!pool) throw UsageError("label_shard partitioning needs a sample pool");
      return label_shard_partition(*pool, spec.num_clients, *spec.shards_per_client, counts, spec.seed);
    case PartitionScheme::dirichlet:
      if (!pool) throw UsageError("dirichlet partitioning needs a sample pool");
      return dirichlet_partition(*pool, spec.num_clients, *spec.alpha, counts, spec.seed);
  }
  throw UsageError("unknown scheme");
}

void save_dataset(const FederatedDataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    nlohmann::json meta{{"num_classes", data.num_classes},
                        {"input_dim", data.input_dim},
                        {"num_clients", data.clients.size()}};
    std::ofstream(dir / "meta.json") << meta.dump(2) << '\n';
  }
  for (const auto& c : data.clients) {
    std::ofstream out(dir / fmt::format("client_{:05d}.jsonl", c.client_id));
    for (const auto* split : {&c.train, &c.test}) {
      const char* name = split == &c.train ? "train" : "test";
      for (const auto& s : *split) out << nlohmann::json{{"split", name}, {"label", s.label}, {"x", s.x}}.dump() << '\n';
    }
    if (!out) throw std::runtime_error("failed writing dataset to " + dir.string());
  }
}

FederatedDataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream meta_in(dir / "meta.json");
  if (!meta_in) throw FormatError("missing meta.json in " + dir.string(), 0);
  const auto meta = nlohmann::json::parse(meta_in);
  FederatedDataset out;
  out.num_classes = meta.at("num_classes").get<std::size_t>();
  out.input_dim = meta.at("input_dim").get<std::size_t>();
  const auto n = meta.at("num_clients").get<std::size_t>();
  for (std::size_t k = 0; k < n; ++k) {
    const auto path = dir / fmt::format("client_{:05d}.jsonl", k);
    std::ifstream in(path);
    if (!in) throw FormatError("missing " + path.string(), 0);
    ClientDataset c;
    c.client_id = k;
    std::string line;
    std::uint64_t offset = 0;
    while (std::getline(in, line)) {
      if (!line.empty()) {
        nlohmann::json j;
        try {
          j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
          throw FormatError(path.string() + ": " + e.what(), offset);
        }
        Sample s{j.at("x").get<std::vector<double>>(), j.at("label").get<int>()};
        (j.at("split").get<std::string>() == "train" ? c.train : c.test).push_back(std::move(s));
      }
      offset += line.size() + 1;
    }
    out.clients.push_back(std::move(c));
  }
  return out;
}

}  // namespace protofed
