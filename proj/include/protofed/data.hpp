#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "protofed/sample.hpp"

namespace protofed {

/// One client's local data after its 80/20 split.
struct ClientDataset {
  std::size_t client_id = 0;
  std::vector<Sample> train;
  std::vector<Sample> test;

  std::size_t n_train() const { return train.size(); }
  std::size_t size() const { return train.size() + test.size(); }

  friend bool operator==(const ClientDataset&, const ClientDataset&) = default;
};

struct FederatedDataset {
  std::vector<ClientDataset> clients;
  std::size_t num_classes = 0;
  std::size_t input_dim = 0;

  std::size_t total_samples() const;
  std::size_t total_train() const;
  /// Throws UsageError unless ids are dense and ordered, labels are in range,
  /// dimensions agree and every client has a non-empty training split.
  void validate() const;
  /// Union of all clients' training splits, in client-id order.
  std::vector<Sample> pooled_train() const;
  std::vector<Sample> pooled_test() const;

  friend bool operator==(const FederatedDataset&, const FederatedDataset&) = default;
};

/// An unpartitioned labeled sample collection (e.g. loaded from IDX files).
struct LabeledPool {
  std::vector<Sample> samples;
  std::size_t num_classes = 0;
  std::size_t input_dim = 0;
};

enum class PartitionScheme { synthetic, label_shard, dirichlet };

std::string to_string(PartitionScheme s);
PartitionScheme parse_partition_scheme(const std::string& s);

struct PartitionSpec {
  PartitionScheme scheme = PartitionScheme::synthetic;
  std::size_t num_clients = 30;
  std::size_t total_samples = 9600;
  double power_law_gamma = 1.9;
  std::size_t min_per_client = 2;
  std::uint64_t seed = 1;
  // synthetic only
  std::optional<double> phi1;
  std::optional<double> phi2;
  // label_shard only
  std::optional<std::size_t> shards_per_client;
  // dirichlet only
  std::optional<double> alpha;

  /// Throws UsageError when a scheme-specific field is missing or present
  /// for the wrong scheme.
  void validate() const;
  /// Stable 64-bit content hash, used to address cached datasets.
  std::uint64_t content_hash() const;

  friend bool operator==(const PartitionSpec&, const PartitionSpec&) = default;
};

/// Logistic-regression synthetic data with client-level heterogeneity.
/// phi1 is the variance of each client's model mean u_k, phi2 the variance of
/// each client's feature mean B_k. Inputs are 60-dimensional, 10 classes.
FederatedDataset gen_synthetic(std::size_t num_clients, double phi1, double phi2,
                               std::span<const std::size_t> samples_per_client, std::uint64_t seed);

inline constexpr std::size_t kSyntheticDim = 60;
inline constexpr std::size_t kSyntheticClasses = 10;

/// Per-client sample counts following w_k ∝ rank^-gamma over a seeded client
/// permutation. The surplus above min_per_client is apportioned by largest
/// remainder, so counts sum to `total` exactly.
std::vector<std::size_t> power_law_counts(std::size_t num_clients, std::size_t total, double gamma,
                                          std::size_t min_per_client, std::uint64_t seed);

/// Each client draws its count from `shards_per_client` randomly assigned
/// classes. Classes are sampled without replacement until exhausted, then
/// with replacement.
FederatedDataset label_shard_partition(const LabeledPool& pool, std::size_t num_clients,
                                       std::size_t shards_per_client, std::span<const std::size_t> counts,
                                       std::uint64_t seed);

/// Each client's class mix follows q_k ~ Dirichlet(alpha * 1). When
/// `proportions` is non-null it receives every q_k.
FederatedDataset dirichlet_partition(const LabeledPool& pool, std::size_t num_clients, double alpha,
                                     std::span<const std::size_t> counts, std::uint64_t seed,
                                     std::vector<std::vector<double>>* proportions = nullptr);

/// Reads an IDX3 image file and an IDX1 label file. Pixels are scaled to [0,1].
LabeledPool load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

/// Seeded shuffle, then the first ceil(0.8 n) samples become the training split.
std::pair<std::vector<Sample>, std::vector<Sample>> split_80_20(std::vector<Sample> samples, std::uint64_t seed);

/// Builds the dataset described by `spec`. Pool-based schemes require `pool`.
FederatedDataset build_dataset(const PartitionSpec& spec, const LabeledPool* pool = nullptr);

/// Writes meta.json plus one client_XXXXX.jsonl per client, one sample per
/// line. Doubles are written with 17 significant digits.
void save_dataset(const FederatedDataset& data, const std::filesystem::path& dir);
FederatedDataset load_dataset(const std::filesystem::path& dir);

}  // namespace protofed
