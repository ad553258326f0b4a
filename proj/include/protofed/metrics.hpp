#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "protofed/agg.hpp"
#include "protofed/data.hpp"
#include "protofed/nn.hpp"
#include "protofed/proto.hpp"

namespace protofed {

struct RoundRecord {
  std::size_t t = 0;
  double accuracy = 0.0;
  double loss = 0.0;
  double grad_dissimilarity = 0.0;
  double amm = 0.0;
  std::optional<double> mmd;
  double attention_entropy = 0.0;

  friend bool operator==(const RoundRecord&, const RoundRecord&) = default;
};

/// Rows are embeddings of one sample each.
using FeatureSample = Matrix;

/// Correct predictions over all clients' test splits, i.e. per-client
/// accuracy weighted by test-set size.
double accuracy(const ParamSet& params, const ModelSpec& spec, const FederatedDataset& dataset);

struct GradientStats {
  /// Mean training loss over the pooled training data.
  double loss = 0.0;
  /// (1/|K|) sum_k ||grad L_k - grad L||^2, with grad L the size-weighted mean.
  double dissimilarity = 0.0;
};

/// Full-batch training loss and gradient dissimilarity over every client.
GradientStats gradient_stats(const ParamSet& params, const ModelSpec& spec, const FederatedDataset& dataset);
double grad_dissimilarity(const ParamSet& params, const ModelSpec& spec, const FederatedDataset& dataset);

/// Mean distance between each present class prototype and the others; 0 with
/// fewer than two classes.
double amm(const PrototypeSet& protos);
/// The ratio form evaluated against the set itself. Identically 1 whenever at
/// least two distinct prototypes exist; kept as a diagnostic.
double amm_literal(const PrototypeSet& protos);

enum class MmdEstimator { biased, unbiased };

/// Squared MMD under a Gaussian kernel whose bandwidth is the median pairwise
/// distance of the pooled rows. The unbiased estimate can be negative.
/// Each sample needs at least two rows.
double mmd(const FeatureSample& p, const FeatureSample& q, MmdEstimator est = MmdEstimator::unbiased);

/// Cap on the rows drawn from each feature sample in federated_mmd.
inline constexpr std::size_t kMmdMaxSamples = 512;

/// Mean over `round_clients` of mmd(global features on client k's test split,
/// centralized features on the pooled test data), clamped at 0.
double federated_mmd(const ParamSet& global, const ParamSet& centralized, const ModelSpec& spec,
                     const FederatedDataset& dataset, std::span<const ClientId> round_clients, std::uint64_t seed);

/// Relative MMD gain of A over B in percent. Throws UsageError if mmd_b <= 0.
double ffd(double mmd_a, double mmd_b);

/// Trailing mean over max(1, ceil(window_frac * n)) entries; the first
/// entries average what is available.
std::vector<double> moving_average(std::span<const double> series, double window_frac);

/// -sum a log a over the weights; 0 for an empty vector.
double attention_entropy(const AttentionVector& a);

}  // namespace protofed
