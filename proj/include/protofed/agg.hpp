#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <string_view>

#include "protofed/nn.hpp"
#include "protofed/proto.hpp"

namespace protofed {

using ClientId = std::size_t;

/// Per-client sigmoid of a summed margin, each value in (0,1).
struct DeviationVector {
  std::map<ClientId, double> values;

  friend bool operator==(const DeviationVector&, const DeviationVector&) = default;
};

/// Nonnegative per-client aggregation weights that sum to 1.
struct AttentionVector {
  std::map<ClientId, double> weights;

  double sum() const;
  bool empty() const { return weights.empty(); }
  double operator[](ClientId k) const { return weights.at(k); }

  friend bool operator==(const AttentionVector&, const AttentionVector&) = default;
};

enum class StrategyKind { fedavg, fairness, fedprox, fedproto };
enum class FedProtoVariant { full, lpm_only, apm_only, dplus_only };

std::string to_string(StrategyKind k);
std::string to_string(FedProtoVariant v);
/// Throws ConfigError on unknown names.
StrategyKind parse_strategy_kind(std::string_view s);
FedProtoVariant parse_fedproto_variant(std::string_view s);

struct StrategyConfig {
  StrategyKind kind = StrategyKind::fedproto;
  bool tolerate_stragglers = true;
  FedProtoVariant fedproto_variant = FedProtoVariant::full;
  double prox_mu = 0.0;

  /// Partial work is kept by FedProx and FedProto and dropped by FedAvg and Fairness.
  static bool default_toleration(StrategyKind k);
  static StrategyConfig defaults_for(StrategyKind k);

  friend bool operator==(const StrategyConfig&, const StrategyConfig&) = default;
};

double sigmoid(double x);

DeviationVector deviation(const std::map<ClientId, MarginVector>& margins_per_client);

/// sigmoid(sum of same-class distances over shared classes).
double dplus_deviation(const NormalizedPrototypeSet& p_i, const NormalizedPrototypeSet& p_j);

/// a[k] = v[k] / sum(v). Equal deviations give exactly 1/K'.
AttentionVector normalize_attention(const DeviationVector& v);

/// t == 0: proportional to `sizes`; t > 0: elementwise mean of the two vectors.
AttentionVector federated_attention(const AttentionVector& a_loc, const AttentionVector& a_agg, std::size_t t,
                                    const std::map<ClientId, std::size_t>& sizes);

/// Attention for a FedProto variant from its local and aggregate deviations.
/// lpm_only and apm_only put the available vector in both slots.
AttentionVector fedproto_attention(FedProtoVariant variant, const DeviationVector& v_loc,
                                   const DeviationVector& v_agg, std::size_t t,
                                   const std::map<ClientId, std::size_t>& sizes);

/// sum_k a[k] * params[k], accumulated in ascending client id.
ParamSet aggregate_weights(const std::map<ClientId, ParamSet>& params, const AttentionVector& a);

AttentionVector fedavg_attention(const std::map<ClientId, std::size_t>& sizes);

AttentionVector fairness_attention(std::span<const ClientId> clients);

}  // namespace protofed
