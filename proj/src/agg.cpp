#include "protofed/agg.hpp"

#include <algorithm>
#include <cmath>

#include "protofed/errors.hpp"

namespace protofed {

double AttentionVector::sum() const {
  double s = 0.0;
  for (const auto& [k, w] : weights) s += w;
  return s;
}

std::string to_string(StrategyKind k) {
  switch (k) {
    case StrategyKind::fedavg: return "fedavg";
    case StrategyKind::fairness: return "fairness";
    case StrategyKind::fedprox: return "fedprox";
    case StrategyKind::fedproto: return "fedproto";
  }
  return "?";
}

std::string to_string(FedProtoVariant v) {
  switch (v) {
    case FedProtoVariant::full: return "full";
    case FedProtoVariant::lpm_only: return "lpm_only";
    case FedProtoVariant::apm_only: return "apm_only";
    case FedProtoVariant::dplus_only: return "dplus_only";
  }
  return "?";
}

StrategyKind parse_strategy_kind(std::string_view s) {
  for (auto k : {StrategyKind::fedavg, StrategyKind::fairness, StrategyKind::fedprox, StrategyKind::fedproto})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown strategy '" + std::string(s) + "'");
}

FedProtoVariant parse_fedproto_variant(std::string_view s) {
  for (auto v : {FedProtoVariant::full, FedProtoVariant::lpm_only, FedProtoVariant::apm_only,
                 FedProtoVariant::dplus_only})
    if (to_string(v) == s) return v;
  throw ConfigError("unknown fedproto variant '" + std::string(s) + "'");
}

bool StrategyConfig::default_toleration(StrategyKind k) {
  return k == StrategyKind::fedprox || k == StrategyKind::fedproto;
}

StrategyConfig StrategyConfig::defaults_for(StrategyKind k) {
  StrategyConfig c;
  c.kind = k;
  c.tolerate_stragglers = default_toleration(k);
  c.prox_mu = k == StrategyKind::fedprox ? 0.1 : 0.0;
  return c;
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

DeviationVector deviation(const std::map<ClientId, MarginVector>& margins_per_client) {
  DeviationVector v;
  for (const auto& [k, m] : margins_per_client) v.values[k] = sigmoid(m.sum());
  return v;
}

double dplus_deviation(const NormalizedPrototypeSet& p_i, const NormalizedPrototypeSet& p_j) {
  return sigmoid(dplus_sum(p_i, p_j));
}

AttentionVector normalize_attention(const DeviationVector& v) {
  if (v.values.empty()) throw UsageError("normalize_attention: no clients");
  const double first = v.values.begin()->second;
  bool equal = true;
  double total = 0.0;
  for (const auto& [k, x] : v.values) {
    if (!(x > 0.0) || !std::isfinite(x)) throw UsageError("normalize_attention: deviation must be positive");
    equal = equal && x == first;
    total += x;
  }
  AttentionVector a;
  const double uniform = 1.0 / static_cast<double>(v.values.size());
  for (const auto& [k, x] : v.values) a.weights[k] = equal ? uniform : x / total;
  return a;
}

AttentionVector federated_attention(const AttentionVector& a_loc, const AttentionVector& a_agg, std::size_t t,
                                    const std::map<ClientId, std::size_t>& sizes) {
  if (t == 0) return fedavg_attention(sizes);
  if (a_loc.weights.size() != a_agg.weights.size()) throw UsageError("federated_attention: key mismatch");
  AttentionVector out;
  for (const auto& [k, w] : a_loc.weights) {
    auto it = a_agg.weights.find(k);
    if (it == a_agg.weights.end()) throw UsageError("federated_attention: key mismatch");
    out.weights[k] = (w + it->second) / 2.0;
  }
  return out;
}

AttentionVector fedproto_attention(FedProtoVariant variant, const DeviationVector& v_loc,
                                   const DeviationVector& v_agg, std::size_t t,
                                   const std::map<ClientId, std::size_t>& sizes) {
  if (t == 0) return fedavg_attention(sizes);
  switch (variant) {
    case FedProtoVariant::lpm_only: {
      const auto a = normalize_attention(v_loc);
      return federated_attention(a, a, t, sizes);
    }
    case FedProtoVariant::apm_only: {
      const auto a = normalize_attention(v_agg);
      return federated_attention(a, a, t, sizes);
    }
    case FedProtoVariant::full:
    case FedProtoVariant::dplus_only:
      break;
  }
  return federated_attention(normalize_attention(v_loc), normalize_attention(v_agg), t, sizes);
}

ParamSet aggregate_weights(const std::map<ClientId, ParamSet>& params, const AttentionVector& a) {
  if (params.empty()) throw UsageError("aggregate_weights: no client parameters");
  if (params.size() != a.weights.size()) throw UsageError("aggregate_weights: key mismatch");
  const ParamSet& first = params.begin()->second;
  ParamSet out = first;
  std::ranges::fill(out.values(), 0.0);
  for (const auto& [k, p] : params) {
    auto it = a.weights.find(k);
    if (it == a.weights.end()) throw UsageError("aggregate_weights: key mismatch");
    if (!p.same_shape(first)) throw ShapeError("aggregate_weights: incongruent parameter shapes");
    out.axpy(it->second, p);
  }
  return out;
}

AttentionVector fedavg_attention(const std::map<ClientId, std::size_t>& sizes) {
  if (sizes.empty()) throw UsageError("fedavg_attention: no clients");
  double total = 0.0;
  for (const auto& [k, n] : sizes) {
    if (n == 0) throw UsageError("fedavg_attention: client with no training data");
    total += static_cast<double>(n);
  }
  AttentionVector a;
  for (const auto& [k, n] : sizes) a.weights[k] = static_cast<double>(n) / total;
  return a;
}

AttentionVector fairness_attention(std::span<const ClientId> clients) {
  if (clients.empty()) throw UsageError("fairness_attention: no clients");
  AttentionVector a;
  const double w = 1.0 / static_cast<double>(clients.size());
  for (ClientId k : clients) a.weights[k] = w;
  if (a.weights.size() != clients.size()) throw UsageError("fairness_attention: duplicate client id");
  return a;
}

}  // namespace protofed
