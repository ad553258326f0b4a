#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "protofed/agg.hpp"
#include "protofed/errors.hpp"

using namespace protofed;

namespace {

MarginVector margins(std::initializer_list<double> values) {
  MarginVector m;
  std::size_t c = 0;
  for (double v : values) m.margins[c++] = v;
  return m;
}

ParamSet scalar_net(double w) {
  ParamSet p(ModelSpec{1, {}, 1});
  p.values()[0] = w;
  return p;
}

}  // namespace

TEST_CASE("deviation") {
  std::map<ClientId, MarginVector> m{{0, margins({0.0, 0.0})}, {1, margins({0.25, 0.75})}, {2, {}}};
  const auto v = deviation(m);
  CHECK(v.values.at(0) == 0.5);
  CHECK(v.values.at(1) == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-15));
  CHECK(v.values.at(1) == doctest::Approx(0.7310585786).epsilon(1e-10));
  CHECK(v.values.at(2) == 0.5);
  CHECK(sigmoid(-800.0) >= 0.0);
  CHECK(sigmoid(800.0) == 1.0);
}

TEST_CASE("normalize_attention") {
  SUBCASE("equal deviations are exactly uniform") {
    DeviationVector v{{{3, 0.7}, {5, 0.7}, {9, 0.7}}};
    const auto a = normalize_attention(v);
    for (const auto& [k, w] : a.weights) CHECK(w == 1.0 / 3.0);
  }
  SUBCASE("already normalized input is unchanged") {
    DeviationVector v{{{0, 0.25}, {1, 0.75}}};
    const auto a = normalize_attention(v);
    CHECK(a[0] == 0.25);
    CHECK(a[1] == 0.75);
  }
  SUBCASE("random deviations sum to one and stay nonnegative") {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(1e-6, 1.0);
    std::uniform_int_distribution<int> k(1, 30);
    for (int t = 0; t < 500; ++t) {
      DeviationVector v;
      const int n = k(rng);
      for (int i = 0; i < n; ++i) v.values[static_cast<ClientId>(i * 7)] = u(rng);
      const auto a = normalize_attention(v);
      CHECK(std::abs(a.sum() - 1.0) < 1e-12);
      for (const auto& [c, w] : a.weights) CHECK(w >= 0.0);
    }
  }
  SUBCASE("empty input is a usage error") { CHECK_THROWS_AS(normalize_attention({}), UsageError); }
}

TEST_CASE("federated_attention") {
  const std::map<ClientId, std::size_t> sizes{{0, 30}, {1, 70}};
  const AttentionVector a_loc{{{0, 0.2}, {1, 0.8}}};
  const AttentionVector a_agg{{{0, 0.6}, {1, 0.4}}};
  SUBCASE("first round uses data sizes") {
    const auto a = federated_attention(a_loc, a_agg, 0, sizes);
    CHECK(a[0] == doctest::Approx(0.3).epsilon(1e-15));
    CHECK(a[1] == doctest::Approx(0.7).epsilon(1e-15));
    CHECK(a == fedavg_attention(sizes));
  }
  SUBCASE("later rounds average the two vectors") {
    const auto a = federated_attention(a_loc, a_agg, 1, sizes);
    CHECK(a[0] == doctest::Approx(0.4).epsilon(1e-15));
    CHECK(a[1] == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(federated_attention(a_loc, a_loc, 4, sizes) == a_loc);
  }
  SUBCASE("key mismatch is a usage error") {
    const AttentionVector other{{{0, 0.5}, {2, 0.5}}};
    CHECK_THROWS_AS(federated_attention(a_loc, other, 1, sizes), UsageError);
  }
}

TEST_CASE("fedproto_attention variant wiring") {
  const std::map<ClientId, std::size_t> sizes{{0, 10}, {1, 30}};
  const DeviationVector v_loc{{{0, 0.2}, {1, 0.6}}};
  const DeviationVector v_agg{{{0, 0.9}, {1, 0.3}}};
  const auto a_loc = normalize_attention(v_loc);
  const auto a_agg = normalize_attention(v_agg);
  CHECK(fedproto_attention(FedProtoVariant::full, v_loc, v_agg, 2, sizes) ==
        federated_attention(a_loc, a_agg, 2, sizes));
  CHECK(fedproto_attention(FedProtoVariant::lpm_only, v_loc, v_agg, 2, sizes) == a_loc);
  CHECK(fedproto_attention(FedProtoVariant::apm_only, v_loc, v_agg, 2, sizes) == a_agg);
  for (auto variant : {FedProtoVariant::full, FedProtoVariant::lpm_only, FedProtoVariant::apm_only,
                       FedProtoVariant::dplus_only})
    CHECK(fedproto_attention(variant, v_loc, v_agg, 0, sizes) == fedavg_attention(sizes));
  SUBCASE("uniform deviations reduce to fairness exactly") {
    const DeviationVector same{{{0, 0.5}, {1, 0.5}}};
    const std::vector<ClientId> ids{0, 1};
    CHECK(fedproto_attention(FedProtoVariant::full, same, same, 3, sizes) == fairness_attention(ids));
  }
}

TEST_CASE("dplus_deviation") {
  std::mt19937_64 rng(9);
  const auto a = oracle::random_normalized(rng, 6, 4);
  CHECK(dplus_deviation(a, a) == 0.5);
  CHECK(dplus_deviation(NormalizedPrototypeSet{}, a) == 0.5);
  for (int t = 0; t < 50; ++t) {
    const auto p = oracle::random_normalized(rng, 6, 4);
    const auto q = oracle::random_normalized(rng, 6, 4);
    double s = 0.0;
    for (const auto& [c, proto] : p.set().classes)
      if (q.set().has(c)) s += oracle::euclid(proto.mean, q.set()[c]);
    CHECK(std::abs(dplus_deviation(p, q) - 1.0 / (1.0 + std::exp(-s))) < 1e-12);
  }
}

TEST_CASE("aggregate_weights") {
  SUBCASE("scalar oracle") {
    std::map<ClientId, ParamSet> params{{0, scalar_net(0.0)}, {1, scalar_net(4.0)}};
    const auto out = aggregate_weights(params, AttentionVector{{{0, 0.25}, {1, 0.75}}});
    CHECK(out.values()[0] == 3.0);
  }
  SUBCASE("point mass returns that client's parameters") {
    const ModelSpec spec{5, {4}, 3};
    std::map<ClientId, ParamSet> params{{7, ParamSet::glorot(spec, 1)}};
    CHECK(aggregate_weights(params, AttentionVector{{{7, 1.0}}}) == params.at(7));
  }
  SUBCASE("identical inputs are returned regardless of weights") {
    const ModelSpec spec{5, {4}, 3};
    const auto p = ParamSet::glorot(spec, 2);
    std::map<ClientId, ParamSet> params{{0, p}, {1, p}, {2, p}};
    const auto out = aggregate_weights(params, AttentionVector{{{0, 0.1}, {1, 0.3}, {2, 0.6}}});
    for (std::size_t i = 0; i < p.total_dim(); ++i) CHECK(std::abs(out.values()[i] - p.values()[i]) < 1e-15);
  }
  SUBCASE("matches a direct weighted mean") {
    const ModelSpec spec{3, {4}, 2};
    std::map<ClientId, ParamSet> params;
    AttentionVector a;
    for (ClientId k = 0; k < 4; ++k) {
      params.emplace(k, ParamSet::glorot(spec, 10 + k));
      a.weights[k] = (k + 1) / 10.0;
    }
    const auto out = aggregate_weights(params, a);
    for (std::size_t i = 0; i < out.total_dim(); ++i) {
      double want = 0.0;
      for (const auto& [k, p] : params) want += a[k] * p.values()[i];
      CHECK(std::abs(out.values()[i] - want) < 1e-15);
    }
  }
  SUBCASE("errors") {
    std::map<ClientId, ParamSet> params{{0, scalar_net(1.0)}, {1, ParamSet(ModelSpec{2, {}, 1})}};
    CHECK_THROWS_AS(aggregate_weights(params, AttentionVector{{{0, 0.5}, {1, 0.5}}}), ShapeError);
    CHECK_THROWS_AS(aggregate_weights(params, AttentionVector{{{0, 0.5}, {2, 0.5}}}), UsageError);
    CHECK_THROWS_AS(aggregate_weights({}, AttentionVector{}), UsageError);
  }
}

TEST_CASE("fedavg and fairness attention") {
  CHECK(fedavg_attention({{0, 1}, {1, 1}}) == AttentionVector{{{0, 0.5}, {1, 0.5}}});
  CHECK_THROWS_AS(fedavg_attention({{0, 0}}), UsageError);
  CHECK_THROWS_AS(fedavg_attention({}), UsageError);
  std::vector<ClientId> ten(10);
  std::iota(ten.begin(), ten.end(), 0);
  const auto f = fairness_attention(ten);
  for (const auto& [k, w] : f.weights) CHECK(w == 0.1);
  CHECK(std::abs(f.sum() - 1.0) < 1e-12);
  CHECK_THROWS_AS(fairness_attention(std::vector<ClientId>{}), UsageError);
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<std::size_t> n(1, 5000);
  std::map<ClientId, std::size_t> sizes;
  for (ClientId k = 0; k < 25; ++k) sizes[k] = n(rng);
  CHECK(std::abs(fedavg_attention(sizes).sum() - 1.0) < 1e-12);
}

TEST_CASE("strategy names and defaults") {
  for (auto k : {StrategyKind::fedavg, StrategyKind::fairness, StrategyKind::fedprox, StrategyKind::fedproto})
    CHECK(parse_strategy_kind(to_string(k)) == k);
  CHECK_THROWS_AS(parse_strategy_kind("fedatt"), ConfigError);
  CHECK_FALSE(StrategyConfig::defaults_for(StrategyKind::fedavg).tolerate_stragglers);
  CHECK(StrategyConfig::defaults_for(StrategyKind::fedproto).tolerate_stragglers);
  CHECK(StrategyConfig::defaults_for(StrategyKind::fedprox).prox_mu == 0.1);
}
