#include "protofed/engine.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <numeric>
#include <random>
#include <thread>

#include "protofed/errors.hpp"
#include "protofed/rng.hpp"

namespace protofed {

namespace {

std::map<ClientId, std::size_t> sizes_of(std::span<const ClientReport* const> reports) {
  std::map<ClientId, std::size_t> sizes;
  for (const auto* r : reports) sizes[r->client_id] = r->n_train;
  return sizes;
}

AttentionVector strategy_attention(const RoundState& state, const SimConfig& config,
                                   std::span<const ClientReport* const> reports) {
  const auto sizes = sizes_of(reports);
  switch (config.strategy.kind) {
    case StrategyKind::fedavg:
    case StrategyKind::fedprox:
      return fedavg_attention(sizes);
    case StrategyKind::fairness: {
      std::vector<ClientId> ids;
      for (const auto& [k, n] : sizes) ids.push_back(k);
      return fairness_attention(ids);
    }
    case StrategyKind::fedproto:
      break;
  }
  DeviationVector v_loc, v_agg;
  const bool dplus = config.strategy.fedproto_variant == FedProtoVariant::dplus_only;
  for (const auto* r : reports) {
    if (dplus) {
      v_loc.values[r->client_id] = sigmoid(r->lpm_dplus);
      v_agg.values[r->client_id] = dplus_deviation(r->local_protos, state.global_protos);
    } else {
      v_loc.values[r->client_id] = sigmoid(r->lpm.sum());
      v_agg.values[r->client_id] = sigmoid(apm(r->local_protos, state.global_protos).sum());
    }
  }
  return fedproto_attention(config.strategy.fedproto_variant, v_loc, v_agg, state.t, sizes);
}

std::vector<ClientReport> run_clients(const RoundState& state, const SimConfig& config, const ModelSpec& spec,
                                      const FederatedDataset& dataset) {
  const std::size_t n = state.selected.size();
  std::vector<ClientReport> reports(n);
  const std::size_t workers = std::min(std::max<std::size_t>(config.threads, 1), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) reports[i] = client_update(state, state.selected[i], config, spec, dataset);
    return reports;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            reports[i] = client_update(state, state.selected[i], config, spec, dataset);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return reports;
}

}  // namespace

std::string to_string(ClientSampling s) { return s == ClientSampling::iid ? "iid" : "proportional"; }

ClientSampling parse_client_sampling(std::string_view s) {
  if (s == "proportional") return ClientSampling::proportional;
  if (s == "iid") return ClientSampling::iid;
  throw ConfigError("unknown client sampling '" + std::string(s) + "'");
}

void SimConfig::validate(std::size_t num_clients) const {
  if (rounds < 1) throw UsageError("rounds must be at least 1");
  if (local_epochs < 1) throw UsageError("local_epochs must be at least 1");
  if (clients_per_round < 1 || clients_per_round > num_clients)
    throw UsageError("clients_per_round must be in [1, number of clients]");
  if (!(delta >= 0.0 && delta <= 1.0)) throw UsageError("delta must be in [0, 1]");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw UsageError("lr must be positive");
  if (batch_size < 1) throw UsageError("batch_size must be at least 1");
  if (eval_every < 1) throw UsageError("eval_every must be at least 1");
  if (!(strategy.prox_mu >= 0.0)) throw UsageError("prox_mu must be nonnegative");
  if (!(moving_avg_window_frac >= 0.0 && moving_avg_window_frac <= 1.0))
    throw UsageError("moving_avg_window_frac must be in [0, 1]");
}

std::vector<ClientId> sample_clients(const FederatedDataset& population, std::size_t k, ClientSampling weighting,
                                     std::uint64_t seed, std::size_t t) {
  const std::size_t n = population.clients.size();
  if (k > n) throw UsageError("cannot select more clients than exist");
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i)
    w[i] = weighting == ClientSampling::iid ? 1.0 : static_cast<double>(population.clients[i].n_train());
  Rng rng(derive_seed(seed, {kStreamSelect, t}));
  std::vector<ClientId> out;
  out.reserve(k);
  for (std::size_t draw = 0; draw < k; ++draw) {
    // Clients with no training data are only picked once the rest run out.
    if (std::all_of(w.begin(), w.end(), [](double x) { return x == 0.0; }))
      for (std::size_t i = 0; i < n; ++i)
        if (std::find(out.begin(), out.end(), i) == out.end()) w[i] = 1.0;
    std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
    const std::size_t c = pick(rng);
    out.push_back(c);
    w[c] = 0.0;
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::map<ClientId, std::size_t> assign_stragglers(std::span<const ClientId> selected, double delta,
                                                  std::size_t local_epochs, std::uint64_t seed, std::size_t t) {
  std::map<ClientId, std::size_t> out;
  const auto count = std::min(
      selected.size(), static_cast<std::size_t>(std::floor(delta * static_cast<double>(selected.size()) + 1e-9)));
  if (count == 0 || local_epochs == 0) return out;
  Rng rng(derive_seed(seed, {kStreamStraggler, t}));
  std::vector<ClientId> chosen;
  std::sample(selected.begin(), selected.end(), std::back_inserter(chosen), count, rng);
  std::uniform_int_distribution<std::size_t> epochs(0, local_epochs - 1);
  for (ClientId k : chosen) out[k] = epochs(rng);
  return out;
}

RoundState plan_round(std::size_t t, ParamSet global_params, NormalizedPrototypeSet global_protos,
                      const SimConfig& config, const FederatedDataset& dataset) {
  RoundState s;
  s.t = t;
  s.global_params = std::move(global_params);
  s.global_protos = std::move(global_protos);
  s.selected = sample_clients(dataset, config.clients_per_round, config.sampling, config.seed, t);
  s.straggler_epochs = assign_stragglers(s.selected, config.delta, config.local_epochs, config.seed, t);
  return s;
}

std::uint64_t client_train_seed(std::uint64_t run_seed, ClientId k) {
  return derive_seed(run_seed, {kStreamTrain, k});
}

ClientReport client_update(const RoundState& state, ClientId k, const SimConfig& config, const ModelSpec& spec,
                           const FederatedDataset& dataset) {
  const auto& data = dataset.clients.at(k);
  ClientReport r;
  r.client_id = k;
  r.n_train = data.n_train();
  auto it = state.straggler_epochs.find(k);
  r.straggler = it != state.straggler_epochs.end();
  r.epochs_done = r.straggler ? it->second : config.local_epochs;

  const bool protos = config.strategy.kind == StrategyKind::fedproto && !data.train.empty();
  NormalizedPrototypeSet before;
  if (protos) before = minmax_normalize(extract_prototypes(state.global_params, spec, data.train));

  TrainOptions opts;
  opts.epochs = r.epochs_done;
  opts.lr = config.lr;
  opts.batch_size = config.batch_size;
  opts.first_epoch = state.t * config.local_epochs;
  if (config.strategy.kind == StrategyKind::fedprox && config.strategy.prox_mu > 0.0)
    opts.proximal = Proximal{config.strategy.prox_mu, &state.global_params};
  r.updated_params = data.train.empty() ? state.global_params
                                        : local_train(state.global_params, spec, data.train, opts,
                                                      client_train_seed(config.seed, k));

  if (protos) {
    r.local_protos = minmax_normalize(extract_prototypes(r.updated_params, spec, data.train));
    r.lpm = lpm(before, r.local_protos);
    r.lpm_dplus = dplus_sum(before, r.local_protos);
  }
  return r;
}

ServerUpdate server_step(const RoundState& state, const SimConfig& config, std::span<const ClientReport> reports) {
  std::vector<const ClientReport*> kept;
  for (const auto& r : reports)
    if ((config.strategy.tolerate_stragglers || !r.straggler) && r.n_train > 0) kept.push_back(&r);

  ServerUpdate out{state.global_params, state.global_protos, {}};
  if (kept.empty()) return out;
  out.attention = strategy_attention(state, config, kept);
  std::map<ClientId, ParamSet> models;
  for (const auto* r : kept) models.emplace(r->client_id, r->updated_params);
  out.params = aggregate_weights(models, out.attention);
  if (config.strategy.kind == StrategyKind::fedproto) {
    std::vector<NormalizedPrototypeSet> locals;
    for (const auto* r : kept) locals.push_back(r->local_protos);
    out.protos = aggregate_prototypes(locals);
  }
  if (!out.params.all_finite()) throw std::runtime_error("aggregated parameters are not finite");
  return out;
}

RoundResult run_round(const RoundState& state, const SimConfig& config, const ModelSpec& spec,
                      const FederatedDataset& dataset) {
  RoundResult out;
  out.reports = run_clients(state, config, spec, dataset);
  auto update = server_step(state, config, out.reports);
  out.attention = std::move(update.attention);
  out.next = plan_round(state.t + 1, std::move(update.params), std::move(update.protos), config, dataset);
  return out;
}

RunLog run_simulation(const SimConfig& config, const ModelSpec& spec, const FederatedDataset& dataset,
                      const ParamSet* centralized, const RoundCallback& on_record) {
  config.validate(dataset.clients.size());
  const auto pooled_train = dataset.pooled_train();
  const std::size_t total = config.rounds_executed();
  RoundState state = plan_round(0, ParamSet::glorot(spec, config.seed), {}, config, dataset);
  RunLog log;
  for (std::size_t t = 0; t < total; ++t) {
    const std::vector<ClientId> selected = state.selected;
    auto result = run_round(state, config, spec, dataset);
    state = std::move(result.next);
    const bool last = t + 1 == total;
    if ((t + 1) % config.eval_every != 0 && !last) continue;
    RoundRecord rec;
    rec.t = t;
    rec.accuracy = accuracy(state.global_params, spec, dataset);
    const auto gs = gradient_stats(state.global_params, spec, dataset);
    rec.loss = gs.loss;
    rec.grad_dissimilarity = gs.dissimilarity;
    rec.amm = amm(extract_prototypes(state.global_params, spec, pooled_train));
    if (centralized && config.mmd_every > 0 && ((t + 1) % config.mmd_every == 0 || last))
      rec.mmd = federated_mmd(state.global_params, *centralized, spec, dataset, selected,
                              derive_seed(config.seed, {kStreamMmd, t}));
    rec.attention_entropy = attention_entropy(result.attention);
    log.records.push_back(rec);
    if (on_record) on_record(rec);
  }
  log.final_params = std::move(state.global_params);
  log.final_protos = std::move(state.global_protos);
  return log;
}

ParamSet train_centralized(std::span<const Sample> pooled, const ModelSpec& spec, std::size_t epochs, double lr,
                           std::size_t batch_size, std::uint64_t seed) {
  TrainOptions opts;
  opts.epochs = epochs;
  opts.lr = lr;
  opts.batch_size = batch_size;
  return local_train(ParamSet::glorot(spec, seed), spec, pooled, opts, client_train_seed(seed, 0));
}

}  // namespace protofed
