#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "protofed/agg.hpp"
#include "protofed/data.hpp"
#include "protofed/metrics.hpp"
#include "protofed/nn.hpp"
#include "protofed/proto.hpp"

namespace protofed {

enum class ClientSampling { proportional, iid };

std::string to_string(ClientSampling s);
ClientSampling parse_client_sampling(std::string_view s);

struct SimConfig {
  StrategyConfig strategy;
  std::size_t rounds = 200;
  std::size_t local_epochs = 20;
  std::size_t clients_per_round = 10;
  double lr = 0.01;
  std::size_t batch_size = 10;
  double delta = 0.0;
  std::uint64_t seed = 1;
  std::size_t eval_every = 1;
  double moving_avg_window_frac = 0.1;
  ClientSampling sampling = ClientSampling::proportional;
  /// MMD against the centralized model is evaluated every this many rounds
  /// and at the final round; 0 disables it.
  std::size_t mmd_every = 10;
  /// Worker threads for client updates. Results do not depend on it.
  std::size_t threads = 1;

  /// Throws UsageError on out-of-range fields.
  void validate(std::size_t num_clients) const;
  /// ceil(1.1 * rounds): the loop runs 10% past the nominal horizon.
  std::size_t rounds_executed() const { return (11 * rounds + 9) / 10; }

  friend bool operator==(const SimConfig&, const SimConfig&) = default;
};

struct RoundState {
  std::size_t t = 0;
  ParamSet global_params;
  /// Aggregate prototypes from the previous round; empty before the first.
  NormalizedPrototypeSet global_protos;
  std::vector<ClientId> selected;
  /// Stragglers and their reduced epoch budgets F' < F.
  std::map<ClientId, std::size_t> straggler_epochs;
};

/// Everything a client sends back to the server.
struct ClientReport {
  ClientId client_id = 0;
  ParamSet updated_params;
  MarginVector lpm;
  /// Summed same-class distances between pre- and post-training prototypes.
  double lpm_dplus = 0.0;
  NormalizedPrototypeSet local_protos;
  std::size_t epochs_done = 0;
  std::size_t n_train = 0;
  bool straggler = false;
};

struct RoundResult {
  RoundState next;
  std::vector<ClientReport> reports;
  /// Weights actually used; empty when every report was dropped.
  AttentionVector attention;
};

/// K' clients drawn without replacement, sorted ascending.
std::vector<ClientId> sample_clients(const FederatedDataset& population, std::size_t k, ClientSampling weighting,
                                     std::uint64_t seed, std::size_t t);

/// floor(delta * K') of `selected` get an epoch budget drawn from {0..F-1}.
std::map<ClientId, std::size_t> assign_stragglers(std::span<const ClientId> selected, double delta,
                                                  std::size_t local_epochs, std::uint64_t seed, std::size_t t);

/// Fills in the selection and stragglers of round t.
RoundState plan_round(std::size_t t, ParamSet global_params, NormalizedPrototypeSet global_protos,
                      const SimConfig& config, const FederatedDataset& dataset);

/// One client's local update of round `state.t`.
ClientReport client_update(const RoundState& state, ClientId k, const SimConfig& config, const ModelSpec& spec,
                           const FederatedDataset& dataset);

struct ServerUpdate {
  ParamSet params;
  NormalizedPrototypeSet protos;
  AttentionVector attention;
};

/// The server side of a round. It sees only the round state and the reports;
/// dropped stragglers are excluded unless the strategy tolerates them, and
/// when nothing is left the global model and prototypes carry over.
ServerUpdate server_step(const RoundState& state, const SimConfig& config, std::span<const ClientReport> reports);

RoundResult run_round(const RoundState& state, const SimConfig& config, const ModelSpec& spec,
                      const FederatedDataset& dataset);

struct RunLog {
  std::vector<RoundRecord> records;
  ParamSet final_params;
  NormalizedPrototypeSet final_protos;
};

/// Optional hook called after each evaluated round.
using RoundCallback = std::function<void(const RoundRecord&)>;

/// Runs config.rounds_executed() rounds from a Glorot initialization seeded by
/// config.seed. MMD is only recorded when `centralized` is given.
RunLog run_simulation(const SimConfig& config, const ModelSpec& spec, const FederatedDataset& dataset,
                      const ParamSet* centralized = nullptr, const RoundCallback& on_record = {});

/// Plain SGD over the pooled training data from the same initialization.
ParamSet train_centralized(std::span<const Sample> pooled, const ModelSpec& spec, std::size_t epochs, double lr,
                           std::size_t batch_size, std::uint64_t seed);

/// The training-stream seed of one client; train_centralized uses client 0.
std::uint64_t client_train_seed(std::uint64_t run_seed, ClientId k);

}  // namespace protofed
