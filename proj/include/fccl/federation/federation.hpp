#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "fccl/data/dataset.hpp"
#include "fccl/data/partition.hpp"
#include "fccl/nn/model.hpp"
#include "fccl/nn/sgd.hpp"
#include "fccl/strategies/strategy.hpp"
#include "fccl/util/rng.hpp"

namespace fccl::federation {

enum class TeacherMode { frozen, per_round };

struct FedConfig {
  int rounds = 20;
  double fraction = 1.0;
  int epochs = 2;
  int batch = 32;
  nn::SgdConfig sgd{};
  bool warm_start = true;
  TeacherMode teacher = TeacherMode::frozen;
  int threads = 1;
};

/// Seeds of the independent streams the engine draws from.
struct Seeds {
  std::uint64_t init = 0;      // model initialization
  std::uint64_t sampling = 0;  // client selection
  std::uint64_t client = 0;    // parent of the per-client streams
};

struct FederationState {
  nn::ModelSpec spec;
  nn::ParameterVector global;
  int round = 0;
  int task = 0;
  std::optional<nn::ParameterVector> frozen_teacher;
  Seeds seeds;
};

/// Fresh state for task 0, initialized from the init stream.
FederationState make_state(const nn::ModelSpec& spec, const Seeds& seeds);

struct ClientUpdateResult {
  int client_id = 0;
  nn::ParameterVector params;
  std::size_t num_samples = 0;
  std::vector<double> loss_trace;  // mean step loss per epoch
};

/// m = max(ceil(fraction * n), 1) distinct ids by a partial Fisher-Yates
/// (position i swaps with i + index(n - i)), returned ascending.
std::vector<int> sample_clients(int num_clients, double fraction, Rng& rng);

/// One epoch's batches: shuffle with `rng`, cut into runs of `batch`. A
/// trailing run of a single sample is dropped when earlier batches exist.
std::vector<std::vector<std::size_t>> epoch_batches(std::span<const std::size_t> indices, int batch, Rng& rng);

/// Seed of client `client` in round `round` of task `task`.
std::uint64_t client_round_seed(const Seeds& seeds, int client, int task, int round);

/// Local training from `global`: fresh optimizer state, `epochs` passes of
/// shuffled batches, the strategy's loss each step, running BN statistics
/// updated from the tape of the real batch. Batch order comes from a stream
/// derived from `seed`; auxiliary draws from a separate one.
ClientUpdateResult client_update(const nn::ModelSpec& spec, const nn::ParameterVector& global,
                                 const strategies::Net* teacher, const data::LabeledDataset& dataset,
                                 const data::ClientShard& shard, const strategies::Strategy& strategy,
                                 const FedConfig& config, int task, std::uint64_t seed);

/// Sample-count weighted mean of values and BN running statistics.
nn::ParameterVector aggregate(std::span<const ClientUpdateResult> results);

struct RoundTrace {
  std::vector<int> clients;
  double mean_loss = 0.0;  // weighted by client sample count, last epoch
};

/// Called after each round with the new global model.
using RoundHook = std::function<void(const FederationState&, const RoundTrace&)>;

/// Rounds of the current task (state.task). Warm-starts from state.global
/// unless config.warm_start is off, in which case tasks after the first
/// reinitialize from the init stream.
std::vector<RoundTrace> run_task(FederationState& state, const data::LabeledDataset& dataset,
                                 const std::vector<data::ClientShard>& shards, const strategies::Strategy& strategy,
                                 const FedConfig& config, const RoundHook& hook = {});

/// Freezes the current global model as the next task's teacher and advances
/// the task counter.
void finish_task(FederationState& state);

}  // namespace fccl::federation
