#include "fccl/federation/federation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <numeric>
#include <thread>

#include "fccl/util/error.hpp"
#include "fccl/util/log.hpp"

namespace fccl::federation {

FederationState make_state(const nn::ModelSpec& spec, const Seeds& seeds) {
  FederationState s;
  s.spec = spec;
  Rng rng(seeds.init);
  s.global = nn::init_params(spec, rng);
  s.seeds = seeds;
  return s;
}

std::vector<int> sample_clients(int num_clients, double fraction, Rng& rng) {
  if (num_clients < 1) throw ConfigError("need at least one client");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("fed.fraction must be in (0, 1]");
  const auto n = static_cast<std::size_t>(num_clients);
  const auto m = std::clamp<std::size_t>(static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n))), 1, n);
  std::vector<int> ids(n);
  std::iota(ids.begin(), ids.end(), 0);
  for (std::size_t i = 0; i < m; ++i) std::swap(ids[i], ids[i + rng.index(n - i)]);
  ids.resize(m);
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::span<const std::size_t> indices, int batch, Rng& rng) {
  if (batch < 1) throw ConfigError("fed.batch must be >= 1");
  std::vector<std::size_t> order(indices.begin(), indices.end());
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<std::vector<std::size_t>> out;
  const auto b = static_cast<std::size_t>(batch);
  for (std::size_t start = 0; start < order.size(); start += b) {
    const std::size_t end = std::min(order.size(), start + b);
    if (end - start == 1 && !out.empty()) break;
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

std::uint64_t client_round_seed(const Seeds& seeds, int client, int task, int round) {
  std::uint64_t s = derive_seed(seeds.client, static_cast<std::uint64_t>(client));
  s = derive_seed(s, static_cast<std::uint64_t>(task));
  return derive_seed(s, static_cast<std::uint64_t>(round));
}

ClientUpdateResult client_update(const nn::ModelSpec& spec, const nn::ParameterVector& global,
                                 const strategies::Net* teacher, const data::LabeledDataset& dataset,
                                 const data::ClientShard& shard, const strategies::Strategy& strategy,
                                 const FedConfig& config, int task, std::uint64_t seed) {
  ClientUpdateResult result;
  result.client_id = shard.client_id;
  result.params = global;
  result.num_samples = shard.indices.size();
  if (shard.indices.empty()) {
    log::info("client " + std::to_string(shard.client_id) + " has no data for task " + std::to_string(task));
    return result;
  }
  Rng order(derive_seed(seed, "order"));
  Rng aux(derive_seed(seed, "aux"));
  nn::SgdState opt;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double total = 0.0;
    std::size_t steps = 0;
    for (const auto& rows : epoch_batches(shard.indices, config.batch, order)) {
      const nn::Tensor x = dataset.inputs(rows);
      const std::vector<int> y = dataset.labels(rows);
      const strategies::StepContext ctx{spec, result.params, teacher, dataset, x, y, task, shard.client_id, aux};
      const strategies::StepResult step = strategy.step(ctx);
      if (!std::isfinite(step.loss)) {
        throw NumericError("client " + std::to_string(shard.client_id) + " produced a non-finite loss");
      }
      nn::update_running_stats(result.params, step.tape);
      for (const auto& t : step.extra_tapes) nn::update_running_stats(result.params, t);
      nn::sgd_step(result.params, step.grad, config.sgd, opt);
      total += step.loss;
      ++steps;
    }
    result.loss_trace.push_back(steps > 0 ? total / static_cast<double>(steps) : 0.0);
  }
  return result;
}

nn::ParameterVector aggregate(std::span<const ClientUpdateResult> results) {
  if (results.empty()) throw DataError(DataError::Kind::invalid_argument, "nothing to aggregate");
  std::size_t total = 0;
  for (const auto& r : results) {
    if (!r.params.same_layout(results.front().params)) {
      throw ShapeError("client parameter layouts differ");
    }
    total += r.num_samples;
  }
  if (total == 0) throw DataError(DataError::Kind::invalid_argument, "all sampled clients have zero samples");
  // Weighted mean written as an offset from the first contributor, then held
  // inside the clients' range so rounding can never leave it.
  const double n = static_cast<double>(total);
  std::vector<std::pair<double, const nn::ParameterVector*>> parts;
  for (const auto& r : results) {
    if (r.num_samples > 0) parts.emplace_back(static_cast<double>(r.num_samples) / n, &r.params);
  }
  nn::ParameterVector out = *parts.front().second;
  auto mix = [&](std::vector<double> nn::ParameterVector::*field) {
    std::vector<double>& dst = out.*field;
    for (std::size_t i = 0; i < dst.size(); ++i) {
      const double base = (*parts.front().second.*field)[i];
      double lo = base, hi = base, acc = 0.0;
      for (const auto& [w, p] : parts) {
        const double v = (p->*field)[i];
        acc += w * (v - base);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      dst[i] = std::clamp(base + acc, lo, hi);
    }
  };
  mix(&nn::ParameterVector::values);
  mix(&nn::ParameterVector::running_mean);
  mix(&nn::ParameterVector::running_var);
  return out;
}

std::vector<RoundTrace> run_task(FederationState& state, const data::LabeledDataset& dataset,
                                 const std::vector<data::ClientShard>& shards, const strategies::Strategy& strategy,
                                 const FedConfig& config, const RoundHook& hook) {
  const int task = state.task;
  state.round = 0;
  if (task > 0 && !config.warm_start) {
    Rng rng(derive_seed(state.seeds.init, static_cast<std::uint64_t>(task)));
    state.global = nn::init_params(state.spec, rng);
  }
  if (task > 0 && config.teacher == TeacherMode::frozen && !state.frozen_teacher) {
    throw ConfigError("no frozen teacher for task " + std::to_string(task));
  }
  Rng sampler(derive_seed(state.seeds.sampling, static_cast<std::uint64_t>(task)));
  std::vector<RoundTrace> traces;
  for (int round = 0; round < config.rounds; ++round) {
    RoundTrace trace;
    trace.clients = sample_clients(static_cast<int>(shards.size()), config.fraction, sampler);
    std::optional<strategies::Net> teacher;
    if (task > 0) {
      teacher = strategies::Net{state.spec, config.teacher == TeacherMode::frozen ? *state.frozen_teacher : state.global};
    }
    const strategies::Net* tp = teacher ? &*teacher : nullptr;
    std::vector<ClientUpdateResult> results(trace.clients.size());
    auto work = [&](std::size_t k) {
      const auto& shard = shards[static_cast<std::size_t>(trace.clients[k])];
      results[k] = client_update(state.spec, state.global, tp, dataset, shard, strategy, config, task,
                                 client_round_seed(state.seeds, shard.client_id, task, round));
    };
    const auto workers = static_cast<std::size_t>(std::max(1, config.threads));
    if (workers == 1 || results.size() == 1) {
      for (std::size_t k = 0; k < results.size(); ++k) work(k);
    } else {
      std::atomic<std::size_t> next{0};
      std::vector<std::exception_ptr> errors(results.size());
      std::vector<std::thread> pool;
      for (std::size_t w = 0; w < std::min(workers, results.size()); ++w) {
        pool.emplace_back([&] {
          for (std::size_t k; (k = next.fetch_add(1)) < results.size();) {
            try {
              work(k);
            } catch (...) {
              errors[k] = std::current_exception();
            }
          }
        });
      }
      for (auto& t : pool) t.join();
      for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
      }
    }
    bool any = false;
    double loss = 0.0;
    double weight = 0.0;
    for (const auto& r : results) {
      if (r.num_samples == 0) continue;
      any = true;
      if (!r.loss_trace.empty()) {
        loss += static_cast<double>(r.num_samples) * r.loss_trace.back();
        weight += static_cast<double>(r.num_samples);
      }
    }
    if (any) {
      state.global = aggregate(results);
    } else {
      log::warn("round " + std::to_string(round) + " of task " + std::to_string(task) +
                ": no sampled client has data; global model unchanged");
    }
    trace.mean_loss = weight > 0.0 ? loss / weight : 0.0;
    state.round = round + 1;
    traces.push_back(trace);
    if (hook) hook(state, trace);
  }
  return traces;
}

void finish_task(FederationState& state) {
  state.frozen_teacher = state.global;
  ++state.task;
  state.round = 0;
}

}  // namespace fccl::federation
