#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "fccl/federation/federation.hpp"
#include "fccl/nn/loss.hpp"
#include "fccl/util/error.hpp"
#include "helpers.hpp"

using namespace fccl;
using federation::ClientUpdateResult;
using federation::FedConfig;

namespace {

nn::ModelSpec linear_spec(int in, int out) {
  nn::ModelSpec s;
  s.input_shape = {in, 1, 1};
  s.num_outputs = out;
  s.layers = {nn::Affine{out}};
  return s;
}

ClientUpdateResult scalar_result(double v, std::size_t n) {
  nn::ModelSpec s = linear_spec(1, 1);
  ClientUpdateResult r;
  r.params = nn::ParameterVector(nn::Layout::of(s));
  r.params.values = {v, 0.0};
  r.num_samples = n;
  return r;
}

struct Toy {
  data::LabeledDataset train;
  data::TaskSplit split;
  nn::ModelSpec spec;
};

Toy toy(int classes = 4, int per_class = 24) {
  Toy t;
  t.train = data::generate_toy_dataset(classes, per_class, {1, 8, 8}, 3);
  t.split = data::split_tasks(classes, 2, 1);
  t.spec = nn::make_classifier({1, 8, 8}, classes, "cnn", 4);
  return t;
}

FedConfig small_config() {
  FedConfig c;
  c.rounds = 2;
  c.epochs = 1;
  c.batch = 8;
  c.sgd = {0.05, 0.9, 5e-4};
  return c;
}

}  // namespace

TEST_CASE("client sampling") {
  Rng rng(1);
  CHECK(federation::sample_clients(5, 1.0, rng) == std::vector<int>{0, 1, 2, 3, 4});
  CHECK(federation::sample_clients(5, 1e-9, rng).size() == 1);
  CHECK_THROWS_AS(federation::sample_clients(5, 0.0, rng), ConfigError);
  CHECK_THROWS_AS(federation::sample_clients(5, 1.5, rng), ConfigError);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng a(seed);
    const auto got = federation::sample_clients(5, 0.4, a);
    // Independent partial Fisher-Yates on the raw engine output.
    std::mt19937_64 eng(seed);
    std::vector<int> ids{0, 1, 2, 3, 4};
    for (std::size_t i = 0; i < 2; ++i) {
      const double u = static_cast<double>(eng() >> 11) * 0x1.0p-53;
      const auto j = i + static_cast<std::size_t>(u * static_cast<double>(5 - i));
      std::swap(ids[i], ids[j]);
    }
    std::vector<int> expect(ids.begin(), ids.begin() + 2);
    std::sort(expect.begin(), expect.end());
    CHECK(got == expect);
  }
}

TEST_CASE("epoch batches cover the shard") {
  std::vector<std::size_t> idx(21);
  std::iota(idx.begin(), idx.end(), 100);
  Rng rng(2);
  const auto b = federation::epoch_batches(idx, 5, rng);
  CHECK(b.size() == 4);  // 5,5,5,5 and the single leftover dropped
  std::vector<std::size_t> seen;
  for (const auto& v : b) seen.insert(seen.end(), v.begin(), v.end());
  CHECK(seen.size() == 20);
  Rng rng2(2);
  const auto tiny = federation::epoch_batches(std::vector<std::size_t>{7}, 5, rng2);
  REQUIRE(tiny.size() == 1);
  CHECK(tiny[0] == std::vector<std::size_t>{7});
}

TEST_CASE("aggregation arithmetic") {
  const std::vector<ClientUpdateResult> same{scalar_result(1.25, 3), scalar_result(1.25, 7), scalar_result(1.25, 1)};
  CHECK(federation::aggregate(same).values[0] == 1.25);
  const std::vector<ClientUpdateResult> sym{scalar_result(0.7, 4), scalar_result(-0.7, 4)};
  CHECK(federation::aggregate(sym).values[0] == 0.0);
  const std::vector<ClientUpdateResult> three{scalar_result(3, 1), scalar_result(6, 2), scalar_result(12, 3)};
  CHECK(federation::aggregate(three).values[0] == doctest::Approx(8.5).epsilon(1e-15));
  const std::vector<ClientUpdateResult> none{scalar_result(1, 0), scalar_result(2, 0)};
  CHECK_THROWS_AS(federation::aggregate(none), DataError);
  std::vector<ClientUpdateResult> mixed{scalar_result(1, 1)};
  mixed.push_back(mixed[0]);
  mixed[1].params = nn::ParameterVector(nn::Layout::of(linear_spec(2, 1)));
  CHECK_THROWS_AS(federation::aggregate(mixed), ShapeError);
}

TEST_CASE("aggregation matches an independent weighted mean and stays convex") {
  const auto spec = nn::make_classifier({1, 4, 4}, 3, "mlp", 2);
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t k = 1 + rng.index(6);
    std::vector<ClientUpdateResult> rs(k);
    for (auto& r : rs) {
      r.params = nn::init_params(spec, rng);
      for (double& v : r.params.values) v = rng.uniform(-2, 2);
      for (double& v : r.params.running_mean) v = rng.uniform(-1, 1);
      for (double& v : r.params.running_var) v = rng.uniform(0, 3);
      r.num_samples = rng.index(50);
    }
    rs[0].num_samples += 1;
    const auto agg = federation::aggregate(rs);
    double n = 0;
    for (const auto& r : rs) n += static_cast<double>(r.num_samples);
    for (std::size_t i = 0; i < agg.values.size(); ++i) {
      double s = 0, lo = 1e9, hi = -1e9;
      for (const auto& r : rs) {
        s += static_cast<double>(r.num_samples) * r.params.values[i];
        if (r.num_samples > 0) {
          lo = std::min(lo, r.params.values[i]);
          hi = std::max(hi, r.params.values[i]);
        }
      }
      CHECK(std::abs(agg.values[i] - s / n) <= 1e-12);
      CHECK(agg.values[i] >= lo);
      CHECK(agg.values[i] <= hi);
    }
    for (std::size_t i = 0; i < agg.running_var.size(); ++i) {
      double s = 0;
      for (const auto& r : rs) s += static_cast<double>(r.num_samples) * r.params.running_var[i];
      CHECK(std::abs(agg.running_var[i] - s / n) <= 1e-12);
      CHECK(agg.running_var[i] >= 0.0);
    }
  }
}

TEST_CASE("client update with no work") {
  auto t = toy();
  Rng rng(1);
  const auto global = nn::init_params(t.spec, rng);
  auto shards = data::dirichlet_partition(t.train, t.split.tasks[0], 0, 2, data::Concentration::iid_split(), 1);
  strategies::Finetune ft;
  FedConfig c = small_config();
  c.epochs = 0;
  auto r = federation::client_update(t.spec, global, nullptr, t.train, shards[0], ft, c, 0, 5);
  CHECK(r.params.values == global.values);
  CHECK(r.loss_trace.empty());
  CHECK(r.num_samples == shards[0].indices.size());
  data::ClientShard empty{3, 0, {}};
  c.epochs = 2;
  auto e = federation::client_update(t.spec, global, nullptr, t.train, empty, ft, c, 0, 5);
  CHECK(e.num_samples == 0);
  CHECK(e.params.values == global.values);
}

TEST_CASE("target with zero alpha or empty memory matches finetune") {
  auto t = toy();
  Rng rng(2);
  const auto global = nn::init_params(t.spec, rng);
  Rng trng(3);
  const strategies::Net teacher{t.spec, nn::init_params(t.spec, trng)};
  auto shards = data::dirichlet_partition(t.train, t.split.tasks[1], 1, 2, data::Concentration::dirichlet(0.5), 1);
  strategies::Finetune ft;
  strategies::TargetOptions zero;
  zero.alpha = 0.0;
  strategies::Target target(zero);
  inversion::SyntheticMemory m;
  m.shape = {1, 8, 8};
  m.capacity = 16;
  m.add(test::random_tensor(16, {1, 8, 8}, rng, 0.0, 1.0));
  target.set_memory(m);
  strategies::TargetOptions strong;
  strong.alpha = 50.0;
  strategies::Target no_memory(strong);
  const FedConfig c = small_config();
  for (const auto& shard : shards) {
    const auto a = federation::client_update(t.spec, global, &teacher, t.train, shard, ft, c, 1, 9);
    const auto b = federation::client_update(t.spec, global, &teacher, t.train, shard, target, c, 1, 9);
    const auto d = federation::client_update(t.spec, global, &teacher, t.train, shard, no_memory, c, 1, 9);
    CHECK(a.params.values == b.params.values);
    CHECK(a.params.running_mean == b.params.running_mean);
    CHECK(a.params.values == d.params.values);
  }
}

TEST_CASE("single step closed form") {
  // Linear 2 -> 3 model, one sample, one step, no momentum history, no decay.
  const auto spec = linear_spec(2, 3);
  nn::ParameterVector global(nn::Layout::of(spec));
  global.values = {0.2, -0.1, 0.4, 0.3, -0.5, 0.1, 0.05, 0.0, -0.05};
  const strategies::Net teacher{spec, [&] {
                                  nn::ParameterVector p(nn::Layout::of(spec));
                                  p.values = {1.0, 0.0, 0.0, 1.0, 0.5, 0.5, 0.0, 0.1, 0.2};
                                  return p;
                                }()};
  const data::LabeledDataset ds({2, 1, 1}, 3, {0.6, -0.9}, {1});
  const data::ClientShard shard{0, 1, {0}};
  inversion::SyntheticMemory m;
  m.shape = {2, 1, 1};
  m.capacity = 1;
  m.add(nn::Tensor(1, {2, 1, 1}, {0.3, 0.8}));
  const double alpha = 2.0;
  strategies::TargetOptions opt;
  opt.alpha = alpha;
  strategies::Target target(opt);
  target.set_memory(m);
  FedConfig c;
  c.epochs = 1;
  c.batch = 1;
  c.sgd = {0.1, 0.9, 0.0};
  const auto r = federation::client_update(spec, global, &teacher, ds, shard, target, c, 1, 4);

  auto logits = [](const std::vector<double>& w, double u, double v) {
    return std::vector<double>{w[0] * u + w[1] * v + w[6], w[2] * u + w[3] * v + w[7], w[4] * u + w[5] * v + w[8]};
  };
  auto soft = [](std::vector<double> l) {
    const double m = *std::max_element(l.begin(), l.end());
    double z = 0;
    for (double& v : l) z += (v = std::exp(v - m));
    for (double& v : l) v /= z;
    return l;
  };
  const auto p = soft(logits(global.values, 0.6, -0.9));
  const auto q = soft(logits(global.values, 0.3, 0.8));
  const auto pt = soft(logits(teacher.params.values, 0.3, 0.8));
  for (int k = 0; k < 3; ++k) {
    const double gce = p[k] - (k == 1 ? 1.0 : 0.0);
    const double gkl = q[k] - pt[k];
    CHECK(r.params.values[2 * k] == doctest::Approx(global.values[2 * k] - 0.1 * (gce * 0.6 + alpha * gkl * 0.3)).epsilon(1e-14));
    CHECK(r.params.values[2 * k + 1] == doctest::Approx(global.values[2 * k + 1] - 0.1 * (gce * -0.9 + alpha * gkl * 0.8)).epsilon(1e-14));
    CHECK(r.params.values[6 + k] == doctest::Approx(global.values[6 + k] - 0.1 * (gce + alpha * gkl)).epsilon(1e-14));
  }
}

TEST_CASE("one client federation equals centralized training") {
  auto t = toy();
  auto shards = data::dirichlet_partition(t.train, t.split.tasks[0], 0, 1, data::Concentration::iid_split(), 2);
  const federation::Seeds seeds{11, 12, 13};
  auto state = federation::make_state(t.spec, seeds);
  const auto start = state.global;
  FedConfig c = small_config();
  c.rounds = 3;
  c.epochs = 2;
  strategies::Finetune ft;
  federation::run_task(state, t.train, shards, ft, c);

  // Centralized replay: same batches, optimizer reset at each round boundary.
  nn::ParameterVector p = start;
  for (int round = 0; round < 3; ++round) {
    const auto seed = federation::client_round_seed(seeds, 0, 0, round);
    Rng order(derive_seed(seed, "order"));
    nn::SgdState opt;
    for (int e = 0; e < 2; ++e) {
      for (const auto& rows : federation::epoch_batches(shards[0].indices, c.batch, order)) {
        const auto y = t.train.labels(rows);
        auto g = nn::grad(t.spec, p, [&](const nn::Tensor& l) { return nn::ce_with_grad(l, y); }, t.train.inputs(rows));
        nn::update_running_stats(p, g.tape);
        nn::sgd_step(p, g.grads.params, c.sgd, opt);
      }
    }
  }
  CHECK(state.global.values == p.values);
  CHECK(state.global.running_var == p.running_var);
}

TEST_CASE("zero rounds leave the model unchanged") {
  auto t = toy();
  auto shards = data::dirichlet_partition(t.train, t.split.tasks[0], 0, 3, data::Concentration::iid_split(), 2);
  auto state = federation::make_state(t.spec, {1, 2, 3});
  const auto before = state.global.values;
  FedConfig c = small_config();
  c.rounds = 0;
  strategies::Finetune ft;
  CHECK(federation::run_task(state, t.train, shards, ft, c).empty());
  CHECK(state.global.values == before);
}

TEST_CASE("two clients two rounds match a sequential replay") {
  auto t = toy();
  auto shards = data::dirichlet_partition(t.train, t.split.tasks[0], 0, 2, data::Concentration::dirichlet(1.0), 4);
  const federation::Seeds seeds{21, 22, 23};
  auto state = federation::make_state(t.spec, seeds);
  FedConfig c = small_config();
  c.fraction = 0.5;
  strategies::Finetune ft;
  const auto start = state.global;
  federation::run_task(state, t.train, shards, ft, c);

  nn::ParameterVector w = start;
  Rng sampler(derive_seed(seeds.sampling, std::uint64_t{0}));
  for (int round = 0; round < 2; ++round) {
    const auto ids = federation::sample_clients(2, 0.5, sampler);
    std::vector<ClientUpdateResult> rs;
    for (int id : ids) {
      rs.push_back(federation::client_update(t.spec, w, nullptr, t.train, shards[static_cast<std::size_t>(id)], ft, c,
                                             0, federation::client_round_seed(seeds, id, 0, round)));
    }
    w = federation::aggregate(rs);
  }
  CHECK(state.global.values == w.values);
}

TEST_CASE("concurrent clients give bitwise-identical results") {
  auto t = toy();
  auto shards = data::dirichlet_partition(t.train, t.split.tasks[0], 0, 4, data::Concentration::dirichlet(0.5), 4);
  strategies::Finetune ft;
  FedConfig c = small_config();
  c.rounds = 2;
  auto seq = federation::make_state(t.spec, {5, 6, 7});
  auto par = seq;
  federation::run_task(seq, t.train, shards, ft, c);
  c.threads = 4;
  federation::run_task(par, t.train, shards, ft, c);
  CHECK(seq.global.values == par.global.values);
  CHECK(seq.global.running_mean == par.global.running_mean);
}

TEST_CASE("teacher bookkeeping") {
  auto t = toy();
  auto state = federation::make_state(t.spec, {1, 2, 3});
  CHECK_FALSE(state.frozen_teacher.has_value());
  auto shards = data::dirichlet_partition(t.train, t.split.tasks[1], 1, 2, data::Concentration::iid_split(), 2);
  strategies::Finetune ft;
  FedConfig c = small_config();
  state.task = 1;
  CHECK_THROWS_AS(federation::run_task(state, t.train, shards, ft, c), ConfigError);
  state.task = 0;
  federation::finish_task(state);
  CHECK(state.task == 1);
  REQUIRE(state.frozen_teacher.has_value());
  CHECK(state.frozen_teacher->values == state.global.values);
  const auto frozen = *state.frozen_teacher;
  federation::run_task(state, t.train, shards, ft, c);
  CHECK(state.frozen_teacher->values == frozen.values);
  CHECK(state.global.values != frozen.values);
}

TEST_CASE("cold start reinitializes later tasks") {
  auto t = toy();
  auto state = federation::make_state(t.spec, {1, 2, 3});
  federation::finish_task(state);
  FedConfig c = small_config();
  c.rounds = 0;
  c.warm_start = false;
  strategies::Finetune ft;
  auto shards = data::dirichlet_partition(t.train, t.split.tasks[1], 1, 2, data::Concentration::iid_split(), 2);
  const auto before = state.global.values;
  federation::run_task(state, t.train, shards, ft, c);
  CHECK(state.global.values != before);
}

TEST_CASE("every strategy reduces to finetune on the first task") {
  auto t = toy();
  auto shards = data::dirichlet_partition(t.train, t.split.tasks[0], 0, 3, data::Concentration::dirichlet(0.5), 8);
  FedConfig c = small_config();
  strategies::StrategyOptions opts;
  opts.num_clients = 3;
  auto reference = federation::make_state(t.spec, {31, 32, 33});
  strategies::Finetune ft;
  federation::run_task(reference, t.train, shards, ft, c);
  for (const auto& name : strategies::strategy_names()) {
    CAPTURE(name);
    auto strategy = strategies::make_strategy(name, opts);
    auto state = federation::make_state(t.spec, {31, 32, 33});
    federation::run_task(state, t.train, shards, *strategy, c);
    CHECK(state.global.values == reference.global.values);
    CHECK(state.global.running_mean == reference.global.running_mean);
  }
}
