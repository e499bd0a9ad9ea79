#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "fccl/nn/loss.hpp"
#include "fccl/strategies/strategy.hpp"
#include "fccl/util/error.hpp"
#include "helpers.hpp"

using namespace fccl;
using strategies::Net;

namespace {

Net linear_net(const std::vector<double>& values, int in, int out) {
  nn::ModelSpec s;
  s.input_shape = {in, 1, 1};
  s.num_outputs = out;
  s.layers = {nn::Affine{out}};
  Net n{s, nn::ParameterVector(nn::Layout::of(s))};
  std::copy(values.begin(), values.end(), n.params.values.begin());
  return n;
}

Net random_mlp(std::uint64_t seed) {
  Rng rng(seed);
  Net n{nn::make_classifier({1, 4, 4}, 3, "mlp", 2), {}};
  n.params = nn::init_params(n.spec, rng);
  return n;
}

bool close(double a, double b, double rel = 1e-10) { return std::abs(a - b) <= 1e-12 + rel * std::abs(b); }

}  // namespace

TEST_CASE("finetune loss is plain cross entropy") {
  // Logits equal the input.
  nn::ModelSpec spec;
  spec.input_shape = {3, 1, 1};
  spec.num_outputs = 3;
  spec.layers = {nn::Flatten{}};
  const nn::ParameterVector p(nn::Layout::of(spec));
  const nn::Tensor x(2, {3, 1, 1}, {1, 2, 3, 0.5, -1, 2});
  const std::vector<int> y{0, 2};
  const auto r = strategies::finetune_loss(spec, p, x, y);
  CHECK(r.loss == doctest::Approx(1.3244586305507686).epsilon(1e-14));
  CHECK(r.loss == nn::loss_ce(x.reshaped({3, 1, 1}), y));
}

TEST_CASE("lwf loss") {
  Net s = random_mlp(1);
  Net t = random_mlp(2);
  Rng rng(3);
  const auto x = test::random_tensor(5, {1, 4, 4}, rng);
  const auto y = test::random_labels(5, 3, rng);
  const auto ft = strategies::finetune_loss(s.spec, s.params, x, y);
  SUBCASE("alpha zero") {
    const auto r = strategies::lwf_loss(s.spec, s.params, &t, x, y, 0.0);
    CHECK(r.loss == ft.loss);
    CHECK(r.grad == ft.grad);
  }
  SUBCASE("identical teacher") {
    // Linear nets: train and eval mode coincide, so the KL term is exactly 0.
    Net a = linear_net({0.3, -0.2, 0.1, 0.5, 0.0, 0.2, 0.1, -0.1, 0.05}, 2, 3);
    const nn::Tensor xa(2, {2, 1, 1}, {1.0, 2.0, -1.0, 0.5});
    const std::vector<int> ya{1, 2};
    const auto r = strategies::lwf_loss(a.spec, a.params, &a, xa, ya, 5.0);
    const auto f = strategies::finetune_loss(a.spec, a.params, xa, ya);
    CHECK(r.loss == f.loss);
    CHECK(r.grad == f.grad);
  }
  SUBCASE("sum of the two terms") {
    const auto r = strategies::lwf_loss(s.spec, s.params, &t, x, y, 2.5);
    const auto logits = nn::forward(s.spec, s.params, x, nn::Mode::train);
    const auto tl = nn::forward(t.spec, t.params, x, nn::Mode::eval);
    CHECK(r.loss == doctest::Approx(nn::loss_ce(logits, y) + 2.5 * nn::loss_kl(tl, logits)).epsilon(1e-13));
  }
}

TEST_CASE("ewc fisher") {
  SUBCASE("saturated model has zero fisher") {
    Net n = linear_net({1000, 0, 0, 1000, 0, 0}, 2, 2);
    const data::LabeledDataset ds({2, 1, 1}, 2, {1, 0, 0, 1}, {0, 1});
    const std::vector<std::size_t> shard{0, 1};
    Rng rng(1);
    const auto f = strategies::ewc_fisher(n.spec, n.params, ds, shard, 3, 2, rng);
    for (double v : f.values) CHECK(v == 0.0);
    CHECK(f.anchor == n.params.values);
  }
  SUBCASE("single sample squared closed-form gradient") {
    Net n = linear_net({0.2, -0.4, 0.1, 0.3, 0.05, -0.1}, 2, 3);
    const data::LabeledDataset ds({2, 1, 1}, 3, {0.7, -1.2}, {2});
    const std::vector<std::size_t> shard{0};
    Rng rng(1);
    const auto f = strategies::ewc_fisher(n.spec, n.params, ds, shard, 4, 8, rng);
    const double u = 0.7, v = -1.2;
    const double l[3] = {0.2 * u - 0.4 * v, 0.1 * u + 0.3 * v, 0.05 * u - 0.1 * v};
    const double z = std::exp(l[0]) + std::exp(l[1]) + std::exp(l[2]);
    for (int c = 0; c < 3; ++c) {
      const double g = std::exp(l[c]) / z - (c == 2 ? 1.0 : 0.0);
      CHECK(f.values[2 * c] == doctest::Approx(g * g * u * u).epsilon(1e-13));
      CHECK(f.values[2 * c + 1] == doctest::Approx(g * g * v * v).epsilon(1e-13));
      CHECK(f.values[6 + c] == doctest::Approx(g * g).epsilon(1e-13));
    }
  }
  SUBCASE("entries are nonnegative and an empty shard gives zeros") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Net n = random_mlp(seed);
      auto ds = data::generate_toy_dataset(3, 6, {1, 4, 4}, seed);
      std::vector<std::size_t> shard(ds.size());
      std::iota(shard.begin(), shard.end(), 0);
      Rng rng(seed);
      for (double v : strategies::ewc_fisher(n.spec, n.params, ds, shard, 3, 4, rng).values) CHECK(v >= 0.0);
      const auto empty = strategies::ewc_fisher(n.spec, n.params, ds, {}, 3, 4, rng);
      CHECK(std::all_of(empty.values.begin(), empty.values.end(), [](double v) { return v == 0.0; }));
    }
  }
}

TEST_CASE("ewc loss") {
  Net n = random_mlp(4);
  Rng rng(5);
  const auto x = test::random_tensor(4, {1, 4, 4}, rng);
  const auto y = test::random_labels(4, 3, rng);
  const auto ft = strategies::finetune_loss(n.spec, n.params, x, y);
  strategies::FisherDiagonal f;
  f.values.assign(n.params.size(), 0.7);
  f.anchor = n.params.values;
  CHECK(strategies::ewc_loss(n.spec, n.params, f, x, y, 3.0).loss == ft.loss);
  std::fill(f.values.begin(), f.values.end(), 0.0);
  for (double& a : f.anchor) a += 1.0;
  const auto zero = strategies::ewc_loss(n.spec, n.params, f, x, y, 3.0);
  CHECK(zero.loss == ft.loss);
  CHECK(zero.grad == ft.grad);
  // Scalar case: F = 2 on one coordinate, theta - anchor = 3, lambda = 1.
  f.anchor = n.params.values;
  f.values[0] = 2.0;
  f.anchor[0] -= 3.0;
  const auto r = strategies::ewc_loss(n.spec, n.params, f, x, y, 1.0);
  CHECK(r.loss == doctest::Approx(ft.loss + 9.0).epsilon(1e-14));
  CHECK(r.grad[0] == doctest::Approx(ft.grad[0] + 6.0).epsilon(1e-14));
  f.values.pop_back();
  CHECK_THROWS_AS(strategies::ewc_loss(n.spec, n.params, f, x, y, 1.0), ShapeError);
}

TEST_CASE("exemplar selection") {
  auto ds = data::generate_toy_dataset(3, 10, {1, 2, 2}, 1);
  std::vector<std::size_t> all(ds.size());
  std::iota(all.begin(), all.end(), 0);
  SUBCASE("saturation") {
    Rng rng(1);
    const auto s = strategies::select_exemplars(ds, all, 50, rng);
    for (int c = 0; c < 3; ++c) CHECK(s.by_class.at(c) == ds.class_index(c));
  }
  SUBCASE("zero budget") {
    Rng rng(1);
    CHECK(strategies::select_exemplars(ds, all, 0, rng).empty());
  }
  SUBCASE("replay of the sampling stream") {
    Rng rng(9);
    const auto s = strategies::select_exemplars(ds, all, 4, rng);
    Rng ref(9);
    for (int c = 0; c < 3; ++c) {
      std::vector<std::size_t> pool = ds.class_index(c);
      for (std::size_t i = 0; i < 4; ++i) {
        const std::size_t j = i + ref.index(pool.size() - i);
        std::swap(pool[i], pool[j]);
      }
      std::vector<std::size_t> expect(pool.begin(), pool.begin() + 4);
      std::sort(expect.begin(), expect.end());
      CHECK(s.by_class.at(c) == expect);
    }
  }
}

TEST_CASE("exemplar scopes") {
  auto ds = data::generate_toy_dataset(4, 20, {1, 2, 2}, 2);
  auto split = data::split_tasks(4, 2, 1);
  auto shards = data::dirichlet_partition(ds, split.tasks[0], 0, 3, data::Concentration::dirichlet(0.3), 5);
  const auto spec = nn::make_classifier({1, 2, 2}, 4, "mlp", 2);
  Rng rng(1);
  const auto params = nn::init_params(spec, rng);
  const strategies::TaskEndContext ctx{spec, params, 0, true, split, ds, shards, 77};

  strategies::Replay local(strategies::ExemplarScope::local, 3);
  local.end_of_task(ctx);
  for (const auto& shard : shards) {
    const std::set<std::size_t> own(shard.indices.begin(), shard.indices.end());
    for (auto i : local.store(shard.client_id).all()) CHECK(own.count(i) == 1);
    for (const auto& [c, v] : local.store(shard.client_id).by_class) CHECK(v.size() <= 3);
  }
  strategies::Replay global(strategies::ExemplarScope::global, 9);
  global.end_of_task(ctx);
  CHECK(global.store(0).all() == global.store(1).all());
  CHECK(global.store(1).all() == global.store(2).all());
  CHECK(global.store(0).size() == 18);
}

TEST_CASE("replay loss") {
  Net n = random_mlp(6);
  Rng rng(7);
  const auto x = test::random_tensor(4, {1, 4, 4}, rng);
  const auto y = test::random_labels(4, 3, rng);
  const auto ft = strategies::finetune_loss(n.spec, n.params, x, y);
  const auto none = strategies::replay_loss(n.spec, n.params, x, y, nn::Tensor(), {});
  CHECK(none.loss == ft.loss);
  CHECK(none.grad == ft.grad);
  const auto doubled = strategies::replay_loss(n.spec, n.params, x, y, x, y);
  CHECK(doubled.loss == doctest::Approx(ft.loss).epsilon(1e-14));
  for (std::size_t i = 0; i < ft.grad.size(); ++i) CHECK(close(doubled.grad[i], ft.grad[i]));
  const auto ex = test::random_tensor(4, {1, 4, 4}, rng);
  const auto ey = test::random_labels(4, 3, rng);
  const auto mixed = strategies::replay_loss(n.spec, n.params, x, y, ex, ey);
  std::vector<int> all = y;
  all.insert(all.end(), ey.begin(), ey.end());
  const auto direct = strategies::finetune_loss(n.spec, n.params, nn::Tensor::concat(x, ex), all);
  CHECK(mixed.loss == direct.loss);
  CHECK(mixed.grad == direct.grad);
}

TEST_CASE("target loss") {
  Net s = random_mlp(8);
  Net t = random_mlp(9);
  Rng rng(10);
  const auto x = test::random_tensor(4, {1, 4, 4}, rng);
  const auto y = test::random_labels(4, 3, rng);
  const auto xs = test::random_tensor(4, {1, 4, 4}, rng);
  const auto ft = strategies::finetune_loss(s.spec, s.params, x, y);
  SUBCASE("alpha zero") {
    const auto r = strategies::target_loss(s.spec, s.params, &t, x, y, xs, 0.0);
    CHECK(r.loss == ft.loss);
    CHECK(r.grad == ft.grad);
    CHECK(r.extra_tapes.empty());
  }
  SUBCASE("synthetic batch feeds the running statistics after the real one") {
    REQUIRE_FALSE(s.params.running_mean.empty());
    const auto r = strategies::target_loss(s.spec, s.params, &t, x, y, xs, 4.0);
    REQUIRE(r.extra_tapes.size() == 1);
    auto got = s.params;
    nn::update_running_stats(got, r.tape);
    nn::update_running_stats(got, r.extra_tapes[0]);
    auto expect = s.params;
    nn::update_running_stats(expect, nn::forward_tape(s.spec, s.params, x, nn::Mode::train));
    nn::update_running_stats(expect, nn::forward_tape(s.spec, s.params, xs, nn::Mode::train));
    CHECK(got.running_mean == expect.running_mean);
    CHECK(got.running_var == expect.running_var);
  }
  SUBCASE("identical teacher") {
    Net a = linear_net({0.3, -0.2, 0.1, 0.5, 0.0, 0.2, 0.1, -0.1, 0.05}, 2, 3);
    const nn::Tensor xa(2, {2, 1, 1}, {1.0, 2.0, -1.0, 0.5});
    const nn::Tensor xsa(3, {2, 1, 1}, {0.1, 0.2, 0.3, -0.4, 2.0, 1.0});
    const std::vector<int> ya{1, 2};
    const auto r = strategies::target_loss(a.spec, a.params, &a, xa, ya, xsa, 7.0);
    const auto f = strategies::finetune_loss(a.spec, a.params, xa, ya);
    CHECK(r.loss == f.loss);
    CHECK(r.grad == f.grad);
  }
  SUBCASE("sum of the two terms") {
    const auto r = strategies::target_loss(s.spec, s.params, &t, x, y, xs, 4.0);
    const double ce = nn::loss_ce(nn::forward(s.spec, s.params, x, nn::Mode::train), y);
    const double kl = nn::loss_kl(nn::forward(t.spec, t.params, xs, nn::Mode::eval),
                                  nn::forward(s.spec, s.params, xs, nn::Mode::train));
    CHECK(r.loss == doctest::Approx(ce + 4.0 * kl).epsilon(1e-13));
    // Gradient is the sum of the two parts' gradients.
    const auto kd = nn::grad(s.spec, s.params, [&](const nn::Tensor& l) {
      auto k = nn::kl_with_grad(nn::forward(t.spec, t.params, xs, nn::Mode::eval), l);
      return nn::LossGrad{k.value, k.student_grad};
    }, xs);
    for (std::size_t i = 0; i < r.grad.size(); ++i) {
      CHECK(close(r.grad[i], ft.grad[i] + 4.0 * kd.grads.params[i]));
    }
  }
  SUBCASE("no synthetic batch") {
    const auto r = strategies::target_loss(s.spec, s.params, &t, x, y, nn::Tensor(), 4.0);
    CHECK(r.grad == ft.grad);
  }
}

TEST_CASE("strategy factory") {
  strategies::StrategyOptions o;
  for (const auto& name : strategies::strategy_names()) CHECK(strategies::make_strategy(name, o)->name() == name);
  CHECK_THROWS_AS(strategies::make_strategy("fedweit", o), ConfigError);
}

TEST_CASE("teacher is required after the first task") {
  Net n = random_mlp(1);
  auto ds = data::generate_toy_dataset(3, 2, {1, 4, 4}, 1);
  Rng rng(1);
  const auto x = test::random_tensor(2, {1, 4, 4}, rng);
  const std::vector<int> y{0, 1};
  Rng aux(2);
  const strategies::StepContext ctx{n.spec, n.params, nullptr, ds, x, y, 1, 0, aux};
  CHECK_THROWS_AS(strategies::FedLwF(1.0).step(ctx), ConfigError);
  CHECK_THROWS_AS(strategies::Target({}).step(ctx), ConfigError);
  CHECK_NOTHROW(strategies::Finetune().step(ctx));
}
