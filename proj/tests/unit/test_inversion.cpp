#include <cmath>

#include "doctest.h"
#include "fccl/inversion/inversion.hpp"
#include "fccl/nn/loss.hpp"
#include "fccl/util/error.hpp"
#include "helpers.hpp"

using namespace fccl;
using inversion::Net;

namespace {

// Small BN-bearing teacher with perturbed running statistics. Tanh keeps the
// finite-difference checks away from activation kinks.
Net bn_teacher(std::uint64_t seed, int classes = 4) {
  Rng rng(seed);
  nn::ModelSpec spec;
  spec.input_shape = {1, 8, 8};
  spec.num_outputs = classes;
  spec.layers = {nn::Conv{3, 3, 1, 1}, nn::BatchNorm{}, nn::Tanh{}, nn::Conv{4, 3, 2, 1}, nn::BatchNorm{},
                 nn::Tanh{},          nn::Flatten{},   nn::Affine{6}, nn::BatchNorm{},   nn::Tanh{},
                 nn::Affine{classes}};
  Net t{spec, {}};
  t.params = nn::init_params(t.spec, rng);
  for (double& v : t.params.values) v += rng.uniform(-0.2, 0.2);
  for (double& m : t.params.running_mean) m = rng.uniform(-0.5, 0.5);
  for (double& v : t.params.running_var) v = rng.uniform(0.5, 1.5);
  return t;
}

nn::ModelSpec linear_spec(int in, int out) {
  nn::ModelSpec s;
  s.input_shape = {in, 1, 1};
  s.num_outputs = out;
  s.layers = {nn::Affine{out}};
  return s;
}

Net linear_net(const std::vector<double>& weights, int in, int out) {
  Net n{linear_spec(in, out), {}};
  n.params = nn::ParameterVector(nn::Layout::of(n.spec));
  std::copy(weights.begin(), weights.end(), n.params.values.begin());
  return n;
}

double ratio_vs_fd(nn::Tensor x, const std::function<inversion::InputLoss(const nn::Tensor&)>& f) {
  const auto analytic = f(x).input_grad;
  auto numeric = test::central_differences(x.storage(), [&] { return f(x).value; });
  return test::worst_gradient_ratio(std::vector<double>(analytic.values().begin(), analytic.values().end()),
                                    numeric);
}

}  // namespace

TEST_CASE("ce loss of a uniform teacher is log of the class count") {
  Net t{nn::make_classifier({1, 8, 8}, 4, "mlp", 4), {}};
  Rng rng(1);
  t.params = nn::init_params(t.spec, rng);
  // Zero the last affine layer so every logit is 0.
  auto last = t.params.layer(t.spec.layers.size() - 1);
  std::fill(last.begin(), last.end(), 0.0);
  const auto x = test::random_tensor(5, {1, 8, 8}, rng);
  const std::vector<int> y{0, 1, 2, 3, 0};
  const std::vector<int> trained{0, 1, 2, 3};
  CHECK(inversion::gen_ce_loss(t, x, y, trained).value == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  const std::vector<int> partial{0, 1};
  CHECK_THROWS_AS(inversion::gen_ce_loss(t, x, y, partial), ShapeError);
}

TEST_CASE("ce loss near zero when saturated and equal to the composed loss") {
  Net t = linear_net({50, 0, 0, 50}, 2, 2);
  nn::Tensor x(2, {2, 1, 1}, {1.0, 0.0, 0.0, 1.0});
  const std::vector<int> y{0, 1};
  const std::vector<int> trained{0, 1};
  CHECK(inversion::gen_ce_loss(t, x, y, trained).value < 1e-20);

  Net b = bn_teacher(3);
  Rng rng(4);
  const auto xb = test::random_tensor(6, {1, 8, 8}, rng);
  const std::vector<int> yb{0, 3, 1, 2, 2, 1};
  const std::vector<int> all{0, 1, 2, 3};
  const double expect = nn::loss_ce(nn::forward(b.spec, b.params, xb, nn::Mode::eval), yb);
  CHECK(inversion::gen_ce_loss(b, xb, yb, all).value == doctest::Approx(expect).epsilon(1e-14));
}

TEST_CASE("div loss") {
  Net t = linear_net({1, -1, 0.5, 2, 0, 1}, 2, 3);
  nn::Tensor x(3, {2, 1, 1}, {1.0, 0.2, -0.5, 1.0, 0.3, -0.8});
  SUBCASE("identical student gives zero") {
    CHECK(inversion::gen_div_loss(t, t, x).value == 0.0);
  }
  SUBCASE("all samples disagree") {
    // One sample, teacher picks class 0, student class 2.
    Net a = linear_net({1, 0, 0, 0, 0, 0}, 2, 3);
    Net s = linear_net({0, 0, 0, 0, 1, 0}, 2, 3);
    nn::Tensor x1(1, {2, 1, 1}, {2.0, 0.0});
    const double d = nn::loss_kl(nn::forward(a.spec, a.params, x1, nn::Mode::eval),
                                 nn::forward(s.spec, s.params, x1, nn::Mode::eval));
    CHECK(d > 0.0);
    CHECK(inversion::gen_div_loss(a, s, x1).value == doctest::Approx(-d).epsilon(1e-14));
  }
  SUBCASE("mixed batch matches a per-sample computation") {
    Net s = linear_net({1, -1, 0.6, 1.8, 4, 0.2}, 2, 3);
    double expect = 0.0;
    int disagree = 0;
    for (std::size_t i = 0; i < 3; ++i) {
      const double u = x(i, 0), v = x(i, 1);
      const double tl[3] = {u - v, 0.5 * u + 2 * v, v};
      const double sl[3] = {u - v, 0.6 * u + 1.8 * v, 4 * u + 0.2 * v};
      auto argmax3 = [](const double* l) { return l[0] >= l[1] && l[0] >= l[2] ? 0 : (l[1] >= l[2] ? 1 : 2); };
      if (argmax3(tl) == argmax3(sl)) continue;
      ++disagree;
      double zt = 0, zs = 0;
      for (int c = 0; c < 3; ++c) {
        zt += std::exp(tl[c]);
        zs += std::exp(sl[c]);
      }
      for (int c = 0; c < 3; ++c) {
        const double p = std::exp(tl[c]) / zt, q = std::exp(sl[c]) / zs;
        expect += p * std::log(p / q);
      }
    }
    REQUIRE(disagree == 1);
    CHECK(inversion::gen_div_loss(t, s, x).value == doctest::Approx(-expect / 3.0).epsilon(1e-12));
  }
}

TEST_CASE("bn loss") {
  // One-feature BN teacher.
  nn::ModelSpec spec;
  spec.input_shape = {1, 1, 1};
  spec.num_outputs = 2;
  spec.layers = {nn::BatchNorm{}, nn::Affine{2}};
  Rng rng(2);
  Net t{spec, nn::init_params(spec, rng)};
  SUBCASE("matched statistics") {
    t.params.running_mean[0] = 0.7;
    t.params.running_var[0] = 0.25;
    nn::Tensor x(2, {1, 1, 1}, {0.2, 1.2});
    CHECK(inversion::gen_bn_loss(t, x).value == doctest::Approx(0.0).epsilon(1e-15));
  }
  SUBCASE("scalar norms") {
    t.params.running_mean[0] = 0.0;
    t.params.running_var[0] = 1.0;
    nn::Tensor x(2, {1, 1, 1}, {1.0 - std::sqrt(2.0), 1.0 + std::sqrt(2.0)});
    CHECK(inversion::gen_bn_loss(t, x).value == doctest::Approx(2.0).epsilon(1e-14));
  }
  SUBCASE("no batch norm") {
    Net lin = linear_net({1, 0, 0, 1}, 2, 2);
    CHECK_THROWS_AS(inversion::gen_bn_loss(lin, nn::Tensor(2, {2, 1, 1})), ConfigError);
  }
}

TEST_CASE("bn loss matches recomputed activation statistics") {
  Net t = bn_teacher(5);
  Rng rng(6);
  const auto x = test::random_tensor(7, {1, 8, 8}, rng, 0.0, 1.0);
  const auto tape = nn::forward_tape(t.spec, t.params, x, nn::Mode::eval);
  double expect = 0.0;
  for (std::size_t l = 0; l < t.params.layout.layers.size(); ++l) {
    const auto& ll = t.params.layout.layers[l];
    if (ll.kind != nn::LayerKind::batch_norm) continue;
    const auto& a = tape.input_of(l);
    const auto channels = static_cast<std::size_t>(ll.in.channels);
    const std::size_t plane = a.sample_size() / channels;
    double dm = 0.0, dv = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      double s = 0.0, s2 = 0.0;
      for (std::size_t n = 0; n < a.batch(); ++n)
        for (std::size_t p = 0; p < plane; ++p) s += a(n, c * plane + p);
      const double mu = s / static_cast<double>(a.batch() * plane);
      for (std::size_t n = 0; n < a.batch(); ++n)
        for (std::size_t p = 0; p < plane; ++p) s2 += std::pow(a(n, c * plane + p) - mu, 2);
      const double var = s2 / static_cast<double>(a.batch() * plane);
      dm += std::pow(mu - t.params.running_mean[ll.bn_offset + c], 2);
      dv += std::pow(var - t.params.running_var[ll.bn_offset + c], 2);
    }
    expect += std::sqrt(dm) + std::sqrt(dv);
  }
  CHECK(inversion::gen_bn_loss(t, x).value == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("generator loss input gradients match finite differences") {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    Net t = bn_teacher(10 + seed);
    Net s = bn_teacher(20 + seed);
    Rng rng(seed);
    const auto x = test::random_tensor(4, {1, 8, 8}, rng, 0.0, 1.0);
    const std::vector<int> y{0, 1, 2, 3};
    const std::vector<int> trained{0, 1, 2, 3};
    CHECK(ratio_vs_fd(x, [&](const nn::Tensor& v) { return inversion::gen_ce_loss(t, v, y, trained); }) <= 1.0);
    CHECK(ratio_vs_fd(x, [&](const nn::Tensor& v) { return inversion::gen_bn_loss(t, v); }) <= 1.0);
    CHECK(ratio_vs_fd(x, [&](const nn::Tensor& v) { return inversion::gen_div_loss(t, s, v); }) <= 1.0);
    CHECK(ratio_vs_fd(x, [&](const nn::Tensor& v) {
            auto p = inversion::gen_total_loss(t, s, v, y, trained, 1.0, 10.0);
            return inversion::InputLoss{p.total, p.input_grad};
          }) <= 1.0);
  }
}

TEST_CASE("total loss combines its parts") {
  Net t = bn_teacher(31);
  Net s = bn_teacher(32);
  Rng rng(3);
  const auto x = test::random_tensor(5, {1, 8, 8}, rng, 0.0, 1.0);
  const std::vector<int> y{0, 1, 2, 3, 1};
  const std::vector<int> trained{0, 1, 2, 3};
  const double a = inversion::gen_ce_loss(t, x, y, trained).value;
  const double b = inversion::gen_div_loss(t, s, x).value;
  const double c = inversion::gen_bn_loss(t, x).value;
  CHECK(b <= 0.0);
  CHECK(c >= 0.0);
  const auto p = inversion::gen_total_loss(t, s, x, y, trained, 1.0, 10.0);
  CHECK(p.total == doctest::Approx(a + b + 10.0 * c).epsilon(1e-13));
  const auto off = inversion::gen_total_loss(t, s, x, y, trained, 0.0, 0.0);
  CHECK(off.total == a);
}

TEST_CASE("total loss reduces to ce with identical student and matched stats") {
  nn::ModelSpec spec;
  spec.input_shape = {1, 1, 1};
  spec.num_outputs = 2;
  spec.layers = {nn::BatchNorm{}, nn::Affine{2}};
  Rng rng(7);
  Net t{spec, nn::init_params(spec, rng)};
  t.params.running_mean[0] = 0.5;
  t.params.running_var[0] = 1.0;
  // Student in train mode normalizes with batch stats, which equal the
  // teacher's stored stats here, so the two agree exactly.
  nn::Tensor x(2, {1, 1, 1}, {-0.5, 1.5});
  const std::vector<int> y{0, 1};
  const std::vector<int> trained{0, 1};
  const double ce = inversion::gen_ce_loss(t, x, y, trained).value;
  for (double lam : {0.5, 3.0, 100.0}) {
    CHECK(inversion::gen_total_loss(t, t, x, y, trained, lam, lam).total == doctest::Approx(ce).epsilon(1e-12));
  }
}

TEST_CASE("student distillation step") {
  Net t = linear_net({1, -1, 0.5, 2, 0, 1}, 2, 3);
  nn::Tensor x(1, {2, 1, 1}, {0.7, -0.3});
  nn::SgdConfig sgd{0.1, 0.0, 0.0};
  SUBCASE("fixed point") {
    Net s = t;
    nn::SgdState st;
    inversion::distill_student_step(t, s, x, sgd, st);
    CHECK(s.params.values == t.params.values);
  }
  SUBCASE("zero step") {
    Net s = linear_net({0, 0, 0, 0, 0, 0}, 2, 3);
    nn::SgdState st;
    inversion::distill_student_step(t, s, x, {0.0, 0.9, 0.0}, st);
    for (double v : s.params.values) CHECK(v == 0.0);
  }
  SUBCASE("closed form") {
    Net s = linear_net({0.2, 0.1, -0.3, 0.4, 0.0, 0.5}, 2, 3);
    const Net before = s;
    nn::SgdState st;
    inversion::distill_student_step(t, s, x, sgd, st);
    const double u = 0.7, v = -0.3;
    const double tl[3] = {u - v, 0.5 * u + 2 * v, v};
    const double sl[3] = {0.2 * u + 0.1 * v, -0.3 * u + 0.4 * v, 0.5 * v};
    double zt = 0, zs = 0;
    for (int c = 0; c < 3; ++c) {
      zt += std::exp(tl[c]);
      zs += std::exp(sl[c]);
    }
    for (int c = 0; c < 3; ++c) {
      const double g = std::exp(sl[c]) / zs - std::exp(tl[c]) / zt;
      CHECK(s.params.values[2 * c] == doctest::Approx(before.params.values[2 * c] - 0.1 * g * u).epsilon(1e-14));
      CHECK(s.params.values[2 * c + 1] == doctest::Approx(before.params.values[2 * c + 1] - 0.1 * g * v).epsilon(1e-14));
      CHECK(s.params.values[6 + c] == doctest::Approx(-0.1 * g).epsilon(1e-14));
    }
  }
}

TEST_CASE("generator gradient matches finite differences") {
  const auto gen = inversion::make_generator({1, 8, 8}, 6, 4, -1.0, 2.0);
  Rng rng(9);
  auto gp = nn::init_params(gen.body, rng);
  for (double& v : gp.values) v += rng.uniform(-0.2, 0.2);
  const auto z = test::random_tensor(3, {6, 1, 1}, rng);
  const auto w = test::random_tensor(3, {1, 8, 8}, rng);
  auto f = [&] {
    const auto g = inversion::generate(gen, gp, z);
    double s = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) s += w.values()[i] * g.images.values()[i];
    return s;
  };
  const auto g = inversion::generate(gen, gp, z);
  for (double v : g.images.values()) {
    CHECK(v >= -1.0);
    CHECK(v <= 2.0);
  }
  const auto analytic = inversion::generator_backward(gen, gp, g, w);
  // The generator's relus make eps = 1e-3 straddle kinks; a smaller step does not.
  const auto numeric = test::central_differences(gp.values, f, 1e-5);
  CHECK(test::worst_gradient_ratio(analytic, numeric) <= 1.0);
}

TEST_CASE("data generation bookkeeping") {
  Net t = bn_teacher(40);
  const std::vector<int> trained{0, 1, 2, 3};
  inversion::GenerationConfig cfg;
  cfg.batch = 8;
  cfg.noise_dim = 8;
  cfg.generator_width = 4;
  cfg.capacity = 8;
  SUBCASE("zero rounds") {
    cfg.rounds = 0;
    auto r = inversion::data_generation(t, trained, cfg, 0, 1);
    CHECK(r.memory.empty());
    CHECK(r.report.rounds.empty());
  }
  SUBCASE("capacity stops accumulation") {
    cfg.rounds = 5;
    auto r = inversion::data_generation(t, trained, cfg, 2, 1);
    CHECK(r.memory.size() == 8);
    CHECK(r.report.rounds.size() == 1);
    CHECK(r.memory.provenance == 2);
  }
  SUBCASE("partial last batch is truncated") {
    cfg.capacity = 20;
    auto r = inversion::data_generation(t, trained, cfg, 0, 1);
    CHECK(r.memory.size() == 20);
    CHECK(r.report.rounds.size() == 3);
    for (double v : r.memory.samples.values()) {
      CHECK(v >= cfg.lo);
      CHECK(v <= cfg.hi);
    }
    CHECK(r.memory.samples.shape() == t.spec.input_shape);
    CHECK_NOTHROW(nn::forward(t.spec, t.params, r.memory.samples, nn::Mode::eval));
    auto again = inversion::data_generation(t, trained, cfg, 0, 1);
    CHECK(again.memory.samples.values()[0] == r.memory.samples.values()[0]);
    CHECK(std::equal(again.memory.samples.values().begin(), again.memory.samples.values().end(),
                     r.memory.samples.values().begin()));
  }
  SUBCASE("probe sees every round") {
    cfg.capacity = 24;
    int calls = 0;
    auto r = inversion::data_generation(t, trained, cfg, 0, 1, [&](const Net& s) {
      ++calls;
      CHECK(s.params.same_layout(t.params));
      return 0.5;
    });
    CHECK(calls == 3);
    CHECK(r.report.rounds.back().probe == 0.5);
  }
  SUBCASE("gradient clip") {
    auto images = [&](double clip, double lr) {
      auto c = cfg;
      c.generator_clip = clip;
      c.generator_lr = lr;
      const auto r = inversion::data_generation(t, trained, c, 0, 1);
      const auto v = r.memory.samples.values();
      return std::vector<double>(v.begin(), v.end());
    };
    const auto unclipped = images(0.0, 0.1);
    CHECK(images(1e300, 0.1) == unclipped);
    const auto frozen = images(0.0, 0.0);
    const auto tight = images(1e-9, 0.1);
    double moved = 0.0, left = 0.0;
    for (std::size_t i = 0; i < frozen.size(); ++i) {
      moved = std::max(moved, std::abs(unclipped[i] - frozen[i]));
      left = std::max(left, std::abs(tight[i] - frozen[i]));
    }
    CHECK(moved > 1e-6);
    CHECK(left < 1e-6);
  }
  SUBCASE("invalid settings") {
    cfg.capacity = 4;
    CHECK_THROWS_AS(inversion::data_generation(t, trained, cfg, 0, 1), ConfigError);
    cfg.capacity = 16;
    Net lin = linear_net({1, 0, 0, 1}, 2, 2);
    const std::vector<int> two{0, 1};
    CHECK_THROWS_AS(inversion::data_generation(lin, two, cfg, 0, 1), ConfigError);
  }
}

TEST_CASE("synthetic memory draws and serialization") {
  inversion::SyntheticMemory m;
  m.shape = {1, 2, 2};
  m.capacity = 6;
  m.provenance = 3;
  m.lo = -0.5;
  m.hi = 1.5;
  Rng rng(1);
  m.add(test::random_tensor(4, {1, 2, 2}, rng));
  m.add(test::random_tensor(4, {1, 2, 2}, rng));
  CHECK(m.size() == 6);
  const auto few = m.draw(6, rng);
  // Without replacement when n <= size: every row appears once.
  std::vector<bool> seen(6, false);
  for (std::size_t r = 0; r < 6; ++r) {
    for (std::size_t i = 0; i < 6; ++i) {
      if (std::equal(few.sample(r).begin(), few.sample(r).end(), m.samples.sample(i).begin())) seen[i] = true;
    }
  }
  CHECK(std::all_of(seen.begin(), seen.end(), [](bool b) { return b; }));
  CHECK(m.draw(13, rng).batch() == 13);

  const auto back = inversion::decode_memory(inversion::encode_memory(m));
  CHECK(back.size() == 6);
  CHECK(back.capacity == 6);
  CHECK(back.provenance == 3);
  CHECK(back.lo == -0.5);
  CHECK(back.hi == 1.5);
  for (std::size_t i = 0; i < m.samples.size(); ++i) {
    CHECK(back.samples.values()[i] == static_cast<double>(static_cast<float>(m.samples.values()[i])));
  }
  std::string bytes = inversion::encode_memory(m);
  CHECK_THROWS_AS(inversion::decode_memory(bytes.substr(0, bytes.size() - 3)), DataError);
  bytes[0] = 'X';
  CHECK_THROWS_AS(inversion::decode_memory(bytes), DataError);
}
