#include "fccl/strategies/strategy.hpp"

#include <algorithm>
#include <numeric>

#include "fccl/nn/loss.hpp"
#include "fccl/util/error.hpp"
#include "fccl/util/log.hpp"

namespace fccl::strategies {

namespace {

StepResult from_grad(nn::GradResult&& r) {
  return {r.loss, std::move(r.grads.params), std::move(r.tape)};
}

void add_scaled(std::vector<double>& acc, const std::vector<double>& g, double s) {
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += s * g[i];
}

// Rows drawn from `pool`: distinct when there are enough, else with replacement.
std::vector<std::size_t> draw_rows(std::vector<std::size_t> pool, std::size_t n, Rng& rng) {
  std::vector<std::size_t> rows(n);
  if (n <= pool.size()) {
    for (std::size_t i = 0; i < n; ++i) {
      std::swap(pool[i], pool[i + rng.index(pool.size() - i)]);
      rows[i] = pool[i];
    }
  } else {
    for (auto& r : rows) r = pool[rng.index(pool.size())];
  }
  return rows;
}

}  // namespace

StepResult finetune_loss(const nn::ModelSpec& spec, const nn::ParameterVector& params, const nn::Tensor& x,
                         std::span<const int> y) {
  return from_grad(nn::grad(spec, params, [&](const nn::Tensor& l) { return nn::ce_with_grad(l, y); }, x));
}

StepResult lwf_loss(const nn::ModelSpec& spec, const nn::ParameterVector& params, const Net* teacher,
                    const nn::Tensor& x, std::span<const int> y, double alpha) {
  if (teacher == nullptr) return finetune_loss(spec, params, x, y);
  const nn::Tensor t = nn::forward(teacher->spec, teacher->params, x, nn::Mode::eval);
  return from_grad(nn::grad(
      spec, params,
      [&](const nn::Tensor& l) {
        auto ce = nn::ce_with_grad(l, y);
        const auto kl = nn::kl_with_grad(t, l);
        ce.value += alpha * kl.value;
        auto g = ce.grad.values();
        auto k = kl.student_grad.values();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += alpha * k[i];
        return ce;
      },
      x));
}

FisherDiagonal ewc_fisher(const nn::ModelSpec& spec, const nn::ParameterVector& params,
                          const data::LabeledDataset& dataset, std::span<const std::size_t> shard, int num_batches,
                          int batch_size, Rng& rng) {
  FisherDiagonal f;
  f.values.assign(params.size(), 0.0);
  f.anchor = params.values;
  if (shard.empty() || num_batches <= 0) return f;
  const std::vector<std::size_t> pool(shard.begin(), shard.end());
  const auto b = std::min<std::size_t>(static_cast<std::size_t>(std::max(batch_size, 1)), pool.size());
  for (int k = 0; k < num_batches; ++k) {
    const auto rows = draw_rows(pool, b, rng);
    const auto y = dataset.labels(rows);
    const auto r = nn::grad(spec, params, [&](const nn::Tensor& l) { return nn::ce_with_grad(l, y); },
                            dataset.inputs(rows), nn::Mode::eval);
    for (std::size_t i = 0; i < f.values.size(); ++i) f.values[i] += r.grads.params[i] * r.grads.params[i];
  }
  for (double& v : f.values) v /= num_batches;
  return f;
}

StepResult ewc_loss(const nn::ModelSpec& spec, const nn::ParameterVector& params, const FisherDiagonal& fisher,
                    const nn::Tensor& x, std::span<const int> y, double lambda) {
  StepResult r = finetune_loss(spec, params, x, y);
  if (fisher.empty()) return r;
  if (fisher.values.size() != params.size() || fisher.anchor.size() != params.size()) {
    throw ShapeError("Fisher diagonal layout does not match the parameters");
  }
  double penalty = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double d = params.values[i] - fisher.anchor[i];
    penalty += fisher.values[i] * d * d;
    r.grad[i] += lambda * fisher.values[i] * d;
  }
  r.loss += 0.5 * lambda * penalty;
  return r;
}

StepResult replay_loss(const nn::ModelSpec& spec, const nn::ParameterVector& params, const nn::Tensor& x,
                       std::span<const int> y, const nn::Tensor& ex_x, std::span<const int> ex_y) {
  if (ex_x.batch() == 0) return finetune_loss(spec, params, x, y);
  if (ex_y.size() != ex_x.batch()) throw ShapeError("exemplar labels do not match exemplar inputs");
  std::vector<int> all(y.begin(), y.end());
  all.insert(all.end(), ex_y.begin(), ex_y.end());
  return finetune_loss(spec, params, nn::Tensor::concat(x, ex_x), all);
}

StepResult target_loss(const nn::ModelSpec& spec, const nn::ParameterVector& params, const Net* teacher,
                       const nn::Tensor& x, std::span<const int> y, const nn::Tensor& x_syn, double alpha) {
  StepResult r = finetune_loss(spec, params, x, y);
  if (teacher == nullptr || x_syn.batch() == 0 || alpha == 0.0) return r;
  const nn::Tensor t = nn::forward(teacher->spec, teacher->params, x_syn, nn::Mode::eval);
  auto kd = nn::grad(
      spec, params,
      [&](const nn::Tensor& s) {
        auto kl = nn::kl_with_grad(t, s);
        return nn::LossGrad{kl.value, kl.student_grad};
      },
      x_syn, nn::Mode::train);
  r.loss += alpha * kd.loss;
  add_scaled(r.grad, kd.grads.params, alpha);
  r.extra_tapes.push_back(std::move(kd.tape));
  return r;
}

std::size_t ExemplarStore::size() const {
  std::size_t n = 0;
  for (const auto& [c, v] : by_class) n += v.size();
  return n;
}

std::vector<std::size_t> ExemplarStore::all() const {
  std::vector<std::size_t> out;
  for (const auto& [c, v] : by_class) out.insert(out.end(), v.begin(), v.end());
  return out;
}

void ExemplarStore::merge(const ExemplarStore& other) {
  for (const auto& [c, v] : other.by_class) by_class[c] = v;
}

ExemplarStore select_exemplars(const data::LabeledDataset& dataset, std::span<const std::size_t> candidates,
                               std::size_t budget_per_class, Rng& rng) {
  ExemplarStore store;
  if (budget_per_class == 0) return store;
  std::map<int, std::vector<std::size_t>> pools;
  for (const auto i : candidates) pools[dataset.label(i)].push_back(i);
  for (auto& [c, pool] : pools) {
    std::sort(pool.begin(), pool.end());
    const std::size_t take = std::min(budget_per_class, pool.size());
    for (std::size_t i = 0; i < take; ++i) std::swap(pool[i], pool[i + rng.index(pool.size() - i)]);
    std::vector<std::size_t> chosen(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(take));
    std::sort(chosen.begin(), chosen.end());
    store.by_class[c] = std::move(chosen);
  }
  return store;
}

StepResult Finetune::step(const StepContext& ctx) const { return finetune_loss(ctx.spec, ctx.params, ctx.x, ctx.y); }

StepResult FedLwF::step(const StepContext& ctx) const {
  if (ctx.task > 0 && ctx.teacher == nullptr) throw ConfigError("fedlwf needs a teacher after the first task");
  return lwf_loss(ctx.spec, ctx.params, ctx.teacher, ctx.x, ctx.y, alpha_);
}

StepResult FedEwc::step(const StepContext& ctx) const {
  return ewc_loss(ctx.spec, ctx.params, fisher_, ctx.x, ctx.y, lambda_);
}

void FedEwc::end_of_task(const TaskEndContext& ctx) {
  std::vector<double> sum(ctx.global.size(), 0.0);
  double total = 0.0;
  for (const auto& shard : ctx.shards) {
    if (shard.indices.empty()) continue;
    Rng rng(derive_seed(ctx.seed, static_cast<std::uint64_t>(shard.client_id)));
    const auto f = ewc_fisher(ctx.spec, ctx.global, ctx.dataset, shard.indices, batches_, batch_size_, rng);
    const double w = static_cast<double>(shard.indices.size());
    add_scaled(sum, f.values, w);
    total += w;
  }
  if (total == 0.0) return;
  if (fisher_.empty()) fisher_.values.assign(sum.size(), 0.0);
  for (std::size_t i = 0; i < sum.size(); ++i) fisher_.values[i] += sum[i] / total;
  fisher_.anchor = ctx.global.values;
}

const ExemplarStore& Replay::store(int client_id) const {
  if (scope_ == ExemplarScope::global) return global_;
  static const ExemplarStore empty;
  const auto it = local_.find(client_id);
  return it == local_.end() ? empty : it->second;
}

StepResult Replay::step(const StepContext& ctx) const {
  const ExemplarStore& s = store(ctx.client_id);
  if (s.empty()) {
    if (ctx.task > 0 && !warned_.exchange(true)) {
      log::warn(name() + ": empty exemplar store after the first task; training on the real batch only");
    }
    return finetune_loss(ctx.spec, ctx.params, ctx.x, ctx.y);
  }
  const auto rows = draw_rows(s.all(), ctx.x.batch(), ctx.aux);
  const auto ex_y = ctx.dataset.labels(rows);
  return replay_loss(ctx.spec, ctx.params, ctx.x, ctx.y, ctx.dataset.inputs(rows), ex_y);
}

void Replay::end_of_task(const TaskEndContext& ctx) {
  if (scope_ == ExemplarScope::local) {
    for (const auto& shard : ctx.shards) {
      Rng rng(derive_seed(ctx.seed, static_cast<std::uint64_t>(shard.client_id)));
      local_[shard.client_id].merge(select_exemplars(ctx.dataset, shard.indices, budget_, rng));
    }
    return;
  }
  std::vector<std::size_t> pooled;
  for (const auto& shard : ctx.shards) pooled.insert(pooled.end(), shard.indices.begin(), shard.indices.end());
  std::sort(pooled.begin(), pooled.end());
  Rng rng(ctx.seed);
  global_.merge(select_exemplars(ctx.dataset, pooled, budget_, rng));
}

StepResult Target::step(const StepContext& ctx) const {
  if (ctx.task > 0 && ctx.teacher == nullptr) throw ConfigError("target needs a teacher after the first task");
  if (ctx.task == 0 || memory_.empty()) return finetune_loss(ctx.spec, ctx.params, ctx.x, ctx.y);
  const nn::Tensor x_syn = memory_.draw(ctx.x.batch(), ctx.aux);
  return target_loss(ctx.spec, ctx.params, ctx.teacher, ctx.x, ctx.y, x_syn, options_.alpha);
}

void Target::end_of_task(const TaskEndContext& ctx) {
  if (!ctx.more_tasks) return;
  const auto classes = ctx.split.classes_up_to(static_cast<std::size_t>(ctx.task));
  inversion::GenerationConfig cfg = options_.generation;
  cfg.capacity = options_.capacity_per_class * classes.size();
  const Net teacher{ctx.spec, ctx.global};
  const inversion::StudentProbe probe = options_.probe ? options_.probe(teacher, ctx.task) : inversion::StudentProbe{};
  auto result = inversion::data_generation(teacher, classes, cfg, ctx.task, ctx.seed, probe);
  memory_ = std::move(result.memory);
  reports_.push_back(std::move(result.report));
}

const std::vector<std::string>& strategy_names() {
  static const std::vector<std::string> names{"finetune", "fedlwf", "fedewc", "replay_local", "replay_global", "target"};
  return names;
}

std::unique_ptr<Strategy> make_strategy(const std::string& name, const StrategyOptions& o) {
  if (name == "finetune") return std::make_unique<Finetune>();
  if (name == "fedlwf") return std::make_unique<FedLwF>(o.lwf_alpha);
  if (name == "fedewc") return std::make_unique<FedEwc>(o.ewc_lambda, o.ewc_batches, o.batch_size);
  if (name == "replay_local") return std::make_unique<Replay>(ExemplarScope::local, o.replay_budget);
  if (name == "replay_global") {
    const std::size_t budget = o.replay_global_budget > 0 ? o.replay_global_budget
                                                          : static_cast<std::size_t>(o.num_clients) * o.replay_budget;
    return std::make_unique<Replay>(ExemplarScope::global, budget);
  }
  if (name == "target") return std::make_unique<Target>(o.target);
  throw ConfigError("unknown strategy '" + name + "'");
}

}  // namespace fccl::strategies
