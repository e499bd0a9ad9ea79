#pragma once

#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fccl/data/dataset.hpp"
#include "fccl/data/partition.hpp"
#include "fccl/inversion/inversion.hpp"
#include "fccl/nn/model.hpp"
#include "fccl/nn/network.hpp"
#include "fccl/util/rng.hpp"

namespace fccl::strategies {

using inversion::Net;

/// Loss value, parameter gradient, and the tape of the forward pass that saw
/// the real batch (its batch statistics feed the running BN update).
struct StepResult {
  double loss = 0.0;
  std::vector<double> grad;
  nn::Tape tape;
  /// Further train-mode forwards of the step (TARGET's synthetic batch); they
  /// update the running statistics after `tape`, in order.
  std::vector<nn::Tape> extra_tapes;
};

/// Plain CE on the real batch.
StepResult finetune_loss(const nn::ModelSpec& spec, const nn::ParameterVector& params, const nn::Tensor& x,
                         std::span<const int> y);

/// CE(theta(x), y) + alpha * KL(teacher(x) || theta(x)) on the real batch. A
/// null teacher leaves CE only.
StepResult lwf_loss(const nn::ModelSpec& spec, const nn::ParameterVector& params, const Net* teacher,
                    const nn::Tensor& x, std::span<const int> y, double alpha);

/// Diagonal importance plus the anchor it was measured at.
struct FisherDiagonal {
  std::vector<double> values;
  std::vector<double> anchor;

  bool empty() const { return values.empty(); }
};

/// Mean over `num_batches` sampled batches of the squared batch CE gradient,
/// measured in eval mode at `params`. An empty shard gives zeros.
FisherDiagonal ewc_fisher(const nn::ModelSpec& spec, const nn::ParameterVector& params,
                          const data::LabeledDataset& dataset, std::span<const std::size_t> shard,
                          int num_batches, int batch_size, Rng& rng);

/// CE + (lambda / 2) * sum_i F_i (theta_i - anchor_i)^2. An empty Fisher
/// leaves CE only.
StepResult ewc_loss(const nn::ModelSpec& spec, const nn::ParameterVector& params, const FisherDiagonal& fisher,
                    const nn::Tensor& x, std::span<const int> y, double lambda);

/// CE on the real batch stacked on an exemplar batch. Empty exemplars leave CE
/// on the real batch only.
StepResult replay_loss(const nn::ModelSpec& spec, const nn::ParameterVector& params, const nn::Tensor& x,
                       std::span<const int> y, const nn::Tensor& ex_x, std::span<const int> ex_y);

/// CE(theta(x), y) + alpha * KL(teacher(x_syn) || theta(x_syn)); the teacher is
/// in eval mode, the synthetic pass in train mode. A null teacher, an empty
/// synthetic batch or alpha 0 leaves CE only.
StepResult target_loss(const nn::ModelSpec& spec, const nn::ParameterVector& params, const Net* teacher,
                       const nn::Tensor& x, std::span<const int> y, const nn::Tensor& x_syn, double alpha);

/// Stored real samples, by class, as indices into the training set.
struct ExemplarStore {
  std::map<int, std::vector<std::size_t>> by_class;

  std::size_t size() const;
  bool empty() const { return size() == 0; }
  std::vector<std::size_t> all() const;
  /// Adds (or replaces) the classes of `other`.
  void merge(const ExemplarStore& other);
};

/// Per class present among `candidates`, up to `budget_per_class` indices
/// chosen uniformly without replacement. Classes are visited in ascending
/// order; each uses a partial Fisher-Yates over that class's candidates in
/// ascending index order.
ExemplarStore select_exemplars(const data::LabeledDataset& dataset, std::span<const std::size_t> candidates,
                               std::size_t budget_per_class, Rng& rng);

/// Everything a strategy sees for one local step.
struct StepContext {
  const nn::ModelSpec& spec;
  const nn::ParameterVector& params;
  const Net* teacher;  // null on task 0
  const data::LabeledDataset& dataset;
  const nn::Tensor& x;
  std::span<const int> y;
  int task = 0;
  int client_id = 0;
  Rng& aux;  // for auxiliary batches; never shared with batch ordering
};

/// End-of-task information, on the orchestrator thread.
struct TaskEndContext {
  const nn::ModelSpec& spec;
  const nn::ParameterVector& global;
  int task = 0;
  bool more_tasks = true;
  const data::TaskSplit& split;
  const data::LabeledDataset& dataset;
  const std::vector<data::ClientShard>& shards;  // this task's
  std::uint64_t seed = 0;
};

class Strategy {
 public:
  virtual ~Strategy() = default;
  virtual std::string name() const = 0;
  /// Must be safe to call concurrently from several clients.
  virtual StepResult step(const StepContext& ctx) const = 0;
  virtual void end_of_task(const TaskEndContext&) {}
  /// Reports produced by end_of_task, if any.
  virtual const std::vector<inversion::InversionReport>* inversion_reports() const { return nullptr; }
};

class Finetune : public Strategy {
 public:
  std::string name() const override { return "finetune"; }
  StepResult step(const StepContext& ctx) const override;
};

class FedLwF : public Strategy {
 public:
  explicit FedLwF(double alpha) : alpha_(alpha) {}
  std::string name() const override { return "fedlwf"; }
  StepResult step(const StepContext& ctx) const override;

 private:
  double alpha_;
};

class FedEwc : public Strategy {
 public:
  FedEwc(double lambda, int batches, int batch_size) : lambda_(lambda), batches_(batches), batch_size_(batch_size) {}
  std::string name() const override { return "fedewc"; }
  StepResult step(const StepContext& ctx) const override;
  /// Client Fisher diagonals at the final global model, averaged with FedAvg
  /// weights and added to the importance of earlier tasks.
  void end_of_task(const TaskEndContext& ctx) override;
  const FisherDiagonal& fisher() const { return fisher_; }

 private:
  double lambda_;
  int batches_;
  int batch_size_;
  FisherDiagonal fisher_;
};

enum class ExemplarScope { local, global };

class Replay : public Strategy {
 public:
  /// `budget` is per class and client for local scope and per class for the
  /// pooled global store.
  Replay(ExemplarScope scope, std::size_t budget) : scope_(scope), budget_(budget) {}
  std::string name() const override { return scope_ == ExemplarScope::local ? "replay_local" : "replay_global"; }
  StepResult step(const StepContext& ctx) const override;
  void end_of_task(const TaskEndContext& ctx) override;
  /// The store client `client_id` trains with.
  const ExemplarStore& store(int client_id) const;

 private:
  ExemplarScope scope_;
  std::size_t budget_;
  std::map<int, ExemplarStore> local_;
  ExemplarStore global_;
  mutable std::atomic<bool> warned_{false};
};

struct TargetOptions {
  double alpha = 10.0;
  std::size_t capacity_per_class = 160;
  inversion::GenerationConfig generation;  // capacity is set per task
  /// Optional diagnostic probe factory; receives the teacher for each task.
  std::function<inversion::StudentProbe(const Net& teacher, int task)> probe;
};

class Target : public Strategy {
 public:
  explicit Target(TargetOptions options) : options_(std::move(options)) {}
  std::string name() const override { return "target"; }
  StepResult step(const StepContext& ctx) const override;
  /// Replaces the synthetic memory with one generated from the final global
  /// model of this task (skipped after the last task).
  void end_of_task(const TaskEndContext& ctx) override;
  const inversion::SyntheticMemory& memory() const { return memory_; }
  void set_memory(inversion::SyntheticMemory m) { memory_ = std::move(m); }
  const std::vector<inversion::InversionReport>* inversion_reports() const override { return &reports_; }

 private:
  TargetOptions options_;
  inversion::SyntheticMemory memory_;
  std::vector<inversion::InversionReport> reports_;
};

struct StrategyOptions {
  double lwf_alpha = 1.0;
  double ewc_lambda = 100.0;
  int ewc_batches = 10;
  int batch_size = 32;
  std::size_t replay_budget = 20;
  std::size_t replay_global_budget = 0;  // 0: num_clients * replay_budget
  int num_clients = 5;
  TargetOptions target;
};

std::unique_ptr<Strategy> make_strategy(const std::string& name, const StrategyOptions& options);

/// Names accepted by make_strategy.
const std::vector<std::string>& strategy_names();

}  // namespace fccl::strategies
