#pragma once

#include <optional>
#include <string>
#include <vector>

#include "fccl/data/dataset.hpp"
#include "fccl/data/partition.hpp"
#include "fccl/nn/model.hpp"

namespace fccl::metrics {

/// Accuracy per class id; nullopt where the class was not evaluated or had no
/// test samples.
using ClassAccuracy = std::vector<std::optional<double>>;

/// Checkpoint k (0-based) holds the per-class accuracies after task k, over
/// the classes of tasks 0..k. Fractions in [0, 1].
class AccuracyLog {
 public:
  AccuracyLog() = default;
  AccuracyLog(data::TaskSplit split, int num_classes);

  /// Checks coverage: every class of tasks 0..k is present (or reported
  /// undefined) and no later class is.
  void append(ClassAccuracy accuracies);

  std::size_t size() const { return checkpoints_.size(); }
  const ClassAccuracy& checkpoint(std::size_t k) const { return checkpoints_.at(k); }
  const data::TaskSplit& split() const { return split_; }
  int num_classes() const { return num_classes_; }

  /// A_(j,k): mean accuracy over the defined classes of task j at checkpoint k.
  std::optional<double> task_accuracy(std::size_t j, std::size_t k) const;

 private:
  data::TaskSplit split_;
  int num_classes_ = 0;
  std::vector<ClassAccuracy> checkpoints_;
};

/// Fraction of each class's test samples whose argmax over the full head is
/// that class. Classes without test samples come back undefined and are logged.
ClassAccuracy evaluate(const nn::ModelSpec& spec, const nn::ParameterVector& params,
                       const data::LabeledDataset& test_set, const std::vector<int>& classes);

/// Unweighted mean of per-task accuracies.
double mean_of_tasks(const std::vector<double>& per_task);

/// Mean over tasks j <= k of A_(j,k).
double average_accuracy(const AccuracyLog& log, std::size_t k);

/// Forgetting of task j at checkpoint k: mean over its classes of
/// max_{t in j..k-1} A_c(t) - A_c(k), each drop clamped at 0 when `clamp`.
double task_forgetting(const AccuracyLog& log, std::size_t j, std::size_t k, bool clamp = true);

/// F_k = mean over j < k of task_forgetting(j, k). Needs k >= 1.
double forgetting_measure(const AccuracyLog& log, std::size_t k, bool clamp = true);

/// R_k = sum_{j<k} f_j / sum_{j<k} A_(j,k); nullopt when the denominator is 0.
std::optional<double> relative_forgetting(const AccuracyLog& log, std::size_t k, bool clamp = true);

struct MetricsReport {
  std::vector<double> average_accuracy;               // per checkpoint
  std::vector<std::optional<double>> forgetting;      // nullopt at checkpoint 0
  std::vector<std::optional<double>> relative;        // nullopt at 0 or when undefined
  std::vector<std::vector<std::optional<double>>> task_matrix;  // [k][j], j <= k
};

MetricsReport report(const AccuracyLog& log, bool clamp = true);

}  // namespace fccl::metrics
