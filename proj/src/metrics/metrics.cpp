#include "fccl/metrics/metrics.hpp"

#include <algorithm>
#include <numeric>

#include "fccl/nn/network.hpp"
#include "fccl/util/error.hpp"
#include "fccl/util/log.hpp"

namespace fccl::metrics {

AccuracyLog::AccuracyLog(data::TaskSplit split, int num_classes)
    : split_(std::move(split)), num_classes_(num_classes) {
  for (const auto& t : split_.tasks) {
    for (int c : t) {
      if (c < 0 || c >= num_classes_) throw DataError(DataError::Kind::invalid_argument, "task class outside head");
    }
  }
}

void AccuracyLog::append(ClassAccuracy accuracies) {
  const std::size_t k = checkpoints_.size();
  if (k >= split_.num_tasks()) throw DataError(DataError::Kind::invalid_argument, "more checkpoints than tasks");
  if (accuracies.size() != static_cast<std::size_t>(num_classes_)) {
    throw DataError(DataError::Kind::shape_mismatch, "accuracy vector does not cover the head");
  }
  for (std::size_t t = k + 1; t < split_.num_tasks(); ++t) {
    for (int c : split_.tasks[t]) {
      if (accuracies[static_cast<std::size_t>(c)]) {
        throw DataError(DataError::Kind::invalid_argument, "checkpoint reports a class of a future task");
      }
    }
  }
  for (const auto& a : accuracies) {
    if (a && !(*a >= 0.0 && *a <= 1.0)) throw DataError(DataError::Kind::invalid_argument, "accuracy outside [0, 1]");
  }
  checkpoints_.push_back(std::move(accuracies));
}

std::optional<double> AccuracyLog::task_accuracy(std::size_t j, std::size_t k) const {
  if (k >= checkpoints_.size() || j > k) throw DataError(DataError::Kind::invalid_argument, "task/checkpoint out of range");
  double sum = 0.0;
  int n = 0;
  for (int c : split_.tasks[j]) {
    if (const auto& a = checkpoints_[k][static_cast<std::size_t>(c)]) {
      sum += *a;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / n;
}

ClassAccuracy evaluate(const nn::ModelSpec& spec, const nn::ParameterVector& params,
                       const data::LabeledDataset& test_set, const std::vector<int>& classes) {
  ClassAccuracy out(static_cast<std::size_t>(spec.num_outputs));
  constexpr std::size_t kChunk = 256;
  for (int c : classes) {
    if (c < 0 || c >= spec.num_outputs) throw DataError(DataError::Kind::invalid_argument, "class outside head");
    const auto& idx = c < test_set.num_classes() ? test_set.class_index(c) : std::vector<std::size_t>{};
    if (idx.empty()) {
      log::warn("class " + std::to_string(c) + " has no test samples; accuracy undefined");
      continue;
    }
    std::size_t correct = 0;
    for (std::size_t start = 0; start < idx.size(); start += kChunk) {
      const std::size_t len = std::min(kChunk, idx.size() - start);
      std::span<const std::size_t> rows(idx.data() + start, len);
      const auto pred = nn::argmax_rows(nn::forward(spec, params, test_set.inputs(rows), nn::Mode::eval));
      for (const auto p : pred) correct += static_cast<int>(p) == c;
    }
    out[static_cast<std::size_t>(c)] = static_cast<double>(correct) / static_cast<double>(idx.size());
  }
  return out;
}

double mean_of_tasks(const std::vector<double>& per_task) {
  if (per_task.empty()) throw DataError(DataError::Kind::invalid_argument, "no tasks to average");
  return std::accumulate(per_task.begin(), per_task.end(), 0.0) / static_cast<double>(per_task.size());
}

double average_accuracy(const AccuracyLog& log, std::size_t k) {
  if (k >= log.size()) throw DataError(DataError::Kind::invalid_argument, "checkpoint out of range");
  std::vector<double> per_task;
  for (std::size_t j = 0; j <= k; ++j) {
    if (auto a = log.task_accuracy(j, k)) per_task.push_back(*a);
  }
  return mean_of_tasks(per_task);
}

double task_forgetting(const AccuracyLog& log, std::size_t j, std::size_t k, bool clamp) {
  if (j >= k || k >= log.size()) throw DataError(DataError::Kind::invalid_argument, "forgetting needs j < k <= last checkpoint");
  double sum = 0.0;
  int n = 0;
  for (int c : log.split().tasks[j]) {
    const auto ci = static_cast<std::size_t>(c);
    const auto& now = log.checkpoint(k)[ci];
    if (!now) continue;
    std::optional<double> peak;
    for (std::size_t t = j; t < k; ++t) {
      if (const auto& a = log.checkpoint(t)[ci]) peak = peak ? std::max(*peak, *a) : *a;
    }
    if (!peak) continue;
    double drop = *peak - *now;
    if (clamp) drop = std::max(drop, 0.0);
    sum += drop;
    ++n;
  }
  return n == 0 ? 0.0 : sum / n;
}

double forgetting_measure(const AccuracyLog& log, std::size_t k, bool clamp) {
  if (k < 1) throw DataError(DataError::Kind::invalid_argument, "forgetting is undefined before the second task");
  double sum = 0.0;
  for (std::size_t j = 0; j < k; ++j) sum += task_forgetting(log, j, k, clamp);
  return sum / static_cast<double>(k);
}

std::optional<double> relative_forgetting(const AccuracyLog& log, std::size_t k, bool clamp) {
  if (k < 1) throw DataError(DataError::Kind::invalid_argument, "relative forgetting is undefined before the second task");
  double num = 0.0;
  double den = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    num += task_forgetting(log, j, k, clamp);
    den += log.task_accuracy(j, k).value_or(0.0);
  }
  if (!(den > 0.0)) return std::nullopt;
  return num / den;
}

MetricsReport report(const AccuracyLog& log, bool clamp) {
  MetricsReport r;
  for (std::size_t k = 0; k < log.size(); ++k) {
    r.average_accuracy.push_back(average_accuracy(log, k));
    r.forgetting.push_back(k == 0 ? std::nullopt : std::optional<double>(forgetting_measure(log, k, clamp)));
    r.relative.push_back(k == 0 ? std::nullopt : relative_forgetting(log, k, clamp));
    std::vector<std::optional<double>> row;
    for (std::size_t j = 0; j <= k; ++j) row.push_back(log.task_accuracy(j, k));
    r.task_matrix.push_back(std::move(row));
  }
  return r;
}

}  // namespace fccl::metrics
