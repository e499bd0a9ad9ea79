#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "fccl/data/dataset.hpp"
#include "fccl/experiment/config.hpp"
#include "fccl/federation/federation.hpp"
#include "fccl/inversion/inversion.hpp"
#include "fccl/metrics/metrics.hpp"

namespace fccl::experiment {

struct TaskRecord {
  int task = 0;
  std::vector<federation::RoundTrace> rounds;
  /// Per-round evaluation over the classes seen so far; only with metrics.per_round.
  std::vector<metrics::ClassAccuracy> round_accuracy;
  std::size_t memory_samples = 0;  // synthetic samples in use while training this task
  double seconds = 0.0;
};

struct RunRecord {
  std::string run_id;
  std::uint64_t seed = 0;
  std::string config_text;  // dump_config of the resolved config
  std::string strategy;
  std::string beta;
  int num_tasks = 0;
  int num_classes = 0;
  bool clamp = true;
  std::size_t capacity_per_class = 0;

  bool complete = false;
  std::string error;

  data::TaskSplit split;
  std::vector<metrics::ClassAccuracy> checkpoints;
  std::vector<TaskRecord> tasks;
  std::vector<inversion::InversionReport> inversion;
  metrics::MetricsReport metrics;
  double seconds = 0.0;

  metrics::AccuracyLog log() const;
};

/// Train and test sets for a config, drawn from the data stream.
data::TrainTest load_data(const ExperimentConfig& config, const Streams& streams);

struct RunOptions {
  /// Directory that receives record.json and metrics.csv after every task.
  /// Empty: nothing is written.
  std::filesystem::path directory;
};

/// Full multi-task run for one seed. On any error a partial record flagged
/// incomplete is written (when a directory is set) before the error propagates.
RunRecord run(const ExperimentConfig& config, std::uint64_t seed, const RunOptions& options = {});

/// Output root: config.output, placed under $FCCL_OUTPUT_ROOT when that is
/// set and config.output is relative.
std::filesystem::path output_root(const ExperimentConfig& config);
std::filesystem::path record_directory(const ExperimentConfig& config, std::uint64_t seed);

/// Columns: run_id, seed, strategy, beta, num_tasks, checkpoint, avg_acc, F,
/// R, per_task_acc. Fixed six-decimal fractions; F and R are empty where
/// undefined; per_task_acc is a JSON array of A_(j,k) for j <= k.
std::string metrics_csv(const RunRecord& record, bool header = true);

std::string record_json(const RunRecord& record);
RunRecord parse_record(const std::string& json_text);

void write_record(const std::filesystem::path& directory, const RunRecord& record);

/// Every record.json below `directory`, ordered by path.
std::vector<RunRecord> load_records(const std::filesystem::path& directory);

}  // namespace fccl::experiment
