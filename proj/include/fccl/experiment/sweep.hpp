#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "fccl/experiment/config.hpp"
#include "fccl/experiment/runner.hpp"

namespace fccl::experiment {

struct Axis {
  std::string key;
  std::vector<std::string> values;
};

/// "key=v1,v2,..."
Axis parse_axis(std::string_view text);

struct SweepCell {
  std::vector<std::pair<std::string, std::string>> assignment;  // axis key -> value
  ExperimentConfig config;                                     // run_id suffixed per cell
};

/// Cartesian product of the axes, first axis slowest. Every key and value is
/// checked before anything runs; an empty axis list yields the base config.
std::vector<SweepCell> expand(const ExperimentConfig& base, const std::vector<Axis>& axes);

struct SweepResult {
  std::vector<SweepCell> cells;
  std::vector<std::vector<RunRecord>> records;  // [cell][seed]
  std::string summary_csv;
};

/// Runs every cell for every seed of the base config. With `write`, records go
/// below output_root(base) and the summary to <root>/<run_id>/summary.csv.
SweepResult sweep(const ExperimentConfig& base, const std::vector<Axis>& axes, bool write = true);

/// Columns: run_id, one per axis key, seeds, complete, acc_mean, acc_std,
/// F_mean, F_std, R_mean, R_std at the final checkpoint. std is the sample
/// standard deviation (0 for one seed); F and R average the seeds where they
/// are defined.
std::string summary_csv(const std::vector<SweepCell>& cells, const std::vector<std::vector<RunRecord>>& records);

enum class Figure { forgetting_curve, task_matrix, distill_trace, memory_size };
Figure parse_figure(std::string_view name);
std::string figure_name(Figure figure);

/// Tidy CSV for one figure, recomputing every metric from the records'
/// accuracy logs.
///   forgetting_curve: run_id,seed,strategy,beta,checkpoint,avg_acc,F,R
///   task_matrix:      run_id,seed,checkpoint,task,accuracy  (task <= checkpoint)
///   distill_trace:    run_id,seed,task,round,ce,div,bn,total,agreement,probe
///   memory_size:      run_id,seed,capacity_per_class,task,round,memory_samples,avg_acc
/// memory_size emits one row per round when per-round evaluations exist and
/// otherwise one row per task at its final round.
std::string plot_csv(const std::vector<RunRecord>& records, Figure figure);

}  // namespace fccl::experiment
