#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fccl/data/dataset.hpp"

namespace fccl::data {

/// Ordered, pairwise-disjoint class sets, one per task.
struct TaskSplit {
  std::vector<std::vector<int>> tasks;
  std::uint64_t order_seed = 0;

  std::size_t num_tasks() const { return tasks.size(); }
  /// Task owning class `c`, or -1.
  int task_of(int c) const;
  /// Classes of tasks 0..task, in task order.
  std::vector<int> classes_up_to(std::size_t task) const;
};

/// Shuffles class ids 0..num_classes-1 with `seed`, then cuts them into
/// `num_tasks` equal consecutive chunks. Non-divisible counts are rejected.
TaskSplit split_tasks(int num_classes, int num_tasks, std::uint64_t seed);

/// Label-skew level of a partition. `iid` ignores `beta`.
struct Concentration {
  bool iid = true;
  double beta = 1.0;

  static Concentration iid_split() { return {true, 0.0}; }
  static Concentration dirichlet(double b) { return {false, b}; }
  /// Parses "iid" or a positive number.
  static Concentration parse(const std::string& text);
  std::string str() const;
};

struct ClientShard {
  int client_id = 0;
  int task_id = 0;
  std::vector<std::size_t> indices;  // into the parent dataset, ascending
};

/// Splits the samples of `task_classes` across `num_clients`.
///
/// Classes are processed in the given order; each class's sample list is
/// shuffled, then
///   iid:       sample r goes to client r mod num_clients;
///   Dir(beta): p ~ Dir(beta * 1) from normalized Gamma(beta) draws, counts by
///              largest remainder of p * n (ties to the lower client id), and
///              clients take consecutive runs of the shuffled list.
/// Empty shards are allowed and logged.
std::vector<ClientShard> dirichlet_partition(const LabeledDataset& dataset,
                                             const std::vector<int>& task_classes, int task_id,
                                             int num_clients, Concentration concentration,
                                             std::uint64_t seed);

/// Integer counts summing to `total` that follow `proportions`, largest remainder.
std::vector<std::size_t> largest_remainder(const std::vector<double>& proportions, std::size_t total);

}  // namespace fccl::data
