#include "fccl/data/partition.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "fccl/util/error.hpp"
#include "fccl/util/log.hpp"
#include "fccl/util/rng.hpp"

namespace fccl::data {

int TaskSplit::task_of(int c) const {
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    if (std::find(tasks[t].begin(), tasks[t].end(), c) != tasks[t].end()) return static_cast<int>(t);
  }
  return -1;
}

std::vector<int> TaskSplit::classes_up_to(std::size_t task) const {
  std::vector<int> out;
  for (std::size_t t = 0; t <= task && t < tasks.size(); ++t) out.insert(out.end(), tasks[t].begin(), tasks[t].end());
  return out;
}

TaskSplit split_tasks(int num_classes, int num_tasks, std::uint64_t seed) {
  if (num_tasks < 1 || num_classes < 1) {
    throw DataError(DataError::Kind::invalid_argument, "need at least one class and one task");
  }
  if (num_classes % num_tasks != 0) {
    throw DataError(DataError::Kind::invalid_argument, std::to_string(num_classes) +
                                                           " classes do not divide into " +
                                                           std::to_string(num_tasks) + " equal tasks");
  }
  std::vector<int> order(static_cast<std::size_t>(num_classes));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(std::span<int>(order));
  TaskSplit split;
  split.order_seed = seed;
  const auto per = static_cast<std::size_t>(num_classes / num_tasks);
  for (int t = 0; t < num_tasks; ++t) {
    const auto begin = order.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(t) * per);
    split.tasks.emplace_back(begin, begin + static_cast<std::ptrdiff_t>(per));
  }
  return split;
}

Concentration Concentration::parse(const std::string& text) {
  if (text == "iid" || text == "IID") return iid_split();
  char* end = nullptr;
  const double b = std::strtod(text.c_str(), &end);
  if (end == text.c_str() || *end != '\0' || !(b > 0.0) || !std::isfinite(b)) {
    throw ConfigError("partition.beta must be 'iid' or a positive number, got '" + text + "'");
  }
  return dirichlet(b);
}

std::string Concentration::str() const {
  if (iid) return "iid";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", beta);
  return buf;
}

std::vector<std::size_t> largest_remainder(const std::vector<double>& proportions, std::size_t total) {
  const std::size_t n = proportions.size();
  std::vector<std::size_t> counts(n, 0);
  std::vector<double> frac(n, 0.0);
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double target = proportions[i] * static_cast<double>(total);
    counts[i] = static_cast<std::size_t>(std::floor(target));
    frac[i] = target - static_cast<double>(counts[i]);
    assigned += counts[i];
  }
  // Floating error can leave the floors a little over the total.
  while (assigned > total) {
    const auto it = std::max_element(counts.begin(), counts.end());
    --*it;
    --assigned;
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t k = 0; assigned < total; k = (k + 1) % n) {
    ++counts[order[k]];
    ++assigned;
  }
  return counts;
}

std::vector<ClientShard> dirichlet_partition(const LabeledDataset& dataset,
                                             const std::vector<int>& task_classes, int task_id,
                                             int num_clients, Concentration concentration,
                                             std::uint64_t seed) {
  if (num_clients < 1) throw DataError(DataError::Kind::invalid_argument, "num_clients must be >= 1");
  if (!concentration.iid && !(concentration.beta > 0.0)) {
    throw DataError(DataError::Kind::invalid_argument, "Dirichlet beta must be > 0");
  }
  const auto clients = static_cast<std::size_t>(num_clients);
  std::vector<ClientShard> shards(clients);
  for (std::size_t k = 0; k < clients; ++k) {
    shards[k].client_id = static_cast<int>(k);
    shards[k].task_id = task_id;
  }
  Rng rng(seed);
  for (const int c : task_classes) {
    if (c < 0 || c >= dataset.num_classes()) {
      throw DataError(DataError::Kind::invalid_argument, "task class outside dataset");
    }
    auto idx = dataset.class_index(c);
    rng.shuffle(std::span<std::size_t>(idx));
    if (concentration.iid) {
      for (std::size_t r = 0; r < idx.size(); ++r) shards[r % clients].indices.push_back(idx[r]);
      continue;
    }
    std::vector<double> logs(clients);
    for (auto& l : logs) l = rng.log_gamma_draw(concentration.beta);
    const double top = *std::max_element(logs.begin(), logs.end());
    std::vector<double> p(clients);
    double sum = 0.0;
    for (std::size_t k = 0; k < clients; ++k) {
      p[k] = std::exp(logs[k] - top);
      sum += p[k];
    }
    for (double& v : p) v /= sum;
    const auto counts = largest_remainder(p, idx.size());
    std::size_t pos = 0;
    for (std::size_t k = 0; k < clients; ++k) {
      for (std::size_t r = 0; r < counts[k]; ++r) shards[k].indices.push_back(idx[pos++]);
    }
  }
  for (auto& s : shards) {
    std::sort(s.indices.begin(), s.indices.end());
    if (s.indices.empty()) {
      log::info("client " + std::to_string(s.client_id) + " received no samples for task " +
                std::to_string(task_id));
    }
  }
  return shards;
}

}  // namespace fccl::data
