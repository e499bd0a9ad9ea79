#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fccl/data/partition.hpp"
#include "fccl/federation/federation.hpp"
#include "fccl/strategies/strategy.hpp"

namespace fccl::experiment {

struct DatasetConfig {
  std::string kind = "toy";  // toy | idx
  int num_classes = 8;
  int per_class = 200;       // toy training samples per class
  int test_per_class = 50;   // toy held-out samples per class
  int channels = 1;
  int height = 16;
  int width = 16;
  std::string train_images, train_labels, test_images, test_labels;
  double test_fraction = 0.2;  // idx without test files: per-class holdout
};

struct ExperimentConfig {
  std::string run_id = "run";
  std::vector<std::uint64_t> seeds{0};
  std::string output = "results";

  DatasetConfig dataset;
  int num_tasks = 2;
  data::Concentration beta = data::Concentration::iid_split();
  int num_clients = 5;

  std::string model_kind = "cnn";
  int model_width = 16;

  federation::FedConfig fed;
  std::optional<double> alpha;  // nullopt: 10 for up to 2 tasks, 100 beyond

  std::string strategy = "finetune";
  strategies::StrategyOptions options;

  bool clamp = true;
  bool per_round_eval = false;
};

/// Defaults sized for the toy benchmark.
ExperimentConfig default_config();

/// Every accepted key, in dump order.
const std::vector<std::string>& config_keys();

/// Sets one key; ConfigError for unknown keys or values outside the key's domain.
void set_key(ExperimentConfig& config, std::string_view key, std::string_view value);
std::string get_key(const ExperimentConfig& config, std::string_view key);

/// Applies "key = value" lines ('#' starts a comment) on top of `base`.
ExperimentConfig parse_config(std::string_view text, ExperimentConfig base = default_config());
ExperimentConfig load_config(const std::string& path);

/// Applies a "key=value" override.
void apply_override(ExperimentConfig& config, std::string_view assignment);

/// Fully resolved config, one "key = value" line per key.
std::string dump_config(const ExperimentConfig& config);

/// Cross-key checks that single-key parsing cannot see.
void validate(const ExperimentConfig& config);

double resolved_alpha(const ExperimentConfig& config);

/// Strategy options with the run-level values (alpha, batch, clients) filled in.
strategies::StrategyOptions resolved_options(const ExperimentConfig& config);

/// Seeds of the named streams, each derive_seed(master, name).
struct Streams {
  std::uint64_t data = 0;       // dataset synthesis and holdout
  std::uint64_t split = 0;      // class-to-task assignment
  std::uint64_t partition = 0;  // per-task client shards
  std::uint64_t init = 0;       // model initialization
  std::uint64_t client = 0;     // parent of the per-client streams
  std::uint64_t generator = 0;  // end-of-task work (inversion, Fisher, exemplars)
  std::uint64_t sampling = 0;   // client selection
};
Streams make_streams(std::uint64_t master);

}  // namespace fccl::experiment
