#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fccl/experiment/config.hpp"
#include "fccl/experiment/runner.hpp"
#include "fccl/experiment/sweep.hpp"
#include "fccl/util/error.hpp"
#include "fccl/util/log.hpp"

using namespace fccl;
using namespace fccl::experiment;

namespace {

ExperimentConfig resolve(const std::string& path, const std::vector<std::string>& overrides) {
  ExperimentConfig c = path.empty() ? default_config() : load_config(path);
  for (const auto& o : overrides) apply_override(c, o);
  validate(c);
  return c;
}

void print_final(const RunRecord& r) {
  const auto& m = r.metrics;
  std::printf("%s seed %llu: acc %.2f%%", r.run_id.c_str(), static_cast<unsigned long long>(r.seed),
              100.0 * m.average_accuracy.back());
  if (m.forgetting.back()) std::printf("  F %.4f", *m.forgetting.back());
  if (m.relative.back()) std::printf("  R %.4f", *m.relative.back());
  std::printf("\n");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated class-continual learning simulator"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Log progress");

  std::string config_path;
  std::vector<std::string> sets;
  bool print_config = false;
  auto* run_cmd = app.add_subcommand("run", "Run one experiment for every configured seed");
  run_cmd->add_option("--config", config_path, "key = value config file");
  run_cmd->add_option("--set", sets, "Override, key=value (repeatable)");
  run_cmd->add_flag("--print-config", print_config, "Print the resolved config and exit");

  std::vector<std::string> axes;
  auto* sweep_cmd = app.add_subcommand("sweep", "Cartesian sweep over config values");
  sweep_cmd->add_option("--config", config_path, "key = value config file");
  sweep_cmd->add_option("--set", sets, "Override, key=value (repeatable)");
  sweep_cmd->add_option("--axis", axes, "Axis, key=v1,v2 (repeatable)");
  sweep_cmd->add_flag("--print-config", print_config, "Print the resolved base config and exit");

  std::string records_dir, figure, out_path;
  auto* plot_cmd = app.add_subcommand("plotdata", "Emit plot-ready CSV from run records");
  plot_cmd->add_option("--records", records_dir, "Directory searched for record.json")->required();
  plot_cmd->add_option("--figure", figure, "forgetting_curve|task_matrix|distill_trace|memory_size")->required();
  plot_cmd->add_option("--out", out_path, "Output file (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ErrorCategory::config);
  }
  if (verbose) log::set_level(log::Level::info);

  try {
    if (*run_cmd || *sweep_cmd) {
      const auto config = resolve(config_path, sets);
      if (print_config) {
        std::cout << dump_config(config);
        return 0;
      }
      if (*run_cmd) {
        for (const auto seed : config.seeds) {
          const auto dir = record_directory(config, seed);
          print_final(run(config, seed, {dir}));
          std::printf("  wrote %s\n", dir.string().c_str());
        }
      } else {
        std::vector<Axis> parsed;
        for (const auto& a : axes) parsed.push_back(parse_axis(a));
        const auto result = sweep(config, parsed);
        std::cout << result.summary_csv;
      }
    } else if (*plot_cmd) {
      const auto csv = plot_csv(load_records(records_dir), parse_figure(figure));
      if (out_path.empty()) {
        std::cout << csv;
      } else {
        std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError(DataError::Kind::io, "cannot write " + out_path);
        out << csv;
      }
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return static_cast<int>(e.category());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
