#include "fccl/experiment/runner.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "fccl/util/error.hpp"
#include "fccl/util/log.hpp"
#include "json.hpp"

namespace fccl::experiment {

using nlohmann::json;

namespace {

double elapsed(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - since).count();
}

std::string fixed6(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string fixed6(const std::optional<double>& v) { return v ? fixed6(*v) : std::string(); }

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> opt_from(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

json accuracy_json(const metrics::ClassAccuracy& a) {
  json out = json::array();
  for (const auto& v : a) out.push_back(opt(v));
  return out;
}

metrics::ClassAccuracy accuracy_from(const json& j) {
  metrics::ClassAccuracy out;
  for (const auto& v : j) out.push_back(opt_from(v));
  return out;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  // Write-then-rename so a reader never sees a half-written record.
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError(DataError::Kind::io, "cannot write " + tmp);
    out << text;
    if (!out) throw DataError(DataError::Kind::io, "write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace

metrics::AccuracyLog RunRecord::log() const {
  metrics::AccuracyLog out(split, num_classes);
  for (const auto& c : checkpoints) out.append(c);
  return out;
}

data::TrainTest load_data(const ExperimentConfig& config, const Streams& streams) {
  const auto& d = config.dataset;
  const std::uint64_t holdout = derive_seed(streams.data, "holdout");
  if (d.kind == "toy") {
    const int total = d.per_class + d.test_per_class;
    auto all = data::generate_toy_dataset(d.num_classes, total, {d.channels, d.height, d.width}, streams.data);
    return data::holdout_split(all, static_cast<double>(d.test_per_class) / total, holdout);
  }
  auto train = data::load_idx(d.train_images, d.train_labels, d.num_classes);
  if (!d.test_images.empty()) {
    auto test = data::load_idx(d.test_images, d.test_labels, d.num_classes);
    if (!(test.shape() == train.shape())) {
      throw DataError(DataError::Kind::shape_mismatch, "train and test images differ in shape");
    }
    return {std::move(train), std::move(test)};
  }
  return data::holdout_split(train, d.test_fraction, holdout);
}

std::filesystem::path output_root(const ExperimentConfig& config) {
  std::filesystem::path out(config.output);
  const char* root = std::getenv("FCCL_OUTPUT_ROOT");
  if (root != nullptr && *root != '\0' && out.is_relative()) return std::filesystem::path(root) / out;
  return out;
}

std::filesystem::path record_directory(const ExperimentConfig& config, std::uint64_t seed) {
  return output_root(config) / config.run_id / ("seed_" + std::to_string(seed));
}

RunRecord run(const ExperimentConfig& config, std::uint64_t seed, const RunOptions& options) {
  validate(config);
  const auto started = std::chrono::steady_clock::now();
  RunRecord rec;
  rec.run_id = config.run_id;
  rec.seed = seed;
  rec.config_text = dump_config(config);
  rec.strategy = config.strategy;
  rec.beta = config.beta.str();
  rec.num_tasks = config.num_tasks;
  rec.num_classes = config.dataset.num_classes;
  rec.clamp = config.clamp;
  rec.capacity_per_class = config.options.target.capacity_per_class;

  auto persist = [&] {
    rec.seconds = elapsed(started);
    if (options.directory.empty()) return;
    write_record(options.directory, rec);
  };

  try {
    const Streams streams = make_streams(seed);
    const auto data = load_data(config, streams);
    rec.split = data::split_tasks(config.dataset.num_classes, config.num_tasks, streams.split);
    const auto shape = data.train.shape();
    const auto spec = nn::make_classifier(shape, config.dataset.num_classes, config.model_kind, config.model_width);
    auto state = federation::make_state(spec, {streams.init, streams.sampling, streams.client});

    auto opts = resolved_options(config);
    const auto& px = data.train.pixels();
    if (!px.empty()) {
      const auto [lo, hi] = std::minmax_element(px.begin(), px.end());
      opts.target.generation.lo = *lo;
      opts.target.generation.hi = *hi > *lo ? *hi : *lo + 1.0;
    }
    auto strategy = strategies::make_strategy(config.strategy, opts);
    const auto* target = dynamic_cast<const strategies::Target*>(strategy.get());

    metrics::AccuracyLog log(rec.split, config.dataset.num_classes);
    for (int task = 0; task < config.num_tasks; ++task) {
      const auto task_started = std::chrono::steady_clock::now();
      const auto& classes = rec.split.tasks[static_cast<std::size_t>(task)];
      const auto shards =
          data::dirichlet_partition(data.train, classes, task, config.num_clients, config.beta,
                                    derive_seed(streams.partition, static_cast<std::uint64_t>(task)));
      const auto seen = rec.split.classes_up_to(static_cast<std::size_t>(task));
      TaskRecord tr;
      tr.task = task;
      tr.memory_samples = target != nullptr ? target->memory().size() : 0;
      federation::RoundHook hook;
      if (config.per_round_eval) {
        hook = [&](const federation::FederationState& s, const federation::RoundTrace&) {
          tr.round_accuracy.push_back(metrics::evaluate(s.spec, s.global, data.test, seen));
        };
      }
      tr.rounds = federation::run_task(state, data.train, shards, *strategy, config.fed, hook);
      auto acc = metrics::evaluate(spec, state.global, data.test, seen);
      log.append(acc);
      rec.checkpoints.push_back(std::move(acc));

      const strategies::TaskEndContext ctx{spec,         state.global, task, task + 1 < config.num_tasks,
                                           rec.split,    data.train,   shards,
                                           derive_seed(streams.generator, static_cast<std::uint64_t>(task))};
      strategy->end_of_task(ctx);
      federation::finish_task(state);
      tr.seconds = elapsed(task_started);
      rec.tasks.push_back(std::move(tr));
      if (const auto* reports = strategy->inversion_reports()) rec.inversion = *reports;
      rec.metrics = metrics::report(log, config.clamp);
      char note[160];
      std::snprintf(note, sizeof note, "%s seed %llu: task %d done, average accuracy %.4f",
                    config.run_id.c_str(), static_cast<unsigned long long>(seed), task,
                    rec.metrics.average_accuracy.back());
      log::info(note);
      if (task + 1 < config.num_tasks) persist();
    }
    rec.complete = true;
    persist();
  } catch (const std::exception& e) {
    rec.complete = false;
    rec.error = e.what();
    try {
      persist();
    } catch (const std::exception& w) {
      log::error(std::string("could not write partial record: ") + w.what());
    }
    throw;
  }
  return rec;
}

std::string metrics_csv(const RunRecord& rec, bool header) {
  std::string out;
  if (header) out = "run_id,seed,strategy,beta,num_tasks,checkpoint,avg_acc,F,R,per_task_acc\n";
  const auto& m = rec.metrics;
  for (std::size_t k = 0; k < m.average_accuracy.size(); ++k) {
    std::string blob = "[";
    for (std::size_t j = 0; j < m.task_matrix[k].size(); ++j) {
      if (j > 0) blob += ",";
      blob += m.task_matrix[k][j] ? fixed6(*m.task_matrix[k][j]) : "null";
    }
    blob += "]";
    out += rec.run_id + "," + std::to_string(rec.seed) + "," + rec.strategy + "," + rec.beta + "," +
           std::to_string(rec.num_tasks) + "," + std::to_string(k) + "," + fixed6(m.average_accuracy[k]) + "," +
           fixed6(m.forgetting[k]) + "," + fixed6(m.relative[k]) + ",\"" + blob + "\"\n";
  }
  return out;
}

std::string record_json(const RunRecord& rec) {
  json j;
  j["run_id"] = rec.run_id;
  j["seed"] = rec.seed;
  j["config"] = rec.config_text;
  j["strategy"] = rec.strategy;
  j["beta"] = rec.beta;
  j["num_tasks"] = rec.num_tasks;
  j["num_classes"] = rec.num_classes;
  j["clamp"] = rec.clamp;
  j["capacity_per_class"] = rec.capacity_per_class;
  j["complete"] = rec.complete;
  j["error"] = rec.error;
  j["split"] = {{"tasks", rec.split.tasks}, {"order_seed", rec.split.order_seed}};
  j["checkpoints"] = json::array();
  for (const auto& c : rec.checkpoints) j["checkpoints"].push_back(accuracy_json(c));
  j["tasks"] = json::array();
  for (const auto& t : rec.tasks) {
    json tj;
    tj["task"] = t.task;
    tj["memory_samples"] = t.memory_samples;
    tj["seconds"] = t.seconds;
    tj["rounds"] = json::array();
    for (const auto& r : t.rounds) tj["rounds"].push_back({{"clients", r.clients}, {"mean_loss", r.mean_loss}});
    tj["round_accuracy"] = json::array();
    for (const auto& a : t.round_accuracy) tj["round_accuracy"].push_back(accuracy_json(a));
    j["tasks"].push_back(std::move(tj));
  }
  j["inversion"] = json::array();
  for (const auto& rep : rec.inversion) {
    json rj{{"diverged", rep.diverged}, {"message", rep.message}, {"rounds", json::array()}};
    for (const auto& r : rep.rounds) {
      rj["rounds"].push_back({{"ce", r.ce},
                              {"div", r.div},
                              {"bn", r.bn},
                              {"total", r.total},
                              {"agreement", r.agreement},
                              {"probe", r.probe}});
    }
    j["inversion"].push_back(std::move(rj));
  }
  const auto& m = rec.metrics;
  json mj;
  mj["average_accuracy"] = m.average_accuracy;
  mj["forgetting"] = json::array();
  mj["relative"] = json::array();
  mj["task_matrix"] = json::array();
  for (const auto& v : m.forgetting) mj["forgetting"].push_back(opt(v));
  for (const auto& v : m.relative) mj["relative"].push_back(opt(v));
  for (const auto& row : m.task_matrix) mj["task_matrix"].push_back(accuracy_json(row));
  j["metrics"] = std::move(mj);
  j["seconds"] = rec.seconds;
  return j.dump(1) + "\n";
}

RunRecord parse_record(const std::string& text) {
  RunRecord rec;
  try {
    const json j = json::parse(text);
    rec.run_id = j.at("run_id").get<std::string>();
    rec.seed = j.at("seed").get<std::uint64_t>();
    rec.config_text = j.at("config").get<std::string>();
    rec.strategy = j.at("strategy").get<std::string>();
    rec.beta = j.at("beta").get<std::string>();
    rec.num_tasks = j.at("num_tasks").get<int>();
    rec.num_classes = j.at("num_classes").get<int>();
    rec.clamp = j.at("clamp").get<bool>();
    rec.capacity_per_class = j.at("capacity_per_class").get<std::size_t>();
    rec.complete = j.at("complete").get<bool>();
    rec.error = j.at("error").get<std::string>();
    rec.split.tasks = j.at("split").at("tasks").get<std::vector<std::vector<int>>>();
    rec.split.order_seed = j.at("split").at("order_seed").get<std::uint64_t>();
    for (const auto& c : j.at("checkpoints")) rec.checkpoints.push_back(accuracy_from(c));
    for (const auto& tj : j.at("tasks")) {
      TaskRecord t;
      t.task = tj.at("task").get<int>();
      t.memory_samples = tj.at("memory_samples").get<std::size_t>();
      t.seconds = tj.at("seconds").get<double>();
      for (const auto& r : tj.at("rounds")) {
        t.rounds.push_back({r.at("clients").get<std::vector<int>>(), r.at("mean_loss").get<double>()});
      }
      for (const auto& a : tj.at("round_accuracy")) t.round_accuracy.push_back(accuracy_from(a));
      rec.tasks.push_back(std::move(t));
    }
    for (const auto& rj : j.at("inversion")) {
      inversion::InversionReport rep;
      rep.diverged = rj.at("diverged").get<bool>();
      rep.message = rj.at("message").get<std::string>();
      for (const auto& r : rj.at("rounds")) {
        inversion::RoundTrace t;
        t.ce = r.at("ce").get<double>();
        t.div = r.at("div").get<double>();
        t.bn = r.at("bn").get<double>();
        t.total = r.at("total").get<double>();
        t.agreement = r.at("agreement").get<double>();
        t.probe = r.at("probe").get<double>();
        rep.rounds.push_back(t);
      }
      rec.inversion.push_back(std::move(rep));
    }
    const auto& mj = j.at("metrics");
    rec.metrics.average_accuracy = mj.at("average_accuracy").get<std::vector<double>>();
    for (const auto& v : mj.at("forgetting")) rec.metrics.forgetting.push_back(opt_from(v));
    for (const auto& v : mj.at("relative")) rec.metrics.relative.push_back(opt_from(v));
    for (const auto& row : mj.at("task_matrix")) rec.metrics.task_matrix.push_back(accuracy_from(row));
    rec.seconds = j.at("seconds").get<double>();
  } catch (const json::exception& e) {
    throw DataError(DataError::Kind::invalid_argument, std::string("malformed run record: ") + e.what());
  }
  return rec;
}

void write_record(const std::filesystem::path& directory, const RunRecord& record) {
  std::error_code ec;
  std::filesystem::create_directories(directory, ec);
  if (ec) throw DataError(DataError::Kind::io, "cannot create " + directory.string() + ": " + ec.message());
  write_file(directory / "record.json", record_json(record));
  write_file(directory / "metrics.csv", metrics_csv(record));
}

std::vector<RunRecord> load_records(const std::filesystem::path& directory) {
  if (!std::filesystem::is_directory(directory)) {
    throw DataError(DataError::Kind::io, "no such records directory: " + directory.string());
  }
  std::vector<std::filesystem::path> paths;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(directory)) {
    if (entry.is_regular_file() && entry.path().filename() == "record.json") paths.push_back(entry.path());
  }
  std::sort(paths.begin(), paths.end());
  std::vector<RunRecord> out;
  for (const auto& p : paths) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    try {
      out.push_back(parse_record(ss.str()));
    } catch (const DataError& e) {
      throw DataError(DataError::Kind::invalid_argument, p.string() + ": " + e.what());
    }
  }
  return out;
}

}  // namespace fccl::experiment
