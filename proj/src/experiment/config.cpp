#include "fccl/experiment/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>

#include "fccl/util/error.hpp"

namespace fccl::experiment {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad(std::string_view key, std::string_view value, std::string_view domain) {
  throw ConfigError("invalid value '" + std::string(value) + "' for " + std::string(key) + ": expected " +
                    std::string(domain));
}

long long parse_int(std::string_view key, std::string_view v, long long lo, long long hi) {
  long long out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size() || out < lo || out > hi) {
    bad(key, v, "an integer in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
  }
  return out;
}

std::uint64_t parse_u64(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) bad(key, v, "an unsigned integer");
  return out;
}

double parse_real(std::string_view key, std::string_view v, double lo, double hi, bool open_lo = false) {
  double out = 0.0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  const bool ok = r.ec == std::errc() && r.ptr == v.data() + v.size() && std::isfinite(out) &&
                  (open_lo ? out > lo : out >= lo) && out <= hi;
  if (!ok) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "a number in %c%g, %g]", open_lo ? '(' : '[', lo, hi);
    bad(key, v, buf);
  }
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  bad(key, v, "true or false");
}

std::string choice(std::string_view key, std::string_view v, const std::vector<std::string>& options) {
  if (std::find(options.begin(), options.end(), v) != options.end()) return std::string(v);
  std::string all;
  for (const auto& o : options) all += (all.empty() ? "" : "|") + o;
  bad(key, v, all);
}

std::string real_str(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string bool_str(bool b) { return b ? "true" : "false"; }

constexpr long long kBig = 1'000'000'000;
constexpr double kHuge = 1e12;

struct Entry {
  std::string key;
  std::function<void(ExperimentConfig&, std::string_view)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

#define FCCL_INT(name, field, lo, hi)                                                                  \
  Entry {                                                                                              \
    name, [](ExperimentConfig& c, std::string_view v) { c.field = static_cast<decltype(c.field)>(parse_int(name, v, lo, hi)); }, \
        [](const ExperimentConfig& c) { return std::to_string(c.field); }                             \
  }
#define FCCL_REAL(name, field, lo, hi, open)                                                      \
  Entry {                                                                                         \
    name, [](ExperimentConfig& c, std::string_view v) { c.field = parse_real(name, v, lo, hi, open); }, \
        [](const ExperimentConfig& c) { return real_str(c.field); }                              \
  }
#define FCCL_BOOL(name, field)                                                          \
  Entry {                                                                               \
    name, [](ExperimentConfig& c, std::string_view v) { c.field = parse_bool(name, v); }, \
        [](const ExperimentConfig& c) { return bool_str(c.field); }                    \
  }
#define FCCL_TEXT(name, field)                                                     \
  Entry {                                                                          \
    name, [](ExperimentConfig& c, std::string_view v) { c.field = std::string(v); }, \
        [](const ExperimentConfig& c) { return c.field; }                         \
  }

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = {
      Entry{"run_id",
            [](ExperimentConfig& c, std::string_view v) {
              if (v.empty() || v.find("..") != std::string_view::npos || v.front() == '/') {
                bad("run_id", v, "a non-empty relative name");
              }
              c.run_id = std::string(v);
            },
            [](const ExperimentConfig& c) { return c.run_id; }},
      Entry{"seeds",
            [](ExperimentConfig& c, std::string_view v) {
              std::vector<std::uint64_t> out;
              std::string_view rest = v;
              while (true) {
                const auto comma = rest.find(',');
                out.push_back(parse_u64("seeds", trim(rest.substr(0, comma))));
                if (comma == std::string_view::npos) break;
                rest = rest.substr(comma + 1);
              }
              c.seeds = std::move(out);
            },
            [](const ExperimentConfig& c) {
              std::string s;
              for (auto v : c.seeds) s += (s.empty() ? "" : ",") + std::to_string(v);
              return s;
            }},
      FCCL_TEXT("output", output),
      Entry{"dataset.kind", [](ExperimentConfig& c, std::string_view v) { c.dataset.kind = choice("dataset.kind", v, {"toy", "idx"}); },
            [](const ExperimentConfig& c) { return c.dataset.kind; }},
      FCCL_INT("dataset.num_classes", dataset.num_classes, 1, 100000),
      FCCL_INT("dataset.per_class", dataset.per_class, 1, kBig),
      FCCL_INT("dataset.test_per_class", dataset.test_per_class, 1, kBig),
      FCCL_INT("dataset.channels", dataset.channels, 1, 64),
      FCCL_INT("dataset.height", dataset.height, 4, 1024),
      FCCL_INT("dataset.width", dataset.width, 4, 1024),
      FCCL_TEXT("dataset.train_images", dataset.train_images),
      FCCL_TEXT("dataset.train_labels", dataset.train_labels),
      FCCL_TEXT("dataset.test_images", dataset.test_images),
      FCCL_TEXT("dataset.test_labels", dataset.test_labels),
      FCCL_REAL("dataset.test_fraction", dataset.test_fraction, 0.0, 0.99, true),
      FCCL_INT("split.num_tasks", num_tasks, 1, 100000),
      Entry{"partition.beta",
            [](ExperimentConfig& c, std::string_view v) { c.beta = data::Concentration::parse(std::string(v)); },
            [](const ExperimentConfig& c) { return c.beta.str(); }},
      FCCL_INT("partition.num_clients", num_clients, 1, 100000),
      Entry{"model.kind", [](ExperimentConfig& c, std::string_view v) { c.model_kind = choice("model.kind", v, {"cnn", "mlp"}); },
            [](const ExperimentConfig& c) { return c.model_kind; }},
      FCCL_INT("model.width", model_width, 2, 4096),
      FCCL_INT("fed.rounds", fed.rounds, 0, kBig),
      FCCL_REAL("fed.fraction", fed.fraction, 0.0, 1.0, true),
      FCCL_INT("fed.epochs", fed.epochs, 0, kBig),
      FCCL_INT("fed.batch", fed.batch, 1, kBig),
      FCCL_REAL("fed.lr", fed.sgd.lr, 0.0, kHuge, true),
      FCCL_REAL("fed.momentum", fed.sgd.momentum, 0.0, 0.999999, false),
      FCCL_REAL("fed.weight_decay", fed.sgd.weight_decay, 0.0, kHuge, false),
      Entry{"fed.alpha",
            [](ExperimentConfig& c, std::string_view v) {
              if (v == "auto") {
                c.alpha.reset();
              } else {
                c.alpha = parse_real("fed.alpha", v, 0.0, kHuge, false);
              }
            },
            [](const ExperimentConfig& c) { return c.alpha ? real_str(*c.alpha) : std::string("auto"); }},
      FCCL_BOOL("fed.warm_start", fed.warm_start),
      Entry{"fed.teacher",
            [](ExperimentConfig& c, std::string_view v) {
              c.fed.teacher = choice("fed.teacher", v, {"frozen", "per_round"}) == "frozen"
                                  ? federation::TeacherMode::frozen
                                  : federation::TeacherMode::per_round;
            },
            [](const ExperimentConfig& c) {
              return std::string(c.fed.teacher == federation::TeacherMode::frozen ? "frozen" : "per_round");
            }},
      FCCL_INT("fed.threads", fed.threads, 1, 1024),
      Entry{"strategy.name",
            [](ExperimentConfig& c, std::string_view v) { c.strategy = choice("strategy.name", v, strategies::strategy_names()); },
            [](const ExperimentConfig& c) { return c.strategy; }},
      FCCL_REAL("lwf.alpha", options.lwf_alpha, 0.0, kHuge, false),
      FCCL_REAL("ewc.lambda", options.ewc_lambda, 0.0, kHuge, false),
      FCCL_INT("ewc.batches", options.ewc_batches, 1, kBig),
      FCCL_INT("replay.budget", options.replay_budget, 0, kBig),
      FCCL_INT("replay.global_budget", options.replay_global_budget, 0, kBig),
      FCCL_INT("target.capacity_per_class", options.target.capacity_per_class, 1, kBig),
      FCCL_INT("target.rounds", options.target.generation.rounds, -1, kBig),
      FCCL_INT("target.generator_steps", options.target.generation.generator_steps, 0, kBig),
      FCCL_INT("target.batch", options.target.generation.batch, 1, kBig),
      FCCL_INT("target.noise_dim", options.target.generation.noise_dim, 1, 65536),
      FCCL_INT("target.generator_width", options.target.generation.generator_width, 2, 4096),
      FCCL_REAL("target.generator_lr", options.target.generation.generator_lr, 0.0, kHuge, false),
      FCCL_REAL("target.generator_momentum", options.target.generation.generator_momentum, 0.0, 0.999999, false),
      FCCL_REAL("target.generator_clip", options.target.generation.generator_clip, 0.0, kHuge, false),
      FCCL_REAL("target.student_lr", options.target.generation.student_lr, 0.0, kHuge, false),
      FCCL_INT("target.student_steps", options.target.generation.student_steps, 0, kBig),
      FCCL_REAL("target.lambda_div", options.target.generation.lambda_div, 0.0, kHuge, false),
      FCCL_REAL("target.lambda_bn", options.target.generation.lambda_bn, 0.0, kHuge, false),
      FCCL_BOOL("metrics.clamp", clamp),
      FCCL_BOOL("metrics.per_round", per_round_eval),
  };
  return table;
}

#undef FCCL_INT
#undef FCCL_REAL
#undef FCCL_BOOL
#undef FCCL_TEXT

const Entry& find(std::string_view key) {
  for (const auto& e : entries()) {
    if (e.key == key) return e;
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

}  // namespace

ExperimentConfig default_config() { return ExperimentConfig{}; }

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& e : entries()) k.push_back(e.key);
    return k;
  }();
  return keys;
}

void set_key(ExperimentConfig& config, std::string_view key, std::string_view value) {
  find(key).set(config, trim(value));
}

std::string get_key(const ExperimentConfig& config, std::string_view key) { return find(key).get(config); }

void apply_override(ExperimentConfig& config, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    throw ConfigError("expected key=value, got '" + std::string(assignment) + "'");
  }
  set_key(config, trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

ExperimentConfig parse_config(std::string_view text, ExperimentConfig base) {
  std::istringstream in{std::string(text)};
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    if (trim(line).empty()) continue;
    try {
      apply_override(base, line);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(number) + ": " + e.what());
    }
  }
  return base;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::string dump_config(const ExperimentConfig& config) {
  std::string out;
  for (const auto& e : entries()) out += e.key + " = " + e.get(config) + "\n";
  return out;
}

void validate(const ExperimentConfig& c) {
  if (c.seeds.empty()) throw ConfigError("seeds must list at least one seed");
  if (c.dataset.num_classes % c.num_tasks != 0) {
    throw ConfigError("dataset.num_classes (" + std::to_string(c.dataset.num_classes) +
                      ") must be divisible by split.num_tasks (" + std::to_string(c.num_tasks) + ")");
  }
  if (c.dataset.kind == "idx" && (c.dataset.train_images.empty() || c.dataset.train_labels.empty())) {
    throw ConfigError("dataset.kind = idx needs dataset.train_images and dataset.train_labels");
  }
  if (c.dataset.test_images.empty() != c.dataset.test_labels.empty()) {
    throw ConfigError("dataset.test_images and dataset.test_labels must be given together");
  }
  if (c.strategy == "target" && c.options.target.capacity_per_class < 1) {
    throw ConfigError("target.capacity_per_class must be >= 1");
  }
  if (c.dataset.height % 4 != 0 || c.dataset.width % 4 != 0) {
    // The generator upsamples twice from a quarter-size seed image.
    if (c.strategy == "target") throw ConfigError("target needs dataset.height and dataset.width divisible by 4");
  }
}

double resolved_alpha(const ExperimentConfig& config) {
  if (config.alpha) return *config.alpha;
  return config.num_tasks < 5 ? 10.0 : 100.0;
}

strategies::StrategyOptions resolved_options(const ExperimentConfig& config) {
  strategies::StrategyOptions o = config.options;
  o.batch_size = config.fed.batch;
  o.num_clients = config.num_clients;
  o.target.alpha = resolved_alpha(config);
  return o;
}

Streams make_streams(std::uint64_t master) {
  return {derive_seed(master, "data"),   derive_seed(master, "split"),     derive_seed(master, "partition"),
          derive_seed(master, "init"),   derive_seed(master, "client"),    derive_seed(master, "generator"),
          derive_seed(master, "sampling")};
}

}  // namespace fccl::experiment
