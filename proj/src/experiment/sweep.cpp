#include "fccl/experiment/sweep.hpp"

#include <cmath>
#include <fstream>

#include "fccl/util/error.hpp"

namespace fccl::experiment {

namespace {

std::string fixed6(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string fixed6(const std::optional<double>& v) { return v ? fixed6(*v) : std::string(); }

std::string cell_suffix(const std::vector<std::pair<std::string, std::string>>& assignment) {
  std::string s;
  for (const auto& [k, v] : assignment) {
    if (!s.empty()) s += "_";
    s += k + "=" + v;
  }
  for (char& c : s) {
    if (c == '/' || c == '\\' || c == ' ') c = '-';
  }
  return s;
}

struct Stat {
  double mean = 0.0, std = 0.0;
  std::size_t n = 0;
};

Stat stat(const std::vector<double>& v) {
  Stat s;
  s.n = v.size();
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

std::string who(const RunRecord& r) { return "record " + r.run_id + " (seed " + std::to_string(r.seed) + ")"; }

const RunRecord& need_checkpoints(const RunRecord& r) {
  if (r.checkpoints.empty()) throw DataError(DataError::Kind::invalid_argument, who(r) + " is missing field 'checkpoints'");
  return r;
}

}  // namespace

Axis parse_axis(std::string_view text) {
  const auto eq = text.find('=');
  if (eq == std::string_view::npos || eq == 0) throw ConfigError("axis must look like key=v1,v2; got '" + std::string(text) + "'");
  Axis a;
  a.key = std::string(text.substr(0, eq));
  std::string_view rest = text.substr(eq + 1);
  while (true) {
    const auto comma = rest.find(',');
    const auto v = rest.substr(0, comma);
    if (v.empty()) throw ConfigError("empty value in axis '" + std::string(text) + "'");
    a.values.emplace_back(v);
    if (comma == std::string_view::npos) break;
    rest = rest.substr(comma + 1);
  }
  return a;
}

std::vector<SweepCell> expand(const ExperimentConfig& base, const std::vector<Axis>& axes) {
  for (const auto& a : axes) {
    if (a.key == "seeds" || a.key == "run_id" || a.key == "output") {
      throw ConfigError("'" + a.key + "' cannot be a sweep axis");
    }
    (void)get_key(base, a.key);  // unknown keys throw here
    if (a.values.empty()) throw ConfigError("axis " + a.key + " has no values");
  }
  std::vector<SweepCell> cells{SweepCell{{}, base}};
  for (const auto& a : axes) {
    std::vector<SweepCell> next;
    for (const auto& cell : cells) {
      for (const auto& v : a.values) {
        SweepCell c = cell;
        set_key(c.config, a.key, v);
        c.assignment.emplace_back(a.key, v);
        next.push_back(std::move(c));
      }
    }
    cells = std::move(next);
  }
  for (auto& c : cells) {
    if (!c.assignment.empty()) c.config.run_id = base.run_id + "/" + cell_suffix(c.assignment);
    validate(c.config);
  }
  return cells;
}

std::string summary_csv(const std::vector<SweepCell>& cells, const std::vector<std::vector<RunRecord>>& records) {
  std::string out = "run_id";
  if (!cells.empty()) {
    for (const auto& [k, v] : cells.front().assignment) out += "," + k;
  }
  out += ",seeds,complete,acc_mean,acc_std,F_mean,F_std,R_mean,R_std\n";
  for (std::size_t i = 0; i < cells.size(); ++i) {
    std::vector<double> acc, f, r;
    bool complete = true;
    for (const auto& rec : records[i]) {
      complete = complete && rec.complete;
      if (rec.metrics.average_accuracy.empty()) continue;
      acc.push_back(rec.metrics.average_accuracy.back());
      if (rec.metrics.forgetting.back()) f.push_back(*rec.metrics.forgetting.back());
      if (rec.metrics.relative.back()) r.push_back(*rec.metrics.relative.back());
    }
    const Stat a = stat(acc), fs = stat(f), rs = stat(r);
    out += cells[i].config.run_id;
    for (const auto& [k, v] : cells[i].assignment) out += "," + v;
    out += "," + std::to_string(records[i].size()) + "," + (complete ? "true" : "false");
    auto put = [&](const Stat& s) {
      out += "," + (s.n ? fixed6(s.mean) : std::string()) + "," + (s.n ? fixed6(s.std) : std::string());
    };
    put(a);
    put(fs);
    put(rs);
    out += "\n";
  }
  return out;
}

SweepResult sweep(const ExperimentConfig& base, const std::vector<Axis>& axes, bool write) {
  SweepResult result;
  result.cells = expand(base, axes);
  for (const auto& cell : result.cells) {
    std::vector<RunRecord> recs;
    for (const auto seed : cell.config.seeds) {
      RunOptions options;
      if (write) options.directory = record_directory(cell.config, seed);
      recs.push_back(run(cell.config, seed, options));
    }
    result.records.push_back(std::move(recs));
  }
  result.summary_csv = summary_csv(result.cells, result.records);
  if (write) {
    const auto dir = output_root(base) / base.run_id;
    std::filesystem::create_directories(dir);
    std::ofstream out(dir / "summary.csv", std::ios::binary | std::ios::trunc);
    if (!out) throw DataError(DataError::Kind::io, "cannot write " + (dir / "summary.csv").string());
    out << result.summary_csv;
  }
  return result;
}

Figure parse_figure(std::string_view name) {
  if (name == "forgetting_curve") return Figure::forgetting_curve;
  if (name == "task_matrix") return Figure::task_matrix;
  if (name == "distill_trace") return Figure::distill_trace;
  if (name == "memory_size") return Figure::memory_size;
  throw ConfigError("unknown figure '" + std::string(name) +
                    "' (expected forgetting_curve|task_matrix|distill_trace|memory_size)");
}

std::string figure_name(Figure f) {
  switch (f) {
    case Figure::forgetting_curve: return "forgetting_curve";
    case Figure::task_matrix: return "task_matrix";
    case Figure::distill_trace: return "distill_trace";
    case Figure::memory_size: return "memory_size";
  }
  return {};
}

std::string plot_csv(const std::vector<RunRecord>& records, Figure figure) {
  std::string out;
  switch (figure) {
    case Figure::forgetting_curve: {
      out = "run_id,seed,strategy,beta,checkpoint,avg_acc,F,R\n";
      for (const auto& r : records) {
        const auto m = metrics::report(need_checkpoints(r).log(), r.clamp);
        for (std::size_t k = 0; k < m.average_accuracy.size(); ++k) {
          out += r.run_id + "," + std::to_string(r.seed) + "," + r.strategy + "," + r.beta + "," + std::to_string(k) +
                 "," + fixed6(m.average_accuracy[k]) + "," + fixed6(m.forgetting[k]) + "," + fixed6(m.relative[k]) + "\n";
        }
      }
      break;
    }
    case Figure::task_matrix: {
      out = "run_id,seed,checkpoint,task,accuracy\n";
      for (const auto& r : records) {
        const auto m = metrics::report(need_checkpoints(r).log(), r.clamp);
        for (std::size_t k = 0; k < m.task_matrix.size(); ++k) {
          for (std::size_t j = 0; j <= k; ++j) {
            out += r.run_id + "," + std::to_string(r.seed) + "," + std::to_string(k) + "," + std::to_string(j) + "," +
                   fixed6(m.task_matrix[k][j]) + "\n";
          }
        }
      }
      break;
    }
    case Figure::distill_trace: {
      out = "run_id,seed,task,round,ce,div,bn,total,agreement,probe\n";
      for (const auto& r : records) {
        if (r.inversion.empty()) {
          throw DataError(DataError::Kind::invalid_argument,
                          who(r) + " is missing field 'inversion' (strategy " + r.strategy + " with " +
                              std::to_string(r.num_tasks) + " task(s) generates no synthetic data)");
        }
        for (std::size_t t = 0; t < r.inversion.size(); ++t) {
          const auto& rep = r.inversion[t];
          for (std::size_t i = 0; i < rep.rounds.size(); ++i) {
            const auto& x = rep.rounds[i];
            out += r.run_id + "," + std::to_string(r.seed) + "," + std::to_string(t) + "," + std::to_string(i) + "," +
                   fixed6(x.ce) + "," + fixed6(x.div) + "," + fixed6(x.bn) + "," + fixed6(x.total) + "," +
                   fixed6(x.agreement) + "," + fixed6(x.probe) + "\n";
          }
        }
      }
      break;
    }
    case Figure::memory_size: {
      out = "run_id,seed,capacity_per_class,task,round,memory_samples,avg_acc\n";
      for (const auto& r : records) {
        if (r.strategy != "target") {
          throw DataError(DataError::Kind::invalid_argument,
                          who(r) + " is missing field 'memory_samples' (only recorded for strategy target)");
        }
        const auto log = need_checkpoints(r).log();
        for (std::size_t k = 0; k < r.tasks.size() && k < log.size(); ++k) {
          const auto& t = r.tasks[k];
          const auto prefix = r.run_id + "," + std::to_string(r.seed) + "," + std::to_string(r.capacity_per_class) +
                              "," + std::to_string(k) + ",";
          const auto tail = "," + std::to_string(t.memory_samples) + ",";
          if (t.round_accuracy.empty()) {
            out += prefix + std::to_string(t.rounds.size()) + tail + fixed6(metrics::average_accuracy(log, k)) + "\n";
            continue;
          }
          for (std::size_t i = 0; i < t.round_accuracy.size(); ++i) {
            metrics::AccuracyLog partial(log.split(), log.num_classes());
            for (std::size_t c = 0; c < k; ++c) partial.append(log.checkpoint(c));
            partial.append(t.round_accuracy[i]);
            out += prefix + std::to_string(i + 1) + tail + fixed6(metrics::average_accuracy(partial, k)) + "\n";
          }
        }
      }
      break;
    }
  }
  return out;
}

}  // namespace fccl::experiment
