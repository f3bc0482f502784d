#include "metaite/cli/commands.hpp"

#include "metaite/io.hpp"
#include "metaite/numkit/rng.hpp"

#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#ifndef METAITE_VERSION
#define METAITE_VERSION "dev"
#endif

namespace metaite::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

class Manifest {
 public:
  Manifest(std::string command, const RunConfig& config)
      : command_(std::move(command)), out_dir_(config.out_dir), hash_(config.hash()), seed_(config.seed),
        started_(utc_now()) {}

  std::string path(const std::string& name) const { return (fs::path(out_dir_) / name).string(); }

  void write_output(const std::string& name, const std::string& contents) {
    write_file_atomic(path(name), contents);
    files_.insert(name);
  }

  void add_existing(const std::string& name) { files_.insert(name); }

  void finish() const {
    json j;
    j["command"] = command_;
    j["config_hash"] = hash_;
    j["seed"] = seed_;
    j["version"] = METAITE_VERSION;
    j["started_at"] = started_;
    j["finished_at"] = utc_now();
    json outputs = json::array();
    for (const auto& name : files_) {
      const std::string contents = read_file(path(name));
      outputs.push_back({{"path", name}, {"bytes", contents.size()}, {"fnv1a64", hex64(fnv1a64(contents))}});
    }
    j["outputs"] = outputs;
    write_file_atomic(path("manifest.json"), j.dump(2) + "\n");
  }

 private:
  std::string command_;
  std::string out_dir_;
  std::string hash_;
  std::uint64_t seed_;
  std::string started_;
  std::set<std::string> files_;
};

std::string sizes_str(const std::vector<Index>& sizes) {
  std::string s = "[";
  for (std::size_t i = 0; i < sizes.size(); ++i) s += (i ? ", " : "") + std::to_string(sizes[i]);
  return s + "]";
}

Index sum(const std::vector<Index>& v) {
  Index s = 0;
  for (Index x : v) s += x;
  return s;
}

ObservationalDataset load_dataset_file(const std::string& path, const std::string& key) {
  if (path.empty()) throw ConfigError("config key '" + key + "' is required for this command");
  if (!fs::exists(path)) throw ConfigError("config key '" + key + "': dataset file '" + path + "' does not exist");
  CsvSchema schema;
  schema.standardize = false;
  return load_csv(path, schema);
}

std::string checkpoint_path(const RunConfig& c) {
  return c.paths.checkpoint.empty() ? (fs::path(c.out_dir) / "checkpoint.bin").string() : c.paths.checkpoint;
}

FittedMethod fitted_for(const RunConfig& c, const ObservationalDataset& raw_train) {
  if (c.method.name != "metaite") return fit_method(c.plan(), raw_train, c.seed);
  const std::string path = checkpoint_path(c);
  if (!fs::exists(path)) throw ConfigError("checkpoint '" + path + "' does not exist; run train first");
  FittedMethod f = read_checkpoint(path);
  if (f.k != raw_train.k) throw std::runtime_error("checkpoint treatment count does not match the training data");
  return f;
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch == '\n' ? ' ' : ch;
  }
  return out + "\"";
}

std::string opt_str(const std::optional<double>& v) { return v ? format_double(*v) : ""; }

template <typename T>
void put_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

constexpr char kCheckpointMagic[8] = {'M', 'I', 'T', 'E', 'C', 'K', 'P', '1'};

}  // namespace

RunConfig resolve_config(const CommandOptions& options) {
  if (options.config_path.empty()) throw ConfigError("--config is required");
  RunConfig c = load_config(options.config_path, environment_overrides());
  if (options.seed) {
    c.seed = *options.seed;
    c.meta.seed = *options.seed;
  }
  if (options.out_dir) c.out_dir = *options.out_dir;
  if (options.jobs) {
    if (*options.jobs < 1) throw ConfigError("--jobs must be >= 1");
    c.jobs = *options.jobs;
  }
  if (options.mode) {
    if (*options.mode != "robustness" && *options.mode != "ablation" && *options.mode != "repeat")
      throw ConfigError("--mode must be robustness, ablation or repeat");
    c.sweep.mode = *options.mode;
  }
  return c;
}

void write_checkpoint(const std::string& path, const FittedMethod& fitted, const RunConfig& config) {
  if (!fitted.params) throw std::invalid_argument("checkpoint: only trained meta-learners are checkpointed");
  json header;
  header["method"] = fitted.method;
  header["kind"] = to_string(fitted.kind);
  header["k"] = fitted.k;
  header["target"] = fitted.target;
  header["config"] = json::parse(config.to_json());
  const std::string text = header.dump();

  std::ostringstream out(std::ios::binary);
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  put_pod<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  const Index p = fitted.standardizer.mean.size();
  put_pod<std::uint64_t>(out, static_cast<std::uint64_t>(p));
  for (Index j = 0; j < p; ++j) put_pod<double>(out, fitted.standardizer.mean(j));
  for (Index j = 0; j < p; ++j) put_pod<double>(out, fitted.standardizer.scale(j));
  put_pod<double>(out, fitted.outcome_mean);
  put_pod<double>(out, fitted.outcome_scale);
  write_params(out, *fitted.params);
  write_file_atomic(path, out.str());
}

FittedMethod read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw std::runtime_error("'" + path + "' is not a metaite checkpoint");
  const auto len = get_pod<std::uint64_t>(in);
  if (len > (1u << 26)) throw std::runtime_error("checkpoint: header too large");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error("checkpoint: truncated header");
  const json header = json::parse(text, nullptr, false);
  if (header.is_discarded()) throw std::runtime_error("checkpoint: corrupt header");

  FittedMethod f;
  f.method = header.at("method").get<std::string>();
  f.kind = task_kind_from_string(header.at("kind").get<std::string>());
  f.k = header.at("k").get<int>();
  f.target = header.at("target").get<int>();
  const auto p = static_cast<Index>(get_pod<std::uint64_t>(in));
  if (p > (1 << 20)) throw std::runtime_error("checkpoint: implausible covariate count");
  f.standardizer.mean.resize(p);
  f.standardizer.scale.resize(p);
  for (Index j = 0; j < p; ++j) f.standardizer.mean(j) = get_pod<double>(in);
  for (Index j = 0; j < p; ++j) f.standardizer.scale(j) = get_pod<double>(in);
  f.outcome_mean = get_pod<double>(in);
  f.outcome_scale = get_pod<double>(in);
  f.params = read_params(in);
  return f;
}

std::string report_json(const MetricsReport& r) {
  json j;
  j["method"] = r.method;
  j["seed"] = r.seed;
  j["config_hash"] = r.config_hash;
  j["k"] = r.k;
  j["n_test"] = r.n_test;
  j["n_train"] = r.n_train;
  json metrics = json::object();
  if (r.sqrt_pehe) metrics["sqrt_pehe"] = *r.sqrt_pehe;
  if (r.ate_error) metrics["ate_error"] = *r.ate_error;
  if (r.rmse) metrics["rmse"] = *r.rmse;
  j["metrics"] = metrics;
  j["train_group_sizes"] = r.train_group_sizes;
  j["jitter_used"] = r.jitter_used;
  j["jitter"] = r.jitter;
  if (r.final_mmd2) j["final_mmd2"] = *r.final_mmd2;
  return j.dump(2) + "\n";
}

MetricsReport report_from_json(const std::string& text) {
  const json j = json::parse(text);
  MetricsReport r;
  r.method = j.at("method").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.config_hash = j.at("config_hash").get<std::string>();
  r.k = j.at("k").get<int>();
  r.n_test = j.at("n_test").get<Index>();
  r.n_train = j.at("n_train").get<Index>();
  const json& m = j.at("metrics");
  if (m.contains("sqrt_pehe")) r.sqrt_pehe = m.at("sqrt_pehe").get<double>();
  if (m.contains("ate_error")) r.ate_error = m.at("ate_error").get<double>();
  if (m.contains("rmse")) r.rmse = m.at("rmse").get<double>();
  r.train_group_sizes = j.at("train_group_sizes").get<std::vector<Index>>();
  r.jitter_used = j.at("jitter_used").get<bool>();
  r.jitter = j.at("jitter").get<double>();
  if (j.contains("final_mmd2")) r.final_mmd2 = j.at("final_mmd2").get<double>();
  return r;
}

std::string report_csv(const MetricsReport& r) {
  std::string s = "method,seed,config_hash,k,n_test,n_train,sqrt_pehe,ate_error,rmse\n";
  s += r.method + "," + std::to_string(r.seed) + "," + r.config_hash + "," + std::to_string(r.k) + "," +
       std::to_string(r.n_test) + "," + std::to_string(r.n_train) + "," + opt_str(r.sqrt_pehe) + "," +
       opt_str(r.ate_error) + "," + opt_str(r.rmse) + "\n";
  return s;
}

std::string predictions_csv(const Matrix& y_hat) {
  std::string s;
  for (Index t = 0; t < y_hat.cols(); ++t) s += (t ? ",y_hat_" : "y_hat_") + std::to_string(t);
  s += "\n";
  for (Index i = 0; i < y_hat.rows(); ++i) {
    for (Index t = 0; t < y_hat.cols(); ++t) {
      if (t) s += ",";
      s += format_double(y_hat(i, t));
    }
    s += "\n";
  }
  return s;
}

Matrix load_predictions(const std::string& path) {
  if (!fs::exists(path)) throw ConfigError("config key 'paths.predictions': file '" + path + "' does not exist");
  std::istringstream in(read_file(path));
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("predictions: empty file");
  const auto header = split_csv_line(line);
  for (std::size_t t = 0; t < header.size(); ++t)
    if (header[t] != "y_hat_" + std::to_string(t)) throw std::runtime_error("predictions: unexpected header '" + line + "'");
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size())
      throw std::runtime_error("predictions: row " + std::to_string(rows.size() + 1) + " has the wrong column count");
    std::vector<double> row;
    for (const auto& c : cells) row.push_back(parse_double(c));
    rows.push_back(std::move(row));
  }
  Matrix m(static_cast<Index>(rows.size()), static_cast<Index>(header.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t t = 0; t < header.size(); ++t) m(static_cast<Index>(i), static_cast<Index>(t)) = rows[i][t];
  return m;
}

std::string cell_file_name(const std::string& id) {
  std::string s;
  for (char ch : id) {
    if (ch == '/')
      s += "__";
    else if (std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '.' || ch == '=' || ch == '_')
      s += ch;
    else
      s += '~';
  }
  return s + ".json";
}

void cmd_gen_data(const RunConfig& config, std::ostream& out) {
  Manifest manifest("gen-data", config);
  const RunPlan plan = config.plan();
  RngStream data_rng = RngStream(config.seed).substream("data");
  const ObservationalDataset full = make_dataset(plan.dataset, data_rng);
  const PreparedData parts = generate_splits(plan, config.seed);

  save_csv(manifest.path("data.csv"), full);
  manifest.add_existing("data.csv");
  save_csv(manifest.path("train.csv"), parts.train);
  manifest.add_existing("train.csv");
  save_csv(manifest.path("test.csv"), parts.test);
  manifest.add_existing("test.csv");
  manifest.finish();

  const auto sizes = full.group_sizes();
  out << "dataset " << to_string(plan.dataset.kind) << ": n=" << full.size() << " p=" << full.dim() << " k=" << full.k
      << " group sizes " << sizes_str(sizes) << " (sum " << sum(sizes) << ")\n";
  out << "train: n=" << parts.train.size() << " group sizes " << sizes_str(parts.train.group_sizes()) << "\n";
  out << "test: n=" << parts.test.size() << " group sizes " << sizes_str(parts.test.group_sizes()) << "\n";
  out << "wrote " << manifest.path("data.csv") << ", train.csv, test.csv\n";
}

void cmd_train(const RunConfig& config, std::ostream& out, std::ostream& log) {
  if (config.method.name != "metaite")
    throw ConfigError("train: method '" + config.method.name + "' has no training step; use estimate or evaluate");
  const ObservationalDataset raw_train = load_dataset_file(config.paths.train, "paths.train");
  Manifest manifest("train", config);
  const long every = std::max<long>(1, config.meta.max_iters / 10);
  const FittedMethod fitted = fit_method(config.plan(), raw_train, config.seed, [&](const TraceRecord& r) {
    if (r.iteration % every == 0 || r.iteration == config.meta.max_iters)
      log << "iter " << r.iteration << " L_obj=" << r.objective << " L_Que=" << r.query << " L_disc=" << r.disc << "\n";
  });
  write_checkpoint(manifest.path("checkpoint.bin"), fitted, config);
  manifest.add_existing("checkpoint.bin");
  manifest.write_output("trace.csv", trace_csv(fitted.trace));
  manifest.finish();
  out << "trained " << fitted.trace.size() << " iterations toward target treatment " << fitted.target << "\n";
  out << "wrote " << manifest.path("checkpoint.bin") << ", trace.csv\n";
}

void cmd_estimate(const RunConfig& config, std::ostream& out) {
  const ObservationalDataset raw_train = load_dataset_file(config.paths.train, "paths.train");
  const ObservationalDataset test = load_dataset_file(config.paths.test, "paths.test");
  Manifest manifest("estimate", config);
  const FittedMethod fitted = fitted_for(config, raw_train);
  const Matrix y_hat = predict_method(fitted, config.meta, raw_train, test.x, config.seed);
  manifest.write_output("predictions.csv", predictions_csv(y_hat));
  manifest.finish();
  out << "wrote " << y_hat.rows() << " x " << y_hat.cols() << " predictions to " << manifest.path("predictions.csv")
      << "\n";
}

void cmd_evaluate(const RunConfig& config, std::ostream& out) {
  const ObservationalDataset test = load_dataset_file(config.paths.test, "paths.test");
  if (!test.y_all)
    throw std::runtime_error("evaluate: '" + config.paths.test +
                             "' has no y_potential columns; counterfactual ground truth is required to score "
                             "treatment-effect estimates, so no metrics were written");
  Manifest manifest("evaluate", config);
  Matrix y_hat;
  std::string method = config.method.name;
  MetricsReport extra;
  Index n_train = 0;
  std::vector<Index> train_sizes;
  if (!config.paths.predictions.empty()) {
    y_hat = load_predictions(config.paths.predictions);
    method = "predictions";
  } else {
    const ObservationalDataset raw_train = load_dataset_file(config.paths.train, "paths.train");
    const FittedMethod fitted = fitted_for(config, raw_train);
    y_hat = predict_method(fitted, config.meta, raw_train, test.x, config.seed);
    if (fitted.baseline) {
      extra.jitter_used = fitted.baseline->jitter_used();
      extra.jitter = fitted.baseline->jitter();
    }
    n_train = raw_train.size();
    train_sizes = raw_train.group_sizes();
  }
  if (y_hat.rows() != test.size() || y_hat.cols() != test.k)
    throw std::runtime_error("evaluate: predictions are " + std::to_string(y_hat.rows()) + " x " +
                             std::to_string(y_hat.cols()) + " but the test set needs " + std::to_string(test.size()) +
                             " x " + std::to_string(test.k));
  MetricsReport r = score(*test.y_all, y_hat);
  r.method = method;
  r.seed = config.seed;
  r.config_hash = config.hash();
  r.n_train = n_train;
  r.train_group_sizes = train_sizes;
  r.jitter_used = extra.jitter_used;
  r.jitter = extra.jitter;
  manifest.write_output("metrics.json", report_json(r));
  manifest.write_output("metrics.csv", report_csv(r));
  manifest.finish();
  if (r.sqrt_pehe) out << "sqrt_pehe " << format_double(*r.sqrt_pehe) << "\n";
  if (r.ate_error) out << "ate_error " << format_double(*r.ate_error) << "\n";
  out << "rmse " << format_double(*r.rmse) << "\n";
}

namespace {

std::string sweep_runs_csv(std::span<const SweepCell> cells, std::span<const CellOutcome> outcomes,
                           const std::optional<Aggregate>& aggregate_rows) {
  std::string s =
      "row_type,cell_id,method,fraction,imbalance_ratio,mu,epsilon,gamma,repeat,seed,sqrt_pehe,ate_error,rmse,"
      "final_mmd2,error\n";
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const SweepCell& c = cells[i];
    const CellOutcome& o = outcomes[i];
    s += "run," + csv_escape(c.id) + "," + c.plan.method.name + "," + format_double(c.fraction) + "," +
         format_double(1.0 / c.fraction) + "," + format_double(c.weights[0]) + "," + format_double(c.weights[1]) + "," +
         format_double(c.weights[2]) + "," + std::to_string(c.repeat) + "," + std::to_string(c.seed) + ",";
    if (o.report) {
      s += opt_str(o.report->sqrt_pehe) + "," + opt_str(o.report->ate_error) + "," + opt_str(o.report->rmse) + "," +
           opt_str(o.report->final_mmd2) + ",";
    } else {
      s += ",,,,";
    }
    s += csv_escape(o.error) + "\n";
  }
  if (aggregate_rows && !cells.empty()) {
    const SweepCell& c = cells.front();
    auto field = [](const std::optional<MetricSummary>& m, bool mean) {
      return m ? format_double(mean ? m->mean : m->std) : std::string();
    };
    for (bool mean : {true, false}) {
      s += std::string(mean ? "aggregate_mean" : "aggregate_std") + ",," + c.plan.method.name + "," +
           format_double(c.fraction) + "," + format_double(1.0 / c.fraction) + "," + format_double(c.weights[0]) +
           "," + format_double(c.weights[1]) + "," + format_double(c.weights[2]) + ",,," +
           field(aggregate_rows->sqrt_pehe, mean) + "," + field(aggregate_rows->ate_error, mean) + "," +
           field(aggregate_rows->rmse, mean) + ",,\n";
    }
  }
  return s;
}

}  // namespace

void cmd_sweep(const RunConfig& config, std::ostream& out) {
  Manifest manifest("sweep", config);
  const RunPlan base = config.plan();
  const std::string& mode = config.sweep.mode;
  std::vector<SweepCell> cells;
  if (mode == "robustness") {
    cells = robustness_cells(base, config.sweep.methods, config.sweep.fractions, config.sweep.repeats);
  } else if (mode == "ablation") {
    cells = ablation_cells(base, config.sweep.grid, config.sweep.repeats);
  } else {
    for (int r = 0; r < config.sweep.repeats; ++r) {
      SweepCell c;
      c.id = "repeat/" + base.method.name + "/r=" + std::to_string(r);
      c.plan = base;
      c.seed = config.seed + static_cast<std::uint64_t>(r);
      c.repeat = r;
      c.weights = {base.meta.mu, base.meta.epsilon, base.meta.gamma};
      cells.push_back(std::move(c));
    }
  }

  const fs::path cell_dir = fs::path(config.out_dir) / "cells";
  fs::create_directories(cell_dir);
  std::vector<CellOutcome> outcomes(cells.size());
  std::vector<SweepCell> todo;
  std::vector<std::size_t> todo_index;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const fs::path file = cell_dir / cell_file_name(cells[i].id);
    if (fs::exists(file)) {
      const json j = json::parse(read_file(file.string()), nullptr, false);
      if (!j.is_discarded() && j.value("id", "") == cells[i].id && j.value("config_hash", "") == base.config_hash &&
          j.contains("report")) {
        outcomes[i].report = report_from_json(j.at("report").dump());
        continue;
      }
    }
    todo.push_back(cells[i]);
    todo_index.push_back(i);
  }

  out << "sweep " << mode << ": " << cells.size() << " cells, " << (cells.size() - todo.size())
      << " already complete, running " << todo.size() << "\n";
  run_cells(todo, config.jobs, [&](std::size_t k, const CellOutcome& o) {
    const std::size_t i = todo_index[k];
    outcomes[i] = o;
    json j;
    j["id"] = cells[i].id;
    j["seed"] = cells[i].seed;
    j["config_hash"] = base.config_hash;
    if (o.report)
      j["report"] = json::parse(report_json(*o.report));
    else
      j["error"] = o.error;
    write_file_atomic((cell_dir / cell_file_name(cells[i].id)).string(), j.dump(2) + "\n");
    out << (o.report ? "done " : "FAILED ") << cells[i].id << (o.report ? "" : ": " + o.error) << "\n";
  });

  std::size_t failed = 0;
  for (const auto& o : outcomes)
    if (!o.report) ++failed;
  for (const auto& c : cells) manifest.add_existing("cells/" + cell_file_name(c.id));

  std::string table;
  if (mode == "robustness") {
    table = "method,fraction,imbalance_ratio,metric,mean,std,count\n";
    for (const auto& row : tabulate_robustness(cells, outcomes)) {
      table += row.method + "," + format_double(row.fraction) + "," + format_double(row.imbalance_ratio) + "," +
               row.metric_name + "," + format_double(row.metric.mean) + "," + format_double(row.metric.std) + "," +
               std::to_string(row.metric.count) + "\n";
    }
    manifest.write_output("sweep_runs.csv", sweep_runs_csv(cells, outcomes, std::nullopt));
  } else if (mode == "ablation") {
    table = "rank,mu,epsilon,gamma,metric,mean,std,count\n";
    const auto rows = tabulate_ablation(cells, outcomes);
    for (const auto& row : rows) {
      table += std::to_string(row.rank) + "," + format_double(row.weights[0]) + "," + format_double(row.weights[1]) +
               "," + format_double(row.weights[2]) + "," + row.metric_name + "," + format_double(row.metric.mean) +
               "," + format_double(row.metric.std) + "," + std::to_string(row.metric.count) + "\n";
    }
    for (std::size_t r = 0; r < rows.size() && r < 3 && rows[r].rank > 0; ++r) {
      out << "top " << rows[r].rank << ": " << rows[r].metric_name << " " << format_double(rows[r].metric.mean)
          << " with {" << format_double(rows[r].weights[0]) << ", " << format_double(rows[r].weights[1]) << ", "
          << format_double(rows[r].weights[2]) << "}\n";
    }
    manifest.write_output("sweep_runs.csv", sweep_runs_csv(cells, outcomes, std::nullopt));
  } else {
    std::vector<MetricsReport> reports;
    for (const auto& o : outcomes)
      if (o.report) reports.push_back(*o.report);
    const Aggregate agg = aggregate(reports);
    table = "metric,mean,std,count\n";
    for (const auto& [name, m] : {std::pair{"sqrt_pehe", agg.sqrt_pehe}, std::pair{"ate_error", agg.ate_error},
                                  std::pair{"rmse", agg.rmse}}) {
      if (!m) continue;
      table += std::string(name) + "," + format_double(m->mean) + "," + format_double(m->std) + "," +
               std::to_string(m->count) + "\n";
      out << name << " " << format_double(m->mean) << " +- " << format_double(m->std) << "\n";
    }
    manifest.write_output("sweep_runs.csv", sweep_runs_csv(cells, outcomes, agg));
  }
  manifest.write_output("sweep_table.csv", table);
  manifest.finish();
  out << "wrote " << manifest.path("sweep_table.csv") << " (" << failed << " failed cells)\n";
}

int run_command(const std::string& command, const CommandOptions& options, std::ostream& out, std::ostream& err) {
  try {
    const RunConfig config = resolve_config(options);
    if (command == "gen-data")
      cmd_gen_data(config, out);
    else if (command == "train")
      cmd_train(config, out, err);
    else if (command == "estimate")
      cmd_estimate(config, out);
    else if (command == "evaluate")
      cmd_evaluate(config, out);
    else if (command == "sweep")
      cmd_sweep(config, out);
    else
      throw ConfigError("unknown command '" + command + "'");
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DivergenceError& e) {
    err << "error: training diverged: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace metaite::cli
