#include "metaite/eval/experiment.hpp"

#include "metaite/eval/metrics.hpp"
#include "metaite/io.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <mutex>
#include <stdexcept>
#include <thread>

namespace metaite {

std::string to_string(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::twins_bin:
      return "twins_bin";
    case DatasetKind::twins_four:
      return "twins_four";
    case DatasetKind::news:
      return "news";
    case DatasetKind::csv:
      return "csv";
  }
  return "?";
}

DatasetKind dataset_kind_from_string(const std::string& s) {
  if (s == "twins_bin") return DatasetKind::twins_bin;
  if (s == "twins_four") return DatasetKind::twins_four;
  if (s == "news") return DatasetKind::news;
  if (s == "csv") return DatasetKind::csv;
  throw std::invalid_argument("unknown dataset kind '" + s + "'");
}

Index default_rows(const DatasetSpec& spec) {
  if (spec.n > 0) return spec.n;
  switch (spec.kind) {
    case DatasetKind::twins_bin:
      return 11400;
    case DatasetKind::twins_four:
      return 11984;
    case DatasetKind::news:
      return 5000;
    case DatasetKind::csv:
      return 0;
  }
  return 0;
}

ObservationalDataset make_dataset(const DatasetSpec& spec, RngStream& rng) {
  const Index n = default_rows(spec);
  switch (spec.kind) {
    case DatasetKind::twins_bin: {
      TwinsOptions opt;
      opt.noise_sd = spec.noise_sd;
      return gen_twins_binary(n, rng, opt);
    }
    case DatasetKind::twins_four: {
      TwinsFourOptions opt;
      opt.noise_sd = spec.noise_sd;
      opt.bias_weight = spec.bias_weight;
      return gen_twins_four(n, rng, opt);
    }
    case DatasetKind::news:
      return gen_news(n, spec.k, spec.topics, spec.scale, spec.kappa, rng);
    case DatasetKind::csv: {
      if (spec.path.empty()) throw std::invalid_argument("dataset: csv kind needs a path");
      CsvSchema schema;
      schema.standardize = false;
      return load_csv(spec.path, schema);
    }
  }
  throw std::invalid_argument("dataset: unknown kind");
}

std::array<double, 3> default_loss_weights(const DatasetSpec& spec) {
  if (spec.kind == DatasetKind::news && spec.k == 2) return {1.0, 0.9, 1.0};
  return {1.0, 0.0, 1.0};
}

double MetricsReport::primary_metric() const {
  if (sqrt_pehe) return *sqrt_pehe;
  if (rmse) return *rmse;
  throw std::logic_error("MetricsReport: no metric available");
}

MetricsReport score(const Matrix& y_true, const Matrix& y_hat) {
  if (y_true.rows() != y_hat.rows() || y_true.cols() != y_hat.cols())
    throw std::invalid_argument("score: prediction shape does not match the potential outcomes");
  MetricsReport r;
  r.n_test = y_true.rows();
  r.k = static_cast<int>(y_true.cols());
  if (r.k == 2) {
    r.sqrt_pehe = sqrt_pehe(y_true, y_hat);
    r.ate_error = ate_error(y_true, y_hat);
  }
  r.rmse = rmse_multi(y_true, y_hat);
  return r;
}

PreparedData generate_splits(const RunPlan& plan, std::uint64_t seed) {
  const RngStream root(seed);
  RngStream data_rng = root.substream("data");
  RngStream split_rng = root.substream("split");
  RngStream imbalance_rng = root.substream("imbalance");

  const ObservationalDataset full = make_dataset(plan.dataset, data_rng);
  auto [train, test] = split(full, plan.dataset.train_fraction, split_rng);
  if (!plan.imbalance.keep_fraction.empty() || !plan.imbalance.keep_count.empty())
    train = apply_imbalance(train, plan.imbalance, imbalance_rng);
  return {std::move(train), std::move(test)};
}

PreparedData prepare_data(const RunPlan& plan, std::uint64_t seed) {
  PreparedData d = generate_splits(plan, seed);
  const Standardizer st = Standardizer::fit(d.train.x);
  d.train.x = st.apply(d.train.x);
  d.test.x = st.apply(d.test.x);
  return d;
}

ObservationalDataset model_view(const FittedMethod& fitted, const ObservationalDataset& raw_train) {
  ObservationalDataset view = raw_train;
  view.x = fitted.standardizer.apply(raw_train.x);
  if (fitted.kind == TaskKind::regression) {
    view.y_factual = (raw_train.y_factual.array() - fitted.outcome_mean) / fitted.outcome_scale;
    view.y_all.reset();
  }
  return view;
}

FittedMethod fit_method(const RunPlan& plan, const ObservationalDataset& raw_train, std::uint64_t seed,
                        const StepCallback& on_step) {
  raw_train.validate();
  FittedMethod f;
  f.method = plan.method.name;
  f.kind = raw_train.kind;
  f.k = raw_train.k;
  f.standardizer = Standardizer::fit(raw_train.x);
  if (f.method != "metaite") {
    ObservationalDataset view = raw_train;
    view.x = f.standardizer.apply(raw_train.x);
    f.baseline = BaselineModel::fit(baseline_kind_from_string(f.method), view, plan.method.baseline);
    return f;
  }
  if (f.kind == TaskKind::regression) {
    const Vector& y = raw_train.y_factual;
    f.outcome_mean = y.mean();
    const double var = (y.array() - f.outcome_mean).square().mean();
    f.outcome_scale = var > 1e-24 ? std::sqrt(var) : 1.0;
  }
  const ObservationalDataset view = model_view(f, raw_train);
  MetaConfig config = plan.meta;
  config.seed = seed;
  f.target = plan.method.target >= 0 ? plan.method.target : default_target(view);
  TrainResult trained = train(view, f.target, config, on_step);
  f.params = std::move(trained.params);
  f.trace = std::move(trained.trace);
  return f;
}

Matrix predict_method(const FittedMethod& fitted, const MetaConfig& config, const ObservationalDataset& raw_train,
                      const Matrix& raw_x_test, std::uint64_t seed) {
  const Matrix x = fitted.standardizer.apply(raw_x_test);
  if (fitted.baseline) return fitted.baseline->predict(x);
  if (!fitted.params) throw std::invalid_argument("predict: model has no parameters");
  const ObservationalDataset view = model_view(fitted, raw_train);
  MetaConfig c = config;
  c.seed = seed;
  RngStream rng = RngStream(seed).substream("estimate");
  Matrix y_hat = estimate_all(*fitted.params, view, x, fitted.kind, c, rng);
  if (fitted.kind == TaskKind::regression) y_hat = (y_hat.array() * fitted.outcome_scale + fitted.outcome_mean).matrix();
  return y_hat;
}

MetricsReport run_once(const RunPlan& plan, std::uint64_t seed) {
  const PreparedData data = generate_splits(plan, seed);
  if (!data.test.y_all)
    throw std::invalid_argument("run: dataset has no potential-outcome columns; counterfactual ground truth is required");

  const FittedMethod fitted = fit_method(plan, data.train, seed);
  const Matrix y_hat = predict_method(fitted, plan.meta, data.train, data.test.x, seed);

  MetricsReport report = score(*data.test.y_all, y_hat);
  if (!fitted.trace.empty()) {
    const std::size_t tail = std::min<std::size_t>(fitted.trace.size(), 1000);
    double s = 0.0;
    for (std::size_t i = fitted.trace.size() - tail; i < fitted.trace.size(); ++i) s += fitted.trace[i].disc;
    report.final_mmd2 = s / static_cast<double>(tail);
  }
  if (fitted.baseline) {
    report.jitter_used = fitted.baseline->jitter_used();
    report.jitter = fitted.baseline->jitter();
  }
  report.n_train = data.train.size();
  report.train_group_sizes = data.train.group_sizes();
  report.seed = seed;
  report.method = plan.method.name;
  report.config_hash = plan.config_hash;
  return report;
}

namespace {

MetricSummary summarize(const std::vector<double>& v) {
  MetricSummary s;
  s.count = v.size();
  if (v.empty()) return s;
  double sum = 0.0;
  for (double x : v) sum += x;
  s.mean = sum / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

std::optional<MetricSummary> summarize_field(std::span<const MetricsReport> reports,
                                             std::optional<double> MetricsReport::*field) {
  std::vector<double> v;
  for (const auto& r : reports)
    if (r.*field) v.push_back(*(r.*field));
  if (v.empty()) return std::nullopt;
  return summarize(v);
}

}  // namespace

Aggregate aggregate(std::span<const MetricsReport> reports) {
  Aggregate a;
  a.sqrt_pehe = summarize_field(reports, &MetricsReport::sqrt_pehe);
  a.ate_error = summarize_field(reports, &MetricsReport::ate_error);
  a.rmse = summarize_field(reports, &MetricsReport::rmse);
  return a;
}

std::vector<CellOutcome> run_cells(std::span<const SweepCell> cells, int jobs,
                                   const std::function<void(std::size_t, const CellOutcome&)>& on_done) {
  std::vector<CellOutcome> out(cells.size());
  std::atomic<std::size_t> next{0};
  std::mutex done_mutex;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      CellOutcome outcome;
      try {
        outcome.report = run_once(cells[i].plan, cells[i].seed);
      } catch (const std::exception& e) {
        outcome.error = e.what();
      }
      out[i] = outcome;
      if (on_done) {
        std::lock_guard<std::mutex> lock(done_mutex);
        on_done(i, out[i]);
      }
    }
  };
  const auto n_workers = static_cast<std::size_t>(std::max(1, jobs));
  if (n_workers == 1 || cells.size() <= 1) {
    worker();
    return out;
  }
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::min(n_workers, cells.size()); ++w) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  return out;
}

ExperimentResult run_experiment(const RunPlan& plan, int repeats, int jobs) {
  if (repeats < 1) throw std::invalid_argument("run_experiment: repeats must be >= 1");
  std::vector<SweepCell> cells;
  for (int r = 0; r < repeats; ++r) {
    SweepCell c;
    c.id = "run-" + std::to_string(r);
    c.plan = plan;
    c.seed = plan.meta.seed + static_cast<std::uint64_t>(r);
    c.repeat = r;
    cells.push_back(std::move(c));
  }
  const auto outcomes = run_cells(cells, jobs);
  ExperimentResult result;
  for (const auto& o : outcomes) {
    if (!o.report) throw std::runtime_error(o.error);
    result.runs.push_back(*o.report);
  }
  result.summary = aggregate(result.runs);
  return result;
}

ImbalanceSpec robustness_imbalance(int k, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("robustness: fractions must lie in (0,1]");
  ImbalanceSpec spec;
  spec.keep_fraction.assign(static_cast<std::size_t>(k), fraction);
  spec.keep_fraction[0] = 1.0;
  return spec;
}

namespace {

int treatment_count(const DatasetSpec& spec) {
  switch (spec.kind) {
    case DatasetKind::twins_bin:
      return 2;
    case DatasetKind::twins_four:
      return 4;
    case DatasetKind::news:
      return spec.k;
    case DatasetKind::csv:
      break;
  }
  CsvSchema schema;
  schema.standardize = false;
  return load_csv(spec.path, schema).k;
}

std::string metric_name(const CellOutcome& o) { return o.report && o.report->k == 2 ? "sqrt_pehe" : "rmse"; }

}  // namespace

std::vector<SweepCell> robustness_cells(const RunPlan& base, std::span<const std::string> methods,
                                        std::span<const double> fractions, int repeats) {
  if (repeats < 1) throw std::invalid_argument("robustness: repeats must be >= 1");
  const int k = treatment_count(base.dataset);
  std::vector<SweepCell> cells;
  for (const auto& m : methods) {
    for (double f : fractions) {
      for (int r = 0; r < repeats; ++r) {
        SweepCell c;
        c.id = "robustness/" + m + "/f=" + format_double(f) + "/r=" + std::to_string(r);
        c.plan = base;
        c.plan.method.name = m;
        c.plan.imbalance = robustness_imbalance(k, f);
        c.seed = base.meta.seed + static_cast<std::uint64_t>(r);
        c.fraction = f;
        c.repeat = r;
        c.weights = {base.meta.mu, base.meta.epsilon, base.meta.gamma};
        cells.push_back(std::move(c));
      }
    }
  }
  return cells;
}

std::vector<RobustnessRow> tabulate_robustness(std::span<const SweepCell> cells, std::span<const CellOutcome> outcomes) {
  if (cells.size() != outcomes.size()) throw std::invalid_argument("tabulate: cell/outcome count mismatch");
  std::vector<std::pair<std::string, double>> order;
  std::map<std::pair<std::string, double>, std::vector<double>> values;
  std::map<std::pair<std::string, double>, std::string> names;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto key = std::make_pair(cells[i].plan.method.name, cells[i].fraction);
    if (!values.count(key)) order.push_back(key);
    auto& v = values[key];
    if (outcomes[i].report) {
      v.push_back(outcomes[i].report->primary_metric());
      names[key] = metric_name(outcomes[i]);
    }
  }
  std::vector<RobustnessRow> rows;
  for (const auto& key : order) {
    RobustnessRow row;
    row.method = key.first;
    row.fraction = key.second;
    row.imbalance_ratio = 1.0 / key.second;
    row.metric = summarize(values[key]);
    row.metric_name = names.count(key) ? names[key] : "";
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<RobustnessRow> robustness_sweep(const RunPlan& base, std::span<const std::string> methods,
                                            std::span<const double> fractions, int repeats, int jobs) {
  const auto cells = robustness_cells(base, methods, fractions, repeats);
  const auto outcomes = run_cells(cells, jobs);
  return tabulate_robustness(cells, outcomes);
}

std::vector<std::array<double, 3>> ablation_grid(std::span<const double> values) {
  for (double v : values)
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("ablation: grid values must lie in [0,1]");
  std::vector<std::array<double, 3>> grid;
  grid.reserve(values.size() * values.size() * values.size());
  for (double mu : values)
    for (double eps : values)
      for (double gam : values) grid.push_back({mu, eps, gam});
  return grid;
}

std::vector<SweepCell> ablation_cells(const RunPlan& base, std::span<const double> values, int repeats) {
  if (repeats < 1) throw std::invalid_argument("ablation: repeats must be >= 1");
  std::vector<SweepCell> cells;
  for (const auto& w : ablation_grid(values)) {
    for (int r = 0; r < repeats; ++r) {
      SweepCell c;
      c.id = "ablation/mu=" + format_double(w[0]) + "/epsilon=" + format_double(w[1]) + "/gamma=" + format_double(w[2]) +
             "/r=" + std::to_string(r);
      c.plan = base;
      c.plan.method.name = "metaite";
      c.plan.meta.mu = w[0];
      c.plan.meta.epsilon = w[1];
      c.plan.meta.gamma = w[2];
      c.seed = base.meta.seed + static_cast<std::uint64_t>(r);
      c.repeat = r;
      c.weights = w;
      cells.push_back(std::move(c));
    }
  }
  return cells;
}

std::vector<AblationRow> tabulate_ablation(std::span<const SweepCell> cells, std::span<const CellOutcome> outcomes) {
  if (cells.size() != outcomes.size()) throw std::invalid_argument("tabulate: cell/outcome count mismatch");
  std::vector<std::array<double, 3>> order;
  std::map<std::array<double, 3>, std::vector<double>> values;
  std::map<std::array<double, 3>, std::string> names;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& key = cells[i].weights;
    if (!values.count(key)) order.push_back(key);
    auto& v = values[key];
    if (outcomes[i].report) {
      v.push_back(outcomes[i].report->primary_metric());
      names[key] = metric_name(outcomes[i]);
    }
  }
  std::vector<AblationRow> rows;
  for (const auto& key : order) {
    AblationRow row;
    row.weights = key;
    row.metric = summarize(values[key]);
    row.metric_name = names.count(key) ? names[key] : "";
    rows.push_back(std::move(row));
  }
  std::stable_sort(rows.begin(), rows.end(), [](const AblationRow& a, const AblationRow& b) {
    if ((a.metric.count == 0) != (b.metric.count == 0)) return b.metric.count == 0;
    return a.metric.mean < b.metric.mean;
  });
  int rank = 0;
  for (auto& row : rows)
    if (row.metric.count > 0) row.rank = ++rank;
  return rows;
}

std::vector<AblationRow> ablation_sweep(const RunPlan& base, std::span<const double> values, int repeats, int jobs) {
  const auto cells = ablation_cells(base, values, repeats);
  const auto outcomes = run_cells(cells, jobs);
  return tabulate_ablation(cells, outcomes);
}

}  // namespace metaite
