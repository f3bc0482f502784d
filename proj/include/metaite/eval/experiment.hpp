#pragma once

#include "metaite/datagen.hpp"
#include "metaite/eval/baselines.hpp"
#include "metaite/meta_engine.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace metaite {

enum class DatasetKind { twins_bin, twins_four, news, csv };

std::string to_string(DatasetKind kind);
DatasetKind dataset_kind_from_string(const std::string& s);

struct DatasetSpec {
  DatasetKind kind = DatasetKind::twins_bin;
  /// Rows to generate (pairs for twins_bin). 0 picks the benchmark default.
  Index n = 0;
  /// Treatments for news.
  int k = 2;
  Index topics = 50;
  double scale = 50.0;  // news C
  double kappa = 10.0;
  /// Twins assignment noise sd.
  double noise_sd = 0.1;
  /// Twins four-treatment assignment score scale.
  double bias_weight = 1.0;
  /// CSV input (kind == csv).
  std::string path;
  double train_fraction = 0.8;
};

Index default_rows(const DatasetSpec& spec);
ObservationalDataset make_dataset(const DatasetSpec& spec, RngStream& rng);

/// "metaite" or one of the baseline names.
struct MethodSpec {
  std::string name = "metaite";
  BaselineOptions baseline;
  /// Target treatment for meta-training; -1 picks the smallest training group.
  int target = -1;
};

struct RunPlan {
  DatasetSpec dataset;
  /// Applied to the training split; empty means no subsampling.
  ImbalanceSpec imbalance;
  MethodSpec method;
  MetaConfig meta;
  std::string config_hash;
};

struct MetricsReport {
  std::optional<double> sqrt_pehe;  // k == 2 only
  std::optional<double> ate_error;  // k == 2 only
  std::optional<double> rmse;
  Index n_test = 0;
  Index n_train = 0;
  int k = 0;
  std::uint64_t seed = 0;
  std::string method;
  std::string config_hash;
  bool jitter_used = false;
  double jitter = 0.0;
  /// Mean batch MMD^2 over the last 1000 training iterations (metaite only).
  std::optional<double> final_mmd2;
  std::vector<Index> train_group_sizes;

  /// sqrt_pehe when k == 2, otherwise rmse.
  double primary_metric() const;
};

/// Scores an n x k prediction matrix against the potential outcomes.
MetricsReport score(const Matrix& y_true, const Matrix& y_hat);

struct PreparedData {
  ObservationalDataset train;
  ObservationalDataset test;
};

/// Generate/load, split and subsample the training split. Covariates are raw.
PreparedData generate_splits(const RunPlan& plan, std::uint64_t seed);

/// generate_splits followed by standardizing both sides with training statistics.
PreparedData prepare_data(const RunPlan& plan, std::uint64_t seed);

/// Everything needed to predict potential outcomes for new rows.
struct FittedMethod {
  std::string method;
  TaskKind kind = TaskKind::regression;
  int k = 2;
  int target = -1;
  Standardizer standardizer;
  /// Regression targets are trained as (y - outcome_mean) / outcome_scale.
  double outcome_mean = 0.0;
  double outcome_scale = 1.0;
  std::optional<ParamSet> params;
  std::optional<BaselineModel> baseline;
  TrainTrace trace;
};

/// Fits `plan.method` on raw training data. Standardization statistics come
/// from `raw_train` only.
FittedMethod fit_method(const RunPlan& plan, const ObservationalDataset& raw_train, std::uint64_t seed,
                        const StepCallback& on_step = {});

/// n_test x k potential-outcome estimates on the original outcome scale.
Matrix predict_method(const FittedMethod& fitted, const MetaConfig& config, const ObservationalDataset& raw_train,
                      const Matrix& raw_x_test, std::uint64_t seed);

/// Training data as the meta-learner sees it: standardized covariates and,
/// for regression, scaled outcomes.
ObservationalDataset model_view(const FittedMethod& fitted, const ObservationalDataset& raw_train);

MetricsReport run_once(const RunPlan& plan, std::uint64_t seed);

struct MetricSummary {
  double mean = 0.0;
  double std = 0.0;
  std::size_t count = 0;
};

struct Aggregate {
  std::optional<MetricSummary> sqrt_pehe;
  std::optional<MetricSummary> ate_error;
  std::optional<MetricSummary> rmse;
};

Aggregate aggregate(std::span<const MetricsReport> reports);

struct ExperimentResult {
  std::vector<MetricsReport> runs;
  Aggregate summary;
};

/// Repeats use seeds seed, seed+1, ..., seed+repeats-1 (seed from plan.meta.seed).
ExperimentResult run_experiment(const RunPlan& plan, int repeats, int jobs = 1);

/// One independent unit of sweep work.
struct SweepCell {
  std::string id;
  RunPlan plan;
  std::uint64_t seed = 0;
  double fraction = 1.0;
  int repeat = 0;
  std::array<double, 3> weights{0.0, 0.0, 0.0};  // mu, epsilon, gamma
};

struct CellOutcome {
  std::optional<MetricsReport> report;
  std::string error;
};

/// Runs `cells` on up to `jobs` share-nothing workers; results keep cell order.
/// Exceptions are captured per cell.
std::vector<CellOutcome> run_cells(std::span<const SweepCell> cells, int jobs,
                                   const std::function<void(std::size_t, const CellOutcome&)>& on_done = {});

/// Fraction f keeps group 0 whole and a fraction f of every other group.
ImbalanceSpec robustness_imbalance(int k, double fraction);

std::vector<SweepCell> robustness_cells(const RunPlan& base, std::span<const std::string> methods,
                                        std::span<const double> fractions, int repeats);

struct RobustnessRow {
  std::string method;
  double fraction = 1.0;
  double imbalance_ratio = 1.0;
  MetricSummary metric;
  std::string metric_name;
};

std::vector<RobustnessRow> tabulate_robustness(std::span<const SweepCell> cells, std::span<const CellOutcome> outcomes);

std::vector<RobustnessRow> robustness_sweep(const RunPlan& base, std::span<const std::string> methods,
                                            std::span<const double> fractions, int repeats, int jobs = 1);

/// All (mu, epsilon, gamma) triples over `values`.
std::vector<std::array<double, 3>> ablation_grid(std::span<const double> values);

std::vector<SweepCell> ablation_cells(const RunPlan& base, std::span<const double> values, int repeats);

struct AblationRow {
  std::array<double, 3> weights{};
  MetricSummary metric;
  std::string metric_name;
  int rank = 0;
};

/// Rows sorted by ascending mean metric; rank starts at 1.
std::vector<AblationRow> tabulate_ablation(std::span<const SweepCell> cells, std::span<const CellOutcome> outcomes);

std::vector<AblationRow> ablation_sweep(const RunPlan& base, std::span<const double> values, int repeats,
                                        int jobs = 1);

/// (mu, epsilon, gamma) defaults: (1, 0.9, 1) for two-treatment News, (1, 0, 1) otherwise.
std::array<double, 3> default_loss_weights(const DatasetSpec& spec);

}  // namespace metaite
