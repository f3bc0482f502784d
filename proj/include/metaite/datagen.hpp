#pragma once

#include "metaite/nets.hpp"
#include "metaite/numkit/rng.hpp"
#include "metaite/numkit/types.hpp"

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace metaite {

/// Observational data {x_i, t_i, y_i}. When the data is simulated, `y_all`
/// holds every potential outcome and y_factual[i] == y_all(i, t[i]).
struct ObservationalDataset {
  Matrix x;
  std::vector<int> t;
  Vector y_factual;
  std::optional<Matrix> y_all;
  TaskKind kind = TaskKind::regression;
  int k = 2;

  Index size() const { return x.rows(); }
  Index dim() const { return x.cols(); }
  std::vector<Index> group(int treatment) const;
  std::vector<Index> group_sizes() const;
  ObservationalDataset subset(std::span<const Index> rows) const;
  /// Throws std::invalid_argument on any broken invariant.
  void validate() const;
};

/// Fraction (or absolute count) of each treatment group to keep.
struct ImbalanceSpec {
  std::vector<double> keep_fraction;
  /// When non-empty, overrides keep_fraction with exact counts per group.
  /// A negative count keeps the whole group.
  std::vector<Index> keep_count;
};

struct TwinsOptions {
  /// Assignment weights w ~ U(-bound, bound)^p.
  double weight_bound = 0.1;
  /// Standard deviation of the assignment noise term.
  double noise_sd = 0.1;
  /// Marginal mortality of the lighter (t=0) and heavier (t=1) twin.
  double rate_lighter = 0.177;
  double rate_heavier = 0.161;
  /// Scale of the twin-specific latent noise; sets how often twins disagree.
  double idiosyncratic_sd = 0.45;
};

struct TwinsFourOptions {
  /// Scale of the four assignment scores; 0 gives uniform assignment.
  double bias_weight = 1.0;
  double weight_bound = 0.1;
  double noise_sd = 0.1;
  /// Mortality for lower/female, lower/male, higher/female, higher/male.
  std::vector<double> rates{0.170, 0.184, 0.154, 0.168};
  double idiosyncratic_sd = 0.45;
};

struct NewsOptions {
  double dirichlet_alpha = 0.1;
  double outcome_noise_sd = 0.15;
};

/// sigmoid(w . x + noise)
double twins_assignment_probability(const Vector& x, const Vector& w, double noise);

/// C * (ytilde * |z - z_j| + |z - z_m|)
double news_potential_outcome(const Vector& z, const Vector& z_j, const Vector& z_m, double ytilde, double scale);

ObservationalDataset gen_twins_binary(Index n_pairs, RngStream& rng, const TwinsOptions& opt = {});
ObservationalDataset gen_twins_four(Index n, RngStream& rng, const TwinsFourOptions& opt = {});
ObservationalDataset gen_news(Index n, int k, Index topics, double scale, double kappa, RngStream& rng,
                              const NewsOptions& opt = {});

extern const std::vector<std::string> kTwinsFourLabels;

ObservationalDataset apply_imbalance(const ObservationalDataset& data, const ImbalanceSpec& spec, RngStream& rng);

struct SplitIndices {
  std::vector<Index> train;
  std::vector<Index> test;
};

/// Stratified by treatment; indices are returned in ascending order.
SplitIndices split_indices(const ObservationalDataset& data, double train_fraction, RngStream& rng);
std::pair<ObservationalDataset, ObservationalDataset> split(const ObservationalDataset& data, double train_fraction,
                                                            RngStream& rng);

/// Per-column affine map to zero mean and unit variance. A constant column
/// keeps unit scale, so it maps to all zeros.
struct Standardizer {
  RowVector mean;
  RowVector scale;

  static Standardizer fit(const Matrix& x);
  Matrix apply(const Matrix& x) const;
};

struct CsvSchema {
  std::optional<TaskKind> kind;
  std::optional<int> k;
  bool standardize = true;
};

/// CSV layout: optional first line "# metaite-dataset kind=<kind> k=<k>", then a
/// header x0..x{p-1},treatment,y_factual[,y_potential_0..y_potential_{k-1}].
ObservationalDataset load_csv(const std::string& path, const CsvSchema& schema = {});
void save_csv(const std::string& path, const ObservationalDataset& data);

}  // namespace metaite
