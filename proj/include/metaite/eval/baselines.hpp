#pragma once

#include "metaite/datagen.hpp"

#include <string>
#include <vector>

namespace metaite {

enum class BaselineKind { ols_lr1, ols_lr2, knn };

std::string to_string(BaselineKind kind);
BaselineKind baseline_kind_from_string(const std::string& s);

struct BaselineOptions {
  int knn_k = 5;
  double ridge_jitter = 1e-8;
};

/// Closed-form potential-outcome predictors.
///  - ols_lr1: one least-squares fit on [1 | X | one-hot(t) without t=0].
///  - ols_lr2: one least-squares fit on [1 | X] per treatment group.
///  - knn:     per treatment group, mean outcome of the knn_k nearest training rows.
class BaselineModel {
 public:
  static BaselineModel fit(BaselineKind kind, const ObservationalDataset& train, const BaselineOptions& options = {});

  /// n x k matrix of estimated potential outcomes.
  Matrix predict(const Matrix& x) const;

  BaselineKind kind() const { return kind_; }
  int treatments() const { return k_; }
  /// True when a rank-deficient design needed the ridge jitter.
  bool jitter_used() const { return jitter_used_; }
  double jitter() const { return options_.ridge_jitter; }
  /// LR1: a single vector; LR2: one vector per group (intercept first).
  const std::vector<Vector>& coefficients() const { return coef_; }

 private:
  BaselineKind kind_ = BaselineKind::ols_lr1;
  BaselineOptions options_;
  int k_ = 2;
  bool jitter_used_ = false;
  std::vector<Vector> coef_;
  std::vector<Matrix> group_x_;
  std::vector<Vector> group_y_;
};

/// Least squares with a rank check; falls back to (A'A + jitter I) b = A'y.
Vector least_squares(const Matrix& a, const Vector& y, double jitter, bool* jitter_used = nullptr);

}  // namespace metaite
