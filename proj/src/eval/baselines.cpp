#include "metaite/eval/baselines.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace metaite {

std::string to_string(BaselineKind kind) {
  switch (kind) {
    case BaselineKind::ols_lr1:
      return "ols_lr1";
    case BaselineKind::ols_lr2:
      return "ols_lr2";
    case BaselineKind::knn:
      return "knn";
  }
  return "?";
}

BaselineKind baseline_kind_from_string(const std::string& s) {
  if (s == "ols_lr1") return BaselineKind::ols_lr1;
  if (s == "ols_lr2") return BaselineKind::ols_lr2;
  if (s == "knn") return BaselineKind::knn;
  throw std::invalid_argument("unknown baseline '" + s + "'");
}

Vector least_squares(const Matrix& a, const Vector& y, double jitter, bool* jitter_used) {
  Eigen::ColPivHouseholderQR<Matrix> qr(a);
  if (qr.rank() == a.cols()) {
    if (jitter_used) *jitter_used = false;
    return qr.solve(y);
  }
  if (jitter_used) *jitter_used = true;
  Matrix normal = a.transpose() * a;
  normal.diagonal().array() += jitter;
  return normal.ldlt().solve(a.transpose() * y);
}

namespace {

Matrix with_intercept(const Matrix& x) {
  Matrix a(x.rows(), x.cols() + 1);
  a.col(0).setOnes();
  a.rightCols(x.cols()) = x;
  return a;
}

}  // namespace

BaselineModel BaselineModel::fit(BaselineKind kind, const ObservationalDataset& train, const BaselineOptions& options) {
  train.validate();
  if (options.knn_k < 1) throw std::invalid_argument("BaselineModel: knn_k must be >= 1");
  BaselineModel m;
  m.kind_ = kind;
  m.options_ = options;
  m.k_ = train.k;
  const Index p = train.dim();

  if (kind == BaselineKind::ols_lr1) {
    Matrix a = Matrix::Zero(train.size(), 1 + p + (train.k - 1));
    a.col(0).setOnes();
    a.middleCols(1, p) = train.x;
    for (Index i = 0; i < train.size(); ++i) {
      const int t = train.t[static_cast<std::size_t>(i)];
      if (t > 0) a(i, p + t) = 1.0;
    }
    bool used = false;
    m.coef_.push_back(least_squares(a, train.y_factual, options.ridge_jitter, &used));
    m.jitter_used_ = used;
    return m;
  }

  for (int g = 0; g < train.k; ++g) {
    const auto rows = train.group(g);
    if (rows.empty()) throw std::invalid_argument("BaselineModel: treatment group " + std::to_string(g) + " is empty");
    const ObservationalDataset sub = train.subset(rows);
    if (kind == BaselineKind::ols_lr2) {
      bool used = false;
      m.coef_.push_back(least_squares(with_intercept(sub.x), sub.y_factual, options.ridge_jitter, &used));
      m.jitter_used_ = m.jitter_used_ || used;
    } else {
      m.group_x_.push_back(sub.x);
      m.group_y_.push_back(sub.y_factual);
    }
  }
  return m;
}

Matrix BaselineModel::predict(const Matrix& x) const {
  Matrix out(x.rows(), k_);
  if (kind_ == BaselineKind::ols_lr1) {
    const Vector& b = coef_.front();
    const Index p = b.size() - k_;
    if (x.cols() != p) throw std::invalid_argument("BaselineModel::predict: covariate width mismatch");
    const Vector base = (x * b.segment(1, p)).array() + b(0);
    for (int t = 0; t < k_; ++t) out.col(t) = base.array() + (t > 0 ? b(p + t) : 0.0);
    return out;
  }
  if (kind_ == BaselineKind::ols_lr2) {
    const Matrix a = with_intercept(x);
    for (int t = 0; t < k_; ++t) {
      if (a.cols() != coef_[static_cast<std::size_t>(t)].size())
        throw std::invalid_argument("BaselineModel::predict: covariate width mismatch");
      out.col(t) = a * coef_[static_cast<std::size_t>(t)];
    }
    return out;
  }
  for (int t = 0; t < k_; ++t) {
    const Matrix& gx = group_x_[static_cast<std::size_t>(t)];
    const Vector& gy = group_y_[static_cast<std::size_t>(t)];
    if (x.cols() != gx.cols()) throw std::invalid_argument("BaselineModel::predict: covariate width mismatch");
    const auto kk = static_cast<std::size_t>(std::min<Index>(options_.knn_k, gx.rows()));
    std::vector<Index> order(static_cast<std::size_t>(gx.rows()));
    for (Index i = 0; i < x.rows(); ++i) {
      const Vector d = (gx.rowwise() - x.row(i)).rowwise().squaredNorm();
      std::iota(order.begin(), order.end(), Index{0});
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(kk), order.end(),
                        [&](Index a, Index b) { return d(a) < d(b) || (d(a) == d(b) && a < b); });
      double s = 0.0;
      for (std::size_t r = 0; r < kk; ++r) s += gy(order[r]);
      out(i, t) = s / static_cast<double>(kk);
    }
  }
  return out;
}

}  // namespace metaite
