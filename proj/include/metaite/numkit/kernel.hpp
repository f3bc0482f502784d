#pragma once

#include "metaite/numkit/tape.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace metaite {

/// exp(-|a - b|^2 / (2 h^2)).
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar gaussian_kernel(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b,
                                          typename DerivedA::Scalar bandwidth) {
  using Scalar = typename DerivedA::Scalar;
  if (a.size() != b.size()) throw std::invalid_argument("gaussian_kernel: dimension mismatch");
  if (!(bandwidth > Scalar(0))) throw std::invalid_argument("gaussian_kernel: bandwidth must be positive");
  const Scalar d2 = (a.derived().reshaped() - b.derived().reshaped()).squaredNorm();
  return std::exp(-d2 / (Scalar(2) * bandwidth * bandwidth));
}

/// Squared Euclidean distances between the rows of `a` (N x d) and `b` (M x d).
template <typename DerivedA, typename DerivedB>
Eigen::Matrix<typename DerivedA::Scalar, Eigen::Dynamic, Eigen::Dynamic> pairwise_sq_dists(
    const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  using Mat = Eigen::Matrix<typename DerivedA::Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  if (a.cols() != b.cols()) throw std::invalid_argument("pairwise_sq_dists: dimension mismatch");
  const auto sa = a.rowwise().squaredNorm().eval();
  const auto sb = b.rowwise().squaredNorm().eval();
  Mat d = -2 * a * b.transpose();
  d.colwise() += sa;
  d.rowwise() += sb.transpose();
  return d;
}

/// Biased (V-statistic) squared MMD with a Gaussian kernel, diagonal terms included:
///   mean k(zs, zs') - 2 mean k(zs, zt) + mean k(zt, zt').
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar mmd2(const Eigen::MatrixBase<DerivedA>& zs, const Eigen::MatrixBase<DerivedB>& zt,
                               typename DerivedA::Scalar bandwidth) {
  using Scalar = typename DerivedA::Scalar;
  if (zs.rows() < 1 || zt.rows() < 1) throw std::invalid_argument("mmd2: empty input");
  if (zs.cols() != zt.cols()) throw std::invalid_argument("mmd2: dimension mismatch");
  if (!(bandwidth > Scalar(0))) throw std::invalid_argument("mmd2: bandwidth must be positive");
  const Scalar inv = Scalar(-1) / (Scalar(2) * bandwidth * bandwidth);
  const Scalar kss = (pairwise_sq_dists(zs, zs) * inv).array().exp().mean();
  const Scalar kst = (pairwise_sq_dists(zs, zt) * inv).array().exp().mean();
  const Scalar ktt = (pairwise_sq_dists(zt, zt) * inv).array().exp().mean();
  return kss - 2 * kst + ktt;
}

/// Median of all pairwise Euclidean distances among the pooled rows of
/// `zs` and `zt`, floored at 1e-8.
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar median_bandwidth(const Eigen::MatrixBase<DerivedA>& zs,
                                           const Eigen::MatrixBase<DerivedB>& zt) {
  using Scalar = typename DerivedA::Scalar;
  if (zs.cols() != zt.cols()) throw std::invalid_argument("median_bandwidth: dimension mismatch");
  const Eigen::Index n = zs.rows() + zt.rows();
  if (n < 2) throw std::invalid_argument("median_bandwidth: need at least two pooled rows");
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> pooled(n, zs.cols());
  pooled << zs, zt;
  const auto d2 = pairwise_sq_dists(pooled, pooled);
  std::vector<Scalar> d;
  d.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = j + 1; i < n; ++i) d.push_back(std::sqrt(std::max(d2(i, j), Scalar(0))));
  const std::size_t mid = d.size() / 2;
  std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid), d.end());
  Scalar med = d[mid];
  if (d.size() % 2 == 0) {
    const Scalar lower = *std::max_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid));
    med = (lower + med) / 2;
  }
  return std::max(med, Scalar(1e-8));
}

namespace ad {

template <typename S>
BasicVar<S> pairwise_sq_dists(const BasicVar<S>& a, const BasicVar<S>& b) {
  const auto sa = sum_cols(square(a));
  const auto sb = sum_cols(square(b));
  const auto cross = matmul(a, transpose(b));
  return broadcast_cols(sa, b.rows()) + transpose(broadcast_cols(sb, a.rows())) - S(2) * cross;
}

/// Differentiable squared MMD; the bandwidth is treated as a constant.
template <typename S>
BasicVar<S> mmd2(const BasicVar<S>& zs, const BasicVar<S>& zt, S bandwidth) {
  if (zs.rows() < 1 || zt.rows() < 1) throw std::invalid_argument("mmd2: empty input");
  if (zs.cols() != zt.cols()) throw std::invalid_argument("mmd2: dimension mismatch");
  if (!(bandwidth > S(0))) throw std::invalid_argument("mmd2: bandwidth must be positive");
  const S inv = S(-1) / (S(2) * bandwidth * bandwidth);
  const auto kss = mean(exp(inv * pairwise_sq_dists(zs, zs)));
  const auto kst = mean(exp(inv * pairwise_sq_dists(zs, zt)));
  const auto ktt = mean(exp(inv * pairwise_sq_dists(zt, zt)));
  return kss - S(2) * kst + ktt;
}

}  // namespace ad
}  // namespace metaite
