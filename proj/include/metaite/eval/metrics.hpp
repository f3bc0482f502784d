#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>

namespace metaite {

namespace detail {

template <typename A, typename B>
void check_binary(const Eigen::MatrixBase<A>& y_true, const Eigen::MatrixBase<B>& y_hat, const char* who) {
  if (y_true.rows() != y_hat.rows() || y_true.cols() != y_hat.cols())
    throw std::invalid_argument(std::string(who) + ": shape mismatch");
  if (y_true.cols() != 2) throw std::invalid_argument(std::string(who) + ": requires exactly two treatments");
  if (y_true.rows() == 0) throw std::invalid_argument(std::string(who) + ": no rows");
}

}  // namespace detail

/// Root of the mean squared error between true and estimated per-unit
/// effects y1 - y0. Inputs are n x 2 potential-outcome matrices.
template <typename A, typename B>
typename A::Scalar sqrt_pehe(const Eigen::MatrixBase<A>& y_true, const Eigen::MatrixBase<B>& y_hat) {
  detail::check_binary(y_true, y_hat, "sqrt_pehe");
  const auto effect_true = (y_true.col(1) - y_true.col(0)).eval();
  const auto effect_hat = (y_hat.col(1) - y_hat.col(0)).eval();
  return std::sqrt((effect_true - effect_hat).squaredNorm() / static_cast<typename A::Scalar>(y_true.rows()));
}

/// |mean true effect - mean estimated effect|.
template <typename A, typename B>
typename A::Scalar ate_error(const Eigen::MatrixBase<A>& y_true, const Eigen::MatrixBase<B>& y_hat) {
  detail::check_binary(y_true, y_hat, "ate_error");
  const auto ate_true = (y_true.col(1) - y_true.col(0)).mean();
  const auto ate_hat = (y_hat.col(1) - y_hat.col(0)).mean();
  return std::abs(ate_true - ate_hat);
}

/// Root mean squared error over all n x k potential outcomes.
template <typename A, typename B>
typename A::Scalar rmse_multi(const Eigen::MatrixBase<A>& y_true, const Eigen::MatrixBase<B>& y_hat) {
  if (y_true.rows() != y_hat.rows() || y_true.cols() != y_hat.cols())
    throw std::invalid_argument("rmse_multi: shape mismatch");
  if (y_true.cols() < 2) throw std::invalid_argument("rmse_multi: requires at least two treatments");
  if (y_true.rows() == 0) throw std::invalid_argument("rmse_multi: no rows");
  return std::sqrt((y_true - y_hat).squaredNorm() / static_cast<typename A::Scalar>(y_true.size()));
}

}  // namespace metaite
