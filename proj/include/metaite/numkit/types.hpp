#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace metaite {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Index = Eigen::Index;

/// Raised when a loss or objective becomes non-finite during optimisation.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.allFinite();
}

}  // namespace metaite
