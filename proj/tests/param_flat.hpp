#pragma once

#include "metaite/nets.hpp"

#include <vector>

namespace metaite::testing {

/// Weights and biases in ParamVars::flatten order, biases as 1-row matrices.
inline std::vector<Matrix> flat_values(const ParamSet& p) {
  std::vector<Matrix> out;
  for (const auto* group : {&p.extractor, &p.head})
    for (const auto& l : *group) {
      out.push_back(l.weight);
      out.push_back(Matrix(l.bias));
    }
  return out;
}

inline ParamSet from_flat(const ParamSet& layout, const std::vector<Matrix>& flat) {
  ParamSet p = layout;
  std::size_t i = 0;
  for (auto* group : {&p.extractor, &p.head})
    for (auto& l : *group) {
      l.weight = flat[i++];
      l.bias = flat[i++].row(0);
    }
  return p;
}

inline Matrix random_matrix(RngStream& rng, Index r, Index c) {
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

}  // namespace metaite::testing
