#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "layerseg/lowrank_gaussian.hpp"
#include "layerseg/scan.hpp"

namespace layerseg {

// Exact chain marginals of one column.
struct ColumnMarginals {
  Matrix singletons;             // rows x boundaries, column k is q(c_k)
  std::vector<Matrix> pairwise;  // entry k-1 holds q(c_{k-1} = m, c_k = n) at (m, n)
  double log_partition = 0.0;
};

struct DiscretePosterior {
  Index rows = 0;
  Geometry geometry;
  std::vector<ColumnMarginals> columns;

  double expected(Index k, Index j) const {
    const auto& q = columns[static_cast<std::size_t>(j)].singletons.col(k);
    double e = 0.0;
    for (Index n = 0; n < rows; ++n) e += static_cast<double>(n) * q[n];
    return e;
  }

  double stddev(Index k, Index j) const {
    const auto& q = columns[static_cast<std::size_t>(j)].singletons.col(k);
    const double e = expected(k, j);
    double v = 0.0;
    for (Index n = 0; n < rows; ++n) v += (static_cast<double>(n) - e) * (static_cast<double>(n) - e) * q[n];
    return std::sqrt(std::max(v, 0.0));
  }

  Matrix expected_boundaries() const {
    Matrix out(geometry.boundaries, geometry.columns);
    for (Index j = 0; j < geometry.columns; ++j) {
      for (Index k = 0; k < geometry.boundaries; ++k) out(k, j) = expected(k, j);
    }
    return out;
  }

  Matrix boundary_stddev() const {
    Matrix out(geometry.boundaries, geometry.columns);
    for (Index j = 0; j < geometry.columns; ++j) {
      for (Index k = 0; k < geometry.boundaries; ++k) out(k, j) = stddev(k, j);
    }
    return out;
  }

  // Flat vector of E[c_{k,j}] in Geometry::flat_index order.
  Vector expected_flat() const {
    Vector out(geometry.dimension());
    for (Index j = 0; j < geometry.columns; ++j) {
      for (Index k = 0; k < geometry.boundaries; ++k) out[geometry.flat_index(k, j)] = expected(k, j);
    }
    return out;
  }
};

// q_b(b) = N(mean, covariance). In matrix-free mode `covariance` is empty and
// only the quantities the regularizer needs are kept.
struct GaussianPosterior {
  Vector mean;
  Matrix covariance;
  // gamma_i^T Sigma_bar gamma_i for every flat index i; empty means "derive from covariance".
  Vector regression_variance;
  // log |Sigma_bar|, NaN when unknown.
  double log_determinant = std::numeric_limits<double>::quiet_NaN();

  bool has_covariance() const { return covariance.size() > 0; }
};

}  // namespace layerseg
