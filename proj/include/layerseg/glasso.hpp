#pragma once

// Graphical lasso with an unpenalized diagonal:
//
//   minimize_K  -log det K + <S, K> + alpha * sum_{i != j} |K_ij|
//
// Block coordinate descent over columns of W = K^{-1}; each block is a lasso
// problem solved by cyclic coordinate descent (Friedman, Hastie & Tibshirani).
// Because the diagonal is not penalized, W_ii = S_ii at the optimum.

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include <algorithm>
#include <cmath>

#include "layerseg/error.hpp"
#include "layerseg/lowrank_gaussian.hpp"

namespace layerseg {

using SparseMatrix = Eigen::SparseMatrix<double>;

struct GlassoResult {
  SparseMatrix precision;
  double kkt_residual = 0.0;
  long iterations = 0;
};

inline double glasso_objective(const Matrix& s, const Matrix& k, double alpha) {
  Eigen::LLT<Matrix> llt(k);
  if (llt.info() != Eigen::Success) return std::numeric_limits<double>::infinity();
  const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  const double penalty = k.cwiseAbs().sum() - k.diagonal().cwiseAbs().sum();
  return -logdet + (s.cwiseProduct(k)).sum() + alpha * penalty;
}

// Largest violation of the stationarity conditions K^{-1} - S = alpha * d|K|_1,off.
inline double glasso_kkt_residual(const Matrix& s, const Matrix& k, double alpha) {
  Eigen::LLT<Matrix> llt(k);
  if (llt.info() != Eigen::Success) return std::numeric_limits<double>::infinity();
  const Matrix w = llt.solve(Matrix::Identity(k.rows(), k.cols()));
  double res = 0.0;
  for (Index j = 0; j < k.cols(); ++j) {
    for (Index i = 0; i < k.rows(); ++i) {
      const double g = w(i, j) - s(i, j);
      double v = 0.0;
      if (i == j) {
        v = std::abs(g);
      } else if (k(i, j) != 0.0) {
        v = std::abs(g - alpha * (k(i, j) > 0.0 ? 1.0 : -1.0));
      } else {
        v = std::max(0.0, std::abs(g) - alpha);
      }
      res = std::max(res, v);
    }
  }
  return res;
}

namespace detail {

inline double soft_threshold(double x, double t) {
  if (x > t) return x - t;
  if (x < -t) return x + t;
  return 0.0;
}

// minimize 0.5 b^T A b - c^T b + alpha |b|_1, warm-started from `beta`.
inline void lasso_coordinate_descent(const Matrix& a, const Vector& c, double alpha, Vector& beta) {
  Vector ab = a * beta;
  const double scale = std::max(c.cwiseAbs().maxCoeff(), 1e-300);
  for (int sweep = 0; sweep < 20000; ++sweep) {
    double max_change = 0.0;
    for (Index i = 0; i < beta.size(); ++i) {
      const double old = beta[i];
      const double partial = c[i] - (ab[i] - a(i, i) * old);
      const double updated = soft_threshold(partial, alpha) / a(i, i);
      if (updated != old) {
        ab += a.col(i) * (updated - old);
        beta[i] = updated;
        max_change = std::max(max_change, std::abs(updated - old) * a(i, i));
      }
    }
    if (max_change <= 1e-14 * scale) break;
  }
}

}  // namespace detail

inline GlassoResult graphical_lasso(const Matrix& s, double alpha, double tol = 1e-5,
                                    long max_iterations = 500) {
  const Index p = s.rows();
  if (s.cols() != p || p < 1) throw InvalidArgument("graphical_lasso: S must be square");
  if (!(alpha >= 0.0)) throw InvalidArgument("graphical_lasso: alpha must be non-negative");
  if ((s - s.transpose()).cwiseAbs().maxCoeff() > 1e-10 * std::max(1.0, s.cwiseAbs().maxCoeff())) {
    throw InvalidArgument("graphical_lasso: S must be symmetric");
  }
  if (!(s.diagonal().minCoeff() > 0.0)) {
    throw InvalidArgument("graphical_lasso: S must have a positive diagonal");
  }

  // Block updates keep W positive definite only if W starts inside the dual
  // feasible set |W - S|_offdiag <= alpha. Shrinking S toward its diagonal by
  // t = alpha / max|S_ij| gives such a point, and it is PD whenever S is PSD.
  double max_off = 0.0;
  for (Index j = 0; j < p; ++j) {
    for (Index i = 0; i < p; ++i) {
      if (i != j) max_off = std::max(max_off, std::abs(s(i, j)));
    }
  }
  const double t = max_off > 0.0 ? std::min(1.0, alpha / max_off) : 1.0;
  Matrix w = (1.0 - t) * s;
  w.diagonal() = s.diagonal();
  if (Eigen::LLT<Matrix>(w).info() != Eigen::Success) {
    throw NumericalError("graphical_lasso: no positive definite starting point (S is singular and alpha = 0)");
  }
  Matrix betas = Matrix::Zero(p, p);  // column j: regression of j on the others
  Matrix k = Matrix::Zero(p, p);
  GlassoResult result;

  std::vector<Index> others(static_cast<std::size_t>(std::max<Index>(p - 1, 0)));
  Matrix w11(p - 1, p - 1);
  Vector s12(p - 1);
  Vector beta(p - 1);

  for (long iter = 1; iter <= max_iterations; ++iter) {
    for (Index j = 0; j < p; ++j) {
      Index t = 0;
      for (Index i = 0; i < p; ++i) {
        if (i != j) others[static_cast<std::size_t>(t++)] = i;
      }
      for (Index a = 0; a < p - 1; ++a) {
        s12[a] = s(others[static_cast<std::size_t>(a)], j);
        beta[a] = betas(others[static_cast<std::size_t>(a)], j);
        for (Index b = 0; b < p - 1; ++b) {
          w11(a, b) = w(others[static_cast<std::size_t>(a)], others[static_cast<std::size_t>(b)]);
        }
      }
      detail::lasso_coordinate_descent(w11, s12, alpha, beta);
      const Vector w12 = w11 * beta;
      for (Index a = 0; a < p - 1; ++a) {
        const Index i = others[static_cast<std::size_t>(a)];
        betas(i, j) = beta[a];
        w(i, j) = w12[a];
        w(j, i) = w12[a];
      }
    }

    // Precision from the block regressions.
    Matrix raw = Matrix::Zero(p, p);
    for (Index j = 0; j < p; ++j) {
      double wb = 0.0;
      for (Index i = 0; i < p; ++i) {
        if (i != j) wb += w(i, j) * betas(i, j);
      }
      const double theta = 1.0 / (w(j, j) - wb);
      raw(j, j) = theta;
      for (Index i = 0; i < p; ++i) {
        if (i != j) raw(i, j) = -betas(i, j) * theta;
      }
    }
    for (Index j = 0; j < p; ++j) {
      k(j, j) = raw(j, j);
      for (Index i = j + 1; i < p; ++i) {
        const double v = (raw(i, j) == 0.0 || raw(j, i) == 0.0) ? 0.0 : 0.5 * (raw(i, j) + raw(j, i));
        k(i, j) = v;
        k(j, i) = v;
      }
    }
    result.iterations = iter;
    result.kkt_residual = glasso_kkt_residual(s, k, alpha);
    if (result.kkt_residual <= tol) break;
  }
  if (!(result.kkt_residual <= tol)) {
    throw ConvergenceError("graphical_lasso: KKT conditions not met", result.kkt_residual,
                           result.iterations);
  }
  result.precision = k.sparseView(1.0, 0.0);
  result.precision.makeCompressed();
  return result;
}

}  // namespace layerseg
