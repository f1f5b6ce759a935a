#pragma once

// Sum-product on one boundary chain c_0 < c_1 < ... < c_{N_b-1}:
//
//   q(c) ∝ exp(first(c_0) + sum_k pairwise_k(c_{k-1}, c_k) + last(c_{N_b-1}))
//
// Messages are kept in log space. Each pairwise table is exponentiated once
// relative to its row maximum; entries below `sparsity_threshold` times the
// row maximum become structural zeros.

#include <cmath>
#include <limits>
#include <vector>

#include "layerseg/posterior.hpp"
#include "layerseg/regularizer.hpp"

namespace layerseg {

namespace detail {

struct ExpTable {
  Matrix values;   // exp(table(m, n) - row_max(m)), thresholded
  Vector row_max;  // -inf rows are unreachable
  double log_threshold = kNegInf;

  // Structural support of the table: finite and not cut by the threshold.
  bool allowed(const Matrix& table, Index m, Index n) const {
    const double t = table(m, n);
    return t != kNegInf && t - row_max[m] >= log_threshold;
  }
};

inline ExpTable exponentiate(const Matrix& table, double threshold) {
  ExpTable e;
  const Index rows = table.rows();
  const Index cols = table.cols();
  e.values.resize(rows, cols);
  e.row_max.resize(rows);
  e.log_threshold = threshold > 0.0 ? std::log(threshold) : kNegInf;
  for (Index m = 0; m < rows; ++m) {
    const double mx = table.row(m).maxCoeff();
    e.row_max[m] = mx;
    if (mx == kNegInf) {
      e.values.row(m).setZero();
      continue;
    }
    for (Index n = 0; n < cols; ++n) {
      const double v = std::exp(table(m, n) - mx);
      e.values(m, n) = v < threshold ? 0.0 : v;
    }
  }
  return e;
}

// exp(v - shift) elementwise with exact underflow to zero. Eigen's vectorized
// exp clamps large negative arguments instead of returning 0.
inline Vector shifted_exp(const Vector& v, double shift) {
  Vector out(v.size());
  for (Index i = 0; i < v.size(); ++i) out[i] = std::exp(v[i] - shift);
  return out;
}

inline double log_sum_exp(const Vector& v) {
  const double mx = v.maxCoeff();
  if (mx == kNegInf) return kNegInf;
  return mx + std::log(shifted_exp(v, mx).sum());
}

// Below this a message entry computed with one shared shift may have lost
// its relevant terms to underflow; it is recomputed term by term.
inline constexpr double kMessageFloor = 1e-280;

}  // namespace detail

// Exact singleton and pairwise marginals of one column; `column` only labels errors.
inline ColumnMarginals optimize_qc(const ChainPotentials& pot, Index column = 0,
                                   double sparsity_threshold = 1e-12) {
  const Index rows = pot.first.size();
  const Index nb = static_cast<Index>(pot.pairwise.size()) + 1;
  if (pot.last.size() != rows) throw InvalidArgument("optimize_qc: potential sizes disagree");
  for (const auto& t : pot.pairwise) {
    if (t.rows() != rows || t.cols() != rows) throw InvalidArgument("optimize_qc: pairwise table size");
    if (t.array().isNaN().any() || (t.array() == std::numeric_limits<double>::infinity()).any()) {
      throw InvalidArgument("optimize_qc: potentials must be finite or -inf");
    }
  }

  std::vector<Vector> unary(static_cast<std::size_t>(nb));
  for (Index k = 0; k < nb; ++k) unary[static_cast<std::size_t>(k)] = Vector::Zero(rows);
  unary.front() += pot.first;
  unary.back() += pot.last;
  for (const auto& u : unary) {
    if (u.array().isNaN().any() || (u.array() == std::numeric_limits<double>::infinity()).any()) {
      throw InvalidArgument("optimize_qc: potentials must be finite or -inf");
    }
  }

  std::vector<detail::ExpTable> exp_tables;
  exp_tables.reserve(pot.pairwise.size());
  for (const auto& t : pot.pairwise) exp_tables.push_back(detail::exponentiate(t, sparsity_threshold));

  // alpha[k](n): log of the mass of all prefixes ending with c_k = n.
  std::vector<Vector> alpha(static_cast<std::size_t>(nb));
  alpha[0] = unary[0];
  if (alpha[0].maxCoeff() == kNegInf) throw InfeasibleError(0, column);
  Vector terms(rows);
  for (Index k = 1; k < nb; ++k) {
    const auto& prev = alpha[static_cast<std::size_t>(k - 1)];
    const auto& et = exp_tables[static_cast<std::size_t>(k - 1)];
    const Matrix& table = pot.pairwise[static_cast<std::size_t>(k - 1)];
    Vector shifted = prev + et.row_max;
    for (Index m = 0; m < rows; ++m) {
      if (et.row_max[m] == kNegInf || prev[m] == kNegInf) shifted[m] = kNegInf;
    }
    const double a = shifted.maxCoeff();
    Vector next = Vector::Constant(rows, kNegInf);
    if (a != kNegInf) {
      const Vector s = et.values.transpose() * detail::shifted_exp(shifted, a);
      for (Index n = 0; n < rows; ++n) {
        double v = kNegInf;
        if (s[n] >= detail::kMessageFloor) {
          v = a + std::log(s[n]);
        } else {
          for (Index m = 0; m < rows; ++m) {
            terms[m] = prev[m] != kNegInf && et.allowed(table, m, n) ? prev[m] + table(m, n) : kNegInf;
          }
          v = detail::log_sum_exp(terms);
        }
        if (v != kNegInf) next[n] = v + unary[static_cast<std::size_t>(k)][n];
      }
    }
    if (next.maxCoeff() == kNegInf) throw InfeasibleError(k, column);
    alpha[static_cast<std::size_t>(k)] = std::move(next);
  }
  const double log_z = detail::log_sum_exp(alpha.back());

  // beta[k](m): log of the mass of all suffixes after c_k = m.
  std::vector<Vector> beta(static_cast<std::size_t>(nb));
  beta.back() = Vector::Zero(rows);
  for (Index k = nb - 1; k >= 1; --k) {
    const auto& et = exp_tables[static_cast<std::size_t>(k - 1)];
    const Matrix& table = pot.pairwise[static_cast<std::size_t>(k - 1)];
    const Vector w = unary[static_cast<std::size_t>(k)] + beta[static_cast<std::size_t>(k)];
    const double b = w.maxCoeff();
    Vector prev = Vector::Constant(rows, kNegInf);
    if (b != kNegInf) {
      const Vector t = et.values * detail::shifted_exp(w, b);
      for (Index m = 0; m < rows; ++m) {
        if (et.row_max[m] == kNegInf) continue;
        if (t[m] >= detail::kMessageFloor) {
          prev[m] = et.row_max[m] + b + std::log(t[m]);
        } else {
          for (Index n = 0; n < rows; ++n) {
            terms[n] = w[n] != kNegInf && et.allowed(table, m, n) ? table(m, n) + w[n] : kNegInf;
          }
          prev[m] = detail::log_sum_exp(terms);
        }
      }
    }
    beta[static_cast<std::size_t>(k - 1)] = std::move(prev);
  }

  ColumnMarginals out;
  out.log_partition = log_z;
  out.singletons.resize(rows, nb);
  for (Index k = 0; k < nb; ++k) {
    const Vector lp = alpha[static_cast<std::size_t>(k)] + beta[static_cast<std::size_t>(k)];
    for (Index n = 0; n < rows; ++n) {
      out.singletons(n, k) = lp[n] == kNegInf ? 0.0 : std::exp(lp[n] - log_z);
    }
  }
  for (Index k = 1; k < nb; ++k) {
    const auto& et = exp_tables[static_cast<std::size_t>(k - 1)];
    const Matrix& table = pot.pairwise[static_cast<std::size_t>(k - 1)];
    const Vector& x = alpha[static_cast<std::size_t>(k - 1)];
    const Vector y = unary[static_cast<std::size_t>(k)] + beta[static_cast<std::size_t>(k)];
    Matrix pair = Matrix::Zero(rows, rows);
    for (Index n = 0; n < rows; ++n) {
      if (y[n] == kNegInf) continue;
      for (Index m = 0; m < rows; ++m) {
        if (x[m] != kNegInf && et.allowed(table, m, n)) pair(m, n) = std::exp(x[m] + table(m, n) + y[n] - log_z);
      }
    }
    out.pairwise.push_back(std::move(pair));
  }
  return out;
}

}  // namespace layerseg
