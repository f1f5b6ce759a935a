#pragma once

// Gaussian algebra for covariances of the form W W^T + sigma^2 I.
//
// Every operation works through the D x q factor W and the q x q "inner"
// matrix M = sigma^2 I + W^T W. The D x D covariance or precision is only
// materialized by the explicit `dense_*` helpers, which exist for small
// problems and for tests.

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <vector>

#include "layerseg/error.hpp"

namespace layerseg {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

inline constexpr double kVarianceFloor = 1e-12;
inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

struct UnivariateGaussian {
  double mean = 0.0;
  double variance = 1.0;

  double log_density(double x) const {
    const double d = x - mean;
    return -0.5 * (kLog2Pi + std::log(variance) + d * d / variance);
  }
};

struct DenseGaussian {
  Vector mean;
  Matrix covariance;

  Index dimension() const { return mean.size(); }
};

class LowRankGaussian {
 public:
  LowRankGaussian() = default;

  LowRankGaussian(Vector mean, Matrix factor, double noise_variance)
      : mean_(std::move(mean)), factor_(std::move(factor)), noise_variance_(noise_variance) {
    if (!(noise_variance_ > 0.0) || !std::isfinite(noise_variance_)) {
      throw InvalidArgument("noise variance must be positive and finite");
    }
    if (factor_.rows() != mean_.size()) {
      throw InvalidArgument("factor rows must match the mean dimension");
    }
    if (factor_.cols() > factor_.rows()) {
      throw InvalidArgument("factor rank exceeds dimension");
    }
    if (!factor_.allFinite() || !mean_.allFinite()) {
      throw InvalidArgument("mean and factor must be finite");
    }
    const Index q = factor_.cols();
    inner_ = factor_.transpose() * factor_;
    inner_.diagonal().array() += noise_variance_;
    inner_llt_.compute(inner_);
    if (inner_llt_.info() != Eigen::Success) {
      throw NumericalError("inner matrix sigma^2 I + W^T W is not positive definite");
    }
    inner_inverse_ = inner_llt_.solve(Matrix::Identity(q, q));
    const auto& l = inner_llt_.matrixLLT();
    log_det_inner_ = 2.0 * l.diagonal().array().log().sum();
  }

  Index dimension() const { return mean_.size(); }
  Index rank() const { return factor_.cols(); }
  const Vector& mean() const { return mean_; }
  const Matrix& factor() const { return factor_; }
  double noise_variance() const { return noise_variance_; }
  // (sigma^2 I + W^T W)^{-1}
  const Matrix& inner_inverse() const { return inner_inverse_; }

  // log |W W^T + sigma^2 I| by the matrix determinant lemma.
  double log_determinant() const {
    return static_cast<double>(dimension() - rank()) * std::log(noise_variance_) + log_det_inner_;
  }

  Vector covariance_apply(const Vector& x) const {
    return factor_ * (factor_.transpose() * x) + noise_variance_ * x;
  }

  // K x = (x - W M^{-1} W^T x) / sigma^2
  Vector precision_apply(const Vector& x) const {
    const Vector u = inner_inverse_ * (factor_.transpose() * x);
    return (x - factor_ * u) / noise_variance_;
  }

  double covariance_entry(Index a, Index b) const {
    const double base = factor_.row(a).dot(factor_.row(b));
    return a == b ? base + noise_variance_ : base;
  }

  double log_density(const Vector& x) const {
    const Vector d = x - mean_;
    const double quad = d.dot(precision_apply(d));
    return -0.5 * (static_cast<double>(dimension()) * kLog2Pi + log_determinant() + quad);
  }

  // tr(K A) for a dense symmetric A.
  double precision_trace_product(const Matrix& a) const {
    const Matrix aw = a * factor_;
    const double low_rank = (inner_inverse_ * (factor_.transpose() * aw)).trace();
    return (a.trace() - low_rank) / noise_variance_;
  }

  Matrix dense_covariance() const {
    Matrix s = factor_ * factor_.transpose();
    s.diagonal().array() += noise_variance_;
    return s;
  }

  Matrix dense_precision() const {
    Matrix k = -factor_ * inner_inverse_ * factor_.transpose();
    k.diagonal().array() += 1.0;
    return k / noise_variance_;
  }

  // Same mean, covariance multiplied by `scale`.
  LowRankGaussian scaled(double scale) const {
    return LowRankGaussian(mean_, std::sqrt(scale) * factor_, scale * noise_variance_);
  }

 private:
  Vector mean_;
  Matrix factor_;
  double noise_variance_ = 1.0;
  Matrix inner_;
  Matrix inner_inverse_;
  Eigen::LLT<Matrix> inner_llt_;
  double log_det_inner_ = 0.0;
};

namespace detail {

inline Matrix gather_rows(const Matrix& m, std::span<const Index> rows) {
  Matrix out(static_cast<Index>(rows.size()), m.cols());
  for (Index r = 0; r < out.rows(); ++r) out.row(r) = m.row(rows[static_cast<std::size_t>(r)]);
  return out;
}

inline Vector gather(const Vector& v, std::span<const Index> idx) {
  Vector out(static_cast<Index>(idx.size()));
  for (Index r = 0; r < out.size(); ++r) out[r] = v[idx[static_cast<std::size_t>(r)]];
  return out;
}

}  // namespace detail

// Precision-side pieces of conditioning the query set J on its complement O:
// Sigma_{J|O} = (K_JJ)^{-1} and the regression Sigma_{J|O} K_{J,O} = C W_O^T
// with the J x q coefficient matrix C returned here.
struct ConditionalOperator {
  Matrix covariance;    // (K_JJ)^{-1}
  Matrix coefficients;  // C such that Sigma_{J|O} K_{J,O} = C W_O^T
};

inline ConditionalOperator conditional_operator(const LowRankGaussian& g,
                                                std::span<const Index> query) {
  const Index d = static_cast<Index>(query.size());
  for (const Index i : query) {
    if (i < 0 || i >= g.dimension()) throw InvalidArgument("conditional: index out of range");
  }
  const Matrix wj = detail::gather_rows(g.factor(), query);
  const Matrix wj_minv = wj * g.inner_inverse();
  Matrix kjj = -wj_minv * wj.transpose();
  kjj.diagonal().array() += 1.0;
  kjj /= g.noise_variance();
  kjj = 0.5 * (kjj + kjj.transpose()).eval();

  Eigen::LLT<Matrix> llt(kjj);
  if (llt.info() != Eigen::Success) {
    throw NumericalError("conditional: precision block K_JJ is singular");
  }
  const auto diag = llt.matrixLLT().diagonal();
  if (d > 0 && diag.minCoeff() <= 1e-14 * diag.maxCoeff()) {
    throw NumericalError("conditional: precision block K_JJ is numerically singular");
  }
  ConditionalOperator op;
  op.covariance = llt.solve(Matrix::Identity(d, d));
  op.covariance = 0.5 * (op.covariance + op.covariance.transpose()).eval();
  // K_{J,O} = -W_J M^{-1} W_O^T / sigma^2
  op.coefficients = -(op.covariance * wj_minv) / g.noise_variance();
  return op;
}

// Distribution of the entries not listed in `observed` given their values.
inline DenseGaussian conditional(const LowRankGaussian& g, std::span<const Index> observed,
                                 const Vector& observed_values) {
  const Index dim = g.dimension();
  if (observed_values.size() != static_cast<Index>(observed.size())) {
    throw InvalidArgument("conditional: observed values and indices differ in length");
  }
  std::vector<char> is_observed(static_cast<std::size_t>(dim), 0);
  for (const Index i : observed) {
    if (i < 0 || i >= dim) throw InvalidArgument("conditional: index out of range");
    if (is_observed[static_cast<std::size_t>(i)]) {
      throw InvalidArgument("conditional: duplicate observed index");
    }
    is_observed[static_cast<std::size_t>(i)] = 1;
  }
  std::vector<Index> query;
  query.reserve(static_cast<std::size_t>(dim) - observed.size());
  for (Index i = 0; i < dim; ++i) {
    if (!is_observed[static_cast<std::size_t>(i)]) query.push_back(i);
  }
  const ConditionalOperator op = conditional_operator(g, query);
  const Matrix wo = detail::gather_rows(g.factor(), observed);
  const Vector centered = observed_values - detail::gather(g.mean(), observed);
  DenseGaussian out;
  out.mean = detail::gather(g.mean(), query) - op.coefficients * (wo.transpose() * centered);
  out.covariance = op.covariance;
  return out;
}

// Conditions the bivariate marginal of (x_prev, x_index) on x_prev = value_prev.
inline UnivariateGaussian neighbor_conditional(const LowRankGaussian& g, Index prev, Index index,
                                               double value_prev) {
  if (prev < 0 || index < 0 || prev >= g.dimension() || index >= g.dimension() || prev == index) {
    throw InvalidArgument("neighbor_conditional: bad index pair");
  }
  const double s_pp = g.covariance_entry(prev, prev);
  const double s_pi = g.covariance_entry(prev, index);
  const double s_ii = g.covariance_entry(index, index);
  const double rho = s_pi / std::sqrt(s_pp * s_ii);
  if (std::abs(rho) >= 1.0 - 1e-12) {
    throw NumericalError("neighbor_conditional: degenerate bivariate marginal");
  }
  UnivariateGaussian out;
  out.mean = g.mean()[index] + s_pi / s_pp * (value_prev - g.mean()[prev]);
  out.variance = std::max(s_ii - s_pi * s_pi / s_pp, kVarianceFloor);
  return out;
}

struct ScaledGaussian {
  UnivariateGaussian gaussian;
  double log_scale = 0.0;
};

// N(x; a) N(x; b) = exp(log_scale) N(x; product)
inline ScaledGaussian gaussian_product(const UnivariateGaussian& a, const UnivariateGaussian& b) {
  if (!(a.variance > 0.0) || !(b.variance > 0.0)) {
    throw InvalidArgument("gaussian_product: variances must be positive");
  }
  const double total = a.variance + b.variance;
  ScaledGaussian out;
  out.gaussian.variance = a.variance * b.variance / total;
  out.gaussian.mean = (a.mean * b.variance + b.mean * a.variance) / total;
  const double d = a.mean - b.mean;
  out.log_scale = -0.5 * (kLog2Pi + std::log(total) + d * d / total);
  return out;
}

// Extra precision terms accepted by precision_solve: anything with
// `Vector apply(const Vector&) const` returning P x.
struct NoExtraPrecision {
  Vector apply(const Vector& x) const { return Vector::Zero(x.size()); }
};

struct DenseExtraPrecision {
  Matrix matrix;
  Vector apply(const Vector& x) const { return matrix * x; }
};

struct SolveInfo {
  long iterations = 0;
  double relative_residual = 0.0;
};

// Solves (K + P) x = rhs with unpreconditioned conjugate gradients.
// K is applied through the factorization, P through `extra.apply`.
template <class Extra>
Vector precision_solve(const LowRankGaussian& g, const Extra& extra, const Vector& rhs,
                       double tol = 1e-8, long max_iterations = -1, SolveInfo* info = nullptr,
                       const Vector* initial_guess = nullptr) {
  const Index dim = g.dimension();
  if (rhs.size() != dim) throw InvalidArgument("precision_solve: rhs has wrong dimension");
  const auto op = [&](const Vector& v) -> Vector { return g.precision_apply(v) + extra.apply(v); };
  const long cap = max_iterations > 0 ? max_iterations : 10 * static_cast<long>(std::max<Index>(dim, 1));
  const double rhs_norm = rhs.norm();
  if (rhs_norm == 0.0) {
    if (info) *info = {0, 0.0};
    return Vector::Zero(dim);
  }
  const double target = tol * rhs_norm;

  Vector x = initial_guess && initial_guess->size() == dim ? *initial_guess : Vector::Zero(dim);
  long iterations = 0;
  double true_residual = 0.0;
  // Restart from the current iterate whenever the recursive residual drifts
  // away from the true one.
  while (true) {
    Vector r = rhs - op(x);
    true_residual = r.norm();
    if (true_residual <= target) break;
    if (iterations >= cap) {
      throw ConvergenceError("precision_solve: conjugate gradient did not converge",
                             true_residual / rhs_norm, iterations);
    }
    Vector p = r;
    double rr = r.squaredNorm();
    while (iterations < cap) {
      const Vector ap = op(p);
      const double pap = p.dot(ap);
      if (!(pap > 0.0)) {
        throw NumericalError("precision_solve: operator is not positive definite");
      }
      const double step = rr / pap;
      x += step * p;
      r -= step * ap;
      ++iterations;
      const double rr_new = r.squaredNorm();
      if (std::sqrt(rr_new) <= 0.5 * target) break;
      p = r + (rr_new / rr) * p;
      rr = rr_new;
    }
  }
  if (info) *info = {iterations, true_residual / rhs_norm};
  return x;
}

// Draws count rows b = W s + mu + eps, s ~ N(0, I_q), eps ~ N(0, sigma^2 I).
inline Matrix sample(const LowRankGaussian& g, Index count, std::uint64_t seed) {
  if (count < 1) throw InvalidArgument("sample: count must be at least 1");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const Index dim = g.dimension();
  const Index q = g.rank();
  const double sigma = std::sqrt(g.noise_variance());
  Matrix out(count, dim);
  Vector s(q);
  Vector eps(dim);
  for (Index r = 0; r < count; ++r) {
    for (Index i = 0; i < q; ++i) s[i] = normal(rng);
    for (Index i = 0; i < dim; ++i) eps[i] = normal(rng);
    out.row(r) = (g.factor() * s + g.mean() + sigma * eps).transpose();
  }
  return out;
}

}  // namespace layerseg
