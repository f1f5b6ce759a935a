#pragma once

// Joint Gaussian prior over all boundary heights, estimated by probabilistic
// PCA (Tipping-Bishop maximum likelihood), and its column-wise conditionals.

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <span>
#include <string>
#include <vector>

#include "layerseg/binary_io.hpp"
#include "layerseg/lowrank_gaussian.hpp"
#include "layerseg/model_file.hpp"
#include "layerseg/scan.hpp"

namespace layerseg {

struct ShapePrior {
  Geometry geometry;
  LowRankGaussian gaussian;
  Index q_ppca = 0;
  // Number of leading columns of W that are non-zero.
  Index effective_rank = 0;
  double variance_inflation = 1.0;
  std::vector<std::string> warnings;

  Index dimension() const { return geometry.dimension(); }
};

namespace detail {

// Lexicographic order on the flattened fields, so the fit does not depend on
// the order of the training list.
inline Matrix canonical_rows(std::span<const BoundaryField> training) {
  std::vector<Vector> rows;
  rows.reserve(training.size());
  for (const auto& f : training) rows.push_back(f.flatten());
  std::sort(rows.begin(), rows.end(), [](const Vector& a, const Vector& b) {
    return std::lexicographical_compare(a.data(), a.data() + a.size(), b.data(), b.data() + b.size());
  });
  Matrix x(static_cast<Index>(rows.size()), rows.front().size());
  for (Index r = 0; r < x.rows(); ++r) x.row(r) = rows[static_cast<std::size_t>(r)].transpose();
  return x;
}

}  // namespace detail

inline ShapePrior fit_ppca(std::span<const BoundaryField> training, Index q_ppca,
                           double variance_inflation) {
  if (training.size() < 2) throw InvalidArgument("fit_ppca: need at least two training fields");
  if (q_ppca < 1) throw InvalidArgument("fit_ppca: q_ppca must be at least 1");
  if (!(variance_inflation > 0.0)) throw InvalidArgument("fit_ppca: variance inflation must be positive");
  const Geometry geometry = training.front().geometry;
  geometry.validate();
  for (const auto& f : training) {
    if (!(f.geometry == geometry)) throw InvalidArgument("fit_ppca: inconsistent training geometries");
    if (!f.is_strictly_ordered()) {
      throw InvalidArgument("fit_ppca: training field violates the strict boundary ordering");
    }
  }
  const Index dim = geometry.dimension();
  if (q_ppca > dim - 1) throw InvalidArgument("fit_ppca: q_ppca must be at most dimension - 1");

  const Matrix x = detail::canonical_rows(training);
  const Index n = x.rows();
  const Vector mean = x.colwise().mean().transpose();
  const Matrix centered = x.rowwise() - mean.transpose();
  const double denom = static_cast<double>(n - 1);

  // Leading eigenpairs of the empirical covariance, descending.
  Vector eigenvalues;
  Matrix eigenvectors;
  if (n - 1 < dim) {
    // The covariance has rank <= n - 1: diagonalize the n x n Gram matrix.
    const Matrix gram = centered * centered.transpose() / denom;
    Eigen::SelfAdjointEigenSolver<Matrix> es(gram);
    eigenvalues = es.eigenvalues().reverse();
    const Matrix v = es.eigenvectors().rowwise().reverse();
    eigenvectors = Matrix::Zero(dim, n);
    for (Index i = 0; i < n; ++i) {
      if (eigenvalues[i] > 0.0) {
        eigenvectors.col(i) = centered.transpose() * v.col(i);
        eigenvectors.col(i).normalize();
      }
    }
  } else {
    const Matrix cov = centered.transpose() * centered / denom;
    Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
    eigenvalues = es.eigenvalues().reverse();
    eigenvectors = es.eigenvectors().rowwise().reverse();
  }
  const double trace = centered.squaredNorm() / denom;
  const double lambda_max = std::max(eigenvalues[0], 0.0);

  ShapePrior prior;
  prior.geometry = geometry;
  prior.q_ppca = q_ppca;
  prior.variance_inflation = variance_inflation;

  Index q_eff = std::min<Index>(q_ppca, eigenvalues.size());
  while (q_eff > 0 && !(eigenvalues[q_eff - 1] > 1e-12 * lambda_max && eigenvalues[q_eff - 1] > 0.0)) {
    --q_eff;
  }
  double sigma2 = 0.0;
  while (true) {
    const double kept = eigenvalues.head(q_eff).sum();
    sigma2 = std::max((trace - kept) / static_cast<double>(dim - q_eff), kVarianceFloor);
    if (q_eff == 0 || eigenvalues[q_eff - 1] > sigma2) break;
    --q_eff;
  }
  if (q_eff < q_ppca) {
    prior.warnings.push_back("fit_ppca: only " + std::to_string(q_eff) +
                             " eigenvalues exceed the noise level; q_ppca " + std::to_string(q_ppca) +
                             " truncated, remaining factor columns are zero");
  }

  Matrix w = Matrix::Zero(dim, q_ppca);
  for (Index i = 0; i < q_eff; ++i) {
    Vector u = eigenvectors.col(i);
    Index pivot = 0;
    u.cwiseAbs().maxCoeff(&pivot);
    if (u[pivot] < 0.0) u = -u;
    w.col(i) = u * std::sqrt(eigenvalues[i] - sigma2);
  }
  prior.effective_rank = q_eff;
  prior.gaussian = LowRankGaussian(mean, std::move(w), sigma2);
  return prior;
}

inline std::vector<Index> column_indices(const Geometry& g, Index j) {
  if (j < 0 || j >= g.columns) throw InvalidArgument("column index out of range");
  std::vector<Index> idx(static_cast<std::size_t>(g.boundaries));
  for (Index k = 0; k < g.boundaries; ++k) idx[static_cast<std::size_t>(k)] = g.flat_index(k, j);
  return idx;
}

// Sigma_{j|\j} (uninflated) and the regression coefficients of column j on
// the remaining columns. Independent of the conditioning values.
inline ConditionalOperator column_operator(const ShapePrior& prior, Index j) {
  const auto idx = column_indices(prior.geometry, j);
  return conditional_operator(prior.gaussian, idx);
}

// W_O^T (b_O - mu_O) for O = all columns except j.
inline Vector complement_projection(const ShapePrior& prior, Index j, const Vector& b) {
  const Index nb = prior.geometry.boundaries;
  Vector d = b - prior.gaussian.mean();
  d.segment(j * nb, nb).setZero();
  return prior.gaussian.factor().transpose() * d;
}

// p(b_j | b_\j) with the covariance multiplied by the variance inflation.
// `b` is a full-length vector; the entries of column j are ignored.
inline DenseGaussian column_conditional(const ShapePrior& prior, Index j, const Vector& b,
                                        const ConditionalOperator* cached = nullptr) {
  if (b.size() != prior.dimension()) throw InvalidArgument("column_conditional: wrong vector size");
  const ConditionalOperator op = cached ? *cached : column_operator(prior, j);
  const Index nb = prior.geometry.boundaries;
  DenseGaussian out;
  out.mean = prior.gaussian.mean().segment(j * nb, nb) - op.coefficients * complement_projection(prior, j, b);
  out.covariance = prior.variance_inflation * op.covariance;
  return out;
}

// p(b_{k,j} | b_{k-1,j}) from the bivariate prior marginal; k >= 1.
inline UnivariateGaussian neighbor_conditional(const ShapePrior& prior, Index k, Index j,
                                               double value_prev) {
  if (k < 1 || k >= prior.geometry.boundaries) {
    throw InvalidArgument("neighbor_conditional: boundary index must be in [1, boundaries)");
  }
  const Geometry& g = prior.geometry;
  return neighbor_conditional(prior.gaussian, g.flat_index(k - 1, j), g.flat_index(k, j), value_prev);
}

inline std::vector<char> encode_shape_prior(const ShapePrior& prior) {
  io::Writer w;
  write_model_header(w, ModelSection::shape_prior);
  const Geometry& g = prior.geometry;
  w.u32(static_cast<std::uint32_t>(g.boundaries));
  w.u32(static_cast<std::uint32_t>(g.columns));
  w.u32(static_cast<std::uint32_t>(g.bscans));
  w.u32(static_cast<std::uint32_t>(prior.q_ppca));
  w.u32(static_cast<std::uint32_t>(prior.effective_rank));
  w.f64(prior.variance_inflation);
  const auto& mu = prior.gaussian.mean();
  const auto& f = prior.gaussian.factor();
  for (Index i = 0; i < mu.size(); ++i) w.f64(mu[i]);
  for (Index i = 0; i < f.rows(); ++i) {
    for (Index c = 0; c < f.cols(); ++c) w.f64(f(i, c));
  }
  w.f64(prior.gaussian.noise_variance());
  return w.buffer();
}

inline ShapePrior decode_shape_prior(io::Reader& r) {
  read_model_header(r, ModelSection::shape_prior);
  ShapePrior prior;
  prior.geometry.boundaries = r.u32();
  prior.geometry.columns = r.u32();
  prior.geometry.bscans = r.u32();
  prior.geometry.validate();
  prior.q_ppca = r.u32();
  prior.effective_rank = r.u32();
  prior.variance_inflation = r.f64();
  const Index dim = prior.geometry.dimension();
  if (prior.q_ppca > dim || prior.effective_rank > prior.q_ppca) {
    throw FormatError("shape prior: inconsistent rank fields");
  }
  Vector mu(dim);
  for (Index i = 0; i < dim; ++i) mu[i] = r.f64();
  Matrix f(dim, prior.q_ppca);
  for (Index i = 0; i < dim; ++i) {
    for (Index c = 0; c < prior.q_ppca; ++c) f(i, c) = r.f64();
  }
  const double sigma2 = r.f64();
  if (!r.at_end()) throw FormatError("shape prior file '" + r.origin() + "' has trailing bytes");
  try {
    prior.gaussian = LowRankGaussian(std::move(mu), std::move(f), sigma2);
  } catch (const Error& e) {
    throw FormatError(std::string("shape prior: invalid parameters: ") + e.what());
  }
  return prior;
}

inline void save_shape_prior(const ShapePrior& prior, const std::string& path) {
  io::write_file(path, encode_shape_prior(prior));
}

inline ShapePrior load_shape_prior(const std::string& path) {
  auto r = io::Reader::from_file(path);
  return decode_shape_prior(r);
}

}  // namespace layerseg
