#pragma once

// Column-wise potentials for the boundary chains.
//
// Data tables sum class log-probabilities over the pixels whose label is
// fixed by a pair of neighbouring boundaries. Shape tables hold the q_b
// expectation of the log of the shape-induced regularizer, with the
// crude step-function rule for the interval probabilities. Cells with
// n <= m violate the ordering and are -inf.

#include <cmath>
#include <limits>
#include <vector>

#include "layerseg/appearance.hpp"
#include "layerseg/posterior.hpp"
#include "layerseg/shape_prior.hpp"

namespace layerseg {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

struct DataTables {
  Vector psi_first;         // l_0 above c_0 plus t_0 at c_0
  std::vector<Matrix> psi;  // k = 1..N_b-1: l_k strictly between, t_k at c_k
  Vector psi_last;          // l_{N_b} below c_{N_b-1}
};

struct ShapeTables {
  Vector omega_first;
  std::vector<Matrix> omega;
  // Sum of the (m, n)-independent terms left out of the tables.
  double offset = 0.0;
};

struct ChainPotentials {
  Vector first;
  std::vector<Matrix> pairwise;
  Vector last;
};

inline DataTables build_data_tables(const Matrix& class_table, Index boundaries, int beta_layer,
                                    int beta_transition) {
  const Index rows = class_table.rows();
  if (class_table.cols() != class_count(boundaries)) {
    throw InvalidArgument("build_data_tables: class table has the wrong number of classes");
  }
  const auto layer = [&](Index k) { return class_table.col(ClassLabel::layer(k).column(boundaries)); };
  const auto transition = [&](Index k) {
    return class_table.col(ClassLabel::transition(k).column(boundaries));
  };
  // prefix(k)[i] = sum_{r < i} log p(l_k | y_r)
  std::vector<Vector> prefix(static_cast<std::size_t>(boundaries + 1));
  for (Index k = 0; k <= boundaries; ++k) {
    Vector p = Vector::Zero(rows + 1);
    if (beta_layer != 0) {
      const auto l = layer(k);
      for (Index i = 0; i < rows; ++i) p[i + 1] = p[i] + l[i];
    }
    prefix[static_cast<std::size_t>(k)] = std::move(p);
  }
  const auto trans = [&](Index k, Index n) { return beta_transition != 0 ? transition(k)[n] : 0.0; };
  const double bl = beta_layer != 0 ? 1.0 : 0.0;

  DataTables t;
  t.psi_first.resize(rows);
  t.psi_last.resize(rows);
  const Vector& p0 = prefix.front();
  const Vector& plast = prefix.back();
  for (Index n = 0; n < rows; ++n) {
    t.psi_first[n] = bl * p0[n] + trans(0, n);
    t.psi_last[n] = bl * (plast[rows] - plast[n + 1]);
  }
  for (Index k = 1; k < boundaries; ++k) {
    const Vector& p = prefix[static_cast<std::size_t>(k)];
    Matrix m = Matrix::Constant(rows, rows, kNegInf);
    for (Index a = 0; a < rows; ++a) {
      for (Index n = a + 1; n < rows; ++n) m(a, n) = bl * (p[n] - p[a + 1]) + trans(k, n);
    }
    t.psi.push_back(std::move(m));
  }
  return t;
}

// Prior-derived quantities reused by every table build and q_b update.
class ShapeContext {
 public:
  struct Neighbor {
    double slope = 0.0;      // d mean / d b_{k-1}
    double intercept = 0.0;  // mean at b_{k-1} = 0
    double variance = 1.0;
  };

  ShapeContext() = default;

  // `objective_prior` is the Gaussian used in the log p(b) term and the q_b
  // precision; it equals prior.gaussian unless the prior term is inflated too.
  explicit ShapeContext(const ShapePrior& prior, bool inflate_prior_term = false)
      : prior_(&prior),
        objective_prior_(inflate_prior_term ? prior.gaussian.scaled(prior.variance_inflation)
                                            : prior.gaussian) {
    const Geometry& g = prior.geometry;
    operators_.reserve(static_cast<std::size_t>(g.columns));
    inflated_variance_.resize(g.dimension());
    neighbors_.resize(static_cast<std::size_t>(g.dimension()));
    for (Index j = 0; j < g.columns; ++j) {
      operators_.push_back(column_operator(prior, j));
      const auto& cov = operators_.back().covariance;
      for (Index k = 0; k < g.boundaries; ++k) {
        inflated_variance_[g.flat_index(k, j)] =
            prior.variance_inflation * std::max(cov(k, k), kVarianceFloor);
        if (k > 0) {
          const Index prev = g.flat_index(k - 1, j);
          const Index cur = g.flat_index(k, j);
          const UnivariateGaussian at0 = neighbor_conditional(prior.gaussian, prev, cur, 0.0);
          const UnivariateGaussian at1 = neighbor_conditional(prior.gaussian, prev, cur, 1.0);
          const double s_pp = prior.gaussian.covariance_entry(prev, prev);
          const double s_pc = prior.gaussian.covariance_entry(prev, cur);
          neighbors_[static_cast<std::size_t>(cur)] = {s_pc / s_pp, at0.mean, at1.variance};
        }
      }
    }
  }

  const ShapePrior& prior() const { return *prior_; }
  const Geometry& geometry() const { return prior_->geometry; }
  const LowRankGaussian& objective_prior() const { return objective_prior_; }
  const ConditionalOperator& column(Index j) const { return operators_[static_cast<std::size_t>(j)]; }
  // Inflated conditional variance of b_{k,j} given b_\j, by flat index.
  const Vector& inflated_variance() const { return inflated_variance_; }
  const Neighbor& neighbor(Index flat) const { return neighbors_[static_cast<std::size_t>(flat)]; }

  // Conditional means (mu_{j|\j})_k evaluated at b, for all (k, j).
  Vector conditional_means(const Vector& b) const {
    const Geometry& g = geometry();
    const Index nb = g.boundaries;
    const auto& w = prior_->gaussian.factor();
    const Vector d = b - prior_->gaussian.mean();
    const Vector u = w.transpose() * d;
    Vector out(g.dimension());
    for (Index j = 0; j < g.columns; ++j) {
      const Vector local = u - w.middleRows(j * nb, nb).transpose() * d.segment(j * nb, nb);
      out.segment(j * nb, nb) = prior_->gaussian.mean().segment(j * nb, nb) - column(j).coefficients * local;
    }
    return out;
  }

  // Row i holds gamma_i: the zero-padded regression row of b_i on the other columns.
  Matrix regression_matrix() const {
    const Geometry& g = geometry();
    const Index nb = g.boundaries;
    const auto& w = prior_->gaussian.factor();
    Matrix out(g.dimension(), g.dimension());
    for (Index j = 0; j < g.columns; ++j) {
      out.middleRows(j * nb, nb) = column(j).coefficients * w.transpose();
      out.block(j * nb, j * nb, nb, nb).setZero();
    }
    return out;
  }

  Vector regression_vector(Index flat) const {
    const Index nb = geometry().boundaries;
    const Index j = flat / nb;
    const Index k = flat % nb;
    Vector v = prior_->gaussian.factor() * column(j).coefficients.row(k).transpose();
    v.segment(j * nb, nb).setZero();
    return v;
  }

  // gamma_i^T Sigma gamma_i for every i.
  Vector regression_variances(const Matrix& sigma) const {
    const Matrix g = regression_matrix();
    const Matrix gs = g * sigma;
    return gs.cwiseProduct(g).rowwise().sum();
  }

 private:
  const ShapePrior* prior_ = nullptr;
  LowRankGaussian objective_prior_;
  std::vector<ConditionalOperator> operators_;
  Vector inflated_variance_;
  std::vector<Neighbor> neighbors_;
};

namespace detail {

// Fills the pairwise table of boundary k (>= 1) given the Gaussian over b_k
// from the global shape term, with the neighbour density at (m, n).
// Returns the dropped constant.
inline double fill_pairwise(const ShapeContext& ctx, Index flat, const UnivariateGaussian* global,
                            Index rows, Matrix& table) {
  const auto& nbr = ctx.neighbor(flat);
  table = Matrix::Constant(rows, rows, kNegInf);
  double constant = -0.5 * (kLog2Pi + std::log(nbr.variance));
  if (global) constant += -0.5 * (kLog2Pi + std::log(global->variance));
  for (Index m = 0; m < rows - 1; ++m) {
    const UnivariateGaussian local{nbr.intercept + nbr.slope * static_cast<double>(m), nbr.variance};
    if (global) {
      const ScaledGaussian prod = gaussian_product(*global, local);
      const double lv = -0.5 * (kLog2Pi + std::log(prod.gaussian.variance));
      const double base = prod.log_scale + lv - constant;
      for (Index n = m + 1; n < rows; ++n) {
        const double d = static_cast<double>(n) - prod.gaussian.mean;
        table(m, n) = base - 0.5 * d * d / prod.gaussian.variance;
      }
    } else {
      for (Index n = m + 1; n < rows; ++n) {
        const double d = static_cast<double>(n) - local.mean;
        table(m, n) = -0.5 * d * d / local.variance;
      }
    }
  }
  return constant;
}

}  // namespace detail

// Shape tables of column j with q_b's moments. `conditional_means` and
// `regression_variance` are the full-length vectors of E_qb[(mu_{j|\j})_k]
// and gamma^T Sigma_bar gamma.
inline ShapeTables build_shape_tables(const ShapeContext& ctx, Index j, Index rows,
                                      const Vector& conditional_means, const Vector& regression_variance) {
  const Geometry& g = ctx.geometry();
  ShapeTables t;
  t.omega_first.resize(rows);
  for (Index k = 0; k < g.boundaries; ++k) {
    const Index flat = g.flat_index(k, j);
    const double s2 = ctx.inflated_variance()[flat];
    const UnivariateGaussian global{conditional_means[flat], s2};
    const double spread = regression_variance[flat] / (2.0 * s2);
    if (k == 0) {
      for (Index n = 0; n < rows; ++n) {
        const double d = static_cast<double>(n) - global.mean;
        t.omega_first[n] = -0.5 * d * d / s2;
      }
      t.offset += -0.5 * (kLog2Pi + std::log(s2)) - spread;
    } else {
      Matrix table;
      t.offset += detail::fill_pairwise(ctx, flat, &global, rows, table) - spread;
      t.omega.push_back(std::move(table));
    }
  }
  return t;
}

inline ShapeTables build_shape_tables(const ShapeContext& ctx, const GaussianPosterior& qb, Index j,
                                      Index rows) {
  const Vector means = ctx.conditional_means(qb.mean);
  const Vector var = qb.regression_variance.size() > 0 ? qb.regression_variance
                                                       : ctx.regression_variances(qb.covariance);
  return build_shape_tables(ctx, j, rows, means, var);
}

// Tables with the column conditionals replaced by a uniform density: only the
// neighbour terms remain.
inline ShapeTables build_neighbor_tables(const ShapeContext& ctx, Index j, Index rows) {
  const Geometry& g = ctx.geometry();
  ShapeTables t;
  t.omega_first = Vector::Zero(rows);
  for (Index k = 1; k < g.boundaries; ++k) {
    Matrix table;
    t.offset += detail::fill_pairwise(ctx, g.flat_index(k, j), nullptr, rows, table);
    t.omega.push_back(std::move(table));
  }
  return t;
}

inline ChainPotentials combine(const DataTables& data, const ShapeTables& shape) {
  if (data.psi.size() != shape.omega.size() || data.psi_first.size() != shape.omega_first.size()) {
    throw InvalidArgument("combine: data and shape tables disagree in shape");
  }
  ChainPotentials p;
  p.first = data.psi_first + shape.omega_first;
  p.last = data.psi_last;
  p.pairwise.reserve(data.psi.size());
  for (std::size_t k = 0; k < data.psi.size(); ++k) p.pairwise.push_back(data.psi[k] + shape.omega[k]);
  return p;
}

}  // namespace layerseg
