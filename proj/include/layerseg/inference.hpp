#pragma once

// Alternating mean-field inference for q(b, c) = q_b(b) q_c(c).
//
// q_c: exact chain marginals per column (sum-product).
// q_b: Sigma_bar = (K + P)^{-1}, mu_bar = mu - (K + P)^{-1} p, where P and p
// collect the q_b-dependence of the shape tables. P does not depend on q_c,
// so Sigma_bar is computed once per run.

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include "layerseg/appearance.hpp"
#include "layerseg/chain.hpp"
#include "layerseg/parallel.hpp"
#include "layerseg/posterior.hpp"
#include "layerseg/regularizer.hpp"
#include "layerseg/shape_prior.hpp"

namespace layerseg {

// Scan-specific inputs of one run: per-column class log-probabilities.
struct SegmentationProblem {
  const ShapeContext* shape = nullptr;
  Index rows = 0;
  std::vector<Matrix> class_tables;  // per column, rows x classes
  std::vector<int> beta_layer;       // per column
  std::vector<int> beta_transition;

  const Geometry& geometry() const { return shape->geometry(); }

  DataTables data_tables(Index j) const {
    const auto c = static_cast<std::size_t>(j);
    return build_data_tables(class_tables[c], geometry().boundaries, beta_layer[c], beta_transition[c]);
  }
};

inline SegmentationProblem make_problem(const ShapeContext& ctx, std::vector<Matrix> class_tables,
                                        int beta_layer, int beta_transition) {
  const Geometry& g = ctx.geometry();
  if (static_cast<Index>(class_tables.size()) != g.columns) {
    throw InvalidArgument("make_problem: need one class table per column");
  }
  SegmentationProblem p;
  p.shape = &ctx;
  p.rows = class_tables.front().rows();
  for (const auto& t : class_tables) {
    if (t.rows() != p.rows || t.cols() != class_count(g.boundaries)) {
      throw InvalidArgument("make_problem: class tables disagree in shape");
    }
  }
  if (p.rows < g.boundaries) throw InvalidArgument("make_problem: fewer rows than boundaries");
  p.class_tables = std::move(class_tables);
  p.beta_layer.assign(static_cast<std::size_t>(g.columns), beta_layer);
  p.beta_transition.assign(static_cast<std::size_t>(g.columns), beta_transition);
  return p;
}

inline SegmentationProblem make_problem(const ShapeContext& ctx, const AppearanceBank& bank, const Scan& scan,
                                        int threads = 1) {
  const Geometry& g = ctx.geometry();
  scan.validate();
  if (!(scan.geometry == g)) {
    throw InvalidArgument("scan geometry (" + std::to_string(scan.geometry.boundaries) + " boundaries, " +
                          std::to_string(scan.geometry.columns) + " columns, " +
                          std::to_string(scan.geometry.bscans) +
                          " B-scans) does not match the shape prior (" + std::to_string(g.boundaries) + ", " +
                          std::to_string(g.columns) + ", " + std::to_string(g.bscans) + ")");
  }
  for (const auto& m : bank.models) {
    if (m.boundaries != g.boundaries) throw InvalidArgument("appearance model has the wrong number of boundaries");
  }
  if (scan.rows < g.boundaries) throw InvalidArgument("scan has fewer rows than boundaries");
  SegmentationProblem p;
  p.shape = &ctx;
  p.rows = scan.rows;
  p.class_tables.resize(static_cast<std::size_t>(g.columns));
  p.beta_layer.resize(static_cast<std::size_t>(g.columns));
  p.beta_transition.resize(static_cast<std::size_t>(g.columns));
  parallel_for(g.columns, threads, [&](std::ptrdiff_t j) {
    const AppearanceModel& m = bank.for_column(g, j);
    p.class_tables[static_cast<std::size_t>(j)] = column_class_table(m, scan, j);
    p.beta_layer[static_cast<std::size_t>(j)] = m.beta_layer;
    p.beta_transition[static_cast<std::size_t>(j)] = m.beta_transition;
  });
  return p;
}

// P = sum_i gamma_i gamma_i^T / s_i^2 and p = sum_i (E[c_i] - mu_i) gamma_i / s_i^2,
// with gamma_i the zero-padded regression row of b_i on the other columns and
// s_i^2 the inflated conditional variance. P is applied in O(D q).
class PrecisionAugment {
 public:
  explicit PrecisionAugment(const ShapeContext& ctx)
      : ctx_(&ctx), weights_(ctx.inflated_variance().cwiseInverse()), linear_(Vector::Zero(weights_.size())) {}

  const ShapeContext& context() const { return *ctx_; }
  const Vector& linear() const { return linear_; }
  void set_linear(Vector p) {
    if (p.size() != weights_.size()) throw InvalidArgument("PrecisionAugment: linear term has wrong size");
    linear_ = std::move(p);
  }
  // 1 / s_i^2
  const Vector& weights() const { return weights_; }

  // (gamma_i^T x)_i
  Vector project(const Vector& x) const {
    const Geometry& g = ctx_->geometry();
    const Index nb = g.boundaries;
    const Matrix& w = ctx_->prior().gaussian.factor();
    const Vector u = w.transpose() * x;
    Vector out(x.size());
    for (Index j = 0; j < g.columns; ++j) {
      const Vector local = u - w.middleRows(j * nb, nb).transpose() * x.segment(j * nb, nb);
      out.segment(j * nb, nb) = ctx_->column(j).coefficients * local;
    }
    return out;
  }

  // sum_i a_i gamma_i
  Vector combine(const Vector& a) const {
    const Geometry& g = ctx_->geometry();
    const Index nb = g.boundaries;
    const Matrix& w = ctx_->prior().gaussian.factor();
    Vector acc = Vector::Zero(w.cols());
    Vector out(a.size());
    for (Index j = 0; j < g.columns; ++j) {
      const Vector v = ctx_->column(j).coefficients.transpose() * a.segment(j * nb, nb);
      acc += v;
      out.segment(j * nb, nb) = -w.middleRows(j * nb, nb) * v;
    }
    out += w * acc;
    return out;
  }

  Vector apply(const Vector& x) const { return combine(project(x).cwiseProduct(weights_)); }

  Matrix dense() const {
    const Matrix g = ctx_->regression_matrix();
    return g.transpose() * weights_.asDiagonal() * g;
  }

 private:
  const ShapeContext* ctx_;
  Vector weights_;
  Vector linear_;
};

inline PrecisionAugment build_augment(const ShapeContext& ctx, const DiscretePosterior& qc) {
  PrecisionAugment aug(ctx);
  const Vector& mu = ctx.prior().gaussian.mean();
  const Vector ec = qc.expected_flat();
  if (ec.size() != mu.size()) throw InvalidArgument("build_augment: q_c does not match the prior geometry");
  aug.set_linear(aug.combine((ec - mu).cwiseProduct(aug.weights())));
  return aug;
}

enum class CovarianceMode { dense, matrix_free };

inline constexpr Index kDenseCovarianceLimit = 4096;

// Solves the q_b subproblem. The covariance part is fixed by the prior, so it
// is factorized once at construction; solve() only computes the mean.
class QbSolver {
 public:
  QbSolver(const ShapeContext& ctx, CovarianceMode mode, double cg_tol = 1e-8, int threads = 1)
      : ctx_(&ctx), mode_(mode), cg_tol_(cg_tol), augment_(ctx) {
    const LowRankGaussian& prior = ctx.objective_prior();
    const Index dim = prior.dimension();
    if (mode == CovarianceMode::dense) {
      if (dim > kDenseCovarianceLimit) {
        throw InvalidArgument("dense q_b covariance refused for dimension " + std::to_string(dim) +
                              " > " + std::to_string(kDenseCovarianceLimit) + "; use matrix-free mode");
      }
      Matrix a = prior.dense_precision() + augment_.dense();
      a = 0.5 * (a + a.transpose());
      Eigen::LLT<Matrix> llt(a);
      if (llt.info() != Eigen::Success) throw NumericalError("q_b precision K + P is not positive definite");
      covariance_ = llt.solve(Matrix::Identity(dim, dim));
      covariance_ = 0.5 * (covariance_ + covariance_.transpose());
      log_determinant_ = -2.0 * llt.matrixLLT().diagonal().array().log().sum();
      regression_variance_ = ctx.regression_variances(covariance_);
    } else {
      // gamma_i^T (K + P)^{-1} gamma_i, one solve per index
      regression_variance_.resize(dim);
      std::vector<long> iterations(static_cast<std::size_t>(dim), 0);
      parallel_for(dim, threads, [&](std::ptrdiff_t i) {
        const Vector g = ctx.regression_vector(i);
        SolveInfo info;
        const Vector x = precision_solve(prior, augment_, g, cg_tol_, -1, &info);
        regression_variance_[i] = g.dot(x);
        iterations[static_cast<std::size_t>(i)] = info.iterations;
      });
      for (long it : iterations) setup_iterations_ += it;
    }
  }

  CovarianceMode mode() const { return mode_; }
  long setup_iterations() const { return setup_iterations_; }

  // Optimal q_b for the linear term of `augment`; `warm` is an optional
  // previous solution used as the CG starting point.
  GaussianPosterior solve(const PrecisionAugment& augment, const GaussianPosterior* warm = nullptr,
                          SolveInfo* info = nullptr) const {
    const LowRankGaussian& prior = ctx_->objective_prior();
    const Vector& mu = prior.mean();
    Vector start;
    const Vector* guess = nullptr;
    if (warm && warm->mean.size() == mu.size()) {
      start = warm->mean - mu;
      guess = &start;
    }
    const Vector rhs = -augment.linear();
    const Vector x = precision_solve(prior, augment, rhs, cg_tol_, -1, info, guess);
    GaussianPosterior q;
    q.mean = mu + x;
    q.covariance = covariance_;
    q.regression_variance = regression_variance_;
    q.log_determinant = log_determinant_;
    return q;
  }

 private:
  const ShapeContext* ctx_;
  CovarianceMode mode_;
  double cg_tol_;
  PrecisionAugment augment_;
  Matrix covariance_;
  Vector regression_variance_;
  double log_determinant_ = std::numeric_limits<double>::quiet_NaN();
  long setup_iterations_ = 0;
};

inline GaussianPosterior optimize_qb(const ShapeContext& ctx, const PrecisionAugment& augment,
                                     double cg_tol = 1e-8, CovarianceMode mode = CovarianceMode::dense) {
  return QbSolver(ctx, mode, cg_tol).solve(augment);
}

// Terms of J(q_b, q_c); every additive constant is included.
struct ObjectiveTerms {
  double data = 0.0;        // -<q_c, data tables>
  double shape = 0.0;       // -E[log p(c | b)]
  double prior = 0.0;       // -E[log p(b)]
  double entropy_qb = 0.0;  // -H(q_b)
  double entropy_qc = 0.0;  // -H(q_c)
  // False when log|Sigma_bar| is unavailable (matrix-free); entropy_qb then
  // omits it. It is constant over a run, so differences stay exact.
  bool log_determinant_known = true;

  double total() const { return data + shape + prior + entropy_qb + entropy_qc; }
};

namespace detail {

// <q, t> skipping cells where q vanishes (t may be -inf there).
inline double masked_inner(const Eigen::Ref<const Matrix>& q, const Eigen::Ref<const Matrix>& t) {
  double s = 0.0;
  for (Index c = 0; c < q.cols(); ++c) {
    for (Index r = 0; r < q.rows(); ++r) {
      if (q(r, c) != 0.0) s += q(r, c) * t(r, c);
    }
  }
  return s;
}

inline double chain_energy(const ColumnMarginals& q, const Vector& first, const std::vector<Matrix>& pairwise,
                           const Vector& last) {
  const Index nb = q.singletons.cols();
  double s = masked_inner(q.singletons.col(0), first) + masked_inner(q.singletons.col(nb - 1), last);
  for (std::size_t k = 0; k < pairwise.size(); ++k) s += masked_inner(q.pairwise[k], pairwise[k]);
  return s;
}

inline double negative_entropy(const ColumnMarginals& q) {
  double s = 0.0;
  for (Index k = 0; k < q.singletons.cols(); ++k) {
    for (Index n = 0; n < q.singletons.rows(); ++n) {
      const double v = q.singletons(n, k);
      if (v > 0.0) s += v * std::log(v);
    }
  }
  for (std::size_t k = 0; k < q.pairwise.size(); ++k) {
    const Matrix& p = q.pairwise[k];
    const auto prev = q.singletons.col(static_cast<Index>(k));
    const auto cur = q.singletons.col(static_cast<Index>(k) + 1);
    for (Index n = 0; n < p.cols(); ++n) {
      for (Index m = 0; m < p.rows(); ++m) {
        const double v = p(m, n);
        if (v > 0.0) s += v * (std::log(v) - std::log(prev[m]) - std::log(cur[n]));
      }
    }
  }
  return s;
}

inline Vector regression_variance_of(const ShapeContext& ctx, const GaussianPosterior& qb) {
  if (qb.regression_variance.size() > 0) return qb.regression_variance;
  if (!qb.has_covariance()) throw InvalidArgument("q_b carries neither a covariance nor regression variances");
  return ctx.regression_variances(qb.covariance);
}

}  // namespace detail

inline ObjectiveTerms evaluate_objective(const SegmentationProblem& problem, const DiscretePosterior& qc,
                                         const GaussianPosterior& qb, int threads = 1) {
  const ShapeContext& ctx = *problem.shape;
  const Geometry& g = ctx.geometry();
  const LowRankGaussian& prior = ctx.objective_prior();
  const Index dim = g.dimension();
  if (qb.mean.size() != dim) throw InvalidArgument("evaluate_objective: q_b has wrong dimension");
  if (static_cast<Index>(qc.columns.size()) != g.columns) {
    throw InvalidArgument("evaluate_objective: q_c has wrong number of columns");
  }

  const Vector means = ctx.conditional_means(qb.mean);
  const Vector reg_var = detail::regression_variance_of(ctx, qb);

  std::vector<double> data(static_cast<std::size_t>(g.columns)), shape(data.size()), ent(data.size());
  parallel_for(g.columns, threads, [&](std::ptrdiff_t j) {
    const auto c = static_cast<std::size_t>(j);
    const ColumnMarginals& q = qc.columns[c];
    const DataTables dt = problem.data_tables(j);
    const ShapeTables st = build_shape_tables(ctx, j, problem.rows, means, reg_var);
    data[c] = -detail::chain_energy(q, dt.psi_first, dt.psi, dt.psi_last);
    const Vector zero = Vector::Zero(problem.rows);
    shape[c] = -(detail::chain_energy(q, st.omega_first, st.omega, zero) + st.offset);
    ent[c] = detail::negative_entropy(q);
  });

  ObjectiveTerms t;
  for (std::size_t c = 0; c < data.size(); ++c) {
    t.data += data[c];
    t.shape += shape[c];
    t.entropy_qc += ent[c];
  }

  const double d = static_cast<double>(dim);
  const Vector diff = qb.mean - prior.mean();
  double trace_term = 0.0;
  if (qb.has_covariance()) {
    trace_term = prior.precision_trace_product(qb.covariance);
  } else {
    // Only valid at Sigma_bar = (K + P)^{-1}: tr(K Sigma_bar) = D - tr(P Sigma_bar).
    trace_term = d - reg_var.cwiseProduct(ctx.inflated_variance().cwiseInverse()).sum();
  }
  t.prior = 0.5 * (d * kLog2Pi + prior.log_determinant() + trace_term + diff.dot(prior.precision_apply(diff)));

  double log_det = qb.log_determinant;
  if (std::isnan(log_det) && qb.has_covariance()) {
    Eigen::LLT<Matrix> llt(qb.covariance);
    if (llt.info() != Eigen::Success) throw NumericalError("q_b covariance is not positive definite");
    log_det = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  }
  t.entropy_qb = -0.5 * d * (1.0 + kLog2Pi);
  if (std::isnan(log_det)) {
    t.log_determinant_known = false;
  } else {
    t.entropy_qb -= 0.5 * log_det;
  }
  return t;
}

// Optimal q_c for fixed q_b, all columns.
inline DiscretePosterior update_qc(const SegmentationProblem& problem, const GaussianPosterior& qb,
                                   double sparsity_threshold = 1e-12, int threads = 1) {
  const ShapeContext& ctx = *problem.shape;
  const Geometry& g = ctx.geometry();
  const Vector means = ctx.conditional_means(qb.mean);
  const Vector reg_var = detail::regression_variance_of(ctx, qb);
  DiscretePosterior q;
  q.rows = problem.rows;
  q.geometry = g;
  q.columns.resize(static_cast<std::size_t>(g.columns));
  parallel_for(g.columns, threads, [&](std::ptrdiff_t j) {
    const ChainPotentials pot =
        combine(problem.data_tables(j), build_shape_tables(ctx, j, problem.rows, means, reg_var));
    q.columns[static_cast<std::size_t>(j)] = optimize_qc(pot, j, sparsity_threshold);
  });
  return q;
}

// First q_c with the column conditionals replaced by uniform densities.
inline DiscretePosterior initialize_qc(const SegmentationProblem& problem, double sparsity_threshold = 1e-12,
                                       int threads = 1) {
  const ShapeContext& ctx = *problem.shape;
  const Geometry& g = ctx.geometry();
  DiscretePosterior q;
  q.rows = problem.rows;
  q.geometry = g;
  q.columns.resize(static_cast<std::size_t>(g.columns));
  parallel_for(g.columns, threads, [&](std::ptrdiff_t j) {
    const ChainPotentials pot = combine(problem.data_tables(j), build_neighbor_tables(ctx, j, problem.rows));
    q.columns[static_cast<std::size_t>(j)] = optimize_qc(pot, j, sparsity_threshold);
  });
  return q;
}

struct SegmentOptions {
  double rel_tol = 1e-6;
  int max_iterations = 50;
  double cg_tol = 1e-8;
  double sparsity_threshold = 1e-12;
  CovarianceMode mode = CovarianceMode::dense;
  int threads = 1;
  // Also inflate the prior in the -E[log p(b)] term, not only in the regularizer.
  bool inflate_prior_term = false;
};

struct TraceEntry {
  int iteration = 0;
  std::string step;  // "init", "qc" or "qb"
  double objective = 0.0;
  double delta = 0.0;  // change from the previous entry
  double seconds = 0.0;
  long cg_iterations = 0;
};

struct SegmentResult {
  DiscretePosterior qc;
  GaussianPosterior qb;
  Matrix expected;  // boundaries x columns, E_qc[c]
  Matrix stddev;
  std::vector<TraceEntry> trace;
  ObjectiveTerms objective;
  bool converged = false;
  int iterations = 0;
};

struct Initialization {
  DiscretePosterior qc;
  GaussianPosterior qb;
};

inline Initialization initialize(const SegmentationProblem& problem, const QbSolver& solver,
                                 const SegmentOptions& opt = {}, SolveInfo* info = nullptr) {
  Initialization init;
  init.qc = initialize_qc(problem, opt.sparsity_threshold, opt.threads);
  init.qb = solver.solve(build_augment(*problem.shape, init.qc), nullptr, info);
  return init;
}

inline SegmentResult segment(const SegmentationProblem& problem, const SegmentOptions& opt = {}) {
  if (!(opt.rel_tol >= 0.0)) throw InvalidArgument("segment: rel_tol must be non-negative");
  if (opt.max_iterations < 1) throw InvalidArgument("segment: max_iterations must be positive");
  const ShapeContext& ctx = *problem.shape;
  const auto t0 = std::chrono::steady_clock::now();
  const auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };

  SegmentResult r;
  const QbSolver solver(ctx, opt.mode, opt.cg_tol, opt.threads);
  SolveInfo info;
  Initialization init = initialize(problem, solver, opt, &info);
  r.qc = std::move(init.qc);
  r.qb = std::move(init.qb);
  r.objective = evaluate_objective(problem, r.qc, r.qb, opt.threads);
  double j_prev = r.objective.total();
  r.trace.push_back({0, "init", j_prev, 0.0, elapsed(), info.iterations + solver.setup_iterations()});

  for (int it = 1; it <= opt.max_iterations; ++it) {
    const double j_start = j_prev;
    r.qc = update_qc(problem, r.qb, opt.sparsity_threshold, opt.threads);
    r.objective = evaluate_objective(problem, r.qc, r.qb, opt.threads);
    double j = r.objective.total();
    r.trace.push_back({it, "qc", j, j - j_prev, elapsed(), 0});
    j_prev = j;

    const GaussianPosterior previous = r.qb;
    r.qb = solver.solve(build_augment(ctx, r.qc), &previous, &info);
    r.objective = evaluate_objective(problem, r.qc, r.qb, opt.threads);
    j = r.objective.total();
    r.trace.push_back({it, "qb", j, j - j_prev, elapsed(), info.iterations});
    j_prev = j;

    r.iterations = it;
    if (std::abs(j - j_start) <= opt.rel_tol * std::abs(j)) {
      r.converged = true;
      break;
    }
  }
  r.expected = r.qc.expected_boundaries();
  r.stddev = r.qc.boundary_stddev();
  return r;
}

inline SegmentResult segment(const ShapePrior& prior, const AppearanceBank& bank, const Scan& scan,
                             const SegmentOptions& opt = {}) {
  const ShapeContext ctx(prior, opt.inflate_prior_term);
  const SegmentationProblem problem = make_problem(ctx, bank, scan, opt.threads);
  return segment(problem, opt);
}

}  // namespace layerseg
