#pragma once

// Patch appearance models: mean-subtracted patches projected onto a PCA
// basis, one sparse-precision Gaussian per layer / transition class.

#include <Eigen/Eigenvalues>
#include <Eigen/SparseCore>

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "layerseg/binary_io.hpp"
#include "layerseg/glasso.hpp"
#include "layerseg/model_file.hpp"
#include "layerseg/scan.hpp"

namespace layerseg {

// Layers l_0..l_{N_b} occupy class columns 0..N_b, transitions t_0..t_{N_b-1}
// occupy N_b+1..2N_b.
struct ClassLabel {
  enum class Kind { layer, transition };
  Kind kind = Kind::layer;
  Index index = 0;

  static ClassLabel layer(Index k) { return {Kind::layer, k}; }
  static ClassLabel transition(Index k) { return {Kind::transition, k}; }

  Index column(Index boundaries) const { return kind == Kind::layer ? index : boundaries + 1 + index; }
};

inline Index class_count(Index boundaries) { return 2 * boundaries + 1; }

enum class AppearanceMode : std::uint32_t { generative = 0, discriminative = 1 };

struct PatchProjector {
  Index patch_rows = 0;
  Index patch_cols = 0;
  Matrix basis;        // patch pixels x q_pca, orthonormal columns
  Vector eigenvalues;  // descending

  Index q_pca() const { return basis.cols(); }
  Index patch_pixels() const { return patch_rows * patch_cols; }
};

namespace detail {

inline Index reflect_index(Index x, Index n) {
  if (n == 1) return 0;
  const Index period = 2 * (n - 1);
  x = x < 0 ? -x : x;
  x %= period;
  return x >= n ? period - x : x;
}

}  // namespace detail

// Patch centered at (i, j) with reflect padding, minus its own mean. Column
// padding stays inside the B-scan containing j.
inline Vector raw_patch(const Scan& scan, Index i, Index j, Index patch_rows, Index patch_cols) {
  if (patch_rows % 2 == 0 || patch_cols % 2 == 0) throw InvalidArgument("patch size must be odd");
  const Index per = scan.geometry.columns_per_bscan();
  const Index first_col = scan.geometry.bscan_of(j) * per;
  const Index hr = patch_rows / 2;
  const Index hc = patch_cols / 2;
  Vector patch(patch_rows * patch_cols);
  Index t = 0;
  for (Index di = -hr; di <= hr; ++di) {
    const Index r = detail::reflect_index(i + di, scan.rows);
    for (Index dj = -hc; dj <= hc; ++dj) {
      const Index c = first_col + detail::reflect_index(j - first_col + dj, per);
      patch[t++] = scan.at(r, c);
    }
  }
  patch.array() -= patch.mean();
  return patch;
}

inline Vector extract_patch(const PatchProjector& projector, const Scan& scan, Index i, Index j) {
  return projector.basis.transpose() * raw_patch(scan, i, j, projector.patch_rows, projector.patch_cols);
}

inline PatchProjector fit_projector(std::span<const Scan> scans, Index n_samples, Index patch_rows,
                                    Index patch_cols, Index q_pca, std::uint64_t seed) {
  if (scans.empty()) throw InvalidArgument("fit_projector: no scans");
  if (q_pca < 1 || q_pca > patch_rows * patch_cols) throw InvalidArgument("fit_projector: bad q_pca");
  if (n_samples < q_pca) throw InvalidArgument("fit_projector: too few samples for q_pca");
  std::mt19937_64 rng(seed);
  const Index p = patch_rows * patch_cols;
  Matrix samples(n_samples, p);
  std::uniform_int_distribution<std::size_t> pick_scan(0, scans.size() - 1);
  for (Index s = 0; s < n_samples; ++s) {
    const Scan& scan = scans[pick_scan(rng)];
    std::uniform_int_distribution<Index> row(0, scan.rows - 1);
    std::uniform_int_distribution<Index> col(0, scan.columns() - 1);
    const Index i = row(rng);
    const Index j = col(rng);
    samples.row(s) = raw_patch(scan, i, j, patch_rows, patch_cols).transpose();
  }
  const Vector mean = samples.colwise().mean().transpose();
  const Matrix centered = samples.rowwise() - mean.transpose();
  const Matrix cov = centered.transpose() * centered / static_cast<double>(std::max<Index>(n_samples - 1, 1));
  Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
  PatchProjector proj;
  proj.patch_rows = patch_rows;
  proj.patch_cols = patch_cols;
  proj.eigenvalues = es.eigenvalues().reverse().head(q_pca);
  proj.basis = es.eigenvectors().rowwise().reverse().leftCols(q_pca);
  for (Index c = 0; c < q_pca; ++c) {
    Index pivot = 0;
    proj.basis.col(c).cwiseAbs().maxCoeff(&pivot);
    if (proj.basis(pivot, c) < 0.0) proj.basis.col(c) *= -1.0;
  }
  return proj;
}

struct ClassGaussian {
  Vector mean;
  SparseMatrix precision;
  double log_det_precision = 0.0;
};

struct AppearanceModel {
  PatchProjector projector;
  Index boundaries = 0;
  std::vector<ClassGaussian> classes;  // indexed by ClassLabel::column
  double alpha_glasso = 0.0;
  int beta_layer = 0;
  int beta_transition = 0;
  AppearanceMode mode = AppearanceMode::generative;
};

// One model per B-scan, or a single shared one.
struct AppearanceBank {
  std::vector<AppearanceModel> models;

  const AppearanceModel& for_column(const Geometry& g, Index j) const {
    if (models.empty()) throw InvalidArgument("appearance bank is empty");
    if (models.size() == 1) return models.front();
    const auto b = static_cast<std::size_t>(g.bscan_of(j));
    if (b >= models.size()) throw InvalidArgument("no appearance model for B-scan " + std::to_string(b));
    return models[b];
  }
};

// No defaults here: build these from a RunConfig (see appearance_options()).
struct AppearanceOptions {
  double alpha_glasso = 0.0;
  Index q_pca = 0;
  Index patch_rows = 0;
  Index patch_cols = 0;
  Index patches_per_class = 0;
  Index projector_samples = 0;
  int beta_layer = 0;
  int beta_transition = 0;
  AppearanceMode mode = AppearanceMode::generative;
  double glasso_tol = 0.0;
  long glasso_max_iterations = 0;
  bool shared = false;
  std::uint64_t seed = 0;
};

inline double class_loglik(const ClassGaussian& c, const Vector& projected) {
  const Vector d = projected - c.mean;
  const double quad = d.dot(c.precision * d);
  return -0.5 * (static_cast<double>(d.size()) * kLog2Pi - c.log_det_precision + quad);
}

inline double class_loglik(const AppearanceModel& model, const Scan& scan, Index i, Index j,
                           ClassLabel label) {
  const auto c = static_cast<std::size_t>(label.column(model.boundaries));
  return class_loglik(model.classes.at(c), extract_patch(model.projector, scan, i, j));
}

// rows x classes table of log p(y_ij | x) (generative) or log p(x | y_ij)
// under a uniform class prior (discriminative). The beta switches are applied
// later, when the data tables are assembled.
inline Matrix column_class_table(const AppearanceModel& model, const Scan& scan, Index j) {
  const Index nc = static_cast<Index>(model.classes.size());
  Matrix table(scan.rows, nc);
  for (Index i = 0; i < scan.rows; ++i) {
    const Vector y = extract_patch(model.projector, scan, i, j);
    for (Index c = 0; c < nc; ++c) table(i, c) = class_loglik(model.classes[static_cast<std::size_t>(c)], y);
  }
  if (model.mode == AppearanceMode::discriminative) {
    for (Index i = 0; i < scan.rows; ++i) {
      const double mx = table.row(i).maxCoeff();
      const double lse = mx + std::log((table.row(i).array() - mx).exp().sum());
      table.row(i).array() -= lse;
    }
  }
  return table;
}

inline Matrix column_class_table(const AppearanceBank& bank, const Scan& scan, Index j) {
  return column_class_table(bank.for_column(scan.geometry, j), scan, j);
}

namespace detail {

inline Index rounded_row(double b, Index rows) {
  return std::clamp<Index>(static_cast<Index>(std::lround(b)), 0, rows - 1);
}

// Row range [lo, hi] of layer k in column j of a labelled scan.
inline std::pair<Index, Index> layer_rows(const Scan& scan, Index k, Index j) {
  const Index nb = scan.geometry.boundaries;
  const auto& b = scan.truth->values;
  const Index lo = k == 0 ? 0 : rounded_row(b(k - 1, j), scan.rows) + 1;
  const Index hi = k == nb ? scan.rows - 1 : rounded_row(b(k, j), scan.rows) - 1;
  return {lo, hi};
}

inline ClassGaussian fit_class(const Matrix& samples, const AppearanceOptions& opt) {
  const Index n = samples.rows();
  const Index q = samples.cols();
  ClassGaussian c;
  c.mean = samples.colwise().mean().transpose();
  const Matrix centered = samples.rowwise() - c.mean.transpose();
  Matrix s = centered.transpose() * centered / static_cast<double>(std::max<Index>(n - 1, 1));
  s = 0.5 * (s + s.transpose()).eval();
  // Noise-free classes can have an empty projected variance in some direction.
  const double floor = std::max(1e-6 * s.trace() / static_cast<double>(q), 1e-10);
  s.diagonal().array() += floor;
  GlassoResult g = graphical_lasso(s, opt.alpha_glasso, opt.glasso_tol, opt.glasso_max_iterations);
  c.precision = std::move(g.precision);
  Eigen::LLT<Matrix> llt{Matrix(c.precision)};
  if (llt.info() != Eigen::Success) throw NumericalError("class precision is not positive definite");
  c.log_det_precision = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  return c;
}

}  // namespace detail

// Learns projector and class Gaussians from scans carrying ground truth.
// Transition patches are centered on the rounded boundary row; layer patches
// are drawn uniformly from rows strictly between neighbouring boundaries.
inline AppearanceBank fit_appearance(std::span<const Scan> scans, const AppearanceOptions& opt) {
  if (scans.empty()) throw InvalidArgument("fit_appearance: no training scans");
  const Geometry geometry = scans.front().geometry;
  for (const auto& s : scans) {
    s.validate();
    if (!s.truth) throw InvalidArgument("fit_appearance: training scan without ground truth");
    if (!(s.geometry == geometry)) throw InvalidArgument("fit_appearance: inconsistent scan geometries");
  }
  if (opt.q_pca < 1 || opt.patch_rows < 1 || opt.patch_cols < 1 || opt.patches_per_class < 2 ||
      opt.projector_samples < 2 || !(opt.alpha_glasso >= 0.0) || !(opt.glasso_tol > 0.0) ||
      opt.glasso_max_iterations < 1) {
    throw InvalidArgument("fit_appearance: options are incomplete or out of range");
  }
  const Index nb = geometry.boundaries;
  PatchProjector projector =
      fit_projector(scans, opt.projector_samples, opt.patch_rows, opt.patch_cols, opt.q_pca, opt.seed);

  const Index n_models = opt.shared ? 1 : geometry.bscans;
  const Index per = geometry.columns_per_bscan();
  AppearanceBank bank;
  std::mt19937_64 rng(opt.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_int_distribution<std::size_t> pick_scan(0, scans.size() - 1);
  for (Index m = 0; m < n_models; ++m) {
    const Index col_lo = opt.shared ? 0 : m * per;
    const Index col_hi = opt.shared ? geometry.columns - 1 : (m + 1) * per - 1;
    std::uniform_int_distribution<Index> pick_col(col_lo, col_hi);
    AppearanceModel model;
    model.projector = projector;
    model.boundaries = nb;
    model.alpha_glasso = opt.alpha_glasso;
    model.beta_layer = opt.beta_layer;
    model.beta_transition = opt.beta_transition;
    model.mode = opt.mode;
    model.classes.resize(static_cast<std::size_t>(class_count(nb)));
    for (Index c = 0; c < class_count(nb); ++c) {
      const bool is_layer = c <= nb;
      const Index k = is_layer ? c : c - nb - 1;
      Matrix samples(opt.patches_per_class, projector.q_pca());
      Index filled = 0;
      Index attempts = 0;
      while (filled < opt.patches_per_class) {
        if (++attempts > 100 * opt.patches_per_class + 1000) {
          throw InvalidArgument("fit_appearance: class " + std::to_string(c) + " has no training pixels");
        }
        const Scan& scan = scans[pick_scan(rng)];
        const Index j = pick_col(rng);
        Index row = 0;
        if (is_layer) {
          const auto [lo, hi] = detail::layer_rows(scan, k, j);
          if (lo > hi) continue;
          row = std::uniform_int_distribution<Index>(lo, hi)(rng);
        } else {
          row = detail::rounded_row(scan.truth->values(k, j), scan.rows);
        }
        samples.row(filled++) = extract_patch(projector, scan, row, j).transpose();
      }
      model.classes[static_cast<std::size_t>(c)] = detail::fit_class(samples, opt);
    }
    bank.models.push_back(std::move(model));
  }
  return bank;
}

inline void encode_appearance_model(io::Writer& w, const AppearanceModel& m) {
  w.u32(static_cast<std::uint32_t>(m.boundaries));
  w.u32(static_cast<std::uint32_t>(m.mode));
  w.u32(static_cast<std::uint32_t>(m.beta_layer));
  w.u32(static_cast<std::uint32_t>(m.beta_transition));
  w.f64(m.alpha_glasso);
  const auto& pr = m.projector;
  w.u32(static_cast<std::uint32_t>(pr.patch_rows));
  w.u32(static_cast<std::uint32_t>(pr.patch_cols));
  w.u32(static_cast<std::uint32_t>(pr.q_pca()));
  for (Index i = 0; i < pr.basis.rows(); ++i) {
    for (Index c = 0; c < pr.basis.cols(); ++c) w.f64(pr.basis(i, c));
  }
  for (Index c = 0; c < pr.q_pca(); ++c) w.f64(pr.eigenvalues[c]);
  w.u32(static_cast<std::uint32_t>(m.classes.size()));
  for (const auto& cls : m.classes) {
    for (Index i = 0; i < cls.mean.size(); ++i) w.f64(cls.mean[i]);
    w.f64(cls.log_det_precision);
    std::vector<std::tuple<Index, Index, double>> upper;
    for (Index col = 0; col < cls.precision.outerSize(); ++col) {
      for (SparseMatrix::InnerIterator it(cls.precision, col); it; ++it) {
        if (it.row() <= it.col()) upper.emplace_back(it.row(), it.col(), it.value());
      }
    }
    w.u32(static_cast<std::uint32_t>(upper.size()));
    for (const auto& [r, c, v] : upper) {
      w.u32(static_cast<std::uint32_t>(r));
      w.u32(static_cast<std::uint32_t>(c));
      w.f64(v);
    }
  }
}

inline AppearanceModel decode_appearance_model(io::Reader& r) {
  AppearanceModel m;
  m.boundaries = r.u32();
  const std::uint32_t mode = r.u32();
  if (mode > 1) throw FormatError("appearance model: unknown mode " + std::to_string(mode));
  m.mode = static_cast<AppearanceMode>(mode);
  m.beta_layer = static_cast<int>(r.u32());
  m.beta_transition = static_cast<int>(r.u32());
  if (m.beta_layer > 1 || m.beta_transition > 1) throw FormatError("appearance model: bad beta switch");
  m.alpha_glasso = r.f64();
  auto& pr = m.projector;
  pr.patch_rows = r.u32();
  pr.patch_cols = r.u32();
  const Index q = r.u32();
  pr.basis.resize(pr.patch_pixels(), q);
  for (Index i = 0; i < pr.basis.rows(); ++i) {
    for (Index c = 0; c < q; ++c) pr.basis(i, c) = r.f64();
  }
  pr.eigenvalues.resize(q);
  for (Index c = 0; c < q; ++c) pr.eigenvalues[c] = r.f64();
  const std::uint32_t n_classes = r.u32();
  if (static_cast<Index>(n_classes) != class_count(m.boundaries)) {
    throw FormatError("appearance model: class count does not match the boundary count");
  }
  m.classes.resize(n_classes);
  for (auto& cls : m.classes) {
    cls.mean.resize(q);
    for (Index i = 0; i < q; ++i) cls.mean[i] = r.f64();
    cls.log_det_precision = r.f64();
    const std::uint32_t nnz = r.u32();
    std::vector<Eigen::Triplet<double>> triplets;
    triplets.reserve(2 * nnz);
    for (std::uint32_t t = 0; t < nnz; ++t) {
      const Index row = r.u32();
      const Index col = r.u32();
      const double v = r.f64();
      if (row >= q || col >= q || row > col) throw FormatError("appearance model: bad precision entry");
      triplets.emplace_back(row, col, v);
      if (row != col) triplets.emplace_back(col, row, v);
    }
    cls.precision.resize(q, q);
    cls.precision.setFromTriplets(triplets.begin(), triplets.end());
    cls.precision.makeCompressed();
  }
  return m;
}

inline std::vector<char> encode_appearance(const AppearanceBank& bank) {
  io::Writer w;
  write_model_header(w, ModelSection::appearance);
  w.u32(static_cast<std::uint32_t>(bank.models.size()));
  for (const auto& m : bank.models) encode_appearance_model(w, m);
  return w.buffer();
}

inline AppearanceBank decode_appearance(io::Reader& r) {
  read_model_header(r, ModelSection::appearance);
  AppearanceBank bank;
  const std::uint32_t n = r.u32();
  if (n == 0) throw FormatError("appearance file holds no models");
  for (std::uint32_t i = 0; i < n; ++i) bank.models.push_back(decode_appearance_model(r));
  if (!r.at_end()) throw FormatError("appearance file '" + r.origin() + "' has trailing bytes");
  return bank;
}

inline void save_appearance(const AppearanceBank& bank, const std::string& path) {
  io::write_file(path, encode_appearance(bank));
}

inline AppearanceBank load_appearance(const std::string& path) {
  auto r = io::Reader::from_file(path);
  return decode_appearance(r);
}

}  // namespace layerseg
