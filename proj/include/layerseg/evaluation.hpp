#pragma once

// Unsigned boundary error and k-fold cross-validation.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "layerseg/appearance.hpp"
#include "layerseg/config.hpp"
#include "layerseg/inference.hpp"
#include "layerseg/parallel.hpp"
#include "layerseg/scan.hpp"
#include "layerseg/shape_prior.hpp"

namespace layerseg {

// Error of one scan. Regions split the columns into `regions` contiguous,
// near-equal groups.
struct ScanError {
  double pixel_pitch_um = 1.0;
  Vector boundary_px;  // E^k in pixels
  Matrix region_px;    // boundaries x regions
  double mean_px = 0.0;

  Vector boundary_um() const { return boundary_px * pixel_pitch_um; }
  double mean_um() const { return mean_px * pixel_pitch_um; }
};

inline Index region_of(Index column, Index columns, Index regions) { return column * regions / columns; }

inline ScanError unsigned_error(const Matrix& estimate, const BoundaryField& truth, double pixel_pitch_um,
                                Index regions = 1) {
  const Index nb = truth.geometry.boundaries;
  const Index m = truth.geometry.columns;
  if (estimate.rows() != nb || estimate.cols() != m) {
    throw InvalidArgument("unsigned_error: estimate and truth have different shapes");
  }
  if (regions < 1 || regions > m) throw InvalidArgument("unsigned_error: regions must be in [1, columns]");
  if (!(pixel_pitch_um > 0.0)) throw InvalidArgument("unsigned_error: pixel pitch must be positive");
  ScanError e;
  e.pixel_pitch_um = pixel_pitch_um;
  const Matrix diff = (estimate - truth.values).cwiseAbs();
  e.boundary_px = diff.rowwise().mean();
  e.mean_px = e.boundary_px.mean();
  e.region_px = Matrix::Zero(nb, regions);
  Vector count = Vector::Zero(regions);
  for (Index j = 0; j < m; ++j) {
    const Index r = region_of(j, m, regions);
    e.region_px.col(r) += diff.col(j);
    count[r] += 1.0;
  }
  for (Index r = 0; r < regions; ++r) e.region_px.col(r) /= count[r];
  return e;
}

// Aggregate over scans: means of the per-scan values and the SD of the
// per-scan mean errors.
struct ErrorReport {
  Index scans = 0;
  Vector boundary_px;
  Vector boundary_um;
  Matrix region_px;
  Matrix region_um;
  double mean_px = 0.0;
  double mean_um = 0.0;
  double sd_px = 0.0;
  double sd_um = 0.0;
};

inline ErrorReport aggregate(const std::vector<ScanError>& errors) {
  if (errors.empty()) throw InvalidArgument("aggregate: no scan errors");
  ErrorReport r;
  r.scans = static_cast<Index>(errors.size());
  const auto& first = errors.front();
  r.boundary_px = Vector::Zero(first.boundary_px.size());
  r.boundary_um = r.boundary_px;
  r.region_px = Matrix::Zero(first.region_px.rows(), first.region_px.cols());
  r.region_um = r.region_px;
  for (const auto& e : errors) {
    if (e.boundary_px.size() != r.boundary_px.size() || e.region_px.cols() != r.region_px.cols()) {
      throw InvalidArgument("aggregate: scan errors disagree in shape");
    }
    r.boundary_px += e.boundary_px;
    r.boundary_um += e.boundary_um();
    r.region_px += e.region_px;
    r.region_um += e.region_px * e.pixel_pitch_um;
    r.mean_px += e.mean_px;
    r.mean_um += e.mean_um();
  }
  const double n = static_cast<double>(errors.size());
  r.boundary_px /= n;
  r.boundary_um /= n;
  r.region_px /= n;
  r.region_um /= n;
  r.mean_px /= n;
  r.mean_um /= n;
  if (errors.size() > 1) {
    double vp = 0.0, vu = 0.0;
    for (const auto& e : errors) {
      vp += (e.mean_px - r.mean_px) * (e.mean_px - r.mean_px);
      vu += (e.mean_um() - r.mean_um) * (e.mean_um() - r.mean_um);
    }
    r.sd_px = std::sqrt(vp / (n - 1.0));
    r.sd_um = std::sqrt(vu / (n - 1.0));
  }
  return r;
}

namespace detail {

inline std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace detail

inline std::string format_report(const ErrorReport& r) {
  std::ostringstream o;
  o << "scans: " << r.scans << "\n";
  o << "boundary      E_px      E_um\n";
  for (Index k = 0; k < r.boundary_px.size(); ++k) {
    char line[96];
    std::snprintf(line, sizeof line, "%8lld  %8.4f  %8.4f\n", static_cast<long long>(k), r.boundary_px[k],
                  r.boundary_um[k]);
    o << line;
  }
  o << "mean E_unsgn: " << detail::fixed(r.mean_px) << " px (sd " << detail::fixed(r.sd_px) << "), "
    << detail::fixed(r.mean_um) << " um (sd " << detail::fixed(r.sd_um) << ")\n";
  if (r.region_px.cols() > 1) {
    o << "region mean E_px:";
    for (Index c = 0; c < r.region_px.cols(); ++c) o << " " << detail::fixed(r.region_px.col(c).mean());
    o << "\n";
  }
  return o.str();
}

// "key value..." lines; doubles are written with round-trip precision.
inline std::string structured_report(const ErrorReport& r) {
  using detail::format_double;
  std::ostringstream o;
  o << "scans " << r.scans << "\n";
  o << "boundaries " << r.boundary_px.size() << "\n";
  o << "regions " << r.region_px.cols() << "\n";
  o << "mean_px " << format_double(r.mean_px) << "\n";
  o << "sd_px " << format_double(r.sd_px) << "\n";
  o << "mean_um " << format_double(r.mean_um) << "\n";
  o << "sd_um " << format_double(r.sd_um) << "\n";
  for (Index k = 0; k < r.boundary_px.size(); ++k) {
    o << "boundary " << k << " " << format_double(r.boundary_px[k]) << " " << format_double(r.boundary_um[k]) << "\n";
  }
  for (Index c = 0; c < r.region_px.cols(); ++c) {
    for (Index k = 0; k < r.region_px.rows(); ++k) {
      o << "region " << c << " " << k << " " << format_double(r.region_px(k, c)) << " "
        << format_double(r.region_um(k, c)) << "\n";
    }
  }
  return o.str();
}

// Fold of each scan: a seeded shuffle dealt round-robin, so fold sizes
// differ by at most one.
inline std::vector<Index> fold_assignment(Index n, Index folds, std::uint64_t seed) {
  if (folds < 2 || folds > n) throw InvalidArgument("cross-validation needs 2 <= folds <= number of scans");
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::mt19937_64 rng(seed);
  // Fisher-Yates with an explicit draw so the permutation does not depend on
  // the standard library's shuffle.
  for (Index i = n - 1; i > 0; --i) {
    const Index j = static_cast<Index>(rng() % static_cast<std::uint64_t>(i + 1));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }
  std::vector<Index> fold(static_cast<std::size_t>(n));
  for (Index p = 0; p < n; ++p) fold[static_cast<std::size_t>(order[static_cast<std::size_t>(p)])] = p % folds;
  return fold;
}

struct TrainedModels {
  ShapePrior shape;
  AppearanceBank appearance;
};

inline TrainedModels train_models(std::span<const Scan> scans, const RunConfig& cfg) {
  std::vector<BoundaryField> fields;
  fields.reserve(scans.size());
  for (const auto& s : scans) {
    if (!s.truth) throw InvalidArgument("training scan without ground truth");
    fields.push_back(*s.truth);
  }
  TrainedModels m;
  m.shape = fit_ppca(fields, cfg.q_ppca, cfg.variance_inflation);
  m.appearance = fit_appearance(scans, appearance_options(cfg));
  return m;
}

struct CrossValidationResult {
  std::vector<Index> fold;             // per scan
  std::vector<ScanError> scan_errors;  // per scan
  std::vector<ErrorReport> fold_reports;
  ErrorReport report;
};

inline CrossValidationResult cross_validate(const std::vector<Scan>& scans, const RunConfig& cfg) {
  const Index n = static_cast<Index>(scans.size());
  CrossValidationResult out;
  out.fold = fold_assignment(n, cfg.folds, cfg.seed);
  out.scan_errors.resize(scans.size());
  out.fold_reports.resize(static_cast<std::size_t>(cfg.folds));
  for (const auto& s : scans) {
    if (!s.truth) throw InvalidArgument("cross_validate: every scan needs ground truth");
  }
  // Folds run concurrently; inference inside each fold is single-threaded.
  RunConfig inner = cfg;
  inner.threads = 1;
  parallel_for(cfg.folds, cfg.threads, [&](std::ptrdiff_t f) {
    std::vector<Scan> train;
    std::vector<Index> test;
    for (Index i = 0; i < n; ++i) {
      if (out.fold[static_cast<std::size_t>(i)] == f) {
        test.push_back(i);
      } else {
        train.push_back(scans[static_cast<std::size_t>(i)]);
      }
    }
    const TrainedModels models = train_models(train, inner);
    std::vector<ScanError> errs;
    for (Index i : test) {
      const Scan& s = scans[static_cast<std::size_t>(i)];
      const SegmentResult r = segment(models.shape, models.appearance, s, segment_options(inner));
      out.scan_errors[static_cast<std::size_t>(i)] = unsigned_error(r.expected, *s.truth, s.pixel_pitch_um, cfg.regions);
      errs.push_back(out.scan_errors[static_cast<std::size_t>(i)]);
    }
    out.fold_reports[static_cast<std::size_t>(f)] = aggregate(errs);
  });
  out.report = aggregate(out.scan_errors);
  return out;
}

}  // namespace layerseg
