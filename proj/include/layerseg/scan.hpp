#pragma once

// Pixel grids, boundary fields and their geometry.
//
// Rows are 0-based pixel rows; a boundary height b is measured in the same
// row units. A stack of B-scans is flattened B-scan-major into one wide grid,
// so column j belongs to B-scan j / columns_per_bscan().

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "layerseg/binary_io.hpp"
#include "layerseg/error.hpp"
#include "layerseg/lowrank_gaussian.hpp"

namespace layerseg {

struct Geometry {
  Index boundaries = 0;
  Index columns = 0;
  Index bscans = 1;

  Index dimension() const { return boundaries * columns; }
  Index columns_per_bscan() const { return columns / bscans; }
  Index bscan_of(Index column) const { return column / columns_per_bscan(); }
  // Position of b_{k,j} in the flattened vector (column blocks are contiguous).
  Index flat_index(Index k, Index j) const { return j * boundaries + k; }

  void validate() const {
    if (boundaries < 1 || columns < 1 || bscans < 1) {
      throw InvalidArgument("geometry: boundaries, columns and bscans must be positive");
    }
    if (columns % bscans != 0) {
      throw InvalidArgument("geometry: columns must be divisible by the number of B-scans");
    }
  }

  friend bool operator==(const Geometry&, const Geometry&) = default;
};

// Boundary heights b_{k,j}, stored boundaries x columns.
struct BoundaryField {
  Geometry geometry;
  Matrix values;

  BoundaryField() = default;
  BoundaryField(Geometry g, Matrix v) : geometry(g), values(std::move(v)) {
    if (values.rows() != geometry.boundaries || values.cols() != geometry.columns) {
      throw InvalidArgument("boundary field shape does not match its geometry");
    }
  }

  // Column-major storage of a boundaries x columns matrix is exactly the
  // flat ordering of Geometry::flat_index.
  Vector flatten() const { return Eigen::Map<const Vector>(values.data(), values.size()); }

  static BoundaryField from_flat(const Geometry& g, const Vector& flat) {
    if (flat.size() != g.dimension()) throw InvalidArgument("flat boundary vector has wrong size");
    return BoundaryField(g, Eigen::Map<const Matrix>(flat.data(), g.boundaries, g.columns));
  }

  bool is_strictly_ordered() const {
    if (!values.allFinite()) return false;
    for (Index j = 0; j < values.cols(); ++j) {
      for (Index k = 1; k < values.rows(); ++k) {
        if (!(values(k, j) > values(k - 1, j))) return false;
      }
    }
    return true;
  }
};

struct Scan {
  Index rows = 0;
  Geometry geometry;
  double pixel_pitch_um = 1.0;
  std::vector<float> pixels;  // row-major, rows x geometry.columns
  std::optional<BoundaryField> truth;

  Index columns() const { return geometry.columns; }

  float at(Index i, Index j) const {
    return pixels[static_cast<std::size_t>(i * geometry.columns + j)];
  }
  float& at(Index i, Index j) { return pixels[static_cast<std::size_t>(i * geometry.columns + j)]; }

  void validate() const {
    geometry.validate();
    if (rows < 1) throw InvalidArgument("scan: rows must be positive");
    if (pixels.size() != static_cast<std::size_t>(rows * geometry.columns)) {
      throw InvalidArgument("scan: pixel buffer has wrong size");
    }
    if (truth && !(truth->geometry == geometry)) {
      throw InvalidArgument("scan: ground truth geometry differs from scan geometry");
    }
  }
};

// Scan file, little-endian:
//   0  char[8] "LSEGSCAN"
//   8  u32     version (1)
//  12  u32     rows N
//  16  u32     columns M
//  20  u32     boundaries N_b
//  24  u32     bscans
//  28  f64     pixel pitch in micrometers per row
//  36  u32     has_truth (0 or 1)
//  40  f32     pixels[N*M], row-major
//      f64     truth[N_b*M], row-major boundaries x columns (only if has_truth)
inline constexpr std::string_view kScanMagic = "LSEGSCAN";
inline constexpr std::uint32_t kScanVersion = 1;

inline std::vector<char> encode_scan(const Scan& scan) {
  scan.validate();
  io::Writer w;
  w.bytes(kScanMagic);
  w.u32(kScanVersion);
  w.u32(static_cast<std::uint32_t>(scan.rows));
  w.u32(static_cast<std::uint32_t>(scan.geometry.columns));
  w.u32(static_cast<std::uint32_t>(scan.geometry.boundaries));
  w.u32(static_cast<std::uint32_t>(scan.geometry.bscans));
  w.f64(scan.pixel_pitch_um);
  w.u32(scan.truth ? 1u : 0u);
  for (const float p : scan.pixels) w.f32(p);
  if (scan.truth) {
    for (Index k = 0; k < scan.geometry.boundaries; ++k) {
      for (Index j = 0; j < scan.geometry.columns; ++j) w.f64(scan.truth->values(k, j));
    }
  }
  return w.buffer();
}

inline void save_scan(const Scan& scan, const std::string& path) {
  io::write_file(path, encode_scan(scan));
}

inline Scan decode_scan(io::Reader& r) {
  if (r.bytes(kScanMagic.size()) != kScanMagic) {
    throw FormatError("'" + r.origin() + "' is not a scan file (bad magic)");
  }
  const std::uint32_t version = r.u32();
  if (version != kScanVersion) {
    throw FormatError("scan file version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kScanVersion) + ")");
  }
  Scan scan;
  scan.rows = r.u32();
  scan.geometry.columns = r.u32();
  scan.geometry.boundaries = r.u32();
  scan.geometry.bscans = r.u32();
  scan.pixel_pitch_um = r.f64();
  const std::uint32_t has_truth = r.u32();
  if (has_truth > 1) throw FormatError("scan file: bad has_truth flag");
  scan.geometry.validate();
  scan.pixels.resize(static_cast<std::size_t>(scan.rows * scan.geometry.columns));
  for (auto& p : scan.pixels) p = r.f32();
  if (has_truth) {
    Matrix values(scan.geometry.boundaries, scan.geometry.columns);
    for (Index k = 0; k < values.rows(); ++k) {
      for (Index j = 0; j < values.cols(); ++j) values(k, j) = r.f64();
    }
    scan.truth = BoundaryField(scan.geometry, std::move(values));
  }
  if (!r.at_end()) throw FormatError("scan file '" + r.origin() + "' has trailing bytes");
  return scan;
}

inline Scan load_scan(const std::string& path) {
  auto reader = io::Reader::from_file(path);
  return decode_scan(reader);
}

}  // namespace layerseg
