#pragma once

// Text file holding one segmentation: expected boundary rows E_qc[c] and
// their posterior standard deviations, boundaries x columns.
//
//   layerseg-segmentation 1
//   rows 120
//   boundaries 3
//   columns 60
//   bscans 1
//   converged 1
//   iterations 11
//   objective 312.67...
//   expected
//   <one line per boundary, columns values>
//   stddev
//   <one line per boundary>

#include <fstream>
#include <sstream>
#include <string>

#include "layerseg/config.hpp"
#include "layerseg/error.hpp"
#include "layerseg/inference.hpp"
#include "layerseg/scan.hpp"

namespace layerseg {

struct SegmentationRecord {
  Index rows = 0;
  Geometry geometry;
  bool converged = false;
  int iterations = 0;
  double objective = 0.0;
  Matrix expected;
  Matrix stddev;
};

inline SegmentationRecord make_record(const SegmentResult& r) {
  SegmentationRecord s;
  s.rows = r.qc.rows;
  s.geometry = r.qc.geometry;
  s.converged = r.converged;
  s.iterations = r.iterations;
  s.objective = r.trace.empty() ? 0.0 : r.trace.back().objective;
  s.expected = r.expected;
  s.stddev = r.stddev;
  return s;
}

inline std::string format_segmentation(const SegmentationRecord& s) {
  std::ostringstream o;
  o << "layerseg-segmentation 1\n"
    << "rows " << s.rows << "\n"
    << "boundaries " << s.geometry.boundaries << "\n"
    << "columns " << s.geometry.columns << "\n"
    << "bscans " << s.geometry.bscans << "\n"
    << "converged " << (s.converged ? 1 : 0) << "\n"
    << "iterations " << s.iterations << "\n"
    << "objective " << detail::format_double(s.objective) << "\n";
  const auto block = [&](const char* name, const Matrix& m) {
    o << name << "\n";
    for (Index k = 0; k < m.rows(); ++k) {
      for (Index j = 0; j < m.cols(); ++j) o << (j ? " " : "") << detail::format_double(m(k, j));
      o << "\n";
    }
  };
  block("expected", s.expected);
  block("stddev", s.stddev);
  return o.str();
}

inline SegmentationRecord parse_segmentation(const std::string& text, const std::string& origin = "<string>") {
  std::istringstream in(text);
  const auto fail = [&](const std::string& what) { return FormatError(origin + ": " + what); };
  const auto expect_key = [&](const char* key) {
    std::string k;
    if (!(in >> k) || k != key) throw fail(std::string("expected '") + key + "'");
  };
  const auto read_int = [&](const char* key) {
    expect_key(key);
    long long v = 0;
    if (!(in >> v)) throw fail(std::string("bad value for '") + key + "'");
    return v;
  };
  if (read_int("layerseg-segmentation") != 1) throw fail("unsupported segmentation file version");
  SegmentationRecord s;
  s.rows = read_int("rows");
  s.geometry.boundaries = read_int("boundaries");
  s.geometry.columns = read_int("columns");
  s.geometry.bscans = read_int("bscans");
  s.geometry.validate();
  s.converged = read_int("converged") != 0;
  s.iterations = static_cast<int>(read_int("iterations"));
  expect_key("objective");
  std::string token;
  if (!(in >> token)) throw fail("missing objective");
  s.objective = detail::parse_number<double>("objective", token);
  const auto block = [&](const char* name, Matrix& m) {
    expect_key(name);
    m.resize(s.geometry.boundaries, s.geometry.columns);
    for (Index k = 0; k < m.rows(); ++k) {
      for (Index j = 0; j < m.cols(); ++j) {
        if (!(in >> token)) throw fail(std::string("truncated '") + name + "' block");
        m(k, j) = detail::parse_number<double>(name, token);
      }
    }
  };
  block("expected", s.expected);
  block("stddev", s.stddev);
  if (in >> token) throw fail("trailing content");
  return s;
}

inline void save_segmentation(const SegmentationRecord& s, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path + "'");
  out << format_segmentation(s);
  if (!out) throw Error("write failed for '" + path + "'");
}

inline SegmentationRecord load_segmentation(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_segmentation(ss.str(), path);
}

// Iteration trace, one tab-separated line per half-step.
inline std::string format_trace(const std::vector<TraceEntry>& trace) {
  std::ostringstream o;
  o << "iteration\tstep\tobjective\tdelta\tseconds\tcg_iterations\n";
  for (const auto& t : trace) {
    o << t.iteration << "\t" << t.step << "\t" << detail::format_double(t.objective) << "\t"
      << detail::format_double(t.delta) << "\t" << detail::format_double(t.seconds) << "\t" << t.cg_iterations
      << "\n";
  }
  return o.str();
}

}  // namespace layerseg
