#pragma once

// Synthetic scans with exact ground truth.
//
// Boundary fields come either from a parametric prior (sinusoidal mean curves
// plus three global modes: common shift, tilt and layer spacing, and iid
// local jitter) or from a fitted ShapePrior. Pixels get a label from the
// rounded boundaries and an intensity from that label's class.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "layerseg/appearance.hpp"
#include "layerseg/config.hpp"
#include "layerseg/error.hpp"
#include "layerseg/parallel.hpp"
#include "layerseg/scan.hpp"
#include "layerseg/shape_prior.hpp"

namespace layerseg {

struct SynthConfig {
  Index rows = 0;
  Index columns = 0;  // total over all B-scans
  Index boundaries = 0;
  Index bscans = 1;
  double pixel_pitch_um = 1.0;

  // mean of boundary k at column x of a B-scan:
  //   offsets[k] + amplitudes[k] * sin(2 pi frequency x / columns_per_bscan + phases[k]) + bscan_shift * bscan
  std::vector<double> offsets;
  std::vector<double> amplitudes;
  std::vector<double> phases;
  double frequency = 1.0;
  double bscan_shift = 0.0;
  double shift_sd = 0.0;
  double tilt_sd = 0.0;
  double spacing_sd = 0.0;
  double local_sd = 0.0;

  // class intensities: layers 0..N_b, transitions 0..N_b-1
  std::vector<double> layer_intensity;
  std::vector<double> transition_intensity;
  double class_sd = 0.0;
  double noise_sd = 0.0;

  double margin = 1.0;   // boundaries stay in [margin, rows - 1 - margin]
  double min_gap = 1.0;  // minimum distance between neighbouring boundaries
  long max_attempts = 1000;
  std::uint64_t seed = 0;

  // When set, boundary fields are drawn from this prior instead.
  std::optional<ShapePrior> prior;

  Geometry geometry() const { return {boundaries, columns, bscans}; }
  void validate() const;
};

namespace detail {

inline std::vector<double> parse_list(const std::string& key, const std::string& value) {
  std::vector<double> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<double>(key, trim(item)));
  return out;
}

inline std::string format_list(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ", ";
    out += format_double(v[i]);
  }
  return out;
}

// SplitMix64 finalizer; derives independent per-scan seeds.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

inline void SynthConfig::validate() const {
  geometry().validate();
  const auto nb = static_cast<std::size_t>(boundaries);
  if (rows < 2) throw InvalidArgument("synth: rows must be at least 2");
  if (!prior) {
    if (offsets.size() != nb || amplitudes.size() != nb || phases.size() != nb) {
      throw InvalidArgument("synth: offsets, amplitudes and phases need one entry per boundary");
    }
  } else if (!(prior->geometry == geometry())) {
    throw InvalidArgument("synth: shape prior geometry does not match the configured geometry");
  }
  if (layer_intensity.size() != nb + 1) throw InvalidArgument("synth: layer_intensity needs boundaries + 1 entries");
  if (transition_intensity.size() != nb) throw InvalidArgument("synth: transition_intensity needs one entry per boundary");
  if (class_sd < 0.0 || noise_sd < 0.0 || shift_sd < 0.0 || tilt_sd < 0.0 || spacing_sd < 0.0 || local_sd < 0.0) {
    throw InvalidArgument("synth: standard deviations must be non-negative");
  }
  if (min_gap < 1.0) throw InvalidArgument("synth: min_gap must be at least 1 so rounded boundaries stay ordered");
  if (max_attempts < 1) throw InvalidArgument("synth: max_attempts must be positive");
  if (!(pixel_pitch_um > 0.0)) throw InvalidArgument("synth: pixel pitch must be positive");
}

inline SynthConfig parse_synth_config(std::string_view text, const std::string& origin = "<string>") {
  SynthConfig c;
  std::map<std::string, std::string> kv;
  std::istringstream in{std::string(text)};
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string body = detail::trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw InvalidArgument("synth config: expected key = value at " + origin + ":" + std::to_string(number));
    }
    kv[detail::trim(std::string_view(body).substr(0, eq))] = detail::trim(std::string_view(body).substr(eq + 1));
  }
  const auto take = [&](const std::string& key) -> std::optional<std::string> {
    auto it = kv.find(key);
    if (it == kv.end()) return std::nullopt;
    std::string v = it->second;
    kv.erase(it);
    return v;
  };
  const auto num = [&](const std::string& key, auto& field) {
    if (auto v = take(key)) field = detail::parse_number<std::decay_t<decltype(field)>>(key, *v);
  };
  const auto list = [&](const std::string& key, std::vector<double>& field) {
    if (auto v = take(key)) field = detail::parse_list(key, *v);
  };
  num("rows", c.rows);
  num("columns", c.columns);
  num("boundaries", c.boundaries);
  num("bscans", c.bscans);
  num("pixel_pitch_um", c.pixel_pitch_um);
  list("offsets", c.offsets);
  list("amplitudes", c.amplitudes);
  list("phases", c.phases);
  num("frequency", c.frequency);
  num("bscan_shift", c.bscan_shift);
  num("shift_sd", c.shift_sd);
  num("tilt_sd", c.tilt_sd);
  num("spacing_sd", c.spacing_sd);
  num("local_sd", c.local_sd);
  list("layer_intensity", c.layer_intensity);
  list("transition_intensity", c.transition_intensity);
  num("class_sd", c.class_sd);
  num("noise_sd", c.noise_sd);
  num("margin", c.margin);
  num("min_gap", c.min_gap);
  num("max_attempts", c.max_attempts);
  num("seed", c.seed);
  if (!kv.empty()) throw InvalidArgument("synth config: unknown key '" + kv.begin()->first + "' in " + origin);
  return c;
}

inline SynthConfig load_synth_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open synth config '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_synth_config(ss.str(), path);
}

inline std::string dump_synth_config(const SynthConfig& c) {
  using detail::format_double;
  using detail::format_list;
  std::ostringstream o;
  o << "rows = " << c.rows << "\n"
    << "columns = " << c.columns << "\n"
    << "boundaries = " << c.boundaries << "\n"
    << "bscans = " << c.bscans << "\n"
    << "pixel_pitch_um = " << format_double(c.pixel_pitch_um) << "\n"
    << "offsets = " << format_list(c.offsets) << "\n"
    << "amplitudes = " << format_list(c.amplitudes) << "\n"
    << "phases = " << format_list(c.phases) << "\n"
    << "frequency = " << format_double(c.frequency) << "\n"
    << "bscan_shift = " << format_double(c.bscan_shift) << "\n"
    << "shift_sd = " << format_double(c.shift_sd) << "\n"
    << "tilt_sd = " << format_double(c.tilt_sd) << "\n"
    << "spacing_sd = " << format_double(c.spacing_sd) << "\n"
    << "local_sd = " << format_double(c.local_sd) << "\n"
    << "layer_intensity = " << format_list(c.layer_intensity) << "\n"
    << "transition_intensity = " << format_list(c.transition_intensity) << "\n"
    << "class_sd = " << format_double(c.class_sd) << "\n"
    << "noise_sd = " << format_double(c.noise_sd) << "\n"
    << "margin = " << format_double(c.margin) << "\n"
    << "min_gap = " << format_double(c.min_gap) << "\n"
    << "max_attempts = " << c.max_attempts << "\n"
    << "seed = " << c.seed << "\n";
  return o.str();
}

// Identifies the configuration in manifests; a fitted prior contributes its
// serialized bytes.
inline std::uint64_t synth_config_hash(const SynthConfig& c) {
  std::string text = dump_synth_config(c);
  if (c.prior) {
    const auto bytes = encode_shape_prior(*c.prior);
    text.append(bytes.begin(), bytes.end());
  }
  return detail::fnv1a(text);
}

// Mean boundary curves of the parametric prior, boundaries x columns.
inline Matrix synth_mean_field(const SynthConfig& c) {
  const Geometry g = c.geometry();
  const Index per = g.columns_per_bscan();
  Matrix m(g.boundaries, g.columns);
  for (Index j = 0; j < g.columns; ++j) {
    const double x = static_cast<double>(j % per);
    const double bscan = static_cast<double>(g.bscan_of(j));
    for (Index k = 0; k < g.boundaries; ++k) {
      const auto kk = static_cast<std::size_t>(k);
      m(k, j) = c.offsets[kk] +
                c.amplitudes[kk] * std::sin(2.0 * M_PI * c.frequency * x / static_cast<double>(per) + c.phases[kk]) +
                c.bscan_shift * bscan;
    }
  }
  return m;
}

inline bool synth_field_admissible(const SynthConfig& c, const Matrix& b) {
  const double lo = c.margin;
  const double hi = static_cast<double>(c.rows - 1) - c.margin;
  for (Index j = 0; j < b.cols(); ++j) {
    for (Index k = 0; k < b.rows(); ++k) {
      if (!(b(k, j) >= lo && b(k, j) <= hi)) return false;
      if (k > 0) {
        if (!(b(k, j) - b(k - 1, j) >= c.min_gap)) return false;
        if (!(std::lround(b(k, j)) > std::lround(b(k - 1, j)))) return false;
      }
    }
  }
  return true;
}

// One admissible boundary field drawn by rejection; `seed` fixes the draw.
inline BoundaryField sample_boundaries(const SynthConfig& c, std::uint64_t seed) {
  c.validate();
  const Geometry g = c.geometry();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const Matrix mean = c.prior ? Matrix() : synth_mean_field(c);
  const Index per = g.columns_per_bscan();
  for (long attempt = 0; attempt < c.max_attempts; ++attempt) {
    Matrix b(g.boundaries, g.columns);
    if (c.prior) {
      const Vector draw = sample(c.prior->gaussian, 1, rng()).row(0).transpose();
      b = Eigen::Map<const Matrix>(draw.data(), g.boundaries, g.columns);
    } else {
      const double shift = c.shift_sd * normal(rng);
      const double tilt = c.tilt_sd * normal(rng);
      const double spacing = c.spacing_sd * normal(rng);
      const double centre = 0.5 * static_cast<double>(g.boundaries - 1);
      for (Index j = 0; j < g.columns; ++j) {
        const double x = per > 1 ? static_cast<double>(j % per) / static_cast<double>(per - 1) - 0.5 : 0.0;
        for (Index k = 0; k < g.boundaries; ++k) {
          b(k, j) = mean(k, j) + shift + tilt * x + spacing * (static_cast<double>(k) - centre) +
                    c.local_sd * normal(rng);
        }
      }
    }
    if (synth_field_admissible(c, b)) return BoundaryField(g, b);
  }
  throw Error("synth: no admissible boundary field after " + std::to_string(c.max_attempts) +
              " attempts; the prior is too wide for the image geometry");
}

inline Index rounded_boundary_row(double b, Index rows) {
  return std::clamp<Index>(static_cast<Index>(std::lround(b)), 0, rows - 1);
}

// Labels as ClassLabel::column indices, rows x columns.
inline Eigen::MatrixXi rasterize_labels(const BoundaryField& truth, Index rows) {
  const Index nb = truth.geometry.boundaries;
  Eigen::MatrixXi labels(rows, truth.geometry.columns);
  for (Index j = 0; j < truth.geometry.columns; ++j) {
    Index k = 0;
    for (Index i = 0; i < rows; ++i) {
      while (k < nb && rounded_boundary_row(truth.values(k, j), rows) < i) ++k;
      if (k < nb && rounded_boundary_row(truth.values(k, j), rows) == i) {
        labels(i, j) = static_cast<int>(ClassLabel::transition(k).column(nb));
      } else {
        labels(i, j) = static_cast<int>(ClassLabel::layer(k).column(nb));
      }
    }
  }
  return labels;
}

// Scan number `index` of the configured stream, with its ground truth.
inline Scan generate(const SynthConfig& c, std::uint64_t index = 0) {
  c.validate();
  const std::uint64_t seed = detail::mix_seed(c.seed, index);
  Scan scan;
  scan.rows = c.rows;
  scan.geometry = c.geometry();
  scan.pixel_pitch_um = c.pixel_pitch_um;
  scan.truth = sample_boundaries(c, seed);
  const Index nb = c.boundaries;
  std::vector<double> class_mean(static_cast<std::size_t>(class_count(nb)));
  for (Index k = 0; k <= nb; ++k) {
    class_mean[static_cast<std::size_t>(ClassLabel::layer(k).column(nb))] = c.layer_intensity[static_cast<std::size_t>(k)];
  }
  for (Index k = 0; k < nb; ++k) {
    class_mean[static_cast<std::size_t>(ClassLabel::transition(k).column(nb))] =
        c.transition_intensity[static_cast<std::size_t>(k)];
  }
  const Eigen::MatrixXi labels = rasterize_labels(*scan.truth, c.rows);
  std::mt19937_64 rng(detail::mix_seed(seed, 0x5eed));
  std::normal_distribution<double> normal(0.0, 1.0);
  scan.pixels.resize(static_cast<std::size_t>(c.rows * c.columns));
  for (Index i = 0; i < c.rows; ++i) {
    for (Index j = 0; j < c.columns; ++j) {
      double v = class_mean[static_cast<std::size_t>(labels(i, j))];
      if (c.class_sd > 0.0) v += c.class_sd * normal(rng);
      if (c.noise_sd > 0.0) v += c.noise_sd * normal(rng);
      scan.pixels[static_cast<std::size_t>(i * c.columns + j)] = static_cast<float>(v);
    }
  }
  return scan;
}

struct DatasetManifest {
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
  std::vector<std::string> files;

  std::string text() const {
    std::ostringstream o;
    char hash[17];
    std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(config_hash));
    o << "seed = " << seed << "\n"
      << "config_hash = " << hash << "\n"
      << "scans = " << files.size() << "\n";
    for (const auto& f : files) o << "file = " << f << "\n";
    return o.str();
  }
};

// Scans 0..n-1 of the stream. If `directory` is non-empty they are written
// there as scan_NNNN.lseg together with manifest.txt.
inline std::vector<Scan> generate_dataset(const SynthConfig& c, Index n_scans, const std::string& directory = {},
                                          DatasetManifest* manifest = nullptr, int threads = 1) {
  if (n_scans < 1) throw InvalidArgument("generate_dataset: need at least one scan");
  c.validate();
  std::vector<Scan> scans(static_cast<std::size_t>(n_scans));
  parallel_for(n_scans, threads, [&](std::ptrdiff_t i) {
    scans[static_cast<std::size_t>(i)] = generate(c, static_cast<std::uint64_t>(i));
  });
  DatasetManifest m;
  m.seed = c.seed;
  m.config_hash = synth_config_hash(c);
  for (Index i = 0; i < n_scans; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "scan_%04lld.lseg", static_cast<long long>(i));
    m.files.emplace_back(name);
  }
  if (!directory.empty()) {
    std::filesystem::create_directories(directory);
    for (Index i = 0; i < n_scans; ++i) {
      save_scan(scans[static_cast<std::size_t>(i)],
                (std::filesystem::path(directory) / m.files[static_cast<std::size_t>(i)]).string());
    }
    std::ofstream out(std::filesystem::path(directory) / "manifest.txt", std::ios::binary);
    if (!out) throw Error("cannot write manifest in '" + directory + "'");
    out << m.text();
  }
  if (manifest) *manifest = std::move(m);
  return scans;
}

}  // namespace layerseg
