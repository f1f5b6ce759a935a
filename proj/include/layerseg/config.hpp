#pragma once

// Run configuration: a flat "key = value" file. The defaults are the
// contents of config/default.conf, compiled in at build time.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "layerseg/appearance.hpp"
#include "layerseg/error.hpp"
#include "layerseg/inference.hpp"

namespace layerseg {

inline std::string_view default_config_text() {
  static const std::string text =
#include "layerseg/default_config.inc"
      ;
  return text;
}

struct RunConfig {
  // appearance
  double alpha_glasso = 0.0;
  Index q_pca = 0;
  Index patch_rows = 0;
  Index patch_cols = 0;
  int beta_layer = 0;
  int beta_transition = 0;
  AppearanceMode mode = AppearanceMode::generative;
  Index patches_per_class = 0;
  Index projector_samples = 0;
  double glasso_tol = 0.0;
  long glasso_max_iterations = 0;
  bool shared_appearance = false;
  // shape
  Index q_ppca = 0;
  double variance_inflation = 0.0;
  bool inflate_prior_term = false;
  // inference
  double rel_tol = 0.0;
  int max_iterations = 0;
  double cg_tol = 0.0;
  double sparsity_threshold = 0.0;
  CovarianceMode covariance_mode = CovarianceMode::dense;
  // evaluation
  Index regions = 0;
  Index folds = 0;
  // run
  std::uint64_t seed = 0;
  int threads = 0;

  bool operator==(const RunConfig&) const = default;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* end = value.data() + value.size();
  const auto res = std::from_chars(value.data(), end, out);
  if (res.ec != std::errc() || res.ptr != end) {
    throw InvalidArgument("config: invalid value '" + value + "' for key '" + key + "'");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true") return true;
  if (value == "false") return false;
  throw InvalidArgument("config: key '" + key + "' expects true or false, got '" + value + "'");
}

struct ConfigKey {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class T>
ConfigKey number_key(std::string name, T RunConfig::*field) {
  return {name,
          [name, field](RunConfig& c, const std::string& v) { c.*field = parse_number<T>(name, v); },
          [field](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) {
              return format_double(c.*field);
            } else {
              return std::to_string(c.*field);
            }
          }};
}

inline ConfigKey bool_key(std::string name, bool RunConfig::*field) {
  return {name, [name, field](RunConfig& c, const std::string& v) { c.*field = parse_bool(name, v); },
          [field](const RunConfig& c) { return std::string(c.*field ? "true" : "false"); }};
}

// Keys in dump order.
inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    k.push_back(number_key("alpha_glasso", &RunConfig::alpha_glasso));
    k.push_back(number_key("q_pca", &RunConfig::q_pca));
    k.push_back({"patch_size",
                 [](RunConfig& c, const std::string& v) {
                   const auto x = v.find('x');
                   if (x == std::string::npos) {
                     throw InvalidArgument("config: patch_size expects ROWSxCOLS, got '" + v + "'");
                   }
                   c.patch_rows = parse_number<Index>("patch_size", v.substr(0, x));
                   c.patch_cols = parse_number<Index>("patch_size", v.substr(x + 1));
                 },
                 [](const RunConfig& c) { return std::to_string(c.patch_rows) + "x" + std::to_string(c.patch_cols); }});
    k.push_back(number_key("beta_layer", &RunConfig::beta_layer));
    k.push_back(number_key("beta_transition", &RunConfig::beta_transition));
    k.push_back({"mode",
                 [](RunConfig& c, const std::string& v) {
                   if (v == "generative") {
                     c.mode = AppearanceMode::generative;
                   } else if (v == "discriminative") {
                     c.mode = AppearanceMode::discriminative;
                   } else {
                     throw InvalidArgument("config: mode expects generative or discriminative, got '" + v + "'");
                   }
                 },
                 [](const RunConfig& c) {
                   return std::string(c.mode == AppearanceMode::generative ? "generative" : "discriminative");
                 }});
    k.push_back(number_key("patches_per_class", &RunConfig::patches_per_class));
    k.push_back(number_key("projector_samples", &RunConfig::projector_samples));
    k.push_back(number_key("glasso_tol", &RunConfig::glasso_tol));
    k.push_back(number_key("glasso_max_iterations", &RunConfig::glasso_max_iterations));
    k.push_back(bool_key("shared_appearance", &RunConfig::shared_appearance));
    k.push_back(number_key("q_ppca", &RunConfig::q_ppca));
    k.push_back(number_key("variance_inflation", &RunConfig::variance_inflation));
    k.push_back(bool_key("inflate_prior_term", &RunConfig::inflate_prior_term));
    k.push_back(number_key("rel_tol", &RunConfig::rel_tol));
    k.push_back(number_key("max_iterations", &RunConfig::max_iterations));
    k.push_back(number_key("cg_tol", &RunConfig::cg_tol));
    k.push_back(number_key("sparsity_threshold", &RunConfig::sparsity_threshold));
    k.push_back({"covariance_mode",
                 [](RunConfig& c, const std::string& v) {
                   if (v == "dense") {
                     c.covariance_mode = CovarianceMode::dense;
                   } else if (v == "matrix_free") {
                     c.covariance_mode = CovarianceMode::matrix_free;
                   } else {
                     throw InvalidArgument("config: covariance_mode expects dense or matrix_free, got '" + v + "'");
                   }
                 },
                 [](const RunConfig& c) {
                   return std::string(c.covariance_mode == CovarianceMode::dense ? "dense" : "matrix_free");
                 }});
    k.push_back(number_key("regions", &RunConfig::regions));
    k.push_back(number_key("folds", &RunConfig::folds));
    k.push_back(number_key("seed", &RunConfig::seed));
    k.push_back(number_key("threads", &RunConfig::threads));
    return k;
  }();
  return keys;
}

inline const ConfigKey& find_key(const std::string& name) {
  for (const auto& k : config_keys()) {
    if (k.name == name) return k;
  }
  throw InvalidArgument("config: unknown key '" + name + "'");
}

// Applies every assignment in `text` to `cfg`; returns the keys it set.
inline std::set<std::string> apply_config_text(RunConfig& cfg, std::string_view text, const std::string& origin) {
  std::set<std::string> seen;
  std::istringstream in{std::string(text)};
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const std::string where = origin + ":" + std::to_string(number);
    if (eq == std::string::npos) throw InvalidArgument("config: expected key = value at " + where);
    const std::string key = trim(std::string_view(body).substr(0, eq));
    const std::string value = trim(std::string_view(body).substr(eq + 1));
    if (!seen.insert(key).second) throw InvalidArgument("config: duplicate key '" + key + "' at " + where);
    try {
      find_key(key).set(cfg, value);
    } catch (const InvalidArgument& e) {
      throw InvalidArgument(std::string(e.what()) + " (" + where + ")");
    }
  }
  return seen;
}

}  // namespace detail

inline RunConfig default_config() {
  RunConfig cfg;
  const auto seen = detail::apply_config_text(cfg, default_config_text(), "default.conf");
  for (const auto& k : detail::config_keys()) {
    if (!seen.count(k.name)) throw Error("built-in default configuration lacks key '" + k.name + "'");
  }
  return cfg;
}

// Parses `text` on top of the defaults.
inline RunConfig parse_config(std::string_view text, const std::string& origin = "<string>") {
  RunConfig cfg = default_config();
  detail::apply_config_text(cfg, text, origin);
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path);
}

// "key=value"
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw InvalidArgument("override '" + assignment + "' is not key=value");
  detail::find_key(detail::trim(std::string_view(assignment).substr(0, eq)))
      .set(cfg, detail::trim(std::string_view(assignment).substr(eq + 1)));
}

// Every key, one per line; parse_config(dump_config(c)) == c.
inline std::string dump_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& k : detail::config_keys()) out += k.name + " = " + k.get(cfg) + "\n";
  return out;
}

inline std::string config_value(const RunConfig& cfg, const std::string& key) {
  return detail::find_key(key).get(cfg);
}

inline AppearanceOptions appearance_options(const RunConfig& cfg) {
  AppearanceOptions o;
  o.alpha_glasso = cfg.alpha_glasso;
  o.q_pca = cfg.q_pca;
  o.patch_rows = cfg.patch_rows;
  o.patch_cols = cfg.patch_cols;
  o.patches_per_class = cfg.patches_per_class;
  o.projector_samples = cfg.projector_samples;
  o.beta_layer = cfg.beta_layer;
  o.beta_transition = cfg.beta_transition;
  o.mode = cfg.mode;
  o.glasso_tol = cfg.glasso_tol;
  o.glasso_max_iterations = cfg.glasso_max_iterations;
  o.shared = cfg.shared_appearance;
  o.seed = cfg.seed;
  return o;
}

inline SegmentOptions segment_options(const RunConfig& cfg) {
  SegmentOptions o;
  o.rel_tol = cfg.rel_tol;
  o.max_iterations = cfg.max_iterations;
  o.cg_tol = cfg.cg_tol;
  o.sparsity_threshold = cfg.sparsity_threshold;
  o.mode = cfg.covariance_mode;
  o.threads = cfg.threads;
  o.inflate_prior_term = cfg.inflate_prior_term;
  return o;
}

}  // namespace layerseg
