// layerseg command-line tool.
//
// Every subcommand reads the run configuration (built-in defaults, then
// --config, then --set overrides). Failures print one line
//   error: kind=<Kind> message=<text>
// on stderr and exit with status 1.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "layerseg/layerseg.hpp"

namespace {

using namespace layerseg;

struct Globals {
  std::string config_path;
  std::vector<std::string> overrides;
  long long seed = -1;
  int threads = 0;
  std::string trace_path;
};

RunConfig effective_config(const Globals& g) {
  RunConfig cfg = g.config_path.empty() ? default_config() : load_config(g.config_path);
  for (const auto& o : g.overrides) apply_override(cfg, o);
  if (g.seed >= 0) cfg.seed = static_cast<std::uint64_t>(g.seed);
  if (g.threads > 0) cfg.threads = g.threads;
  return cfg;
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path + "'");
  out << text;
  if (!out) throw Error("write failed for '" + path + "'");
}

std::vector<Scan> load_scans(const std::vector<std::string>& paths) {
  std::vector<Scan> scans;
  scans.reserve(paths.size());
  for (const auto& p : paths) scans.push_back(load_scan(p));
  return scans;
}

const char* error_kind(const std::exception& e) {
  if (dynamic_cast<const InfeasibleError*>(&e)) return "InfeasibleError";
  if (dynamic_cast<const ConvergenceError*>(&e)) return "ConvergenceError";
  if (dynamic_cast<const NumericalError*>(&e)) return "NumericalError";
  if (dynamic_cast<const FormatError*>(&e)) return "FormatError";
  if (dynamic_cast<const InvalidArgument*>(&e)) return "InvalidArgument";
  if (dynamic_cast<const Error*>(&e)) return "Error";
  return "InternalError";
}

std::string one_line(std::string s) {
  for (char& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Probabilistic retinal layer segmentation"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "Configuration file (key = value)");
  app.add_option("--set", g.overrides, "Override one configuration key, key=value")->take_all();
  app.add_option("--seed", g.seed, "Random seed (overrides the configuration)");
  app.add_option("--threads", g.threads, "Worker threads (overrides the configuration)");
  app.add_option("--trace", g.trace_path, "Write the per-half-step objective trace here (segment)");

  // config-dump
  std::string dump_out;
  auto* dump = app.add_subcommand("config-dump", "Print the effective configuration");
  dump->add_option("--out", dump_out, "Output file (default stdout)");

  // synth
  std::string synth_config, synth_out, synth_prior;
  long long synth_count = 1;
  auto* synth = app.add_subcommand("synth", "Generate synthetic scans with ground truth");
  synth->add_option("--synth-config", synth_config, "Generator configuration")->required();
  synth->add_option("--count", synth_count, "Number of scans")->check(CLI::PositiveNumber);
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--prior", synth_prior, "Draw boundaries from this shape model instead");

  // train-shape
  std::string shape_out;
  std::vector<std::string> shape_scans;
  auto* train_shape = app.add_subcommand("train-shape", "Fit the PPCA shape prior");
  train_shape->add_option("--out", shape_out, "Shape model file")->required();
  train_shape->add_option("scans", shape_scans, "Training scans with ground truth")->required();

  // train-appearance
  std::string app_out;
  std::vector<std::string> app_scans;
  auto* train_app = app.add_subcommand("train-appearance", "Fit the patch appearance models");
  train_app->add_option("--out", app_out, "Appearance model file")->required();
  train_app->add_option("scans", app_scans, "Training scans with ground truth")->required();

  // segment
  std::string seg_shape, seg_app, seg_out, seg_scan;
  auto* seg = app.add_subcommand("segment", "Segment one scan");
  seg->add_option("--shape", seg_shape, "Shape model file")->required();
  seg->add_option("--appearance", seg_app, "Appearance model file")->required();
  seg->add_option("--out", seg_out, "Segmentation file (default stdout)");
  seg->add_option("scan", seg_scan, "Scan file")->required();

  // eval
  std::vector<std::string> eval_scans, eval_segs;
  std::string eval_out;
  auto* eval = app.add_subcommand("eval", "Unsigned boundary error of segmentations");
  eval->add_option("--truth", eval_scans, "Scans carrying ground truth")->required();
  eval->add_option("--seg", eval_segs, "Segmentation files, same order as --truth")->required();
  eval->add_option("--out", eval_out, "Structured report file");

  // xval
  std::vector<std::string> xval_scans;
  std::string xval_out;
  auto* xval = app.add_subcommand("xval", "k-fold cross-validation on scans with ground truth");
  xval->add_option("--out", xval_out, "Structured report file");
  xval->add_option("scans", xval_scans, "Scans")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    const RunConfig cfg = effective_config(g);

    if (*dump) {
      write_text(dump_out, dump_config(cfg));
    } else if (*synth) {
      SynthConfig sc = load_synth_config(synth_config);
      if (g.seed >= 0) sc.seed = static_cast<std::uint64_t>(g.seed);
      if (!synth_prior.empty()) sc.prior = load_shape_prior(synth_prior);
      DatasetManifest manifest;
      generate_dataset(sc, synth_count, synth_out, &manifest, cfg.threads);
      std::cout << manifest.text();
    } else if (*train_shape) {
      const auto scans = load_scans(shape_scans);
      std::vector<BoundaryField> fields;
      for (std::size_t i = 0; i < scans.size(); ++i) {
        if (!scans[i].truth) throw InvalidArgument("scan '" + shape_scans[i] + "' has no ground truth");
        fields.push_back(*scans[i].truth);
      }
      const ShapePrior prior = fit_ppca(fields, cfg.q_ppca, cfg.variance_inflation);
      for (const auto& w : prior.warnings) std::cerr << "warning: " << w << "\n";
      save_shape_prior(prior, shape_out);
      std::cout << "shape model: " << fields.size() << " fields, dimension " << prior.dimension() << ", rank "
                << prior.effective_rank << "/" << prior.q_ppca << "\n";
    } else if (*train_app) {
      const auto scans = load_scans(app_scans);
      const AppearanceBank bank = fit_appearance(scans, appearance_options(cfg));
      save_appearance(bank, app_out);
      std::cout << "appearance model: " << bank.models.size() << " model(s), " << class_count(bank.models.front().boundaries)
                << " classes\n";
    } else if (*seg) {
      const ShapePrior prior = load_shape_prior(seg_shape);
      const AppearanceBank bank = load_appearance(seg_app);
      const Scan scan = load_scan(seg_scan);
      const SegmentResult r = segment(prior, bank, scan, segment_options(cfg));
      for (const auto& t : r.trace) {
        std::fprintf(stderr, "iter %d %s J=%.10g dJ=%.3g t=%.3fs\n", t.iteration, t.step.c_str(), t.objective, t.delta,
                     t.seconds);
      }
      if (!r.converged) std::cerr << "warning: not converged after " << r.iterations << " iterations\n";
      write_text(seg_out, format_segmentation(make_record(r)));
      if (!g.trace_path.empty()) write_text(g.trace_path, format_trace(r.trace));
    } else if (*eval) {
      if (eval_scans.size() != eval_segs.size()) {
        throw InvalidArgument("eval: --truth and --seg need the same number of files");
      }
      std::vector<ScanError> errors;
      for (std::size_t i = 0; i < eval_scans.size(); ++i) {
        const Scan scan = load_scan(eval_scans[i]);
        if (!scan.truth) throw InvalidArgument("scan '" + eval_scans[i] + "' has no ground truth");
        const SegmentationRecord s = load_segmentation(eval_segs[i]);
        errors.push_back(unsigned_error(s.expected, *scan.truth, scan.pixel_pitch_um, cfg.regions));
      }
      const ErrorReport report = aggregate(errors);
      std::cout << format_report(report);
      if (!eval_out.empty()) write_text(eval_out, structured_report(report));
    } else if (*xval) {
      const auto scans = load_scans(xval_scans);
      const CrossValidationResult r = cross_validate(scans, cfg);
      std::cout << format_report(r.report);
      if (!xval_out.empty()) write_text(xval_out, structured_report(r.report));
    }
  } catch (const std::exception& e) {
    std::cerr << "error: kind=" << error_kind(e) << " message=" << one_line(e.what()) << "\n";
    return 1;
  }
  return 0;
}
