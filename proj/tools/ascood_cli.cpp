#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ascood/ascood.hpp"

namespace fs = std::filesystem;
using namespace ascood;

namespace {

using Scalar = float;

enum ExitCode : int { kOk = 0, kOther = 1, kConfig = 2, kData = 3, kNumeric = 4 };

fs::path output_root() {
  const char* env = std::getenv("ASCOOD_OUTPUT_ROOT");
  return env && *env ? fs::path(env) : fs::path();
}

/// Relative output paths are placed under $ASCOOD_OUTPUT_ROOT when it is set.
fs::path under_root(const fs::path& p) {
  if (p.is_absolute()) return p;
  const auto root = output_root();
  return root.empty() ? p : root / p;
}

fs::path run_dir(const RunConfig& cfg) { return under_root(fs::path(cfg.output_dir) / cfg.name); }

/// Flags shared by train and eval that rewrite parts of the config.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::optional<double> lambda;
  std::optional<std::string> method;
  std::optional<double> p_inv;
  std::optional<std::string> feature_mode;
  std::optional<std::string> name;
  std::optional<std::string> output_dir;
  std::optional<std::string> init_from;
  std::optional<std::string> benchmark;
  std::optional<std::string> test_id;
  std::optional<std::string> val_id;
  std::optional<std::string> val_ood;
  std::vector<std::string> ood;
  std::vector<std::string> postprocessors;
  bool tune_odin = false;

  void add_run_flags(CLI::App* cmd) {
    cmd->add_option("--seed", seed, "Random seed");
    cmd->add_option("--epochs", epochs, "Total training epochs");
    cmd->add_option("--lambda", lambda, "Weight of the outlier KL term");
    cmd->add_option("--method", method, "Outlier synthesis method");
    cmd->add_option("--p-inv", p_inv, "Percent of saliency entries kept as invariant");
    cmd->add_option("--feature-mode", feature_mode, "standardized, raw or l2");
    cmd->add_option("--name", name, "Run name (output subdirectory)");
    cmd->add_option("--output-dir", output_dir, "Output directory");
    cmd->add_option("--init-from", init_from, "Checkpoint whose backbone initialises the model");
  }

  void add_data_flags(CLI::App* cmd) {
    cmd->add_option("--benchmark", benchmark, "Benchmark directory; points every data reference at its splits");
    cmd->add_option("--test-id", test_id, "ID test set reference");
    cmd->add_option("--val-id", val_id, "ID validation set reference");
    cmd->add_option("--val-ood", val_ood, "OOD validation set reference (ODIN tuning)");
    cmd->add_option("--ood", ood, "OOD set as NAME=REF (repeatable, replaces the configured list)");
    cmd->add_option("--postprocessors", postprocessors, "Postprocessors to evaluate")->delimiter(',');
    cmd->add_flag("--tune-odin", tune_odin, "Grid-search ODIN settings on val_id vs val_ood");
  }

  /// Applies the flags through the config parser so errors name the field.
  RunConfig apply(const RunConfig& base) const {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    if (seed) j["seed"] = *seed;
    if (lambda) j["lambda"] = *lambda;
    if (name) j["name"] = *name;
    if (output_dir) j["output_dir"] = *output_dir;
    if (init_from) j["init_from"] = *init_from;
    if (epochs) j["optimizer"]["epochs"] = *epochs;
    if (method) j["synthesis"]["method"] = *method;
    if (p_inv) j["synthesis"]["p_inv"] = *p_inv;
    if (feature_mode) j["classifier"]["feature_mode"] = *feature_mode;
    if (benchmark) {
      const std::string b = *benchmark + "#";
      j["data"]["train"] = b + "train";
      j["data"]["val_id"] = b + "val_id";
      j["data"]["test_id"] = b + "test_id";
      j["data"]["val_ood"] = b + "val_ood";
      j["data"]["ood"] = {{"spurious", b + "spurious_ood"}, {"conventional", b + "conventional_ood"}};
    }
    if (test_id) j["data"]["test_id"] = *test_id;
    if (val_id) j["data"]["val_id"] = *val_id;
    if (val_ood) j["data"]["val_ood"] = *val_ood;
    if (!ood.empty()) {
      nlohmann::ordered_json sets = nlohmann::ordered_json::object();
      for (const auto& item : ood) {
        const auto eq = item.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigParseError("--ood: expected NAME=REF, got '" + item + "'");
        sets[item.substr(0, eq)] = item.substr(eq + 1);
      }
      j["data"]["ood"] = sets;
    }
    if (!postprocessors.empty()) j["eval"]["postprocessors"] = postprocessors;
    if (tune_odin) j["eval"]["tune_odin"] = true;
    return run_config_from_json(j, base);
  }
};

void write_eval_outputs(const EvalOutcome& out, const fs::path& dir) {
  write_report_json(out.report, dir / "report.json");
  write_report_csv(out.report, dir / "report.csv");
  write_scores(out.scores, dir / "scores.tsv");
  const std::string summary = report_summary(out.report);
  write_text_file(dir / "summary.txt", summary);
  std::cout << summary;
}

// ---- gen-benchmark ----------------------------------------------------------------

struct GenArgs {
  std::string spec_path;
  std::uint64_t seed = 0;
  std::string out;
  std::optional<double> correlation;
};

int cmd_gen(const GenArgs& a) {
  SpuriousSpec spec;
  if (!a.spec_path.empty()) {
    std::ifstream in(a.spec_path);
    if (!in) throw ConfigParseError("cannot open spec file " + a.spec_path);
    nlohmann::ordered_json j;
    try {
      in >> j;
    } catch (const nlohmann::json::parse_error& e) {
      throw InvalidSpec(std::string("malformed JSON: ") + e.what());
    }
    spec = spurious_spec_from_json(j);
  }
  if (a.correlation) {
    spec.correlation = *a.correlation;
    spec.validate();
  }
  const Benchmark bench = generate_spurious_benchmark(spec, a.seed);
  const fs::path dir = under_root(a.out);
  write_benchmark(bench, dir);
  std::cout << "wrote " << dir.string() << ":";
  for (const auto& [name, recs] : bench.manifest.splits) std::cout << ' ' << name << '=' << recs.size();
  std::cout << '\n';
  return kOk;
}

// ---- train --------------------------------------------------------------------

struct TrainArgs {
  std::string config_path;
  std::string preset_name;
  std::string resume;
  bool no_eval = false;
  Overrides over;
};

int cmd_train(const TrainArgs& a) {
  std::optional<Run<Scalar>> run;
  if (!a.resume.empty()) {
    Checkpoint c = load_checkpoint(a.resume);
    RunConfig cfg = c.config;
    if (!a.config_path.empty()) cfg = load_run_config(a.config_path, cfg);
    cfg = a.over.apply(cfg);
    if (cfg.classifier != c.config.classifier) {
      throw ConfigParseError("classifier: cannot change the architecture of a resumed run");
    }
    c.config = cfg;
    run.emplace(Run<Scalar>::resume(c));
    std::cout << "resuming '" << cfg.name << "' after epoch " << c.epoch << '\n';
  } else {
    RunConfig cfg = a.preset_name.empty() ? RunConfig{} : preset(a.preset_name);
    if (!a.config_path.empty()) cfg = load_run_config(a.config_path, cfg);
    cfg = a.over.apply(cfg);
    run.emplace(cfg);
  }
  const RunConfig& cfg = run->config();
  const fs::path dir = run_dir(cfg);
  fs::create_directories(dir);
  save_run_config(cfg, dir / "config.json");

  const RunData data = load_run_data(cfg, {true, !a.no_eval});
  std::cout << "run '" << cfg.name << "' -> " << dir.string() << " (" << data.train->size() << " training images)\n";
  run->train(*data.train, [&](const EpochStats& s) {
    std::printf("epoch %zu  ce %.4f  kl %.4f  total %.4f  acc %.2f%%  alpha %.4g  lr %.5f\n", s.epoch, s.ce, s.kl,
                s.total, s.accuracy, s.alpha, s.lr);
    std::fflush(stdout);
    write_train_log(run->history(), dir / "train_log.csv");
    save_checkpoint(run->checkpoint(), dir / "checkpoint.json");
  });
  write_train_log(run->history(), dir / "train_log.csv");
  save_checkpoint(run->checkpoint(), dir / "checkpoint.json");

  if (!a.no_eval) write_eval_outputs(evaluate_run(run->model(), cfg, data), dir);
  return kOk;
}

// ---- eval ---------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string config_path;
  std::string out;
  Overrides over;
};

int cmd_eval(const EvalArgs& a) {
  Checkpoint c = load_checkpoint(a.checkpoint);
  RunConfig cfg = c.config;
  if (!a.config_path.empty()) cfg = load_run_config(a.config_path, cfg);
  cfg = a.over.apply(cfg);
  if (cfg.classifier != c.config.classifier) throw ConfigParseError("classifier: must match the checkpoint");
  auto model = model_from_checkpoint<Scalar>(c);
  const RunData data = load_run_data(cfg, {false, true});
  const fs::path dir = a.out.empty() ? run_dir(cfg) / "eval" : under_root(a.out);
  write_eval_outputs(evaluate_run(model, cfg, data), dir);
  std::cout << "wrote " << dir.string() << '\n';
  return kOk;
}

// ---- preview-outliers ---------------------------------------------------------------

struct PreviewArgs {
  std::string checkpoint;
  std::size_t n = 8;
  std::string out = "outliers.png";
  std::string split;
  std::uint64_t seed = 0;
  std::size_t scale = 4;
};

int cmd_preview(const PreviewArgs& a) {
  const Checkpoint c = load_checkpoint(a.checkpoint);
  auto model = model_from_checkpoint<Scalar>(c);
  const RunConfig& cfg = c.config;
  std::string ref = a.split;
  if (ref.empty()) ref = cfg.data.train.empty() ? cfg.data.test_id : cfg.data.train;
  if (ref.empty()) throw ConfigParseError("--split: no image set given and the checkpoint config names none");
  const ImageSet set = load_image_source(ref, cfg.data.transform);
  const auto p = preview_outliers(model, cfg, set, a.n, a.seed);
  const RawImage grid = outlier_preview_grid(p.x, p.saliency, p.outliers, cfg.data.transform, a.scale);
  const fs::path path = under_root(a.out);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_image(path, grid);
  std::cout << "wrote " << p.x.batch() << " triplets (alpha " << p.alpha << ") to " << path.string() << '\n';
  return kOk;
}

// ---- score-hist ---------------------------------------------------------------------

struct HistArgs {
  std::vector<std::string> inputs;
  std::string out = "scores.svg";
  std::string ood_set;
  std::vector<std::string> postprocessors;
  std::size_t bins = 30;
};

int cmd_hist(const HistArgs& a) {
  std::vector<ScoreRecord> rows;
  for (const auto& in : a.inputs) {
    for (auto& r : read_scores(in)) {
      if (!a.ood_set.empty() && !r.in_distribution && r.set != a.ood_set) continue;
      if (!a.postprocessors.empty() &&
          std::find(a.postprocessors.begin(), a.postprocessors.end(), r.postprocessor) == a.postprocessors.end()) {
        continue;
      }
      rows.push_back(std::move(r));
    }
  }
  if (rows.empty()) throw EmptySet("score-hist: no score rows selected");
  HistogramOptions opt;
  opt.bins = a.bins;
  const fs::path path = under_root(a.out);
  write_text_file(path, score_histogram_svg(rows, opt));
  std::cout << "wrote " << rows.size() << " scores to " << path.string() << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Outlier-synthesis training and OOD evaluation on image classifiers"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-benchmark", "Generate the synthetic spurious-correlation benchmark");
  g->add_option("--spec", gen.spec_path, "Benchmark spec (JSON); defaults when omitted");
  g->add_option("--seed", gen.seed, "Generator seed");
  g->add_option("--correlation", gen.correlation, "Override the training class/environment correlation");
  g->add_option("--out", gen.out, "Output directory")->required();

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train a classifier and evaluate it");
  t->add_option("config", train.config_path, "Run config (JSON)");
  t->add_option("--preset", train.preset_name, "Start from a named preset");
  t->add_option("--resume", train.resume, "Continue from a checkpoint");
  t->add_flag("--no-eval", train.no_eval, "Skip evaluation after training");
  train.over.add_run_flags(t);
  train.over.add_data_flags(t);

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Score ID and OOD sets with each postprocessor");
  e->add_option("checkpoint", ev.checkpoint, "Checkpoint file")->required();
  e->add_option("--config", ev.config_path, "Partial config applied over the checkpoint's");
  e->add_option("--out", ev.out, "Output directory (default <run dir>/eval)");
  ev.over.add_data_flags(e);

  PreviewArgs pv;
  auto* p = app.add_subcommand("preview-outliers", "Render (x, |G_inv|, x') triplets as an image grid");
  p->add_option("checkpoint", pv.checkpoint, "Checkpoint file")->required();
  p->add_option("--n", pv.n, "Number of images");
  p->add_option("--out", pv.out, "Output image (.png or .ppm)");
  p->add_option("--split", pv.split, "Image set reference (default: the run's training set)");
  p->add_option("--seed", pv.seed, "Seed for stochastic methods");
  p->add_option("--scale", pv.scale, "Pixel magnification");

  HistArgs hist;
  auto* h = app.add_subcommand("score-hist", "Plot ID vs OOD score histograms per postprocessor");
  h->add_option("scores", hist.inputs, "Score files (TSV) written by train or eval")->required();
  h->add_option("--out", hist.out, "Output SVG");
  h->add_option("--ood-set", hist.ood_set, "Keep only this OOD set");
  h->add_option("--postprocessors", hist.postprocessors, "Keep only these postprocessors")->delimiter(',');
  h->add_option("--bins", hist.bins, "Histogram bins");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForAllHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kConfig;
  }

  try {
    if (*g) return cmd_gen(gen);
    if (*t) return cmd_train(train);
    if (*e) return cmd_eval(ev);
    if (*p) return cmd_preview(pv);
    if (*h) return cmd_hist(hist);
  } catch (const ConfigError& err) {
    std::cerr << "config error: " << err.what() << '\n';
    return kConfig;
  } catch (const DataError& err) {
    std::cerr << "data error: " << err.what() << '\n';
    return kData;
  } catch (const NumericError& err) {
    std::cerr << "numeric failure: " << err.what() << '\n';
    return kNumeric;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kOther;
  }
  return kOther;
}
