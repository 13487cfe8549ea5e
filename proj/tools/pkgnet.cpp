// Command-line front end: synth-data, train, calibrate, score, eval, plot.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "pkgnet/config.hpp"
#include "pkgnet/data.hpp"
#include "pkgnet/error.hpp"
#include "pkgnet/eval.hpp"
#include "pkgnet/pipeline.hpp"

namespace fs = std::filesystem;
using namespace pkgnet;

namespace {

// Leftover `--dot.path value` / `--dot.path=value` arguments.
std::vector<std::pair<std::string, std::string>> parse_overrides(const std::vector<std::string>& rest) {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = 0; i < rest.size(); ++i) {
    const auto& arg = rest[i];
    if (arg.rfind("--", 0) != 0 || arg.find('.') == std::string::npos) {
      throw ConfigError({"unknown flag " + arg});
    }
    auto body = arg.substr(2);
    if (const auto eq = body.find('='); eq != std::string::npos) {
      out.emplace_back(body.substr(0, eq), body.substr(eq + 1));
      continue;
    }
    if (i + 1 >= rest.size()) throw ConfigError({"missing value for " + arg});
    out.emplace_back(body, rest[++i]);
  }
  return out;
}

struct Common {
  std::string config;
  std::string out;
  std::optional<uint64_t> seed;
};

config::TrainConfig resolve(const Common& common, CLI::App* sub) {
  auto overrides = parse_overrides(sub->remaining());
  if (common.seed) overrides.emplace_back("train.seed", std::to_string(*common.seed));
  const fs::path path = common.config;
  return config::resolve_config(common.config.empty() ? nullptr : &path, overrides);
}

fs::path require_dir(const std::string& dir, const char* what) {
  if (dir.empty()) throw Error(std::string("missing ") + what, "usage");
  if (!fs::is_directory(dir)) throw Error(std::string(what) + " not found: " + dir, "io");
  return dir;
}

void reject_extras(CLI::App* sub) {
  if (!sub->remaining().empty()) throw ConfigError({"unknown flag " + sub->remaining().front()});
}

std::string one_line(std::string text) {
  for (auto& c : text) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return text;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prior-knowledge guided video anomaly detection"};
  app.require_subcommand(1);

  Common common;
  std::string run_dir;
  std::string scores_file;
  std::string labels_file;
  bool no_smoothing = false;

  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "Config file (JSON)");
    sub->add_option("--seed", common.seed, "Training seed override");
    sub->allow_extras();
  };

  auto* synth = app.add_subcommand("synth-data", "Write the synthetic dataset to disk");
  add_config(synth);
  synth->add_option("--out", common.out, "Dataset root to create")->required();

  auto* train = app.add_subcommand("train", "Train a student");
  add_config(train);
  train->add_option("--out", common.out, "Run directory")->required();

  auto* calibrate = app.add_subcommand("calibrate", "Compute score statistics on the training split");
  calibrate->add_option("--run,--out", run_dir, "Run directory")->required();

  auto* score = app.add_subcommand("score", "Score the test split");
  score->add_option("--run,--out", run_dir, "Run directory")->required();

  auto* evaluate = app.add_subcommand("eval", "Frame-level AUROC of a score file");
  evaluate->add_option("--run", run_dir, "Run directory (uses its scores.json and labels)");
  evaluate->add_option("--scores", scores_file, "Score file");
  evaluate->add_option("--labels", labels_file, "Label file");
  evaluate->add_option("--out", common.out, "Report path");
  evaluate->add_flag("--no-smoothing", no_smoothing, "Use raw instead of median-smoothed scores");

  auto* plot = app.add_subcommand("plot", "Export score curves");
  plot->add_option("--run", run_dir, "Run directory");
  plot->add_option("--scores", scores_file, "Score file");
  plot->add_option("--labels", labels_file, "Label file");
  plot->add_option("--out", common.out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "pkgnet: error[usage]: " << one_line(e.what()) << '\n';
    return 2;
  }

  try {
    if (synth->parsed()) {
      const auto cfg = resolve(common, synth);
      auto synth_cfg = cfg.data.synthetic;
      synth_cfg.channels = cfg.data.channels;
      const auto dataset = data::generate_synthetic_dataset(synth_cfg, synth_cfg.seed);
      data::write_dataset(dataset, common.out);
      std::cout << "wrote " << dataset.train.store.size() << " train and " << dataset.test.store.size()
                << " test videos to " << common.out << '\n';
    } else if (train->parsed()) {
      const auto cfg = resolve(common, train);
      const auto manifest = pipeline::train(cfg, common.out, &std::cout);
      std::cout << "final checkpoint " << (fs::path(common.out) / manifest.final_checkpoint).string() << '\n';
    } else if (calibrate->parsed()) {
      reject_extras(calibrate);
      const auto artifact = pipeline::calibrate_run(require_dir(run_dir, "run directory"), &std::cout);
      std::cout << "mu_e " << artifact.stats.mu_e << " sigma_e " << artifact.stats.sigma_e << '\n';
    } else if (score->parsed()) {
      reject_extras(score);
      pipeline::score_run(require_dir(run_dir, "run directory"), &std::cout);
    } else if (evaluate->parsed()) {
      reject_extras(evaluate);
      const eval::EvalOptions options{!no_smoothing};
      eval::EvalReport report;
      if (!scores_file.empty() || run_dir.empty()) {
        if (scores_file.empty()) throw Error("missing score file: pass --scores or --run", "usage");
        if (!fs::exists(scores_file)) throw Error("missing score file " + scores_file, "io");
        std::vector<data::LabelTrack> labels;
        if (!labels_file.empty()) {
          labels = data::load_labels(labels_file);
        } else if (!run_dir.empty()) {
          labels = pipeline::run_labels(run_dir);
        } else {
          throw Error("missing label file: pass --labels", "usage");
        }
        report = eval::evaluate(scoring::load_score_run(scores_file), labels, options);
        eval::save_report(common.out.empty() ? fs::path(scores_file).parent_path() / pipeline::kReportFile
                                             : fs::path(common.out),
                          report);
      } else {
        const auto dir = require_dir(run_dir, "run directory");
        const auto scores = dir / pipeline::kScoresFile;
        if (!fs::exists(scores)) throw Error("missing score file " + scores.string(), "io");
        report = pipeline::evaluate_run(dir, options);
        if (!common.out.empty()) eval::save_report(common.out, report);
      }
      std::cout << "auroc_micro " << report.auroc_micro << " frames " << report.n_frames << " anomalous "
                << report.n_anomalous << '\n';
    } else if (plot->parsed()) {
      reject_extras(plot);
      fs::path scores = scores_file;
      if (scores.empty()) {
        if (run_dir.empty()) throw Error("missing score file: pass --scores or --run", "usage");
        scores = fs::path(run_dir) / pipeline::kScoresFile;
      }
      if (!fs::exists(scores)) throw Error("missing score file " + scores.string(), "io");
      const auto labels = !labels_file.empty() ? data::load_labels(labels_file) : pipeline::run_labels(run_dir);
      const fs::path out = common.out.empty() ? scores.parent_path() / "curves" : fs::path(common.out);
      const auto exported = eval::export_curves(scoring::load_score_run(scores), labels, out);
      std::cout << "wrote " << exported.plots.size() << " plots and " << exported.curves.string() << '\n';
    }
  } catch (const ConfigError& e) {
    std::cerr << "pkgnet: error[config]: " << one_line(e.what()) << '\n';
    return 2;
  } catch (const Error& e) {
    std::cerr << "pkgnet: error[" << e.kind() << "]: " << one_line(e.what()) << '\n';
    return e.kind() == "usage" ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "pkgnet: error[internal]: " << one_line(e.what()) << '\n';
    return 1;
  }
  return 0;
}
