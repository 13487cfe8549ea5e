#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "pkgnet/data.hpp"
#include "pkgnet/scoring.hpp"

namespace pkgnet::eval {

// Rank-based (Mann-Whitney) area under the ROC curve; tied scores count 1/2.
// Throws when labels contain a single class.
double auroc(std::span<const double> scores, std::span<const uint8_t> labels);

struct EvalReport {
  double auroc_micro = 0;
  std::map<std::string, double> per_video_auroc;  // only videos with both classes
  int64_t n_frames = 0;
  int64_t n_anomalous = 0;
  bool smoothed = true;
  std::string fingerprint;
};

struct EvalOptions {
  bool use_smoothed = true;
};

// Micro AUROC over the concatenation of all videos' frame scores.
EvalReport evaluate(const scoring::ScoreRun& run, std::span<const data::LabelTrack> labels,
                    const EvalOptions& options = {});

void save_report(const std::filesystem::path& path, const EvalReport& report);
EvalReport load_report(const std::filesystem::path& path);

struct CurveExport {
  std::vector<std::filesystem::path> plots;  // one SVG per video
  std::filesystem::path curves;              // curves.csv
};

// Per-video SVG plots (prediction error, inconsistency and combined score, with
// anomalous intervals shaded) and a single columnar curves.csv:
//   video_id,frame,label,raw,smoothed,S_e[,S_c<k>...]
CurveExport export_curves(const scoring::ScoreRun& run, std::span<const data::LabelTrack> labels,
                          const std::filesystem::path& out_dir);

}  // namespace pkgnet::eval
