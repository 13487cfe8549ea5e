#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pkgnet/model.hpp"

namespace pkgnet::scoring {

inline constexpr double kSigmaFloor = 1e-8;

struct ClipScore {
  double S_e = 0;                // mean squared prediction error
  std::map<int, double> S_c;     // block -> mean feature inconsistency
  std::string video_id;
  int64_t frame_index = 0;
};

struct ScoreStats {
  double mu_e = 0;
  double sigma_e = 1;
  std::map<int, double> mu_c;
  std::map<int, double> sigma_c;
  int64_t count = 0;

  bool operator==(const ScoreStats&) const = default;
};

struct ScoreWeights {
  double w_e = 1;
  std::map<int, double> w_c;

  bool operator==(const ScoreWeights&) const = default;
};

// One score per batch element. S_c keys follow the tap maps of `output`.
std::vector<ClipScore> clip_scores(const model::ForwardOutput& output);

struct Calibration {
  ScoreStats stats;
  std::vector<std::string> warnings;
};

// Sample mean and standard deviation (denominator n - ddof) of every component.
// Degenerate spreads are floored at kSigmaFloor and reported as warnings.
Calibration compute_stats(std::span<const ClipScore> scores, int ddof = 1);

// Runs the model in evaluation mode over the clips and calibrates on the result.
// Needs at least two clips.
std::vector<ClipScore> score_clips(model::Student& student, const model::Teacher* teacher,
                                   std::span<const data::STClip> clips, int64_t batch_size = 256);
Calibration calibrate(model::Student& student, const model::Teacher* teacher,
                      std::span<const data::STClip> train_clips, int ddof = 1);

// w_e (S_e - mu_e) / sigma_e + sum_k w_c^k (S_c^k - mu_c^k) / sigma_c^k
double combined_score(const ClipScore& score, const ScoreStats& stats, const ScoreWeights& weights);

struct FramePolicy {
  enum class Kind { max, top_k_mean };
  Kind kind = Kind::max;
  int64_t k = 1;

  static FramePolicy max() { return {}; }
  static FramePolicy top_k_mean(int64_t k) { return {Kind::top_k_mean, k}; }
  bool operator==(const FramePolicy&) const = default;
};

std::string to_string(const FramePolicy& policy);
FramePolicy parse_policy(const std::string& text);  // "max" or "top_k_mean:<k>"

// Fewer than k scores under top_k_mean averages all of them. Empty input is an
// error; frames without objects are handled by the caller.
double aggregate_frame(std::span<const double> object_scores, const FramePolicy& policy);

// Sliding median with edge replication; window must be odd.
std::vector<double> smooth_series(std::span<const double> raw, int64_t window);

struct ScoreSeries {
  std::string video_id;
  std::vector<double> raw;
  std::vector<double> smoothed;
  std::vector<double> S_e;                      // per-frame aggregated prediction error
  std::map<int, std::vector<double>> S_c;       // per-frame aggregated inconsistency
};

struct SeriesOptions {
  FramePolicy policy;
  int64_t window = 15;
  double no_object_score = 0;
};

// Aggregates already computed clip scores of one video into a frame series.
ScoreSeries assemble_series(const std::string& video_id, int64_t frame_count, std::span<const ClipScore> scores,
                            const ScoreStats& stats, const ScoreWeights& weights, const SeriesOptions& options);

ScoreSeries score_video(model::Student& student, const model::Teacher* teacher, const ScoreStats& stats,
                        const ScoreWeights& weights, std::span<const data::STClip> clips,
                        const std::string& video_id, int64_t frame_count, const SeriesOptions& options);

// Structured score export consumed by the evaluation stage.
struct ScoreRun {
  ScoreStats stats;
  ScoreWeights weights;
  SeriesOptions options;
  std::string mode = "PKG";
  std::vector<ScoreSeries> videos;
};

inline constexpr const char* kScoreFormat = "pkgnet-scores/1";

nlohmann::json to_json(const ScoreStats& stats);
ScoreStats stats_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ScoreWeights& weights);
ScoreWeights weights_from_json(const nlohmann::json& j);

void save_score_run(const std::filesystem::path& path, const ScoreRun& run);
ScoreRun load_score_run(const std::filesystem::path& path);

}  // namespace pkgnet::scoring
