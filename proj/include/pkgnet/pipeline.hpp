#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "pkgnet/config.hpp"
#include "pkgnet/data.hpp"
#include "pkgnet/eval.hpp"
#include "pkgnet/loss.hpp"
#include "pkgnet/model.hpp"
#include "pkgnet/scoring.hpp"

namespace pkgnet::pipeline {

// lr0 * factor^floor(epoch / every), epochs counted from 0.
double learning_rate_at(const config::TrainSection& train, int64_t epoch);

struct SplitData {
  data::FrameStore store;
  std::vector<data::ObjectBox> boxes;
  std::vector<data::LabelTrack> labels;
  int64_t dropped_boxes = 0;
};

// Reads `<root>/<split>`, `<root>/boxes/<split>.csv` and (when present)
// `<root>/labels/<split>.json`; with an empty root the synthetic generator
// supplies the split instead.
SplitData load_split(const config::DataSection& data, const std::string& split);

// Clip cubes stacked into one (N, t, C, 32, 32) tensor with their identities.
struct ClipBatch {
  torch::Tensor cubes;
  std::vector<std::string> video_ids;
  std::vector<int64_t> frame_indices;
};

ClipBatch assemble_batch(const SplitData& split, int64_t temporal_window, data::AssemblyReport* report = nullptr);

// Teacher features of the final frame of every cube, computed in chunks.
std::map<int, torch::Tensor> teacher_features(const model::Teacher& teacher, const torch::Tensor& cubes,
                                              int64_t input_frames, int64_t chunk = 256);

// Owns one student and its Adam optimizer.
class Trainer {
 public:
  Trainer(const config::TrainConfig& config, model::Student student, std::optional<model::Teacher> teacher);

  // One optimization step on a batch of cubes. `teacher_taps` replaces the
  // teacher call with precomputed features of the same batch.
  loss::LossBreakdown step(const torch::Tensor& cubes, const std::map<int, torch::Tensor>* teacher_taps = nullptr);

  void set_learning_rate(double lr);
  model::Student& student() noexcept { return student_; }
  const std::optional<model::Teacher>& teacher() const noexcept { return teacher_; }
  torch::optim::Adam& optimizer() noexcept { return optimizer_; }

 private:
  config::TrainConfig config_;
  model::Student student_;
  std::optional<model::Teacher> teacher_;
  torch::optim::Adam optimizer_;
};

struct EpochRecord {
  int64_t epoch = 0;
  double learning_rate = 0;
  loss::LossBreakdown loss;  // mean over the epoch's batches, weighted by batch size
};

struct RunManifest {
  nlohmann::json config;
  uint64_t seed = 0;
  std::vector<std::string> checkpoints;  // relative to the run directory
  std::string final_checkpoint;
  std::vector<EpochRecord> history;
  std::string stats_path;
  std::string scores_path;
  std::string report_path;
};

inline constexpr const char* kManifestFile = "manifest.json";

void save_manifest(const std::filesystem::path& run_dir, const RunManifest& manifest);
RunManifest load_manifest(const std::filesystem::path& run_dir);

// Trains a student under the configured step schedule, checkpointing every
// `checkpoint_every` epochs and at the end. Writes config.json, checkpoints/
// and manifest.json under `run_dir`.
RunManifest train(const config::TrainConfig& config, const std::filesystem::path& run_dir, std::ostream* log = nullptr);

struct CalibrationArtifact {
  scoring::ScoreStats stats;
  scoring::ScoreWeights weights;
  double no_object_score = 0;  // minimum combined score over calibration clips
  std::vector<std::string> warnings;
};

inline constexpr const char* kStatsFile = "stats.json";
inline constexpr const char* kScoresFile = "scores.json";
inline constexpr const char* kReportFile = "report.json";

void save_calibration(const std::filesystem::path& path, const CalibrationArtifact& artifact);
CalibrationArtifact load_calibration(const std::filesystem::path& path);

// Everything needed to run the trained model, rebuilt from a checkpoint.
struct LoadedRun {
  config::TrainConfig config;
  model::Student student{nullptr};
  std::optional<model::Teacher> teacher;
};

LoadedRun load_run(const std::filesystem::path& checkpoint);

CalibrationArtifact calibrate_run(const std::filesystem::path& run_dir, std::ostream* log = nullptr);
scoring::ScoreRun score_run(const std::filesystem::path& run_dir, std::ostream* log = nullptr);

// Test-split labels of the run's dataset.
std::vector<data::LabelTrack> run_labels(const std::filesystem::path& run_dir);

eval::EvalReport evaluate_run(const std::filesystem::path& run_dir, const eval::EvalOptions& options);

}  // namespace pkgnet::pipeline
