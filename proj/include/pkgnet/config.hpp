#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "pkgnet/data.hpp"
#include "pkgnet/loss.hpp"
#include "pkgnet/model.hpp"
#include "pkgnet/scoring.hpp"

namespace pkgnet::config {

struct DataSection {
  // Empty root means the synthetic generator feeds the run in memory.
  std::string root;
  std::string train_split = "train";
  std::string test_split = "test";
  int64_t channels = 3;
  int64_t temporal_window = 4;
  double min_confidence = 0.5;
  data::SyntheticConfig synthetic;
};

struct StudentSection {
  int bottleneck_block = 2;
  bool skip_connections = true;
  model::Mode mode = model::Mode::PKG;
  int64_t base_width = 32;
  int64_t residual_blocks = 2;
};

struct LossSection {
  loss::LossWeights weights;
  loss::Reduction reduction = loss::Reduction::mean;
};

struct TrainSection {
  double learning_rate = 1e-4;
  double lr_decay_factor = 0.8;
  int64_t lr_decay_every = 60;
  std::array<double, 2> adam_betas{0.9, 0.999};
  int64_t batch_size = 128;
  int64_t epochs = 120;
  uint64_t seed = 0;
  int64_t checkpoint_every = 20;
  int64_t patience = 0;  // 0 disables early stopping
  int64_t threads = 1;
};

struct ScoreSection {
  double w_e = 0.5;
  // Empty means every tapped block gets (1 - w_e) / K.
  std::map<int, double> w_c;
  std::string policy = "max";
  int64_t window = 15;
  int ddof = 1;
};

struct EvalSection {
  bool smoothing = true;
};

struct TrainConfig {
  DataSection data;
  model::TeacherSpec teacher;
  StudentSection student;
  LossSection loss;
  TrainSection train;
  ScoreSection score;
  EvalSection eval;

  model::StudentConfig student_config() const;
  // Score weights with the components a mode does not produce removed.
  scoring::ScoreWeights score_weights() const;
  scoring::SeriesOptions series_options(double no_object_score) const;
};

nlohmann::json to_json(const TrainConfig& config);
// Missing keys take their defaults; unknown keys are violations.
TrainConfig from_json(const nlohmann::json& j);

// Every violated constraint, empty when the config is valid.
std::vector<std::string> violations(const TrainConfig& config);
void validate(const TrainConfig& config);

TrainConfig load_config(const std::filesystem::path& path);
void save_config(const std::filesystem::path& path, const TrainConfig& config);

// Sets `dot.path` in a config document. The path must name an existing field
// (or a block entry under score.w_c). Values are parsed as JSON, falling back
// to a plain string.
void apply_override(nlohmann::json& doc, const std::string& dot_path, const std::string& value);

// Defaults, then the file (if any), then the overrides, then validation.
TrainConfig resolve_config(const std::filesystem::path* config_file,
                           const std::vector<std::pair<std::string, std::string>>& overrides);

}  // namespace pkgnet::config
