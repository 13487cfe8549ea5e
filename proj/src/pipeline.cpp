#include "pkgnet/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>
#include <random>

#include "pkgnet/error.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace pkgnet::pipeline {

namespace {

constexpr int64_t kScoreChunk = 256;

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("missing artifact " + path.string(), "io");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error("malformed artifact " + path.string() + ": " + e.what(), "io");
  }
}

void write_json(const fs::path& path, const json& doc) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string(), "io");
  out << doc.dump(2) << '\n';
}

json to_json(const loss::LossBreakdown& b) {
  return {{"L_e", b.L_e}, {"L_g", b.L_g}, {"L_c", b.L_c}, {"total", b.total}};
}

loss::LossBreakdown breakdown_from_json(const json& j) {
  return {j.at("L_e").get<double>(), j.at("L_g").get<double>(), j.at("L_c").get<double>(), j.at("total").get<double>()};
}

std::vector<scoring::ClipScore> score_batch(model::Student& student, const model::Teacher* teacher,
                                            const ClipBatch& batch) {
  student->eval();
  torch::NoGradGuard no_grad;
  std::vector<scoring::ClipScore> scores;
  const int64_t n = batch.cubes.size(0);
  scores.reserve(static_cast<std::size_t>(n));
  for (int64_t begin = 0; begin < n; begin += kScoreChunk) {
    const int64_t len = std::min(kScoreChunk, n - begin);
    auto chunk = scoring::clip_scores(model::forward(student, teacher, batch.cubes.narrow(0, begin, len)));
    for (int64_t i = 0; i < len; ++i) {
      auto& s = chunk[static_cast<std::size_t>(i)];
      s.video_id = batch.video_ids[static_cast<std::size_t>(begin + i)];
      s.frame_index = batch.frame_indices[static_cast<std::size_t>(begin + i)];
      scores.push_back(std::move(s));
    }
  }
  return scores;
}

void log_line(std::ostream* log, const std::string& line) {
  if (log != nullptr) *log << line << std::endl;
}

}  // namespace

double learning_rate_at(const config::TrainSection& train, int64_t epoch) {
  return train.learning_rate * std::pow(train.lr_decay_factor, static_cast<double>(epoch / train.lr_decay_every));
}

SplitData load_split(const config::DataSection& data, const std::string& split) {
  SplitData out;
  if (data.root.empty()) {
    auto synth = data.synthetic;
    synth.channels = data.channels;
    auto dataset = data::generate_synthetic_dataset(synth, synth.seed);
    if (split != data.train_split && split != data.test_split) {
      throw Error("unknown split " + split + " for the synthetic dataset", "data");
    }
    auto& chosen = split == data.train_split ? dataset.train : dataset.test;
    out.store = std::move(chosen.store);
    out.labels = std::move(chosen.labels);
    for (auto& box : chosen.boxes) {
      if (box.confidence >= data.min_confidence) {
        out.boxes.push_back(std::move(box));
      } else {
        ++out.dropped_boxes;
      }
    }
    return out;
  }

  const fs::path root = data.root;
  out.store = data::load_frame_store(root, {split, data.channels, true});
  data::BoxIngestOptions options;
  options.min_confidence = data.min_confidence;
  options.bounds = &out.store;
  auto ingest = data::load_boxes(root / "boxes" / (split + ".csv"), options);
  out.boxes = std::move(ingest.boxes);
  out.dropped_boxes = ingest.dropped_low_confidence;
  const auto labels = root / "labels" / (split + ".json");
  if (fs::exists(labels)) out.labels = data::load_labels(labels);
  return out;
}

ClipBatch assemble_batch(const SplitData& split, int64_t temporal_window, data::AssemblyReport* report) {
  ClipBatch batch;
  std::vector<torch::Tensor> cubes;
  auto r = data::assemble_stclips(split.store, split.boxes, temporal_window, [&](data::STClip&& clip) {
    cubes.push_back(std::move(clip.cube));
    batch.video_ids.push_back(std::move(clip.video_id));
    batch.frame_indices.push_back(clip.frame_index);
  });
  if (report != nullptr) *report = r;
  if (!cubes.empty()) batch.cubes = torch::stack(cubes);
  return batch;
}

std::map<int, torch::Tensor> teacher_features(const model::Teacher& teacher, const torch::Tensor& cubes,
                                              int64_t input_frames, int64_t chunk) {
  std::map<int, std::vector<torch::Tensor>> parts;
  for (int64_t begin = 0; begin < cubes.size(0); begin += chunk) {
    const int64_t len = std::min(chunk, cubes.size(0) - begin);
    auto taps = teacher.tap(cubes.narrow(0, begin, len).select(1, input_frames));
    for (auto& [block, f] : taps) parts[block].push_back(f.contiguous());
  }
  std::map<int, torch::Tensor> out;
  for (auto& [block, list] : parts) out[block] = torch::cat(list);
  return out;
}

Trainer::Trainer(const config::TrainConfig& config, model::Student student, std::optional<model::Teacher> teacher)
    : config_(config),
      student_(std::move(student)),
      teacher_(std::move(teacher)),
      optimizer_(student_->parameters(),
                 torch::optim::AdamOptions(config.train.learning_rate)
                     .betas(std::make_tuple(config.train.adam_betas[0], config.train.adam_betas[1]))) {
  if (config_.student.mode != model::Mode::AE_only && !teacher_) {
    throw Error("a teacher is required in mode " + model::to_string(config_.student.mode), "train");
  }
}

loss::LossBreakdown Trainer::step(const torch::Tensor& cubes, const std::map<int, torch::Tensor>* teacher_taps) {
  student_->train();
  const model::Teacher* teacher = teacher_ ? &*teacher_ : nullptr;
  const auto out = model::forward(student_, teacher, cubes, teacher_taps);
  const auto terms = loss::compute_terms(out, config_.loss.weights, config_.loss.reduction);
  const auto weighted = loss::total_loss(terms, config_.loss.weights, config_.student.mode);
  if (!std::isfinite(weighted.breakdown.total)) {
    throw Error("non-finite loss (L_e=" + std::to_string(weighted.breakdown.L_e) +
                    ", L_g=" + std::to_string(weighted.breakdown.L_g) + ", L_c=" + std::to_string(weighted.breakdown.L_c) +
                    ")",
                "train");
  }
  optimizer_.zero_grad();
  weighted.total.backward();
  optimizer_.step();
  return weighted.breakdown;
}

void Trainer::set_learning_rate(double lr) {
  for (auto& group : optimizer_.param_groups()) {
    static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
  }
}

void save_manifest(const fs::path& run_dir, const RunManifest& m) {
  json history = json::array();
  for (const auto& e : m.history) {
    history.push_back({{"epoch", e.epoch}, {"learning_rate", e.learning_rate}, {"loss", to_json(e.loss)}});
  }
  write_json(run_dir / kManifestFile, {{"config", m.config},
                                       {"seed", m.seed},
                                       {"checkpoints", m.checkpoints},
                                       {"final_checkpoint", m.final_checkpoint},
                                       {"history", history},
                                       {"stats_path", m.stats_path},
                                       {"scores_path", m.scores_path},
                                       {"report_path", m.report_path}});
}

RunManifest load_manifest(const fs::path& run_dir) {
  const auto doc = read_json(run_dir / kManifestFile);
  RunManifest m;
  try {
    m.config = doc.at("config");
    m.seed = doc.at("seed").get<uint64_t>();
    m.checkpoints = doc.at("checkpoints").get<std::vector<std::string>>();
    m.final_checkpoint = doc.at("final_checkpoint").get<std::string>();
    for (const auto& e : doc.at("history")) {
      m.history.push_back({e.at("epoch").get<int64_t>(), e.at("learning_rate").get<double>(),
                           breakdown_from_json(e.at("loss"))});
    }
    m.stats_path = doc.value("stats_path", std::string{});
    m.scores_path = doc.value("scores_path", std::string{});
    m.report_path = doc.value("report_path", std::string{});
  } catch (const json::exception& e) {
    throw Error("malformed manifest in " + run_dir.string() + ": " + e.what(), "io");
  }
  return m;
}

RunManifest train(const config::TrainConfig& config, const fs::path& run_dir, std::ostream* log) {
  config::validate(config);
  fs::create_directories(run_dir / "checkpoints");
  config::save_config(run_dir / "config.json", config);
  torch::set_num_threads(static_cast<int>(config.train.threads));
  torch::manual_seed(config.train.seed);

  const auto split = load_split(config.data, config.data.train_split);
  data::AssemblyReport report;
  const auto batch = assemble_batch(split, config.data.temporal_window, &report);
  if (report.emitted == 0) throw Error("no training clips could be assembled", "train");
  log_line(log, "train clips: " + std::to_string(report.emitted) + " (skipped " +
                    std::to_string(report.skipped_history) + " without history)");

  const auto student_cfg = config.student_config();
  const auto taps = model::make_tap_spec(config.teacher, student_cfg);
  auto student = model::build_student(student_cfg, taps);
  std::optional<model::Teacher> teacher;
  std::map<int, torch::Tensor> cached;
  if (student_cfg.mode != model::Mode::AE_only) {
    teacher = model::build_teacher(config.teacher);
    cached = teacher_features(*teacher, batch.cubes, student_cfg.input_frames);
  }

  Trainer trainer(config, std::move(student), teacher);
  const json config_json = config::to_json(config);

  RunManifest manifest;
  manifest.config = config_json;
  manifest.seed = config.train.seed;

  std::mt19937_64 rng(config.train.seed);
  const int64_t n = batch.cubes.size(0);
  std::vector<int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), int64_t{0});
  double best = std::numeric_limits<double>::infinity();
  int64_t stale = 0;

  for (int64_t epoch = 0; epoch < config.train.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    const double lr = learning_rate_at(config.train, epoch);
    trainer.set_learning_rate(lr);
    std::shuffle(order.begin(), order.end(), rng);

    loss::LossBreakdown sum;
    for (int64_t begin = 0; begin < n; begin += config.train.batch_size) {
      const int64_t len = std::min(config.train.batch_size, n - begin);
      const auto index = torch::from_blob(order.data() + begin, {len}, torch::kInt64).clone();
      std::map<int, torch::Tensor> batch_taps;
      for (const auto& [block, f] : cached) batch_taps[block] = f.index_select(0, index);
      const auto b = trainer.step(batch.cubes.index_select(0, index), teacher ? &batch_taps : nullptr);
      const double w = static_cast<double>(len);
      sum.L_e += b.L_e * w;
      sum.L_g += b.L_g * w;
      sum.L_c += b.L_c * w;
      sum.total += b.total * w;
    }
    const double count = static_cast<double>(n);
    EpochRecord record{epoch, lr, {sum.L_e / count, sum.L_g / count, sum.L_c / count, sum.total / count}};
    manifest.history.push_back(record);
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    std::ostringstream line;
    line << "epoch " << epoch << " lr " << lr << " L_e " << record.loss.L_e << " L_g " << record.loss.L_g << " L_c "
         << record.loss.L_c << " total " << record.loss.total << " (" << seconds << " s)";
    log_line(log, line.str());

    const bool last = epoch + 1 == config.train.epochs;
    bool stop = false;
    if (config.train.patience > 0) {
      if (record.loss.total < best) {
        best = record.loss.total;
        stale = 0;
      } else if (++stale >= config.train.patience) {
        stop = true;
        log_line(log, "early stop after epoch " + std::to_string(epoch));
      }
    }
    if (config.train.checkpoint_every > 0 && (epoch + 1) % config.train.checkpoint_every == 0 && !last) {
      char name[48];
      std::snprintf(name, sizeof(name), "checkpoints/epoch_%04lld.pt", static_cast<long long>(epoch + 1));
      model::save_checkpoint(run_dir / name, trainer.student(), config.teacher, &trainer.optimizer(), epoch + 1,
                             config_json);
      manifest.checkpoints.emplace_back(name);
    }
    if (last || stop) {
      const std::string name = "checkpoints/final.pt";
      model::save_checkpoint(run_dir / name, trainer.student(), config.teacher, &trainer.optimizer(), epoch + 1,
                             config_json);
      manifest.checkpoints.push_back(name);
      manifest.final_checkpoint = name;
      break;
    }
  }
  save_manifest(run_dir, manifest);
  return manifest;
}

void save_calibration(const fs::path& path, const CalibrationArtifact& a) {
  write_json(path, {{"stats", scoring::to_json(a.stats)},
                    {"weights", scoring::to_json(a.weights)},
                    {"no_object_score", a.no_object_score},
                    {"warnings", a.warnings}});
}

CalibrationArtifact load_calibration(const fs::path& path) {
  const auto doc = read_json(path);
  CalibrationArtifact a;
  try {
    a.stats = scoring::stats_from_json(doc.at("stats"));
    a.weights = scoring::weights_from_json(doc.at("weights"));
    a.no_object_score = doc.at("no_object_score").get<double>();
    a.warnings = doc.value("warnings", std::vector<std::string>{});
  } catch (const json::exception& e) {
    throw Error("malformed calibration file " + path.string() + ": " + e.what(), "io");
  }
  return a;
}

LoadedRun load_run(const fs::path& checkpoint) {
  auto ckpt = model::load_checkpoint(checkpoint);
  LoadedRun run;
  run.config = config::from_json(ckpt.config);
  run.student = ckpt.student;
  run.student->eval();
  if (run.config.student.mode != model::Mode::AE_only) run.teacher = model::build_teacher(ckpt.teacher);
  return run;
}

CalibrationArtifact calibrate_run(const fs::path& run_dir, std::ostream* log) {
  auto manifest = load_manifest(run_dir);
  auto run = load_run(run_dir / manifest.final_checkpoint);
  torch::set_num_threads(static_cast<int>(run.config.train.threads));

  const auto split = load_split(run.config.data, run.config.data.train_split);
  const auto batch = assemble_batch(split, run.config.data.temporal_window);
  if (batch.video_ids.size() < 2) throw Error("calibration needs at least 2 clips", "scoring");
  const auto scores = score_batch(run.student, run.teacher ? &*run.teacher : nullptr, batch);
  auto cal = scoring::compute_stats(scores, run.config.score.ddof);

  CalibrationArtifact artifact;
  artifact.stats = cal.stats;
  artifact.warnings = cal.warnings;
  artifact.weights = run.config.score_weights();
  artifact.no_object_score = std::numeric_limits<double>::infinity();
  for (const auto& s : scores) {
    artifact.no_object_score = std::min(artifact.no_object_score,
                                        scoring::combined_score(s, artifact.stats, artifact.weights));
  }
  for (const auto& w : artifact.warnings) log_line(log, "warning: " + w);
  log_line(log, "calibrated on " + std::to_string(scores.size()) + " clips");

  save_calibration(run_dir / kStatsFile, artifact);
  manifest.stats_path = kStatsFile;
  save_manifest(run_dir, manifest);
  return artifact;
}

scoring::ScoreRun score_run(const fs::path& run_dir, std::ostream* log) {
  auto manifest = load_manifest(run_dir);
  if (manifest.stats_path.empty()) throw Error("run " + run_dir.string() + " has not been calibrated", "io");
  const auto calibration = load_calibration(run_dir / manifest.stats_path);
  auto run = load_run(run_dir / manifest.final_checkpoint);
  torch::set_num_threads(static_cast<int>(run.config.train.threads));

  const auto split = load_split(run.config.data, run.config.data.test_split);
  const auto batch = assemble_batch(split, run.config.data.temporal_window);
  std::vector<scoring::ClipScore> scores;
  if (!batch.video_ids.empty()) scores = score_batch(run.student, run.teacher ? &*run.teacher : nullptr, batch);

  scoring::ScoreRun out;
  out.stats = calibration.stats;
  out.weights = calibration.weights;
  out.options = run.config.series_options(calibration.no_object_score);
  out.mode = model::to_string(run.config.student.mode);
  std::map<std::string, std::vector<scoring::ClipScore>> per_video;
  for (auto& s : scores) per_video[s.video_id].push_back(std::move(s));
  for (const auto& video : split.store.videos()) {
    out.videos.push_back(
        scoring::assemble_series(video.id, video.frame_count, per_video[video.id], out.stats, out.weights, out.options));
  }
  log_line(log, "scored " + std::to_string(out.videos.size()) + " videos");

  scoring::save_score_run(run_dir / kScoresFile, out);
  manifest.scores_path = kScoresFile;
  save_manifest(run_dir, manifest);
  return out;
}

std::vector<data::LabelTrack> run_labels(const fs::path& run_dir) {
  const auto manifest = load_manifest(run_dir);
  const auto cfg = config::from_json(manifest.config);
  if (!cfg.data.root.empty()) {
    return data::load_labels(fs::path(cfg.data.root) / "labels" / (cfg.data.test_split + ".json"));
  }
  return load_split(cfg.data, cfg.data.test_split).labels;
}

eval::EvalReport evaluate_run(const fs::path& run_dir, const eval::EvalOptions& options) {
  auto manifest = load_manifest(run_dir);
  const auto scores_path = run_dir / (manifest.scores_path.empty() ? kScoresFile : manifest.scores_path);
  const auto run = scoring::load_score_run(scores_path);
  const auto report = eval::evaluate(run, run_labels(run_dir), options);
  eval::save_report(run_dir / kReportFile, report);
  manifest.report_path = kReportFile;
  save_manifest(run_dir, manifest);
  return report;
}

}  // namespace pkgnet::pipeline
