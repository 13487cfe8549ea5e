#include "pkgnet/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>

#include "pkgnet/error.hpp"
#include "pkgnet/loss.hpp"

namespace fs = std::filesystem;

namespace pkgnet::scoring {

namespace {

Error scoring_error(const std::string& message) { return Error(message, "scoring"); }

std::pair<double, double> moments(const std::vector<double>& values, int ddof) {
  const double n = static_cast<double>(values.size());
  double mean = 0;
  for (double v : values) mean += v;
  mean /= n;
  double ss = 0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / (n - ddof))};
}

template <typename Map>
nlohmann::json block_map(const Map& m) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [block, v] : m) j[std::to_string(block)] = v;
  return j;
}

template <typename T>
std::map<int, T> block_map_from(const nlohmann::json& j) {
  std::map<int, T> m;
  for (const auto& [key, v] : j.items()) m.emplace(std::stoi(key), v.template get<T>());
  return m;
}

}  // namespace

std::vector<ClipScore> clip_scores(const model::ForwardOutput& output) {
  torch::NoGradGuard no_grad;
  const int64_t batch = output.prediction.size(0);
  const auto s_e = (output.prediction - output.target).square().reshape({batch, -1}).mean(1).to(torch::kDouble);
  std::map<int, torch::Tensor> s_c;
  for (const auto& [block, fs_k] : output.student_taps) {
    const auto ft = output.teacher_taps.find(block);
    if (ft == output.teacher_taps.end()) throw scoring_error("missing teacher tap for block " + std::to_string(block));
    s_c[block] = loss::feature_inconsistency_map(fs_k, ft->second).reshape({batch, -1}).mean(1).to(torch::kDouble);
  }

  std::vector<ClipScore> scores(static_cast<std::size_t>(batch));
  const auto s_e_acc = s_e.accessor<double, 1>();
  for (int64_t b = 0; b < batch; ++b) scores[static_cast<std::size_t>(b)].S_e = s_e_acc[b];
  for (const auto& [block, values] : s_c) {
    const auto acc = values.accessor<double, 1>();
    for (int64_t b = 0; b < batch; ++b) scores[static_cast<std::size_t>(b)].S_c[block] = acc[b];
  }
  return scores;
}

Calibration compute_stats(std::span<const ClipScore> scores, int ddof) {
  if (scores.size() < 2) throw scoring_error("calibration needs at least 2 clips");
  if (ddof < 0 || static_cast<std::size_t>(ddof) >= scores.size()) throw scoring_error("invalid ddof");

  Calibration cal;
  auto floor_sigma = [&](double sigma, const std::string& name) {
    if (!(sigma > kSigmaFloor)) {
      cal.warnings.push_back("degenerate spread for " + name + "; sigma floored at 1e-8");
      return kSigmaFloor;
    }
    return sigma;
  };

  std::vector<double> values;
  for (const auto& s : scores) values.push_back(s.S_e);
  auto [mu_e, sigma_e] = moments(values, ddof);
  cal.stats.mu_e = mu_e;
  cal.stats.sigma_e = floor_sigma(sigma_e, "S_e");

  for (const auto& [block, unused] : scores.front().S_c) {
    values.clear();
    for (const auto& s : scores) {
      const auto it = s.S_c.find(block);
      if (it == s.S_c.end()) throw scoring_error("clip scores disagree on tapped blocks");
      values.push_back(it->second);
    }
    auto [mu, sigma] = moments(values, ddof);
    cal.stats.mu_c[block] = mu;
    cal.stats.sigma_c[block] = floor_sigma(sigma, "S_c" + std::to_string(block));
  }
  cal.stats.count = static_cast<int64_t>(scores.size());
  return cal;
}

std::vector<ClipScore> score_clips(model::Student& student, const model::Teacher* teacher,
                                   std::span<const data::STClip> clips, int64_t batch_size) {
  const bool was_training = student->is_training();
  student->eval();
  torch::NoGradGuard no_grad;
  std::vector<ClipScore> scores;
  scores.reserve(clips.size());
  for (std::size_t begin = 0; begin < clips.size(); begin += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(clips.size(), begin + static_cast<std::size_t>(batch_size));
    std::vector<torch::Tensor> cubes;
    for (auto i = begin; i < end; ++i) cubes.push_back(clips[i].cube);
    auto batch = clip_scores(model::forward(student, teacher, torch::stack(cubes)));
    for (auto i = begin; i < end; ++i) {
      auto& s = batch[i - begin];
      s.video_id = clips[i].video_id;
      s.frame_index = clips[i].frame_index;
      scores.push_back(std::move(s));
    }
  }
  student->train(was_training);
  return scores;
}

Calibration calibrate(model::Student& student, const model::Teacher* teacher,
                      std::span<const data::STClip> train_clips, int ddof) {
  if (train_clips.size() < 2) throw scoring_error("calibration needs at least 2 clips");
  const auto scores = score_clips(student, teacher, train_clips);
  return compute_stats(scores, ddof);
}

double combined_score(const ClipScore& score, const ScoreStats& stats, const ScoreWeights& weights) {
  if (score.S_c.size() != weights.w_c.size()) {
    throw scoring_error("block mismatch between clip score and score weights");
  }
  double total = weights.w_e * (score.S_e - stats.mu_e) / stats.sigma_e;
  for (const auto& [block, w] : weights.w_c) {
    const auto s = score.S_c.find(block);
    const auto mu = stats.mu_c.find(block);
    const auto sigma = stats.sigma_c.find(block);
    if (s == score.S_c.end() || mu == stats.mu_c.end() || sigma == stats.sigma_c.end()) {
      throw scoring_error("block mismatch: no score or statistics for block " + std::to_string(block));
    }
    total += w * (s->second - mu->second) / sigma->second;
  }
  return total;
}

std::string to_string(const FramePolicy& policy) {
  return policy.kind == FramePolicy::Kind::max ? "max" : "top_k_mean:" + std::to_string(policy.k);
}

FramePolicy parse_policy(const std::string& text) {
  if (text == "max") return FramePolicy::max();
  const std::string prefix = "top_k_mean:";
  if (text.rfind(prefix, 0) == 0) {
    try {
      const auto k = std::stoll(text.substr(prefix.size()));
      if (k >= 1) return FramePolicy::top_k_mean(k);
    } catch (const std::exception&) {
    }
  }
  throw scoring_error("invalid frame policy '" + text + "' (expected max or top_k_mean:<k>)");
}

double aggregate_frame(std::span<const double> object_scores, const FramePolicy& policy) {
  if (object_scores.empty()) throw scoring_error("aggregate_frame: no object scores");
  if (policy.kind == FramePolicy::Kind::max) {
    return *std::max_element(object_scores.begin(), object_scores.end());
  }
  if (policy.k < 1) throw scoring_error("top_k_mean needs k >= 1");
  std::vector<double> sorted(object_scores.begin(), object_scores.end());
  const auto k = std::min(sorted.size(), static_cast<std::size_t>(policy.k));
  std::partial_sort(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k), sorted.end(), std::greater<>());
  double sum = 0;
  for (std::size_t i = 0; i < k; ++i) sum += sorted[i];
  return sum / static_cast<double>(k);
}

std::vector<double> smooth_series(std::span<const double> raw, int64_t window) {
  if (window < 1 || window % 2 == 0) throw scoring_error("median window must be odd and >= 1");
  const auto n = static_cast<int64_t>(raw.size());
  if (window == 1 || n == 0) return {raw.begin(), raw.end()};
  const int64_t half = window / 2;
  std::vector<double> out(raw.size());
  std::vector<double> buf(static_cast<std::size_t>(window));
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = -half; j <= half; ++j) {
      buf[static_cast<std::size_t>(j + half)] = raw[static_cast<std::size_t>(std::clamp<int64_t>(i + j, 0, n - 1))];
    }
    std::nth_element(buf.begin(), buf.begin() + half, buf.end());
    out[static_cast<std::size_t>(i)] = buf[static_cast<std::size_t>(half)];
  }
  return out;
}

ScoreSeries assemble_series(const std::string& video_id, int64_t frame_count, std::span<const ClipScore> scores,
                            const ScoreStats& stats, const ScoreWeights& weights, const SeriesOptions& options) {
  const auto n = static_cast<std::size_t>(frame_count);
  std::vector<std::vector<const ClipScore*>> per_frame(n);
  for (const auto& s : scores) {
    if (s.video_id != video_id) {
      throw scoring_error("clip from video " + s.video_id + " passed while scoring " + video_id);
    }
    if (s.frame_index < 0 || s.frame_index >= frame_count) {
      throw scoring_error("clip frame index out of range in video " + video_id);
    }
    per_frame[static_cast<std::size_t>(s.frame_index)].push_back(&s);
  }

  ScoreSeries series;
  series.video_id = video_id;
  series.raw.resize(n);
  series.S_e.resize(n);
  for (const auto& [block, w] : weights.w_c) series.S_c[block].resize(n);

  std::vector<double> buffer;
  for (std::size_t f = 0; f < n; ++f) {
    const auto& objects = per_frame[f];
    if (objects.empty()) {
      series.raw[f] = options.no_object_score;
      series.S_e[f] = stats.mu_e;
      for (auto& [block, values] : series.S_c) values[f] = stats.mu_c.at(block);
      continue;
    }
    buffer.clear();
    for (const auto* s : objects) buffer.push_back(combined_score(*s, stats, weights));
    series.raw[f] = aggregate_frame(buffer, options.policy);
    buffer.clear();
    for (const auto* s : objects) buffer.push_back(s->S_e);
    series.S_e[f] = aggregate_frame(buffer, options.policy);
    for (auto& [block, values] : series.S_c) {
      buffer.clear();
      for (const auto* s : objects) buffer.push_back(s->S_c.at(block));
      values[f] = aggregate_frame(buffer, options.policy);
    }
  }
  series.smoothed = smooth_series(series.raw, options.window);
  return series;
}

ScoreSeries score_video(model::Student& student, const model::Teacher* teacher, const ScoreStats& stats,
                        const ScoreWeights& weights, std::span<const data::STClip> clips,
                        const std::string& video_id, int64_t frame_count, const SeriesOptions& options) {
  for (const auto& clip : clips) {
    if (clip.video_id != video_id) {
      throw scoring_error("clip from video " + clip.video_id + " passed while scoring " + video_id);
    }
  }
  const auto scores = clips.empty() ? std::vector<ClipScore>{} : score_clips(student, teacher, clips);
  return assemble_series(video_id, frame_count, scores, stats, weights, options);
}

nlohmann::json to_json(const ScoreStats& s) {
  return {{"mu_e", s.mu_e},
          {"sigma_e", s.sigma_e},
          {"mu_c", block_map(s.mu_c)},
          {"sigma_c", block_map(s.sigma_c)},
          {"count", s.count}};
}

ScoreStats stats_from_json(const nlohmann::json& j) {
  ScoreStats s;
  s.mu_e = j.at("mu_e").get<double>();
  s.sigma_e = j.at("sigma_e").get<double>();
  s.mu_c = block_map_from<double>(j.at("mu_c"));
  s.sigma_c = block_map_from<double>(j.at("sigma_c"));
  s.count = j.value("count", int64_t{0});
  return s;
}

nlohmann::json to_json(const ScoreWeights& w) { return {{"w_e", w.w_e}, {"w_c", block_map(w.w_c)}}; }

ScoreWeights weights_from_json(const nlohmann::json& j) {
  ScoreWeights w;
  w.w_e = j.at("w_e").get<double>();
  w.w_c = block_map_from<double>(j.at("w_c"));
  return w;
}

void save_score_run(const fs::path& path, const ScoreRun& run) {
  nlohmann::ordered_json doc;
  doc["format"] = kScoreFormat;
  doc["mode"] = run.mode;
  doc["stats"] = to_json(run.stats);
  doc["weights"] = to_json(run.weights);
  doc["policy"] = to_string(run.options.policy);
  doc["window"] = run.options.window;
  doc["no_object_score"] = run.options.no_object_score;
  auto videos = nlohmann::ordered_json::array();
  for (const auto& v : run.videos) {
    nlohmann::ordered_json entry;
    entry["video_id"] = v.video_id;
    entry["frame_count"] = v.raw.size();
    entry["raw"] = v.raw;
    entry["smoothed"] = v.smoothed;
    entry["S_e"] = v.S_e;
    entry["S_c"] = block_map(v.S_c);
    videos.push_back(std::move(entry));
  }
  doc["videos"] = std::move(videos);

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write score file " + path.string(), "io");
  out << doc.dump(1) << '\n';
}

ScoreRun load_score_run(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("missing score file " + path.string(), "io");
  ScoreRun run;
  try {
    const auto doc = nlohmann::json::parse(in);
    if (doc.value("format", std::string{}) != kScoreFormat) {
      throw Error("unsupported score file format in " + path.string(), "scoring");
    }
    run.mode = doc.value("mode", std::string("PKG"));
    run.stats = stats_from_json(doc.at("stats"));
    run.weights = weights_from_json(doc.at("weights"));
    run.options.policy = parse_policy(doc.at("policy").get<std::string>());
    run.options.window = doc.at("window").get<int64_t>();
    run.options.no_object_score = doc.at("no_object_score").get<double>();
    for (const auto& entry : doc.at("videos")) {
      ScoreSeries v;
      v.video_id = entry.at("video_id").get<std::string>();
      v.raw = entry.at("raw").get<std::vector<double>>();
      v.smoothed = entry.at("smoothed").get<std::vector<double>>();
      v.S_e = entry.at("S_e").get<std::vector<double>>();
      v.S_c = block_map_from<std::vector<double>>(entry.at("S_c"));
      if (v.smoothed.size() != v.raw.size() || v.S_e.size() != v.raw.size()) {
        throw scoring_error("score arrays of video " + v.video_id + " differ in length");
      }
      run.videos.push_back(std::move(v));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed score file " + path.string() + ": " + e.what(), "scoring");
  }
  return run;
}

}  // namespace pkgnet::scoring
