#include "pkgnet/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "pkgnet/error.hpp"

namespace fs = std::filesystem;

namespace pkgnet::eval {

namespace {

Error eval_error(const std::string& message) { return Error(message, "eval"); }

uint64_t fnv1a(std::string_view text) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string fingerprint(const scoring::ScoreRun& run, bool smoothed) {
  std::vector<std::pair<std::string, std::size_t>> videos;
  for (const auto& v : run.videos) videos.emplace_back(v.video_id, v.raw.size());
  std::sort(videos.begin(), videos.end());
  nlohmann::json doc;
  doc["mode"] = run.mode;
  doc["stats"] = scoring::to_json(run.stats);
  doc["weights"] = scoring::to_json(run.weights);
  doc["policy"] = scoring::to_string(run.options.policy);
  doc["window"] = run.options.window;
  doc["smoothed"] = smoothed;
  doc["videos"] = videos;
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a(doc.dump())));
  return buf;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

std::string polyline(const std::vector<double>& values, double x0, double width, double y0, double height,
                     const char* colour) {
  if (values.empty()) return {};
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it;
  const double span = *hi_it - lo > 0 ? *hi_it - lo : 1.0;
  const double step = values.size() > 1 ? width / static_cast<double>(values.size() - 1) : 0.0;
  std::ostringstream out;
  out << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"1.5\" points=\"";
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double x = x0 + step * static_cast<double>(i);
    const double y = y0 + height - (values[i] - lo) / span * height;
    out << (i ? " " : "") << fmt(x) << ',' << fmt(y);
  }
  out << "\"/>\n";
  return out.str();
}

}  // namespace

double auroc(std::span<const double> scores, std::span<const uint8_t> labels) {
  if (scores.size() != labels.size()) throw eval_error("auroc: scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Sum of (average) ranks of the positives.
  double positive_rank_sum = 0;
  double positives = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double average_rank = (static_cast<double>(i + j) / 2.0) + 1.0;
    for (std::size_t k = i; k <= j; ++k) {
      if (labels[order[k]] != 0) {
        positive_rank_sum += average_rank;
        positives += 1;
      }
    }
    i = j + 1;
  }
  const double negatives = static_cast<double>(scores.size()) - positives;
  if (positives == 0 || negatives == 0) throw eval_error("auroc: single-class labels");
  return (positive_rank_sum - positives * (positives + 1) / 2.0) / (positives * negatives);
}

EvalReport evaluate(const scoring::ScoreRun& run, std::span<const data::LabelTrack> labels, const EvalOptions& options) {
  if (run.videos.empty()) throw eval_error("score run contains no videos");
  auto videos = run.videos;
  std::sort(videos.begin(), videos.end(), [](const auto& a, const auto& b) { return a.video_id < b.video_id; });

  EvalReport report;
  report.smoothed = options.use_smoothed;
  std::vector<double> all_scores;
  std::vector<uint8_t> all_labels;
  for (const auto& v : videos) {
    const auto& track = data::find_labels(labels, v.video_id);
    const auto& scores = options.use_smoothed ? v.smoothed : v.raw;
    if (track.labels.size() != scores.size()) {
      throw eval_error("length mismatch for video " + v.video_id + ": " + std::to_string(scores.size()) +
                       " scores, " + std::to_string(track.labels.size()) + " labels");
    }
    all_scores.insert(all_scores.end(), scores.begin(), scores.end());
    all_labels.insert(all_labels.end(), track.labels.begin(), track.labels.end());
    const auto anomalous = std::count(track.labels.begin(), track.labels.end(), uint8_t{1});
    if (anomalous > 0 && anomalous < static_cast<std::ptrdiff_t>(track.labels.size())) {
      report.per_video_auroc[v.video_id] = auroc(scores, track.labels);
    }
  }
  report.n_frames = static_cast<int64_t>(all_labels.size());
  report.n_anomalous = std::count(all_labels.begin(), all_labels.end(), uint8_t{1});
  if (report.n_anomalous == 0 || report.n_anomalous == report.n_frames) {
    throw eval_error("single-class labels across the test set");
  }
  report.auroc_micro = auroc(all_scores, all_labels);
  report.fingerprint = fingerprint(run, options.use_smoothed);
  return report;
}

void save_report(const fs::path& path, const EvalReport& report) {
  nlohmann::ordered_json doc;
  doc["auroc_micro"] = report.auroc_micro;
  doc["per_video_auroc"] = report.per_video_auroc;
  doc["n_frames"] = report.n_frames;
  doc["n_anomalous"] = report.n_anomalous;
  doc["smoothed"] = report.smoothed;
  doc["fingerprint"] = report.fingerprint;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write report " + path.string(), "io");
  out << doc.dump(2) << '\n';
}

EvalReport load_report(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("missing report " + path.string(), "io");
  const auto doc = nlohmann::json::parse(in);
  EvalReport r;
  r.auroc_micro = doc.at("auroc_micro").get<double>();
  r.per_video_auroc = doc.at("per_video_auroc").get<std::map<std::string, double>>();
  r.n_frames = doc.at("n_frames").get<int64_t>();
  r.n_anomalous = doc.at("n_anomalous").get<int64_t>();
  r.smoothed = doc.at("smoothed").get<bool>();
  r.fingerprint = doc.at("fingerprint").get<std::string>();
  return r;
}

CurveExport export_curves(const scoring::ScoreRun& run, std::span<const data::LabelTrack> labels,
                          const fs::path& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) throw Error("cannot create output directory " + out_dir.string(), "io");

  auto videos = run.videos;
  std::sort(videos.begin(), videos.end(), [](const auto& a, const auto& b) { return a.video_id < b.video_id; });

  CurveExport result;
  result.curves = out_dir / "curves.csv";
  std::ofstream csv(result.curves);
  if (!csv) throw Error("cannot write " + result.curves.string(), "io");
  std::set<int> block_set;
  for (const auto& v : videos) {
    for (const auto& [block, series] : v.S_c) block_set.insert(block);
  }
  const std::vector<int> blocks(block_set.begin(), block_set.end());
  csv << "video_id,frame,label,raw,smoothed,S_e";
  for (int b : blocks) csv << ",S_c" << b;
  csv << '\n';

  constexpr double kWidth = 800, kHeight = 240, kMargin = 20;
  for (const auto& v : videos) {
    const auto& track = data::find_labels(labels, v.video_id);
    if (track.labels.size() != v.raw.size()) throw eval_error("length mismatch for video " + v.video_id);
    const std::size_t n = v.raw.size();

    std::vector<double> inconsistency(n, 0.0);
    for (std::size_t f = 0; f < n; ++f) {
      for (int b : blocks) inconsistency[f] += v.S_c.at(b)[f];
      if (!blocks.empty()) inconsistency[f] /= static_cast<double>(blocks.size());
      csv << v.video_id << ',' << f << ',' << int{track.labels[f]} << ',' << fmt(v.raw[f]) << ','
          << fmt(v.smoothed[f]) << ',' << fmt(v.S_e[f]);
      for (int b : blocks) csv << ',' << fmt(v.S_c.at(b)[f]);
      csv << '\n';
    }

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth + 2 * kMargin << "\" height=\""
        << kHeight + 2 * kMargin << "\">\n";
    svg << "<title>" << v.video_id << "</title>\n";
    svg << "<rect x=\"0\" y=\"0\" width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    const double step = n > 1 ? kWidth / static_cast<double>(n - 1) : kWidth;
    for (std::size_t f = 0; f < n;) {
      if (track.labels[f] == 0) {
        ++f;
        continue;
      }
      std::size_t end = f;
      while (end < n && track.labels[end] != 0) ++end;
      svg << "<rect class=\"anomaly\" x=\"" << fmt(kMargin + step * static_cast<double>(f)) << "\" y=\"" << kMargin
          << "\" width=\"" << fmt(std::max(step * static_cast<double>(end - f), 1.0)) << "\" height=\"" << kHeight
          << "\" fill=\"red\" fill-opacity=\"0.2\"/>\n";
      f = end;
    }
    svg << polyline(v.S_e, kMargin, kWidth, kMargin, kHeight, "#1f77b4");
    if (!blocks.empty()) svg << polyline(inconsistency, kMargin, kWidth, kMargin, kHeight, "#ff7f0e");
    svg << polyline(v.smoothed, kMargin, kWidth, kMargin, kHeight, "#2ca02c");
    svg << "</svg>\n";

    const auto plot = out_dir / (v.video_id + ".svg");
    std::ofstream out(plot);
    if (!out) throw Error("cannot write " + plot.string(), "io");
    out << svg.str();
    result.plots.push_back(plot);
  }
  return result;
}

}  // namespace pkgnet::eval
