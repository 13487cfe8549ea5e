#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <random>
#include <sstream>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "pkgnet/error.hpp"
#include "pkgnet/eval.hpp"

using namespace pkgnet;

namespace {

std::pair<std::vector<double>, std::vector<uint8_t>> random_instance(std::mt19937& rng, int n, bool ties) {
  std::uniform_real_distribution<double> u(0, 1);
  std::uniform_int_distribution<int> coarse(0, 5);
  std::vector<double> scores(n);
  std::vector<uint8_t> labels(n);
  for (int i = 0; i < n; ++i) {
    scores[i] = ties ? coarse(rng) : u(rng);
    labels[i] = u(rng) < 0.3;
  }
  labels[0] = 0;
  labels[1] = 1;
  return {scores, labels};
}

scoring::ScoreRun make_run(const std::vector<std::pair<std::string, std::vector<double>>>& videos) {
  scoring::ScoreRun run;
  for (const auto& [id, values] : videos) {
    scoring::ScoreSeries s;
    s.video_id = id;
    s.raw = values;
    s.smoothed = values;
    for (auto& x : s.smoothed) x = -x;
    s.S_e = values;
    run.videos.push_back(s);
  }
  return run;
}

std::string read(const std::filesystem::path& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("auroc examples") {
  CHECK(eval::auroc(std::vector<double>{0.1, 0.9}, std::vector<uint8_t>{0, 1}) == 1.0);
  CHECK(eval::auroc(std::vector<double>{0.9, 0.1}, std::vector<uint8_t>{0, 1}) == 0.0);
  CHECK(eval::auroc(std::vector<double>(6, 0.3), std::vector<uint8_t>{0, 1, 0, 1, 1, 0}) == 0.5);
  CHECK_THROWS_WITH_AS(eval::auroc(std::vector<double>{1, 2}, std::vector<uint8_t>{0, 0}),
                       doctest::Contains("single-class"), Error);
  CHECK_THROWS_AS(eval::auroc(std::vector<double>{1, 2}, std::vector<uint8_t>{0}), Error);
}

TEST_CASE("auroc equals the pairwise oracle") {
  std::mt19937 rng(11);
  for (int i = 0; i < 50; ++i) {
    auto [scores, labels] = random_instance(rng, 50, i % 2 == 1);
    CHECK(std::abs(eval::auroc(scores, labels) - oracle::pairwise_auroc(scores, labels)) <= 1e-9);
  }
}

TEST_CASE("auroc invariances") {
  std::mt19937 rng(12);
  for (int i = 0; i < 20; ++i) {
    auto [scores, labels] = random_instance(rng, 60, false);
    const double a = eval::auroc(scores, labels);
    std::vector<double> mapped = scores, negated = scores;
    for (auto& x : mapped) x = std::exp(3 * x) - 7;
    for (auto& x : negated) x = -x;
    CHECK(eval::auroc(mapped, labels) == doctest::Approx(a).epsilon(1e-12));
    CHECK(a + eval::auroc(negated, labels) == doctest::Approx(1.0).epsilon(1e-12));
    const double v = eval::auroc(scores, labels);
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("evaluate") {
  const std::vector<data::LabelTrack> labels{{"a", {0, 0, 1, 1}}, {"b", {0, 1, 0}}, {"c", {0, 0}}};
  // Smoothed arrays are the negation of raw ones (see make_run).
  auto run = make_run({{"a", {0.1, 0.2, 0.8, 0.9}}, {"b", {0.3, 0.7, 0.25}}, {"c", {0.05, 0.15}}});

  SUBCASE("separable raw scores") {
    auto report = eval::evaluate(run, labels, {false});
    CHECK(report.auroc_micro == 1.0);
    CHECK(report.n_frames == 9);
    CHECK(report.n_anomalous == 3);
    CHECK(!report.smoothed);
    CHECK(report.per_video_auroc.size() == 2);
    CHECK(report.per_video_auroc.at("a") == 1.0);
    CHECK(report.per_video_auroc.count("c") == 0);
  }
  SUBCASE("smoothed scores by default") {
    CHECK(eval::evaluate(run, labels).auroc_micro == 0.0);
  }
  SUBCASE("micro AUROC equals the oracle on the concatenation") {
    std::mt19937 rng(13);
    std::uniform_real_distribution<double> u(0, 1);
    std::vector<data::LabelTrack> tracks;
    std::vector<std::pair<std::string, std::vector<double>>> videos;
    std::vector<double> all_scores;
    std::vector<uint8_t> all_labels;
    for (int v = 0; v < 4; ++v) {
      data::LabelTrack t{"v" + std::to_string(v), {}};
      std::vector<double> s;
      for (int f = 0; f < 25; ++f) {
        t.labels.push_back(u(rng) < 0.3);
        s.push_back(u(rng) + 0.3 * t.labels.back());
      }
      all_scores.insert(all_scores.end(), s.begin(), s.end());
      all_labels.insert(all_labels.end(), t.labels.begin(), t.labels.end());
      tracks.push_back(t);
      videos.emplace_back(t.video_id, s);
    }
    auto report = eval::evaluate(make_run(videos), tracks, {false});
    CHECK(std::abs(report.auroc_micro - oracle::pairwise_auroc(all_scores, all_labels)) <= 1e-9);
  }
  SUBCASE("video order does not matter") {
    auto shuffled = run;
    std::reverse(shuffled.videos.begin(), shuffled.videos.end());
    auto a = eval::evaluate(run, labels, {false}), b = eval::evaluate(shuffled, labels, {false});
    CHECK(a.auroc_micro == b.auroc_micro);
    CHECK(a.per_video_auroc == b.per_video_auroc);
    CHECK(a.fingerprint == b.fingerprint);
  }
  SUBCASE("errors") {
    const std::vector<data::LabelTrack> zeros{{"a", {0, 0, 0, 0}}, {"b", {0, 0, 0}}, {"c", {0, 0}}};
    CHECK_THROWS_WITH_AS(eval::evaluate(run, zeros, {false}), doctest::Contains("single-class"), Error);
    const std::vector<data::LabelTrack> missing{{"a", {0, 0, 1, 1}}};
    CHECK_THROWS_AS(eval::evaluate(run, missing, {false}), Error);
    const std::vector<data::LabelTrack> short_labels{{"a", {0, 1}}, {"b", {0, 1, 0}}, {"c", {0, 0}}};
    CHECK_THROWS_AS(eval::evaluate(run, short_labels, {false}), Error);
  }
  SUBCASE("report round trip") {
    fixture::TempDir tmp("report");
    auto report = eval::evaluate(run, labels, {false});
    eval::save_report(tmp / "report.json", report);
    auto back = eval::load_report(tmp / "report.json");
    CHECK(back.auroc_micro == report.auroc_micro);
    CHECK(back.per_video_auroc == report.per_video_auroc);
    CHECK(back.n_frames == report.n_frames);
    CHECK(back.fingerprint == report.fingerprint);
  }
}

TEST_CASE("export_curves") {
  fixture::TempDir tmp("curves");
  const std::vector<data::LabelTrack> labels{{"a", {0, 0, 1, 1}}, {"b", {0, 1, 0}}, {"c", {0, 0}}};
  auto run = make_run({{"a", {0.1, 0.2, 0.8, 0.9}}, {"b", {0.3, 0.7, 0.25}}, {"c", {0.05, 0.15}}});
  for (auto& v : run.videos) v.S_c[1] = v.raw;

  auto out = eval::export_curves(run, labels, tmp / "one");
  CHECK(out.plots.size() == 3);
  for (const auto& p : out.plots) CHECK(std::filesystem::exists(p));
  const auto csv = read(out.curves);
  CHECK(csv.rfind("video_id,frame,label,raw,smoothed,S_e,S_c1\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 9);

  // A video without anomalies has no shaded interval; anomalous ones do.
  auto svg_of = [&](const std::string& id) {
    for (const auto& p : out.plots) {
      if (p.stem() == id) return read(p);
    }
    return std::string();
  };
  CHECK(svg_of("c").find("class=\"anomaly\"") == std::string::npos);
  CHECK(svg_of("a").find("class=\"anomaly\"") != std::string::npos);

  auto again = eval::export_curves(run, labels, tmp / "two");
  CHECK(read(again.curves) == csv);
}
