#include <doctest.h>

#include <algorithm>
#include <random>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "pkgnet/error.hpp"
#include "pkgnet/scoring.hpp"

using namespace pkgnet;
using scoring::ClipScore;
using scoring::FramePolicy;
using scoring::ScoreStats;
using scoring::ScoreWeights;

namespace {

ClipScore clip(double s_e, std::map<int, double> s_c = {}, std::string video = "v", int64_t frame = 0) {
  return {s_e, std::move(s_c), std::move(video), frame};
}

ScoreStats unit_stats(std::vector<int> blocks = {}) {
  ScoreStats s;
  for (int b : blocks) {
    s.mu_c[b] = 0;
    s.sigma_c[b] = 1;
  }
  return s;
}

}  // namespace

TEST_CASE("clip_scores") {
  torch::manual_seed(0);
  model::ForwardOutput out;
  SUBCASE("perfect prediction and identical taps") {
    out.prediction = torch::rand({2, 3, 32, 32});
    out.target = out.prediction.clone();
    auto f = torch::randn({2, 16, 4, 4});
    out.student_taps = {{1, f}, {2, f * 3}};
    out.teacher_taps = {{1, f}, {2, f}};
    for (const auto& s : scoring::clip_scores(out)) {
      CHECK(s.S_e == 0.0);
      CHECK(s.S_c.at(1) == doctest::Approx(0.0).epsilon(1e-6));
      CHECK(s.S_c.at(2) == doctest::Approx(0.0).epsilon(1e-6));
    }
  }
  SUBCASE("constant error") {
    out.prediction = torch::ones({1, 3, 8, 8});
    out.target = torch::zeros({1, 3, 8, 8});
    CHECK(scoring::clip_scores(out).at(0).S_e == doctest::Approx(1.0));
  }
  SUBCASE("matches the scalar-loop oracle") {
    out.prediction = torch::rand({3, 3, 32, 32});
    out.target = torch::rand({3, 3, 32, 32});
    out.student_taps = {{1, torch::randn({3, 32, 8, 8})}, {2, torch::randn({3, 64, 4, 4})}};
    out.teacher_taps = {{1, torch::randn({3, 32, 8, 8})}, {2, torch::randn({3, 64, 4, 4})}};
    const auto scores = scoring::clip_scores(out);
    REQUIRE(scores.size() == 3);
    for (int64_t i = 0; i < 3; ++i) {
      CHECK(std::abs(scores[i].S_e - oracle::mse(out.prediction[i], out.target[i])) <= 1e-6);
      for (int block : {1, 2}) {
        const double expected =
            oracle::mean(oracle::inconsistency_map(out.student_taps[block][i], out.teacher_taps[block][i]));
        CHECK(std::abs(scores[i].S_c.at(block) - expected) <= 1e-6);
        CHECK(scores[i].S_c.at(block) >= 0.0);
        CHECK(scores[i].S_c.at(block) <= 2.0);
      }
    }
  }
  SUBCASE("missing teacher tap") {
    out.prediction = torch::rand({1, 3, 8, 8});
    out.target = torch::rand({1, 3, 8, 8});
    out.student_taps = {{1, torch::randn({1, 4, 2, 2})}};
    CHECK_THROWS_AS(scoring::clip_scores(out), Error);
  }
}

TEST_CASE("compute_stats") {
  SUBCASE("{1, 3}") {
    std::vector<ClipScore> s{clip(1, {{1, 0.1}}), clip(3, {{1, 0.3}})};
    auto cal = scoring::compute_stats(s);
    CHECK(cal.stats.mu_e == 2.0);
    CHECK(cal.stats.sigma_e == doctest::Approx(std::sqrt(2.0)));  // n - 1
    CHECK(cal.stats.count == 2);
    CHECK(cal.stats.mu_c.at(1) == doctest::Approx(0.2));
    CHECK(scoring::compute_stats(s, 0).stats.sigma_e == doctest::Approx(1.0));  // n
  }
  SUBCASE("{1, 2, 3}") {
    std::vector<ClipScore> s{clip(1), clip(2), clip(3)};
    CHECK(scoring::compute_stats(s).stats.sigma_e == doctest::Approx(1.0));
    CHECK(scoring::compute_stats(s, 0).stats.sigma_e == doctest::Approx(std::sqrt(2.0 / 3.0)));
  }
  SUBCASE("degenerate spread is floored with a warning") {
    std::vector<ClipScore> s{clip(0.5, {{2, 0.1}}), clip(0.5, {{2, 0.1}})};
    auto cal = scoring::compute_stats(s);
    CHECK(cal.stats.sigma_e == scoring::kSigmaFloor);
    CHECK(cal.stats.sigma_c.at(2) == scoring::kSigmaFloor);
    CHECK(cal.warnings.size() == 2);
  }
  SUBCASE("order invariance") {
    std::mt19937 rng(1);
    std::uniform_real_distribution<double> u(0, 1);
    std::vector<ClipScore> s;
    for (int i = 0; i < 50; ++i) s.push_back(clip(u(rng), {{1, u(rng)}, {2, u(rng)}}));
    auto a = scoring::compute_stats(s).stats;
    std::shuffle(s.begin(), s.end(), rng);
    auto b = scoring::compute_stats(s).stats;
    CHECK(a.mu_e == doctest::Approx(b.mu_e).epsilon(1e-12));
    CHECK(a.sigma_e == doctest::Approx(b.sigma_e).epsilon(1e-12));
    CHECK(a.sigma_c.at(2) == doctest::Approx(b.sigma_c.at(2)).epsilon(1e-12));
  }
  SUBCASE("fewer than two clips") {
    std::vector<ClipScore> s{clip(1)};
    CHECK_THROWS_AS(scoring::compute_stats(s), Error);
  }
}

TEST_CASE("combined_score") {
  SUBCASE("identity normalization") {
    CHECK(scoring::combined_score(clip(0.37), unit_stats(), {1, {}}) == 0.37);
  }
  SUBCASE("ped2 weights at the mean give zero") {
    ScoreStats stats;
    stats.mu_e = 0.013;
    stats.sigma_e = 0.004;
    stats.mu_c = {{1, 0.21}, {2, 0.34}};
    stats.sigma_c = {{1, 0.05}, {2, 0.07}};
    const ScoreWeights ped2{0.01, {{1, 0.65}, {2, 0.35}}};
    CHECK(scoring::combined_score(clip(0.013, {{1, 0.21}, {2, 0.34}}), stats, ped2) == 0.0);
  }
  SUBCASE("direct arithmetic") {
    ScoreStats stats;
    stats.mu_e = 1;
    stats.sigma_e = 0.5;
    stats.mu_c = {{1, 0.2}};
    stats.sigma_c = {{1, 0.1}};
    CHECK(scoring::combined_score(clip(2, {{1, 0.4}}), stats, {0.5, {{1, 0.5}}}) == doctest::Approx(2.0).epsilon(1e-12));
  }
  SUBCASE("block mismatch") {
    CHECK_THROWS_AS(scoring::combined_score(clip(1, {{1, 0.1}}), unit_stats({1, 2}), {0.5, {{2, 0.5}}}), Error);
    CHECK_THROWS_AS(scoring::combined_score(clip(1, {{1, 0.1}}), unit_stats(), {0.5, {{1, 0.5}}}), Error);
  }
  SUBCASE("monotone in every component") {
    std::mt19937 rng(2);
    std::uniform_real_distribution<double> u(0.01, 1);
    for (int i = 0; i < 50; ++i) {
      ScoreStats stats;
      stats.mu_e = u(rng);
      stats.sigma_e = u(rng);
      stats.mu_c = {{1, u(rng)}, {2, u(rng)}};
      stats.sigma_c = {{1, u(rng)}, {2, u(rng)}};
      const ScoreWeights w{u(rng), {{1, u(rng)}, {2, u(rng)}}};
      auto base = clip(u(rng), {{1, u(rng)}, {2, u(rng)}});
      const double s0 = scoring::combined_score(base, stats, w);
      auto up = base;
      up.S_e += 0.01;
      CHECK(scoring::combined_score(up, stats, w) > s0);
      for (int b : {1, 2}) {
        up = base;
        up.S_c[b] += 0.01;
        CHECK(scoring::combined_score(up, stats, w) > s0);
      }
    }
  }
  SUBCASE("affine consistency after recalibration") {
    std::mt19937 rng(3);
    std::uniform_real_distribution<double> u(0, 1);
    std::vector<ClipScore> s, t;
    for (int i = 0; i < 30; ++i) {
      s.push_back(clip(u(rng), {{1, u(rng)}}));
      t.push_back(s.back());
      t.back().S_e = 3.5 * t.back().S_e + 2.0;
    }
    const ScoreWeights w{0.4, {{1, 0.6}}};
    const auto a = scoring::compute_stats(s).stats, b = scoring::compute_stats(t).stats;
    for (std::size_t i = 0; i < s.size(); ++i) {
      CHECK(scoring::combined_score(s[i], a, w) == doctest::Approx(scoring::combined_score(t[i], b, w)).epsilon(1e-9));
    }
  }
}

TEST_CASE("aggregate_frame") {
  const std::vector<double> three{1, 5, 3}, four{1, 5, 3, 7}, one{4};
  CHECK(scoring::aggregate_frame(three, FramePolicy::max()) == 5.0);
  CHECK(scoring::aggregate_frame(four, FramePolicy::top_k_mean(3)) == 5.0);
  CHECK(scoring::aggregate_frame(one, FramePolicy::top_k_mean(3)) == 4.0);
  CHECK(scoring::aggregate_frame(four, FramePolicy::top_k_mean(1)) == scoring::aggregate_frame(four, FramePolicy::max()));

  std::vector<double> perm{7, 1, 3, 5};
  CHECK(scoring::aggregate_frame(perm, FramePolicy::top_k_mean(2)) == scoring::aggregate_frame(four, FramePolicy::top_k_mean(2)));
  CHECK_THROWS_AS(scoring::aggregate_frame(std::vector<double>{}, FramePolicy::max()), Error);

  CHECK(scoring::parse_policy("max") == FramePolicy::max());
  CHECK(scoring::parse_policy("top_k_mean:3") == FramePolicy::top_k_mean(3));
  CHECK(scoring::to_string(FramePolicy::top_k_mean(3)) == "top_k_mean:3");
  CHECK_THROWS_AS(scoring::parse_policy("mean"), Error);
  CHECK_THROWS_AS(scoring::parse_policy("top_k_mean:0"), Error);
}

TEST_CASE("smooth_series") {
  const std::vector<double> spike{0, 0, 10, 0, 0};
  CHECK(scoring::smooth_series(spike, 1) == spike);
  CHECK(scoring::smooth_series(spike, 3) == std::vector<double>{0, 0, 0, 0, 0});
  const std::vector<double> flat(9, 2.5);
  CHECK(scoring::smooth_series(flat, 5) == flat);
  // Edge replication: [1, 1, 9, 2] padded to [1, 1, 1, 9, 2, 2].
  CHECK(scoring::smooth_series(std::vector<double>{1, 1, 9, 2}, 3) == std::vector<double>{1, 1, 2, 2});
  CHECK_THROWS_AS(scoring::smooth_series(spike, 4), Error);
  CHECK_THROWS_AS(scoring::smooth_series(spike, 0), Error);

  std::mt19937 rng(4);
  std::uniform_real_distribution<double> u(-5, 5);
  for (int i = 0; i < 20; ++i) {
    std::vector<double> raw(40);
    for (auto& x : raw) x = u(rng);
    const auto out = scoring::smooth_series(raw, 1 + 2 * (i % 8));
    REQUIRE(out.size() == raw.size());
    const auto [lo, hi] = std::minmax_element(raw.begin(), raw.end());
    for (double x : out) {
      CHECK(x >= *lo);
      CHECK(x <= *hi);
    }
  }
}

TEST_CASE("assemble_series") {
  ScoreStats stats = unit_stats({1});
  stats.mu_e = 0.5;
  const ScoreWeights w{1, {{1, 0}}};
  scoring::SeriesOptions opt{FramePolicy::max(), 1, -3.0};

  SUBCASE("no objects anywhere") {
    auto series = scoring::assemble_series("v", 6, {}, stats, w, opt);
    CHECK(series.raw == std::vector<double>(6, -3.0));
    CHECK(series.smoothed == std::vector<double>(6, -3.0));
    CHECK(series.S_e.size() == 6);
    CHECK(series.S_c.at(1).size() == 6);
  }
  SUBCASE("one object per frame, max, window 1") {
    std::vector<ClipScore> clips;
    for (int64_t f = 0; f < 5; ++f) clips.push_back(clip(0.1 * f, {{1, 0.2}}, "v", f));
    auto series = scoring::assemble_series("v", 5, clips, stats, w, opt);
    for (int64_t f = 0; f < 5; ++f) {
      CHECK(series.raw[f] == scoring::combined_score(clips[f], stats, w));
      CHECK(series.smoothed[f] == series.raw[f]);
    }
  }
  SUBCASE("multiple objects take the policy") {
    std::vector<ClipScore> clips{clip(1, {{1, 0}}, "v", 2), clip(4, {{1, 0}}, "v", 2), clip(2, {{1, 0}}, "v", 2)};
    opt.policy = FramePolicy::top_k_mean(2);
    auto series = scoring::assemble_series("v", 3, clips, stats, w, opt);
    CHECK(series.raw[2] == doctest::Approx((3.5 + 1.5) / 2));
    CHECK(series.S_e[2] == doctest::Approx(3.0));
    CHECK(series.raw[0] == -3.0);
  }
  SUBCASE("foreign clip") {
    std::vector<ClipScore> clips{clip(1, {{1, 0}}, "other", 0)};
    CHECK_THROWS_AS(scoring::assemble_series("v", 3, clips, stats, w, opt), Error);
  }
}

TEST_CASE("score file round trip") {
  fixture::TempDir tmp("scores");
  scoring::ScoreRun run;
  run.stats = unit_stats({1, 2});
  run.stats.mu_e = 0.25;
  run.stats.count = 12;
  run.weights = {0.01, {{1, 0.65}, {2, 0.35}}};
  run.options = {FramePolicy::top_k_mean(3), 15, -1.25};
  run.mode = "PKG";
  scoring::ScoreSeries s;
  s.video_id = "video_00";
  s.raw = {0.1, 0.2, 1.0 / 3.0};
  s.smoothed = {0.1, 0.2, 0.2};
  s.S_e = {1, 2, 3};
  s.S_c = {{1, {0.1, 0.2, 0.3}}, {2, {0.4, 0.5, 0.6}}};
  run.videos.push_back(s);
  scoring::save_score_run(tmp / "scores.json", run);

  auto back = scoring::load_score_run(tmp / "scores.json");
  CHECK(back.stats == run.stats);
  CHECK(back.weights == run.weights);
  CHECK(back.options.policy == run.options.policy);
  CHECK(back.options.window == 15);
  CHECK(back.options.no_object_score == -1.25);
  REQUIRE(back.videos.size() == 1);
  CHECK(back.videos[0].raw == s.raw);
  CHECK(back.videos[0].S_c == s.S_c);
  CHECK_THROWS_AS(scoring::load_score_run(tmp / "absent.json"), Error);
}
