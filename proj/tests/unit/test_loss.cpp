#include <doctest.h>

#include "oracles.hpp"
#include "pkgnet/error.hpp"
#include "pkgnet/loss.hpp"

using namespace pkgnet;
using loss::Reduction;

namespace {

torch::Tensor rand64(std::vector<int64_t> shape) { return torch::rand(shape, torch::kFloat64); }

}  // namespace

TEST_CASE("prediction_loss") {
  torch::manual_seed(1);
  SUBCASE("identity is zero") {
    auto a = torch::rand({3, 32, 32});
    CHECK(loss::prediction_loss(a, a).item<double>() == 0.0);
  }
  SUBCASE("ones vs zeros is one for any shape") {
    for (auto shape : {std::vector<int64_t>{1}, {3, 32, 32}, {2, 3, 5, 7}}) {
      CHECK(loss::prediction_loss(torch::ones(shape), torch::zeros(shape)).item<double>() == doctest::Approx(1.0));
    }
  }
  SUBCASE("matches the elementwise oracle") {
    auto a = rand64({3, 32, 32}), b = rand64({3, 32, 32});
    CHECK(std::abs(loss::prediction_loss(a, b).item<double>() - oracle::mse(a, b)) <= 1e-7);
  }
  SUBCASE("sum reduction") {
    auto a = rand64({2, 4, 4}), b = rand64({2, 4, 4});
    CHECK(loss::prediction_loss(a, b, Reduction::sum).item<double>() ==
          doctest::Approx(oracle::mse(a, b) * 32).epsilon(1e-12));
  }
  SUBCASE("symmetric") {
    auto a = rand64({3, 8, 8}), b = rand64({3, 8, 8});
    CHECK(loss::prediction_loss(a, b).item<double>() == loss::prediction_loss(b, a).item<double>());
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(loss::prediction_loss(torch::zeros({3, 4, 4}), torch::zeros({3, 4, 5})), Error);
  }
}

TEST_CASE("gradient_loss") {
  torch::manual_seed(2);
  SUBCASE("spatially constant images give zero") {
    CHECK(loss::gradient_loss(torch::full({3, 8, 8}, 0.3), torch::full({3, 8, 8}, 0.9)).item<double>() == 0.0);
  }
  SUBCASE("identity is zero") {
    auto a = torch::rand({3, 16, 16});
    CHECK(loss::gradient_loss(a, a, 1).item<double>() == 0.0);
    CHECK(loss::gradient_loss(a, a, 2).item<double>() == 0.0);
  }
  SUBCASE("1x4x4 matches the double-loop oracle") {
    auto p = rand64({1, 4, 4}), t = rand64({1, 4, 4});
    CHECK(std::abs(loss::gradient_loss(p, t, 1).item<double>() - oracle::gradient_difference(p, t, 1)) <= 1e-7);
  }
  SUBCASE("hand-computed 1x2x2") {
    // target edges: vertical |3-1|=2, |4-2|=2; horizontal |1-2|=1, |3-4|=1. pred is flat.
    auto t = torch::tensor({1.0, 2.0, 3.0, 4.0}, torch::kFloat64).view({1, 2, 2});
    auto p = torch::zeros({1, 2, 2}, torch::kFloat64);
    CHECK(loss::gradient_loss(p, t, 1).item<double>() == doctest::Approx(3.0));
    CHECK(loss::gradient_loss(p, t, 2).item<double>() == doctest::Approx(5.0));
    CHECK(loss::gradient_loss(p, t, 1, Reduction::sum).item<double>() == doctest::Approx(6.0));
  }
  SUBCASE("border columns add no fabricated edge") {
    // A single bright column at the border: the only edges are the interior ones.
    auto t = torch::zeros({1, 4, 4}, torch::kFloat64);
    t.select(2, 0).fill_(1.0);
    auto p = torch::zeros_like(t);
    CHECK(loss::gradient_loss(p, t, 1).item<double>() == doctest::Approx(4.0 / 12.0));
  }
  SUBCASE("symmetric and non-negative") {
    for (int i = 0; i < 10; ++i) {
      auto a = rand64({2, 6, 6}), b = rand64({2, 6, 6});
      for (int alpha : {1, 2, 3}) {
        const double ab = loss::gradient_loss(a, b, alpha).item<double>();
        CHECK(ab == doctest::Approx(loss::gradient_loss(b, a, alpha).item<double>()).epsilon(1e-12));
        CHECK(ab >= 0.0);
      }
    }
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(loss::gradient_loss(torch::zeros({4, 4}), torch::zeros({4, 4}), 0), Error);
    CHECK_THROWS_AS(loss::gradient_loss(torch::zeros({4, 4}), torch::zeros({5, 4}), 1), Error);
  }
}

TEST_CASE("feature_inconsistency_map") {
  torch::manual_seed(3);
  SUBCASE("identity, antipodal, orthogonal") {
    auto f = torch::randn({8, 3, 3}) + 0.1;
    CHECK(loss::feature_inconsistency_map(f, f).abs().max().item<double>() <= 1e-6);
    CHECK((loss::feature_inconsistency_map(f, -f) - 2.0).abs().max().item<double>() <= 1e-6);
    auto a = torch::zeros({2, 1, 1}), b = torch::zeros({2, 1, 1});
    a[0][0][0] = 1.0;
    b[1][0][0] = 3.0;
    CHECK(loss::feature_inconsistency_map(a, b)[0][0].item<double>() == doctest::Approx(1.0));
  }
  SUBCASE("zero vectors give the neutral value") {
    auto z = torch::zeros({4, 2, 2});
    CHECK((loss::feature_inconsistency_map(z, torch::randn({4, 2, 2})) - 1.0).abs().max().item<double>() == 0.0);
  }
  SUBCASE("batched input") {
    auto s = torch::randn({3, 5, 2, 2}), t = torch::randn({3, 5, 2, 2});
    auto map = loss::feature_inconsistency_map(s, t);
    CHECK(map.sizes() == torch::IntArrayRef{3, 2, 2});
    CHECK(torch::allclose(map[1], loss::feature_inconsistency_map(s[1], t[1])));
  }
  SUBCASE("range [0, 2]") {
    for (int i = 0; i < 20; ++i) {
      auto map = loss::feature_inconsistency_map(torch::randn({16, 4, 4}), torch::randn({16, 4, 4}));
      CHECK(map.min().item<double>() >= -1e-6);
      CHECK(map.max().item<double>() <= 2.0 + 1e-6);
    }
  }
  SUBCASE("teacher side gets no gradient") {
    auto s = torch::randn({4, 2, 2}, torch::requires_grad());
    auto t = torch::randn({4, 2, 2}, torch::requires_grad());
    loss::feature_inconsistency_map(s, t).sum().backward();
    CHECK(s.grad().defined());
    CHECK(!t.grad().defined());
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(loss::feature_inconsistency_map(torch::zeros({4, 2, 2}), torch::zeros({4, 2, 3})), Error);
  }
}

TEST_CASE("feature_inconsistency_loss") {
  torch::manual_seed(4);
  auto f = torch::randn({8, 2, 2});
  CHECK(loss::feature_inconsistency_loss({{f, f}, {f * 2, f}}).item<double>() == doctest::Approx(0.0).epsilon(1e-6));

  SUBCASE("K=2 block means 0.2 and 0.4") {
    // Maps constant 0.2 / 0.4: cos = 0.8 / 0.6 between unit vectors.
    auto t = torch::zeros({2, 2, 2});
    t[0].fill_(1.0);
    auto s1 = torch::zeros({2, 2, 2});
    s1[0].fill_(0.8);
    s1[1].fill_(0.6);
    auto s2 = torch::zeros({2, 2, 2});
    s2[0].fill_(0.6);
    s2[1].fill_(0.8);
    CHECK(loss::feature_inconsistency_loss({{s1, t}, {s2, t}}).item<double>() == doctest::Approx(0.3).epsilon(1e-6));
  }
  SUBCASE("K=1 equals the block's spatial mean") {
    auto s = torch::randn({4, 3, 3}), t = torch::randn({4, 3, 3});
    CHECK(loss::feature_inconsistency_loss({{s, t}}).item<double>() ==
          loss::feature_inconsistency_map(s, t).mean().item<double>());
  }
  SUBCASE("empty") { CHECK_THROWS_AS(loss::feature_inconsistency_loss({}), Error); }
}

TEST_CASE("oracle equivalence on random small tensors") {
  torch::manual_seed(5);
  double worst = 0;
  for (int i = 0; i < 100; ++i) {
    const int64_t c = 1 + i % 3, h = 2 + i % 7, w = 2 + (i * 5) % 7;
    auto p = rand64({c, h, w}), t = rand64({c, h, w});
    const int alpha = 1 + i % 3;
    worst = std::max(worst, std::abs(loss::gradient_loss(p, t, alpha).item<double>() -
                                     oracle::gradient_difference(p, t, alpha)));
    worst = std::max(worst, std::abs(loss::prediction_loss(p, t).item<double>() - oracle::mse(p, t)));
    auto fs = torch::randn({c * 4, h, w}, torch::kFloat64), ft = torch::randn({c * 4, h, w}, torch::kFloat64);
    auto map = loss::feature_inconsistency_map(fs, ft).contiguous();
    const auto expected = oracle::inconsistency_map(fs, ft);
    for (std::size_t k = 0; k < expected.size(); ++k) {
      worst = std::max(worst, std::abs(map.view(-1)[static_cast<int64_t>(k)].item<double>() - expected[k]));
    }
  }
  CHECK(worst <= 1e-6);
}

TEST_CASE("analytic gradients match finite differences") {
  torch::manual_seed(6);
  auto check = [](const std::function<torch::Tensor(const torch::Tensor&)>& f, torch::Tensor x) {
    x = x.to(torch::kFloat64).requires_grad_(true);
    f(x).backward();
    const auto analytic = x.grad().clone();
    const auto numeric = oracle::numeric_gradient(
        [&](const torch::Tensor& v) { return f(v).item<double>(); }, x.detach());
    return oracle::max_relative_error(analytic, numeric);
  };
  auto target = rand64({1, 4, 4});
  CHECK(check([&](const torch::Tensor& p) { return loss::prediction_loss(p, target); }, rand64({1, 4, 4})) <= 1e-4);
  CHECK(check([&](const torch::Tensor& p) { return loss::gradient_loss(p, target, 2); }, rand64({1, 4, 4})) <= 1e-4);
  auto ft = torch::randn({6, 4, 4}, torch::kFloat64);
  CHECK(check([&](const torch::Tensor& fs) { return loss::feature_inconsistency_loss({{fs, ft}}); },
              torch::randn({6, 4, 4}, torch::kFloat64)) <= 1e-4);
}

TEST_CASE("weighted total") {
  auto scalar = [](double v) { return torch::tensor(v, torch::kFloat64); };
  loss::LossWeights defaults;
  SUBCASE("default weights, unit terms") {
    auto out = loss::total_loss({scalar(1), scalar(1), scalar(1)}, defaults);
    CHECK(out.breakdown.total == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("direct arithmetic") {
    auto out = loss::total_loss({scalar(2), scalar(0.5), scalar(1.5)}, defaults);
    CHECK(out.breakdown.total == doctest::Approx(1.75).epsilon(1e-12));
    CHECK(out.breakdown.L_e == 2.0);
    CHECK(out.breakdown.L_g == 0.5);
    CHECK(out.breakdown.L_c == 1.5);
  }
  SUBCASE("lambda (1, 0, 0)") {
    auto out = loss::total_loss({scalar(0.42), scalar(3), scalar(5)}, {1, 0, 0, 1});
    CHECK(out.breakdown.total == doctest::Approx(0.42).epsilon(1e-12));
  }
  SUBCASE("modes") {
    auto ae = loss::total_loss({scalar(2), scalar(0.5), scalar(1.5)}, defaults, model::Mode::AE_only);
    CHECK(ae.breakdown.total == doctest::Approx(0.7 * 2 + 0.1 * 0.5).epsilon(1e-12));
    CHECK(ae.breakdown.L_c == 0.0);
    auto kd = loss::total_loss({scalar(2), scalar(0.5), scalar(1.5)}, defaults, model::Mode::KD_only);
    CHECK(kd.breakdown.total == doctest::Approx(0.2 * 1.5).epsilon(1e-12));
  }
  SUBCASE("breakdown invariant on random terms") {
    torch::manual_seed(7);
    for (int i = 0; i < 20; ++i) {
      auto v = torch::rand({6}, torch::kFloat64);
      loss::LossWeights w{v[0].item<double>(), v[1].item<double>(), v[2].item<double>(), 1};
      auto out = loss::total_loss({v[3], v[4], v[5]}, w);
      const double expected = w.lambda_e * out.breakdown.L_e + w.lambda_g * out.breakdown.L_g +
                              w.lambda_c * out.breakdown.L_c;
      CHECK(out.breakdown.total == doctest::Approx(expected).epsilon(1e-6));
    }
  }
  SUBCASE("validation") {
    CHECK_THROWS_AS((loss::LossWeights{0, 0, 0, 1}.validate()), ConfigError);
    CHECK_THROWS_AS((loss::LossWeights{0.7, 0.1, 0.2, 0}.validate()), ConfigError);
    CHECK_THROWS_AS((loss::LossWeights{-1, 0.1, 0.2, 1}.validate()), ConfigError);
    CHECK_NOTHROW(defaults.validate());
  }
}
