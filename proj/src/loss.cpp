#include "pkgnet/loss.hpp"

#include "pkgnet/error.hpp"

namespace pkgnet::loss {

namespace {

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) {
    std::ostringstream msg;
    msg << what << ": shape mismatch " << a.sizes() << " vs " << b.sizes();
    throw Error(msg.str(), "loss");
  }
}

torch::Tensor reduce(const torch::Tensor& t, Reduction reduction) {
  return reduction == Reduction::mean ? t.mean() : t.sum();
}

double scalar(const torch::Tensor& t) { return t.defined() ? t.item<double>() : 0.0; }

}  // namespace

torch::Tensor prediction_loss(const torch::Tensor& pred, const torch::Tensor& target, Reduction reduction) {
  require_same_shape(pred, target, "prediction_loss");
  return reduce((pred - target).square(), reduction);
}

torch::Tensor gradient_loss(const torch::Tensor& pred, const torch::Tensor& target, int alpha, Reduction reduction) {
  require_same_shape(pred, target, "gradient_loss");
  if (alpha < 1) throw Error("gradient_loss: alpha must be >= 1", "loss");
  if (pred.dim() < 2) throw Error("gradient_loss: need at least two spatial dimensions", "loss");
  const int64_t h = pred.dim() - 2;
  const int64_t w = pred.dim() - 1;

  auto edge = [](const torch::Tensor& img, int64_t dim) {
    const int64_t n = img.size(dim);
    return (img.narrow(dim, 1, n - 1) - img.narrow(dim, 0, n - 1)).abs();
  };
  auto vertical = (edge(target, h) - edge(pred, h)).abs().pow(alpha);
  auto horizontal = (edge(target, w) - edge(pred, w)).abs().pow(alpha);
  if (reduction == Reduction::sum) return vertical.sum() + horizontal.sum();

  auto total = torch::zeros({}, pred.options());
  if (vertical.numel() > 0) total = total + vertical.mean();
  if (horizontal.numel() > 0) total = total + horizontal.mean();
  return total;
}

torch::Tensor feature_inconsistency_map(const torch::Tensor& student, const torch::Tensor& teacher) {
  require_same_shape(student, teacher, "feature_inconsistency_map");
  if (student.dim() != 3 && student.dim() != 4) {
    throw Error("feature_inconsistency_map: expected (C, M, N) or (B, C, M, N)", "loss");
  }
  const int64_t channel = student.dim() - 3;
  const auto t = teacher.detach();
  const auto dot = (student * t).sum(channel);
  const auto norms_sq = student.square().sum(channel) * t.square().sum(channel);
  const auto denom = norms_sq.clamp_min(kCosineEps * kCosineEps).sqrt();
  return 1.0 - dot / denom;
}

torch::Tensor feature_inconsistency_loss(const std::vector<std::pair<torch::Tensor, torch::Tensor>>& taps) {
  if (taps.empty()) throw Error("feature_inconsistency_loss: empty tap list", "loss");
  torch::Tensor total;
  for (const auto& [fs, ft] : taps) {
    auto block = feature_inconsistency_map(fs, ft).mean();
    total = total.defined() ? total + block : block;
  }
  return total / static_cast<double>(taps.size());
}

void LossWeights::validate() const {
  std::vector<std::string> problems;
  if (alpha < 1) problems.push_back("loss.alpha must be >= 1");
  if (lambda_e < 0 || lambda_g < 0 || lambda_c < 0) problems.push_back("loss lambdas must be >= 0");
  if (!(lambda_e > 0 || lambda_g > 0 || lambda_c > 0)) problems.push_back("at least one loss lambda must be > 0");
  if (!problems.empty()) throw ConfigError(problems);
}

LossWeights LossWeights::for_mode(model::Mode mode) const {
  LossWeights w = *this;
  if (mode == model::Mode::AE_only) w.lambda_c = 0.0;
  if (mode == model::Mode::KD_only) w.lambda_e = w.lambda_g = 0.0;
  return w;
}

WeightedLoss total_loss(const LossTerms& terms, const LossWeights& weights, model::Mode mode) {
  const auto w = weights.for_mode(mode);
  WeightedLoss out;
  auto add = [&](const torch::Tensor& term, double lambda) {
    if (!term.defined() || lambda == 0.0) return;
    auto weighted = term * lambda;
    out.total = out.total.defined() ? out.total + weighted : weighted;
  };
  add(terms.L_e, w.lambda_e);
  add(terms.L_g, w.lambda_g);
  add(terms.L_c, w.lambda_c);
  if (!out.total.defined()) {
    throw Error("loss weights leave no active term for mode " + model::to_string(mode), "loss");
  }
  out.breakdown.L_e = scalar(terms.L_e);
  out.breakdown.L_g = scalar(terms.L_g);
  out.breakdown.L_c = mode == model::Mode::AE_only ? 0.0 : scalar(terms.L_c);
  out.breakdown.total = out.total.item<double>();
  return out;
}

LossTerms compute_terms(const model::ForwardOutput& out, const LossWeights& weights, Reduction reduction) {
  LossTerms terms;
  terms.L_e = prediction_loss(out.prediction, out.target, reduction);
  terms.L_g = gradient_loss(out.prediction, out.target, weights.alpha, reduction);
  if (!out.student_taps.empty()) {
    std::vector<std::pair<torch::Tensor, torch::Tensor>> pairs;
    for (const auto& [block, fs] : out.student_taps) pairs.emplace_back(fs, out.teacher_taps.at(block));
    terms.L_c = feature_inconsistency_loss(pairs);
  }
  return terms;
}

}  // namespace pkgnet::loss
