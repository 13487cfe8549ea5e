#pragma once

#include <utility>
#include <vector>

#include <torch/torch.h>

#include "pkgnet/model.hpp"

namespace pkgnet::loss {

enum class Reduction { mean, sum };

inline constexpr double kCosineEps = 1e-8;

// Squared prediction error. Mean over every element by default.
torch::Tensor prediction_loss(const torch::Tensor& pred, const torch::Tensor& target,
                              Reduction reduction = Reduction::mean);

// Gradient-difference loss over the last two (spatial) dimensions:
//   | |I(i,j) - I(i-1,j)| - |P(i,j) - P(i-1,j)| |^alpha    (vertical)
//   | |I(i,j-1) - I(i,j)| - |P(i,j-1) - P(i,j)| |^alpha    (horizontal)
// Each direction is reduced over the positions that have the neighbour, so
// border rows/columns contribute no fabricated edges. With Reduction::mean the
// result is mean(vertical) + mean(horizontal).
torch::Tensor gradient_loss(const torch::Tensor& pred, const torch::Tensor& target, int alpha = 1,
                            Reduction reduction = Reduction::mean);

// 1 - cos(f_s[:, m, n], f_t[:, m, n]) along the channel axis. Accepts (C, M, N)
// or (B, C, M, N) and returns (M, N) or (B, M, N). The teacher side is detached.
// An all-zero vector gives 1.
torch::Tensor feature_inconsistency_map(const torch::Tensor& student, const torch::Tensor& teacher);

// Mean over blocks of the spatial (and batch) mean of each inconsistency map.
torch::Tensor feature_inconsistency_loss(const std::vector<std::pair<torch::Tensor, torch::Tensor>>& taps);

struct LossWeights {
  double lambda_e = 0.7;
  double lambda_g = 0.1;
  double lambda_c = 0.2;
  int alpha = 1;

  void validate() const;
  // Zeroes the terms a training mode does not optimize.
  LossWeights for_mode(model::Mode mode) const;
  bool operator==(const LossWeights&) const = default;
};

struct LossBreakdown {
  double L_e = 0;
  double L_g = 0;
  double L_c = 0;
  double total = 0;
};

struct LossTerms {
  torch::Tensor L_e;
  torch::Tensor L_g;
  torch::Tensor L_c;  // undefined when no taps
};

struct WeightedLoss {
  torch::Tensor total;
  LossBreakdown breakdown;
};

WeightedLoss total_loss(const LossTerms& terms, const LossWeights& weights, model::Mode mode = model::Mode::PKG);

// All three terms from one forward pass.
LossTerms compute_terms(const model::ForwardOutput& out, const LossWeights& weights,
                        Reduction reduction = Reduction::mean);

}  // namespace pkgnet::loss
