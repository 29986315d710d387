#pragma once

#include <span>

#include "acmil/attention.hpp"
#include "acmil/model.hpp"

namespace acmil {

/// Log arguments are clamped below at this value.
inline constexpr double kLogFloor = 1e-12;

struct LossBreakdown {
  double l_b = 0.0;  // bag classifier cross-entropy
  double l_p = 0.0;  // mean branch classifier cross-entropy
  double l_d = 0.0;  // mean pairwise heatmap cosine
  double total = 0.0;
};

struct LossOptions {
  bool diversity = true;
};

/// -(1/M) sum_i log p_i[label].
double branch_loss(std::span<const Vector> branch_probs, int label);

/// 2/(M(M-1)) sum_{i<j} cos(a_i, a_j); 0 when M = 1.
double diversity_loss(std::span<const Vector> branch_attns);

/// -log p[label].
double bag_loss(const Vector& bag_probs, int label);

/// Sum of the three terms, computed from post-mask attention.
LossBreakdown total_loss(const ForwardTrace& trace, int label, const LossOptions& opts = {});

/// Analytic gradient of total_loss with respect to every parameter. The masks
/// recorded in the trace are constants; the renormalization of surviving
/// attention is differentiated. Throws NumericalError naming the tensor if a
/// gradient is not finite.
Gradients backward(const ForwardTrace& trace, const Bag& bag, const Model& model,
                   const LossOptions& opts = {});

/// Pooling baselines train on the bag cross-entropy only.
LossBreakdown pooling_loss(const PoolingTrace& trace, int label);
Gradients pooling_backward(const PoolingTrace& trace, const Bag& bag, const Model& model);

/// Mean pairwise cosine between branch heatmaps (the diversity term without
/// its role in the objective); 0 when M = 1.
double mean_pairwise_cosine(std::span<const Vector> branch_attns);

}  // namespace acmil
