#pragma once

#include "segkc/tensor.hpp"

namespace segkc {

/// Weights of the three loss terms in the training objective.
struct LossWeights {
    real lambda1 = 1.0;  // supervised
    real lambda2 = 1.0;  // cross consistency
    real lambda3 = 1.0;  // distillation

    void validate() const;
};

struct Thresholds {
    real conf_tau = 0.95;       // pseudo-label confidence threshold
    real kd_temperature = 2.0;  // distillation softmax temperature
};

/// Per-term loss values for one step. total combines the terms as
/// lambda1 * 0.5*(sup_sr + sup_jr) + lambda2 * 0.5*(con_sr + con_jr) + lambda3 * kd.
/// masked_fraction is the share of unlabeled pixels suppressed by the
/// confidence masks (averaged over both branches' pseudo-labels).
struct LossReport {
    Tensor sup_sr, sup_jr;
    Tensor con_sr, con_jr;
    Tensor kd;
    Tensor total;
    real masked_fraction = 0;
};

struct PseudoLabels {
    IntMap labels;
    BoolMap mask;
};

constexpr int kIgnoreIndex = 255;

/// Mean cross-entropy between softmax(logits) and integer labels over the
/// pixels whose label differs from ignore_index. Ignored pixels contribute
/// exactly nothing to the value or the gradient. All pixels ignored -> 0.
Tensor supervised_loss(const Tensor& logits, const IntMap& labels,
                       int ignore_index = kIgnoreIndex);

/// Hard per-pixel argmax labels from detached logits, plus a confidence mask
/// that keeps pixels whose max softmax probability reaches conf_tau.
PseudoLabels make_pseudo_labels(const Tensor& logits, real conf_tau);

/// Cross-entropy of logits against a peer's pseudo-labels, averaged over
/// mask-true pixels; exactly 0 (constant, no gradients) when the mask is empty.
Tensor consistency_loss(const Tensor& logits, const PseudoLabels& pseudo);

/// Mean over all pixels of KL(p_senior || p_junior) with both distributions
/// from temperature softmax, computed from log-probabilities. The senior side
/// is detached when detach_target is set (teacher role).
Tensor kd_loss(const Tensor& senior_logits, const Tensor& junior_logits, real temperature,
               bool detach_target = true);

/// Weighted aggregation of per-branch terms into the training objective.
LossReport total_loss(const Tensor& sup_sr, const Tensor& sup_jr, const Tensor& con_sr,
                      const Tensor& con_jr, const Tensor& kd, const LossWeights& weights);

}  // namespace segkc
