#pragma once

#include <vector>

#include "augopt/tensor.hpp"

namespace augopt {

// Scalar loss plus exact analytic gradient wrt logits. per_sample holds the
// unweighted per-sample loss values (needed by the hypergradient probes).
struct LossResult {
    double value = 0.0;
    Tensor dlogits;
    std::vector<double> per_sample;
};

// Mean over pixels and samples of w_i * CE(softmax(logits), labels).
// sample_weights length n; labels in {0..c-1}.
LossResult loss_ce(const Tensor& logits, const LabelMap& labels,
                   const std::vector<double>& sample_weights);

// 1 - mean-over-classes soft DSC on softmax probabilities; smoothing 1.0 in
// numerator and denominator. Dice couples pixels, so per-sample weighting is
// value-only here (weights scale each sample's contribution to the mean).
LossResult loss_soft_dice(const Tensor& logits, const LabelMap& labels,
                          const std::vector<double>& sample_weights);

// Equal combination of the two above.
LossResult loss_ce_dice(const Tensor& logits, const LabelMap& labels,
                        const std::vector<double>& sample_weights);

// Value-only soft DSC loss on an already-softmaxed probability map
// [c, H, W] against labels [H, W]; used when scoring reverted test-time
// prediction maps where no gradient is needed.
double soft_dice_loss_prob(const Tensor& prob, const LabelMap& labels);

// Value-only cross-entropy on a probability map [c, H, W]; probabilities
// are clamped away from zero before the log.
double ce_loss_prob(const Tensor& prob, const LabelMap& labels);

// softmax over the class axis of [n, c, H, W] (or [c, H, W]).
Tensor softmax_classes(const Tensor& logits);

}  // namespace augopt
