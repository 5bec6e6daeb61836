#pragma once

#include <vector>

#include "pdc/tensor.hpp"

namespace pdc {

struct DualPrediction;  // volnet.hpp

// Per-iteration loss record. supervised/consistency/decoupling hold the
// unweighted loss values; lambda_c/lambda_pd the ramp weights applied to
// the consistency and decoupling terms at that iteration.
struct LossBundle {
    double supervised = 0.0;
    double consistency = 0.0;
    double decoupling = 0.0;
    double lambda_c = 0.0;
    double lambda_pd = 0.0;
};

// Soft Dice loss on the foreground class(es):
//   1 - (2*sum(p*g) + smooth) / (sum(p) + sum(g) + smooth)
// averaged over the non-background classes. probs and target share the
// shape (num_classes, spatial...), target is one-hot. With *grad given,
// d(loss)/d(probs) is written there (same shape as probs).
double soft_dice_loss(const Tensor& probs, const Tensor& target, double smooth = 1e-5,
                      Tensor* grad = nullptr);

// Mean over voxels of -sum_c g_c log p_c, probabilities clamped to
// [clamp, 1] before the log.
double cross_entropy_loss(const Tensor& probs, const Tensor& target, double clamp = 1e-7,
                          Tensor* grad = nullptr);

// (1/2) * sum over heads of [Dice + CE] for one labeled sample. Gradients
// w.r.t. each head's probabilities are written to *grad1/*grad2 when given.
double supervised_loss(const DualPrediction& pred, const Tensor& target,
                       Tensor* grad1 = nullptr, Tensor* grad2 = nullptr);

// Mean squared error between the two heads' probability maps.
double consistency_loss(const Tensor& probs1, const Tensor& probs2,
                        Tensor* grad1 = nullptr, Tensor* grad2 = nullptr);

// Cosine of each paired flattened tensor, with an epsilon guard on both
// norms. Throws PairingError on shape incongruence.
std::vector<double> paired_cosines(const std::vector<const Tensor*>& head1,
                                   const std::vector<const Tensor*>& head2,
                                   double eps = 1e-12);

// Mean over paired layers of the squared cosine between the flattened
// parameter tensors of the two heads. Gradients (same shapes as the
// inputs) are accumulated into *grad1/*grad2 when given.
double decoupling_loss(const std::vector<const Tensor*>& head1,
                       const std::vector<const Tensor*>& head2,
                       std::vector<Tensor>* grad1 = nullptr,
                       std::vector<Tensor>* grad2 = nullptr, double eps = 1e-12);

// Gaussian warm-up: scale * exp(-5 * (1 - min(t, t_max)/t_max)^2),
// clamped at scale for t >= t_max. Used for both the consistency and the
// decoupling weight, each with its own scale.
double ramp_weight(int64_t t, int64_t t_max, double scale = 0.1);

}  // namespace pdc
