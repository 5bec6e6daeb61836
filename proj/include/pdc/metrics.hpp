#pragma once

#include <utility>
#include <vector>

#include "pdc/tensor.hpp"
#include "pdc/volnet.hpp"

namespace pdc {

enum class PercentileMethod { linear, nearest_rank };

struct MetricsReport {
    double dice = 0.0;
    double jaccard = 0.0;
    double asd = 0.0;   // NaN when no case had both surfaces
    double hd95 = 0.0;  // same
    double cd = 0.0;
    double qcd = 0.0;
    int n_cases = 0;
    int n_surface_cases = 0;  // cases contributing to asd/hd95
    Spacing spacing{1.0, 1.0, 1.0};
};

double dice_score(const Mask& pred, const Mask& gt);
double jaccard_score(const Mask& pred, const Mask& gt);

// Foreground voxels with at least one 6-connected background or
// out-of-bounds neighbor, in lexicographic (d, h, w) scan order.
std::vector<Dims3> extract_surface(const Mask& mask);

// Pooled bidirectional directed surface distances: asd is their mean, hd95
// their 95th percentile. Throws EmptyMaskError when either mask is empty.
std::pair<double, double> surface_distances(const Mask& pred, const Mask& gt,
                                            const Spacing& spacing = {1.0, 1.0, 1.0},
                                            PercentileMethod method = PercentileMethod::linear);

// p in [0, 100] over an unsorted sample.
double percentile(std::vector<double> values, double p,
                  PercentileMethod method = PercentileMethod::linear);

// Layer-wise mean cosine and mean squared cosine of paired head parameters.
std::pair<double, double> coupling_metrics(const std::vector<const Tensor*>& head1_params,
                                           const std::vector<const Tensor*>& head2_params);

struct EvalCase {
    Tensor volume;  // (in_channels, D, H, W)
    Mask gt;
};

// Per-case metrics for already-computed predictions, averaged arithmetically.
// Cases where either mask is empty contribute to dice/jaccard but are
// skipped for the surface metrics (counted by n_surface_cases).
MetricsReport evaluate_masks(const std::vector<std::pair<Mask, Mask>>& pred_gt,
                             const Spacing& spacing = {1.0, 1.0, 1.0},
                             PercentileMethod method = PercentileMethod::linear);

// Sliding-window inference per case followed by evaluate_masks; coupling
// metrics of the supplied parameters are attached to the report.
MetricsReport evaluate(const ParameterStore& params, const std::vector<EvalCase>& cases,
                       const Dims3& window, const Dims3& stride,
                       const Spacing& spacing = {1.0, 1.0, 1.0},
                       PercentileMethod method = PercentileMethod::linear);

}  // namespace pdc
