#include "pdc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "pdc/errors.hpp"
#include "pdc/json_io.hpp"
#include "pdc/objectives.hpp"

namespace pdc {

namespace {

void check_same_shape(const Mask& a, const Mask& b, const char* op) {
    if (a.shape != b.shape)
        throw ShapeError(std::string(op) + ": mask shapes differ, (" +
                         std::to_string(a.shape[0]) + "," + std::to_string(a.shape[1]) + "," +
                         std::to_string(a.shape[2]) + ") vs (" + std::to_string(b.shape[0]) + "," +
                         std::to_string(b.shape[1]) + "," + std::to_string(b.shape[2]) + ")");
}

int64_t intersection_count(const Mask& a, const Mask& b) {
    int64_t n = 0;
    for (size_t i = 0; i < a.v.size(); ++i)
        if (a.v[i] && b.v[i]) ++n;
    return n;
}

}  // namespace

double dice_score(const Mask& pred, const Mask& gt) {
    check_same_shape(pred, gt, "dice_score");
    const int64_t na = pred.count(), nb = gt.count();
    if (na + nb == 0) return 1.0;
    return 2.0 * static_cast<double>(intersection_count(pred, gt)) /
           static_cast<double>(na + nb);
}

double jaccard_score(const Mask& pred, const Mask& gt) {
    check_same_shape(pred, gt, "jaccard_score");
    const int64_t na = pred.count(), nb = gt.count();
    if (na + nb == 0) return 1.0;
    const int64_t inter = intersection_count(pred, gt);
    return static_cast<double>(inter) / static_cast<double>(na + nb - inter);
}

std::vector<Dims3> extract_surface(const Mask& mask) {
    if (mask.count() == 0) throw EmptyMaskError("extract_surface: mask is empty");
    const int64_t D = mask.shape[0], H = mask.shape[1], W = mask.shape[2];
    std::vector<Dims3> surface;
    for (int64_t d = 0; d < D; ++d)
        for (int64_t h = 0; h < H; ++h)
            for (int64_t w = 0; w < W; ++w) {
                if (!mask.at(d, h, w)) continue;
                const bool boundary =
                    d == 0 || !mask.at(d - 1, h, w) || d == D - 1 || !mask.at(d + 1, h, w) ||
                    h == 0 || !mask.at(d, h - 1, w) || h == H - 1 || !mask.at(d, h + 1, w) ||
                    w == 0 || !mask.at(d, h, w - 1) || w == W - 1 || !mask.at(d, h, w + 1);
                if (boundary) surface.push_back(Dims3{d, h, w});
            }
    return surface;
}

double percentile(std::vector<double> values, double p, PercentileMethod method) {
    if (values.empty()) throw Error("percentile: empty sample");
    if (p < 0.0 || p > 100.0) throw ConfigError("percentile: p must be in [0, 100]");
    std::sort(values.begin(), values.end());
    const size_t n = values.size();
    if (method == PercentileMethod::nearest_rank) {
        const size_t rank =
            static_cast<size_t>(std::ceil(p / 100.0 * static_cast<double>(n)));
        return values[rank > 0 ? rank - 1 : 0];
    }
    const double pos = p / 100.0 * static_cast<double>(n - 1);
    const size_t lo = static_cast<size_t>(pos);
    if (lo + 1 >= n) return values[n - 1];
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (values[lo + 1] - values[lo]);
}

namespace {

// directed min distances from each point of `from` to the `to` set
void directed_distances(const std::vector<Dims3>& from, const std::vector<Dims3>& to,
                        const Spacing& sp, std::vector<double>& out) {
    for (const auto& a : from) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& b : to) {
            const double dd = static_cast<double>(a[0] - b[0]) * sp[0];
            const double dh = static_cast<double>(a[1] - b[1]) * sp[1];
            const double dw = static_cast<double>(a[2] - b[2]) * sp[2];
            const double sq = dd * dd + dh * dh + dw * dw;
            if (sq < best) best = sq;
        }
        out.push_back(std::sqrt(best));
    }
}

}  // namespace

std::pair<double, double> surface_distances(const Mask& pred, const Mask& gt, const Spacing& sp,
                                            PercentileMethod method) {
    check_same_shape(pred, gt, "surface_distances");
    for (double s : sp)
        if (!(s > 0.0)) throw ConfigError("surface_distances: spacing must be positive");
    const auto sp_pts = extract_surface(pred);
    const auto sg_pts = extract_surface(gt);

    std::vector<double> pooled;
    pooled.reserve(sp_pts.size() + sg_pts.size());
    directed_distances(sp_pts, sg_pts, sp, pooled);
    directed_distances(sg_pts, sp_pts, sp, pooled);

    double sum = 0.0;
    for (double v : pooled) sum += v;
    const double asd = sum / static_cast<double>(pooled.size());
    const double hd95 = percentile(pooled, 95.0, method);
    return {asd, hd95};
}

std::pair<double, double> coupling_metrics(const std::vector<const Tensor*>& head1_params,
                                           const std::vector<const Tensor*>& head2_params) {
    const std::vector<double> cosines = paired_cosines(head1_params, head2_params);
    double cd = 0.0, qcd = 0.0;
    for (double c : cosines) {
        cd += c;
        qcd += c * c;
    }
    const double k = static_cast<double>(cosines.size());
    return {cd / k, qcd / k};
}

MetricsReport evaluate_masks(const std::vector<std::pair<Mask, Mask>>& pred_gt,
                             const Spacing& spacing, PercentileMethod method) {
    if (pred_gt.empty()) throw DataError("evaluate_masks: no cases");
    MetricsReport r;
    r.spacing = spacing;
    r.n_cases = static_cast<int>(pred_gt.size());
    double asd_sum = 0.0, hd_sum = 0.0;
    for (const auto& [pred, gt] : pred_gt) {
        r.dice += dice_score(pred, gt);
        r.jaccard += jaccard_score(pred, gt);
        if (pred.count() > 0 && gt.count() > 0) {
            const auto [asd, hd95] = surface_distances(pred, gt, spacing, method);
            asd_sum += asd;
            hd_sum += hd95;
            ++r.n_surface_cases;
        }
    }
    r.dice /= static_cast<double>(r.n_cases);
    r.jaccard /= static_cast<double>(r.n_cases);
    if (r.n_surface_cases > 0) {
        r.asd = asd_sum / static_cast<double>(r.n_surface_cases);
        r.hd95 = hd_sum / static_cast<double>(r.n_surface_cases);
    } else {
        r.asd = std::numeric_limits<double>::quiet_NaN();
        r.hd95 = std::numeric_limits<double>::quiet_NaN();
    }
    return r;
}

MetricsReport evaluate(const ParameterStore& params, const std::vector<EvalCase>& cases,
                       const Dims3& window, const Dims3& stride, const Spacing& spacing,
                       PercentileMethod method) {
    if (cases.empty()) throw DataError("evaluate: test set is empty");
    std::vector<std::pair<Mask, Mask>> pred_gt;
    pred_gt.reserve(cases.size());
    for (const auto& c : cases)
        pred_gt.emplace_back(infer_mask(params, c.volume, window, stride), c.gt);
    MetricsReport r = evaluate_masks(pred_gt, spacing, method);
    const auto f1 = flatten_layers(params, layer_groups(params, ParamGroup::head1));
    const auto f2 = flatten_layers(params, layer_groups(params, ParamGroup::head2));
    std::vector<const Tensor*> p1(f1.size()), p2(f2.size());
    for (size_t i = 0; i < f1.size(); ++i) p1[i] = &f1[i];
    for (size_t i = 0; i < f2.size(); ++i) p2[i] = &f2[i];
    const auto [cd, qcd] = coupling_metrics(p1, p2);
    r.cd = cd;
    r.qcd = qcd;
    return r;
}

void to_json(nlohmann::json& j, const MetricsReport& r) {
    j = nlohmann::json{{"dice", r.dice},
                       {"jaccard", r.jaccard},
                       {"asd", r.asd},
                       {"hd95", r.hd95},
                       {"cd", r.cd},
                       {"qcd", r.qcd},
                       {"n_cases", r.n_cases},
                       {"n_surface_cases", r.n_surface_cases},
                       {"spacing", r.spacing}};
}

}  // namespace pdc
