#include "pdc/objectives.hpp"

#include <algorithm>
#include <cmath>

#include "pdc/errors.hpp"
#include "pdc/volnet.hpp"

namespace pdc {

namespace {

void require_class_pair(const Tensor& probs, const Tensor& target, const char* op) {
    if (!probs.same_shape(target))
        throw ShapeError(std::string(op) + ": probs shape " + shape_str(probs.shape) +
                         " does not match target shape " + shape_str(target.shape));
    if (probs.rank() < 1 || probs.dim(0) < 2)
        throw ShapeError(std::string(op) + ": expected a class axis of size >= 2, got shape " +
                         shape_str(probs.shape));
}

}  // namespace

double soft_dice_loss(const Tensor& probs, const Tensor& target, double smooth, Tensor* grad) {
    require_class_pair(probs, target, "soft_dice_loss");
    if (smooth <= 0.0) throw ConfigError("soft_dice_loss: smooth must be > 0");

    const int64_t classes = probs.dim(0);
    const int64_t vox = probs.numel() / classes;
    const double* p = probs.ptr();
    const double* g = target.ptr();
    if (grad) {
        *grad = Tensor::zeros(probs.shape);
    }

    // Foreground classes only; the mean over them reduces to class 1 for
    // the binary task.
    const int64_t nfg = classes - 1;
    double loss = 0.0;
    for (int64_t c = 1; c < classes; ++c) {
        const double* pc = p + c * vox;
        const double* gc = g + c * vox;
        double pg = 0.0, sp = 0.0, sg = 0.0;
        for (int64_t i = 0; i < vox; ++i) {
            pg += pc[i] * gc[i];
            sp += pc[i];
            sg += gc[i];
        }
        const double num = 2.0 * pg + smooth;
        const double den = sp + sg + smooth;
        loss += 1.0 - num / den;
        if (grad) {
            double* dc = grad->ptr() + c * vox;
            const double inv = 1.0 / (static_cast<double>(nfg) * den * den);
            for (int64_t i = 0; i < vox; ++i) dc[i] = (num - 2.0 * gc[i] * den) * inv;
        }
    }
    return loss / static_cast<double>(nfg);
}

double cross_entropy_loss(const Tensor& probs, const Tensor& target, double clamp, Tensor* grad) {
    require_class_pair(probs, target, "cross_entropy_loss");

    const int64_t classes = probs.dim(0);
    const int64_t vox = probs.numel() / classes;
    const double* p = probs.ptr();
    const double* g = target.ptr();
    if (grad) {
        *grad = Tensor::zeros(probs.shape);
    }

    double loss = 0.0;
    const double inv_vox = 1.0 / static_cast<double>(vox);
    for (int64_t c = 0; c < classes; ++c) {
        const double* pc = p + c * vox;
        const double* gc = g + c * vox;
        double* dc = grad ? grad->ptr() + c * vox : nullptr;
        for (int64_t i = 0; i < vox; ++i) {
            if (gc[i] == 0.0) continue;
            const double pv = std::min(std::max(pc[i], clamp), 1.0);
            loss -= gc[i] * std::log(pv);
            // The clamp makes the loss constant outside [clamp, 1].
            if (dc && pc[i] > clamp && pc[i] < 1.0) dc[i] = -gc[i] / pv * inv_vox;
        }
    }
    return loss * inv_vox;
}

double supervised_loss(const DualPrediction& pred, const Tensor& target, Tensor* grad1,
                       Tensor* grad2) {
    Tensor dd, dc;
    double loss = 0.0;

    double d1 = soft_dice_loss(pred.probs1, target, 1e-5, grad1 ? &dd : nullptr);
    double c1 = cross_entropy_loss(pred.probs1, target, 1e-7, grad1 ? &dc : nullptr);
    loss += 0.5 * (d1 + c1);
    if (grad1) {
        *grad1 = Tensor::zeros(pred.probs1.shape);
        for (int64_t i = 0; i < grad1->numel(); ++i)
            grad1->data[static_cast<size_t>(i)] =
                0.5 * (dd.data[static_cast<size_t>(i)] + dc.data[static_cast<size_t>(i)]);
    }

    double d2 = soft_dice_loss(pred.probs2, target, 1e-5, grad2 ? &dd : nullptr);
    double c2 = cross_entropy_loss(pred.probs2, target, 1e-7, grad2 ? &dc : nullptr);
    loss += 0.5 * (d2 + c2);
    if (grad2) {
        *grad2 = Tensor::zeros(pred.probs2.shape);
        for (int64_t i = 0; i < grad2->numel(); ++i)
            grad2->data[static_cast<size_t>(i)] =
                0.5 * (dd.data[static_cast<size_t>(i)] + dc.data[static_cast<size_t>(i)]);
    }
    return loss;
}

double consistency_loss(const Tensor& probs1, const Tensor& probs2, Tensor* grad1, Tensor* grad2) {
    if (!probs1.same_shape(probs2))
        throw ShapeError("consistency_loss: shape " + shape_str(probs1.shape) + " vs " +
                         shape_str(probs2.shape));

    const int64_t n = probs1.numel();
    const double* a = probs1.ptr();
    const double* b = probs2.ptr();
    double loss = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double d = a[i] - b[i];
        loss += d * d;
    }
    loss /= static_cast<double>(n);
    if (grad1) {
        *grad1 = Tensor::zeros(probs1.shape);
        double* d1 = grad1->ptr();
        const double s = 2.0 / static_cast<double>(n);
        for (int64_t i = 0; i < n; ++i) d1[i] = s * (a[i] - b[i]);
    }
    if (grad2) {
        *grad2 = Tensor::zeros(probs2.shape);
        double* d2 = grad2->ptr();
        const double s = 2.0 / static_cast<double>(n);
        for (int64_t i = 0; i < n; ++i) d2[i] = s * (b[i] - a[i]);
    }
    return loss;
}

std::vector<double> paired_cosines(const std::vector<const Tensor*>& head1,
                                   const std::vector<const Tensor*>& head2, double eps) {
    if (head1.empty() || head1.size() != head2.size())
        throw PairingError("paired_cosines: " + std::to_string(head1.size()) + " vs " +
                           std::to_string(head2.size()) + " tensors");
    std::vector<double> cos(head1.size());
    for (size_t k = 0; k < head1.size(); ++k) {
        const Tensor& a = *head1[k];
        const Tensor& b = *head2[k];
        if (!a.same_shape(b))
            throw PairingError("paired_cosines: layer " + std::to_string(k) + " shapes " +
                               shape_str(a.shape) + " vs " + shape_str(b.shape));
        double dot = 0.0, na2 = 0.0, nb2 = 0.0;
        for (int64_t i = 0; i < a.numel(); ++i) {
            const double av = a.data[static_cast<size_t>(i)];
            const double bv = b.data[static_cast<size_t>(i)];
            dot += av * bv;
            na2 += av * av;
            nb2 += bv * bv;
        }
        cos[k] = dot / ((std::sqrt(na2) + eps) * (std::sqrt(nb2) + eps));
    }
    return cos;
}

double decoupling_loss(const std::vector<const Tensor*>& head1,
                       const std::vector<const Tensor*>& head2, std::vector<Tensor>* grad1,
                       std::vector<Tensor>* grad2, double eps) {
    const std::vector<double> cos = paired_cosines(head1, head2, eps);
    const double K = static_cast<double>(cos.size());

    double loss = 0.0;
    for (double c : cos) loss += c * c;
    loss /= K;

    if (grad1 || grad2) {
        if (grad1) grad1->assign(head1.size(), Tensor());
        if (grad2) grad2->assign(head2.size(), Tensor());
        for (size_t k = 0; k < head1.size(); ++k) {
            const Tensor& a = *head1[k];
            const Tensor& b = *head2[k];
            double na2 = 0.0, nb2 = 0.0, dot = 0.0;
            for (int64_t i = 0; i < a.numel(); ++i) {
                const double av = a.data[static_cast<size_t>(i)];
                const double bv = b.data[static_cast<size_t>(i)];
                dot += av * bv;
                na2 += av * av;
                nb2 += bv * bv;
            }
            const double na = std::sqrt(na2), nb = std::sqrt(nb2);
            const double gna = na + eps, gnb = nb + eps;
            const double c = dot / (gna * gnb);
            const double coef = 2.0 * c / K;
            // d cos / da_i = b_i / (gna*gnb) - dot * (a_i/na) / (gna^2 * gnb)
            const double s1 = 1.0 / (gna * gnb);
            const double sa = na > 0.0 ? dot / (na * gna * gna * gnb) : 0.0;
            const double sb = nb > 0.0 ? dot / (nb * gnb * gnb * gna) : 0.0;
            if (grad1) {
                Tensor& ga = (*grad1)[k];
                ga = Tensor::zeros(a.shape);
                for (int64_t i = 0; i < a.numel(); ++i)
                    ga.data[static_cast<size_t>(i)] =
                        coef * (s1 * b.data[static_cast<size_t>(i)] -
                                sa * a.data[static_cast<size_t>(i)]);
            }
            if (grad2) {
                Tensor& gb = (*grad2)[k];
                gb = Tensor::zeros(b.shape);
                for (int64_t i = 0; i < b.numel(); ++i)
                    gb.data[static_cast<size_t>(i)] =
                        coef * (s1 * a.data[static_cast<size_t>(i)] -
                                sb * b.data[static_cast<size_t>(i)]);
            }
        }
    }
    return loss;
}

double ramp_weight(int64_t t, int64_t t_max, double scale) {
    if (t_max <= 0) throw ConfigError("ramp_weight: t_max must be > 0");
    if (t < 0) throw ConfigError("ramp_weight: t must be >= 0");
    const double r = static_cast<double>(std::min(t, t_max)) / static_cast<double>(t_max);
    const double u = 1.0 - r;
    return scale * std::exp(-5.0 * u * u);
}

}  // namespace pdc
