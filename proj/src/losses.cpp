#include "augopt/losses.hpp"

#include <cmath>

#include "augopt/errors.hpp"

namespace augopt {

// Loss internals run in double so that finite-difference checks against the
// analytic gradients are not limited by f32 rounding; inputs and emitted
// gradients stay f32.

namespace {

void check_inputs(const Tensor& logits, const LabelMap& labels,
                  const std::vector<double>& w) {
    if (logits.rank() != 4)
        throw ConfigError("loss: logits must be [n,c,H,W], got " +
                          shape_str(logits.shape));
    const int n = logits.dim(0), H = logits.dim(2), W = logits.dim(3);
    if (labels.shape != std::vector<int>{n, H, W})
        throw ConfigError("loss: labels shape mismatch, got " +
                          shape_str(labels.shape) + " for logits " +
                          shape_str(logits.shape));
    if ((int)w.size() != n)
        throw ConfigError("loss: sample_weights length " +
                          std::to_string(w.size()) + " != batch size " +
                          std::to_string(n));
    const int c = logits.dim(1);
    for (uint8_t v : labels.data)
        if (v >= c)
            throw DataError("loss: label " + std::to_string((int)v) +
                            " out of range for c=" + std::to_string(c));
}

// Per-pixel softmax of one sample's [c,H,W] logits, in double.
void softmax_pixel(const float* base, int c, int64_t plane, int64_t q,
                   double* out) {
    double mx = base[q];
    for (int k = 1; k < c; ++k)
        mx = std::max(mx, (double)base[(int64_t)k * plane + q]);
    double sum = 0.0;
    for (int k = 0; k < c; ++k) {
        out[k] = std::exp((double)base[(int64_t)k * plane + q] - mx);
        sum += out[k];
    }
    for (int k = 0; k < c; ++k) out[k] /= sum;
}

}  // namespace

Tensor softmax_classes(const Tensor& logits) {
    const bool batched = logits.rank() == 4;
    if (!batched && logits.rank() != 3)
        throw ConfigError("softmax_classes: want [n,c,H,W] or [c,H,W]");
    Tensor out = logits;
    const int n = batched ? logits.dim(0) : 1;
    const int c = batched ? logits.dim(1) : logits.dim(0);
    const int64_t plane =
        (int64_t)logits.dim(batched ? 2 : 1) * logits.dim(batched ? 3 : 2);
    std::vector<double> p(c);
    for (int s = 0; s < n; ++s) {
        float* base = out.ptr() + (int64_t)s * c * plane;
        for (int64_t q = 0; q < plane; ++q) {
            softmax_pixel(base, c, plane, q, p.data());
            for (int k = 0; k < c; ++k)
                base[(int64_t)k * plane + q] = (float)p[k];
        }
    }
    return out;
}

LossResult loss_ce(const Tensor& logits, const LabelMap& labels,
                   const std::vector<double>& sample_weights) {
    check_inputs(logits, labels, sample_weights);
    const int n = logits.dim(0), c = logits.dim(1);
    const int H = logits.dim(2), W = logits.dim(3);
    const int64_t plane = (int64_t)H * W;

    LossResult res;
    res.dlogits = Tensor(logits.shape);
    res.per_sample.assign(n, 0.0);
    const double pix_norm = 1.0 / (double)(n * plane);

    std::vector<double> p(c);
    double total = 0.0;
    for (int s = 0; s < n; ++s) {
        const float* zb = logits.ptr() + (int64_t)s * c * plane;
        float* db = res.dlogits.ptr() + (int64_t)s * c * plane;
        const uint8_t* lb = labels.data.data() + (int64_t)s * plane;
        const double wscale = sample_weights[s] * pix_norm;
        double acc = 0.0;
        for (int64_t q = 0; q < plane; ++q) {
            softmax_pixel(zb, c, plane, q, p.data());
            const int y = lb[q];
            acc += -std::log(std::max(p[y], 1e-300));
            for (int k = 0; k < c; ++k)
                db[(int64_t)k * plane + q] =
                    (float)(wscale * (p[k] - (k == y ? 1.0 : 0.0)));
        }
        res.per_sample[s] = acc / (double)plane;
        total += sample_weights[s] * res.per_sample[s];
    }
    res.value = total / (double)n;
    return res;
}

LossResult loss_soft_dice(const Tensor& logits, const LabelMap& labels,
                          const std::vector<double>& sample_weights) {
    check_inputs(logits, labels, sample_weights);
    const int n = logits.dim(0), c = logits.dim(1);
    const int H = logits.dim(2), W = logits.dim(3);
    const int64_t plane = (int64_t)H * W;
    const double smooth = 1.0;

    LossResult res;
    res.dlogits = Tensor(logits.shape);
    res.per_sample.assign(n, 0.0);

    std::vector<double> prob((size_t)c * plane);
    std::vector<double> dprob((size_t)c * plane);
    std::vector<double> px(c);
    double total = 0.0;
    for (int s = 0; s < n; ++s) {
        const float* zb = logits.ptr() + (int64_t)s * c * plane;
        float* db = res.dlogits.ptr() + (int64_t)s * c * plane;
        const uint8_t* lb = labels.data.data() + (int64_t)s * plane;

        for (int64_t q = 0; q < plane; ++q) {
            softmax_pixel(zb, c, plane, q, px.data());
            for (int k = 0; k < c; ++k) prob[(size_t)k * plane + q] = px[k];
        }

        double dice_sum = 0.0;
        for (int k = 0; k < c; ++k) {
            const double* pk = prob.data() + (size_t)k * plane;
            double inter = 0.0, psum = 0.0, ysum = 0.0;
            for (int64_t q = 0; q < plane; ++q) {
                const double y = (lb[q] == k) ? 1.0 : 0.0;
                inter += pk[q] * y;
                psum += pk[q];
                ysum += y;
            }
            const double num = 2.0 * inter + smooth;
            const double den = psum + ysum + smooth;
            dice_sum += num / den;
            // d(1 - num/den)/dp_q = -(2*y_q*den - num) / den^2
            const double inv_d2 = 1.0 / (den * den);
            double* dk = dprob.data() + (size_t)k * plane;
            for (int64_t q = 0; q < plane; ++q) {
                const double y = (lb[q] == k) ? 1.0 : 0.0;
                dk[q] = -(2.0 * y * den - num) * inv_d2 / (double)c;
            }
        }
        res.per_sample[s] = 1.0 - dice_sum / (double)c;
        total += sample_weights[s] * res.per_sample[s];

        // Chain through softmax: dL/dz_j = p_j * (dL/dp_j - sum_k dL/dp_k p_k).
        const double wscale = sample_weights[s] / (double)n;
        for (int64_t q = 0; q < plane; ++q) {
            double dot = 0.0;
            for (int k = 0; k < c; ++k)
                dot += dprob[(size_t)k * plane + q] * prob[(size_t)k * plane + q];
            for (int k = 0; k < c; ++k) {
                const double pk = prob[(size_t)k * plane + q];
                db[(int64_t)k * plane + q] =
                    (float)(wscale * pk * (dprob[(size_t)k * plane + q] - dot));
            }
        }
    }
    res.value = total / (double)n;
    return res;
}

LossResult loss_ce_dice(const Tensor& logits, const LabelMap& labels,
                        const std::vector<double>& sample_weights) {
    LossResult a = loss_ce(logits, labels, sample_weights);
    LossResult b = loss_soft_dice(logits, labels, sample_weights);
    LossResult res;
    res.value = a.value + b.value;
    res.dlogits = a.dlogits;
    for (size_t i = 0; i < res.dlogits.data.size(); ++i)
        res.dlogits.data[i] += b.dlogits.data[i];
    res.per_sample.resize(a.per_sample.size());
    for (size_t i = 0; i < a.per_sample.size(); ++i)
        res.per_sample[i] = a.per_sample[i] + b.per_sample[i];
    return res;
}

double soft_dice_loss_prob(const Tensor& prob, const LabelMap& labels) {
    if (prob.rank() != 3)
        throw ConfigError("soft_dice_loss_prob: prob must be [c,H,W]");
    const int c = prob.dim(0);
    const int64_t plane = (int64_t)prob.dim(1) * prob.dim(2);
    if (labels.numel() != plane)
        throw ConfigError("soft_dice_loss_prob: label shape mismatch");
    const double smooth = 1.0;
    double dice_sum = 0.0;
    for (int k = 0; k < c; ++k) {
        const float* pk = prob.ptr() + (int64_t)k * plane;
        double inter = 0.0, psum = 0.0, ysum = 0.0;
        for (int64_t q = 0; q < plane; ++q) {
            const double y = (labels.data[q] == k) ? 1.0 : 0.0;
            inter += (double)pk[q] * y;
            psum += pk[q];
            ysum += y;
        }
        dice_sum += (2.0 * inter + smooth) / (psum + ysum + smooth);
    }
    return 1.0 - dice_sum / (double)c;
}

double ce_loss_prob(const Tensor& prob, const LabelMap& labels) {
    if (prob.rank() != 3)
        throw ConfigError("ce_loss_prob: prob must be [c,H,W]");
    const int64_t plane = (int64_t)prob.dim(1) * prob.dim(2);
    if (labels.numel() != plane)
        throw ConfigError("ce_loss_prob: label shape mismatch");
    double sum = 0.0;
    for (int64_t q = 0; q < plane; ++q) {
        const double p =
            prob.data[(int64_t)labels.data[q] * plane + q];
        sum -= std::log(std::max(p, 1e-12));
    }
    return sum / (double)plane;
}

}  // namespace augopt
