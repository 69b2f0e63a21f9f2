#pragma once

#include <vector>

#include "dqnet/ops.hpp"

namespace dqnet {

struct LossConfig {
    double sal_beta = 2.0;      // significance gain
    double weight_lambda = 5.0; // structural-weight gain
    int weight_kernel = 7;      // neighborhood size, odd

    void validate() const {
        if (sal_beta < 0) throw ConfigError("loss: sal_beta must be >= 0");
        if (weight_kernel < 1 || weight_kernel % 2 == 0)
            throw ConfigError("loss: weight_kernel must be odd and positive");
        if (weight_lambda < 0) throw ConfigError("loss: weight_lambda must be >= 0");
    }
};

template <typename T>
struct LossBreakdown {
    T bce = 0, iou = 0, sal = 0, total = 0;
    Tensor<T> total_tensor;  // differentiable
};

namespace lossdetail {
constexpr double kProbClamp = 1e-7;

template <typename T>
void require_mask(const Tensor<T>& g) {
    for (T v : g.data())
        if (v != T(0) && v != T(1)) throw DomainError("mask must be binary {0,1}");
}

template <typename T>
void require_probability(const Tensor<T>& p) {
    for (T v : p.data())
        if (v < T(0) || v > T(1)) throw DomainError("probabilities must lie in [0,1]");
}

// per-pixel binary cross-entropy map with clamped probabilities
template <typename T>
Tensor<T> bce_map(const Tensor<T>& g, const Tensor<T>& p) {
    require_same_shape(g, p, "bce");
    auto pc = clamp(p, static_cast<T>(kProbClamp), static_cast<T>(1.0 - kProbClamp));
    auto pos = mul(g, log_t(pc));
    auto neg = mul(one_minus(g), log_t(one_minus(pc)));
    return affine(add(pos, neg), T(-1), T(0));
}
}  // namespace lossdetail

// gamma = 1 + lambda * |box-mean(G) - G|, box of k x k averaged over the
// in-image cells so a uniform mask gives gamma == 1 up to the borders
template <typename T>
Tensor<T> pixel_weight(const Tensor<T>& g, double lambda, int k) {
    if (g.ndim() != 2) throw DimensionError("pixel_weight expects a [H,W] mask");
    if (k < 1 || k % 2 == 0) throw ConfigError("pixel_weight: k must be odd");
    lossdetail::require_mask(g);
    const int H = g.dim(0), W = g.dim(1), r = k / 2;
    std::vector<T> out(g.data().size());
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double s = 0;
            int count = 0;
            for (int dy = -r; dy <= r; ++dy) {
                const int yy = y + dy;
                if (yy < 0 || yy >= H) continue;
                for (int dx = -r; dx <= r; ++dx) {
                    const int xx = x + dx;
                    if (xx < 0 || xx >= W) continue;
                    s += static_cast<double>(g.data()[static_cast<size_t>(yy) * W + xx]);
                    ++count;
                }
            }
            const double dev =
                std::fabs(s / count - static_cast<double>(g.data()[static_cast<size_t>(y) * W + x]));
            out[static_cast<size_t>(y) * W + x] = static_cast<T>(1.0 + lambda * dev);
        }
    return Tensor<T>::from_data({H, W}, std::move(out));
}

// sum(gamma * l_bce) / sum(gamma)
template <typename T>
Tensor<T> weighted_bce(const Tensor<T>& p, const Tensor<T>& g, const Tensor<T>& gamma) {
    require_same_shape(p, g, "weighted_bce");
    require_same_shape(p, gamma, "weighted_bce");
    lossdetail::require_probability(p);
    auto weighted = sum(mul(gamma, lossdetail::bce_map(g, p)));
    T denom = 0;
    for (T v : gamma.data()) denom += v;
    return mul_scalar(weighted, T(1) / denom);
}

// 1 - (sum(g*P*G) + 1) / (sum(g*(P+G)) - sum(g*P*G) + 1)
template <typename T>
Tensor<T> weighted_iou(const Tensor<T>& p, const Tensor<T>& g, const Tensor<T>& gamma) {
    require_same_shape(p, g, "weighted_iou");
    require_same_shape(p, gamma, "weighted_iou");
    lossdetail::require_probability(p);
    auto inter = sum(mul(mul(gamma, p), g));
    auto total = add(sum(mul(gamma, p)), sum(mul(gamma, g)));
    auto uni = sub(total, inter);
    return one_minus(div(add_scalar(inter, T(1)), add_scalar(uni, T(1))));
}

// omega^s = sigmoid(upsample(channel-mean |B^s|));
// SAL = sum_s sum_ij (1 + beta*omega) * l_bce / sum_s sum_ij (1 + beta*omega)
template <typename T>
Tensor<T> sal_loss(const std::vector<Tensor<T>>& aux_preds,
                   const std::vector<Tensor<T>>& enhanced, const Tensor<T>& g, double beta) {
    if (aux_preds.size() != enhanced.size())
        throw DimensionError("sal: one enhanced feature required per auxiliary prediction");
    if (aux_preds.empty()) return Tensor<T>::scalar(T(0));
    const int H = g.dim(0), W = g.dim(1);
    Tensor<T> num, den;
    for (size_t s = 0; s < aux_preds.size(); ++s) {
        const auto& p = aux_preds[s];
        if (p.shape() != g.shape())
            throw DimensionError("sal: prediction and mask resolutions differ");
        auto mag = channel_mean(abs_val(enhanced[s]));
        auto up = resize_bilinear(reshape(mag, {1, mag.dim(0), mag.dim(1)}), H, W);
        auto omega = sigmoid(reshape(up, {H, W}));
        auto wfac = affine(omega, static_cast<T>(beta), T(1));
        auto term = sum(mul(wfac, lossdetail::bce_map(g, p)));
        auto wsum = sum(wfac);
        num = s == 0 ? term : add(num, term);
        den = s == 0 ? wsum : add(den, wsum);
    }
    return div(num, den);
}

// L_total = L_bce^w(sigmoid F) + L_iou^w(sigmoid F) + L_sal
template <typename T>
LossBreakdown<T> total_loss(const Tensor<T>& logits, const std::vector<Tensor<T>>& aux_preds,
                            const std::vector<Tensor<T>>& enhanced, const Tensor<T>& g,
                            const LossConfig& cfg) {
    cfg.validate();
    if (g.ndim() != 2) throw DimensionError("total_loss expects a [H,W] mask");
    const int H = g.dim(0), W = g.dim(1);
    if (logits.ndim() != 3 || logits.dim(0) != 1 || logits.dim(1) != H || logits.dim(2) != W)
        throw DimensionError("total_loss: prediction shape " + shape_str(logits.shape()) +
                             " does not match mask " + shape_str(g.shape()));
    auto p = reshape(sigmoid(logits), {H, W});
    auto gamma = pixel_weight(g, cfg.weight_lambda, cfg.weight_kernel);
    auto bce = weighted_bce(p, g, gamma);
    auto iou = weighted_iou(p, g, gamma);
    auto sal = sal_loss(aux_preds, enhanced, g, cfg.sal_beta);
    LossBreakdown<T> out;
    out.total_tensor = add(add(bce, iou), sal);
    out.bce = bce.item();
    out.iou = iou.item();
    out.sal = sal.item();
    out.total = out.total_tensor.item();
    return out;
}

}  // namespace dqnet
