#pragma once

// Dice and binary focal losses, shared by proposal-mask training, matching
// costs, and the segmentation training loss.

#include "deop/tensor.hpp"

namespace deop {

struct LossWeights {
    double lambda_dice = 1.0;
    double lambda_focal = 20.0;
    double dice_eps = 1.0;
    double focal_gamma = 2.0;
    double focal_alpha = 0.25;
};

// 1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps). `valid` (same shape,
// 0/1) restricts all sums to valid positions.
inline Tensor dice_loss(const Tensor& pred, const Tensor& gt, double eps = 1.0, const Tensor* valid = nullptr) {
    Tensor p = pred, g = gt;
    if (valid) {
        p = mul(p, *valid);
        g = mul(g, *valid);
    }
    Tensor num = add_scalar(scale(reduce_sum(mul(p, g)), 2.0), eps);
    Tensor den = add_scalar(add(reduce_sum(p), reduce_sum(g)), eps);
    return sub(Tensor::scalar(1.0), divide(num, den));
}

// Binary focal loss with target weighting: mean over (valid) positions of
// -alpha*g*(1-p)^gamma*log(p) - (1-alpha)*(1-g)*p^gamma*log(1-p).
inline Tensor focal_loss(const Tensor& pred, const Tensor& gt, double gamma = 2.0, double alpha = 0.25,
                         const Tensor* valid = nullptr) {
    Tensor p = clamp(pred, 1e-12, 1.0 - 1e-12);
    Tensor one_minus_p = add_scalar(scale(p, -1.0), 1.0);
    Tensor one_minus_g = add_scalar(scale(gt, -1.0), 1.0);
    Tensor pos = scale(mul(gt, mul(pow_scalar(one_minus_p, gamma), log(p))), -alpha);
    Tensor neg = scale(mul(one_minus_g, mul(pow_scalar(p, gamma), log(one_minus_p))), -(1.0 - alpha));
    Tensor per_pixel = add(pos, neg);
    if (valid) {
        double count = 0;
        for (double v : valid->vals()) count += v;
        if (count <= 0) throw ContractError("focal loss: no valid positions");
        return scale(reduce_sum(mul(per_pixel, *valid)), 1.0 / count);
    }
    return reduce_mean(per_pixel);
}

inline Tensor mask_pair_loss(const Tensor& pred, const Tensor& gt, const LossWeights& w,
                             const Tensor* valid = nullptr) {
    Tensor d = scale(dice_loss(pred, gt, w.dice_eps, valid), w.lambda_dice);
    Tensor f = scale(focal_loss(pred, gt, w.focal_gamma, w.focal_alpha, valid), w.lambda_focal);
    return add(d, f);
}

// Forward-only pair cost for matching.
inline double mask_pair_cost(const Tensor& pred, const Tensor& gt, const LossWeights& w) {
    NoTapeScope off;
    return mask_pair_loss(pred, gt, w).item();
}

}  // namespace deop
