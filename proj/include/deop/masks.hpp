#pragma once

// Mask proposals as a stack of [0,1]-valued maps. Shared by the proposal
// network that produces them and the encoder/decoder stages that consume them.

#include "deop/tensor.hpp"

namespace deop {

struct MaskSet {
    Tensor masks;  // [N, Hm, Wm], values in [0,1]

    MaskSet() = default;
    explicit MaskSet(Tensor m) : masks(std::move(m)) {
        if (masks.rank() != 3)
            throw ShapeError("mask set: expected [NxHxW], got " + shape_str(masks.shape()));
    }

    int count() const { return masks.dim(0); }
    int height() const { return masks.dim(1); }
    int width() const { return masks.dim(2); }

    // [N, Hm*Wm] view sharing storage (and the tape graph).
    Tensor flat() const { return reshape(masks, {count(), height() * width()}); }

    // One map as [Hm, Wm].
    Tensor map(int i) const {
        if (i < 0 || i >= count())
            throw ContractError("mask set: index " + std::to_string(i) + " out of " + std::to_string(count()));
        return reshape(slice_rows(flat(), i, 1), {height(), width()});
    }

    void check_range() const {
        for (double v : masks.vals())
            if (v < 0.0 || v > 1.0) throw ContractError("mask set: value outside [0,1]");
    }

    // Each map bilinearly resampled to [h2, w2].
    MaskSet resized(int h2, int w2) const {
        std::vector<Tensor> rows;
        rows.reserve(static_cast<size_t>(count()));
        for (int i = 0; i < count(); ++i) rows.push_back(reshape(resize_bilinear(map(i), h2, w2), {1, h2 * w2}));
        return MaskSet(reshape(concat_rows(rows), {count(), h2, w2}));
    }
};

}  // namespace deop
