#pragma once

// Integer segmentation label maps.

#include <vector>

#include "deop/common.hpp"

namespace deop {

struct SegLabelMap {
    static constexpr int kIgnore = 255;

    int h = 0, w = 0;
    std::vector<int> labels;  // row-major, class ids or kIgnore

    SegLabelMap() = default;
    SegLabelMap(int h_, int w_, int fill = 0) : h(h_), w(w_), labels(static_cast<size_t>(h_) * w_, fill) {}

    int at(int y, int x) const { return labels[static_cast<size_t>(y) * w + x]; }
    int& at(int y, int x) { return labels[static_cast<size_t>(y) * w + x]; }
    int64_t numel() const { return static_cast<int64_t>(labels.size()); }

    bool operator==(const SegLabelMap& o) const { return h == o.h && w == o.w && labels == o.labels; }

    // Present class ids in ascending order, ignore excluded.
    std::vector<int> present_classes() const {
        std::vector<bool> seen(256, false);
        for (int v : labels)
            if (v != kIgnore) seen[static_cast<size_t>(v)] = true;
        std::vector<int> out;
        for (int c = 0; c < 256; ++c)
            if (seen[static_cast<size_t>(c)]) out.push_back(c);
        return out;
    }

    // Strided subsampling picking the center pixel of each factor-sized cell.
    SegLabelMap downsample_nearest(int factor) const {
        if (factor <= 0 || h % factor != 0 || w % factor != 0)
            throw ShapeError("label map: " + std::to_string(h) + "x" + std::to_string(w) +
                             " not divisible by factor " + std::to_string(factor));
        SegLabelMap out(h / factor, w / factor);
        for (int y = 0; y < out.h; ++y)
            for (int x = 0; x < out.w; ++x) out.at(y, x) = at(y * factor + factor / 2, x * factor + factor / 2);
        return out;
    }
};

}  // namespace deop
