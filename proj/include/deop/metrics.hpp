#pragma once

// Segmentation metrics: pixel accuracy, per-class IoU, seen/unseen mean IoU
// with their harmonic mean, and proposal recall at an IoU threshold.

#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "deop/labels.hpp"
#include "deop/masks.hpp"

namespace deop {

struct IouReport {
    double pacc = 0.0;
    std::map<int, double> per_class_iou;  // classes present in pred or gt
    bool empty = false;                   // no valid pixels
};

inline IouReport confusion_and_iou(const SegLabelMap& pred, const SegLabelMap& gt, int num_classes) {
    if (pred.h != gt.h || pred.w != gt.w)
        throw ShapeError("iou: prediction " + std::to_string(pred.h) + "x" + std::to_string(pred.w) +
                         " vs ground truth " + std::to_string(gt.h) + "x" + std::to_string(gt.w));
    std::vector<int64_t> tp(static_cast<size_t>(num_classes), 0), fp(static_cast<size_t>(num_classes), 0),
        fn(static_cast<size_t>(num_classes), 0);
    int64_t valid = 0, correct = 0;
    for (int64_t i = 0; i < gt.numel(); ++i) {
        const int g = gt.labels[static_cast<size_t>(i)];
        if (g == SegLabelMap::kIgnore) continue;
        const int p = pred.labels[static_cast<size_t>(i)];
        if (g < 0 || g >= num_classes || p < 0 || p >= num_classes)
            throw ContractError("iou: label outside [0, " + std::to_string(num_classes) + ")");
        ++valid;
        if (p == g) {
            ++correct;
            ++tp[static_cast<size_t>(g)];
        } else {
            ++fp[static_cast<size_t>(p)];
            ++fn[static_cast<size_t>(g)];
        }
    }
    IouReport r;
    if (valid == 0) {
        r.empty = true;
        return r;
    }
    r.pacc = static_cast<double>(correct) / static_cast<double>(valid);
    for (int c = 0; c < num_classes; ++c) {
        const int64_t denom = tp[static_cast<size_t>(c)] + fp[static_cast<size_t>(c)] + fn[static_cast<size_t>(c)];
        if (denom == 0) continue;  // absent from both sides
        r.per_class_iou[c] = static_cast<double>(tp[static_cast<size_t>(c)]) / static_cast<double>(denom);
    }
    return r;
}

// Harmonic mean; accepts fractions or percentages as long as both sides agree.
inline double hiou(double miou_seen, double miou_unseen) {
    if (miou_seen < 0 || miou_unseen < 0) throw ContractError("hiou: negative input");
    const double s = miou_seen + miou_unseen;
    if (s == 0.0) return 0.0;
    return 2.0 * miou_seen * miou_unseen / s;
}

struct RecallResult {
    double recall = 0.0;
    bool empty_gt = false;
};

// Fraction of ground-truth segments whose best-IoU proposal reaches the
// threshold. Proposals binarize at 0.5; one proposal may serve several
// segments.
inline RecallResult recall_at_iou(const MaskSet& proposals, const MaskSet& gt, double threshold) {
    if (!(threshold > 0.0 && threshold < 1.0))
        throw ContractError("recall: threshold " + std::to_string(threshold) + " outside (0,1)");
    if (gt.count() == 0) return {1.0, true};
    if (proposals.height() != gt.height() || proposals.width() != gt.width())
        throw ShapeError("recall: proposal grid " + shape_str(proposals.masks.shape()) + " vs gt " +
                         shape_str(gt.masks.shape()));
    const int pix = gt.height() * gt.width();
    Tensor pf = proposals.flat(), gf = gt.flat();
    int hit = 0, total = 0;
    for (int g = 0; g < gt.count(); ++g) {
        bool nonempty = false;
        for (int p = 0; p < pix; ++p) nonempty = nonempty || gf.at(g, p) > 0.5;
        if (!nonempty) continue;
        ++total;
        double best = 0.0;
        for (int n = 0; n < proposals.count(); ++n) {
            int64_t inter = 0, uni = 0;
            for (int p = 0; p < pix; ++p) {
                const bool a = pf.at(n, p) >= 0.5;
                const bool b = gf.at(g, p) > 0.5;
                inter += (a && b) ? 1 : 0;
                uni += (a || b) ? 1 : 0;
            }
            if (uni > 0) best = std::max(best, static_cast<double>(inter) / static_cast<double>(uni));
        }
        if (best >= threshold) ++hit;
    }
    if (total == 0) return {1.0, true};
    return {static_cast<double>(hit) / static_cast<double>(total), false};
}

struct EvalReport {
    double pacc = 0.0;
    std::map<int, double> per_class_iou;
    double miou_seen = 0.0;
    double miou_unseen = 0.0;
    double hiou_value = 0.0;
    std::map<int, double> recall_at;  // threshold in percent -> recall
    bool empty = false;

    // key=value lines, one metric per line, deterministic order.
    std::string to_text() const {
        std::ostringstream os;
        os.precision(17);
        os << "pacc=" << pacc << "\n";
        os << "miou_seen=" << miou_seen << "\n";
        os << "miou_unseen=" << miou_unseen << "\n";
        os << "hiou=" << hiou_value << "\n";
        for (const auto& [c, v] : per_class_iou) os << "iou.class_" << c << "=" << v << "\n";
        for (const auto& [t, v] : recall_at) os << "recall@" << t << "=" << v << "\n";
        os << "empty=" << (empty ? 1 : 0) << "\n";
        return os.str();
    }
};

}  // namespace deop
