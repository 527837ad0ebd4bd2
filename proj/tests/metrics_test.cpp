#include "deop/metrics.hpp"

#include <gtest/gtest.h>

#include "deop/proposals.hpp"
#include "deop/rng.hpp"

namespace deop {
namespace {

SegLabelMap map_from(int h, int w, std::vector<int> labels) {
    SegLabelMap m(h, w);
    m.labels = std::move(labels);
    return m;
}

TEST(Iou, PerfectPredictionScoresOne) {
    SegLabelMap gt = map_from(2, 3, {0, 1, 2, 2, 1, 0});
    IouReport r = confusion_and_iou(gt, gt, 3);
    EXPECT_FALSE(r.empty);
    EXPECT_DOUBLE_EQ(r.pacc, 1.0);
    ASSERT_EQ(r.per_class_iou.size(), 3u);
    for (const auto& [c, v] : r.per_class_iou) EXPECT_DOUBLE_EQ(v, 1.0) << c;
}

TEST(Iou, HandCountedTwoByTwo) {
    SegLabelMap gt = map_from(2, 2, {0, 0, 1, 1});
    SegLabelMap pred = map_from(2, 2, {0, 1, 1, 1});
    IouReport r = confusion_and_iou(pred, gt, 2);
    EXPECT_DOUBLE_EQ(r.pacc, 0.75);
    EXPECT_DOUBLE_EQ(r.per_class_iou.at(0), 0.5);      // tp 1, fp 0, fn 1
    EXPECT_DOUBLE_EQ(r.per_class_iou.at(1), 2.0 / 3);  // tp 2, fp 1, fn 0
}

TEST(Iou, ClassAbsentFromBothSidesIsSkipped) {
    SegLabelMap gt = map_from(1, 2, {0, 1});
    SegLabelMap pred = map_from(1, 2, {0, 1});
    IouReport r = confusion_and_iou(pred, gt, 5);
    EXPECT_EQ(r.per_class_iou.count(3), 0u);
    EXPECT_EQ(r.per_class_iou.size(), 2u);
}

TEST(Iou, FalsePositiveAloneStillCountsClass) {
    SegLabelMap gt = map_from(1, 2, {0, 0});
    SegLabelMap pred = map_from(1, 2, {0, 4});
    IouReport r = confusion_and_iou(pred, gt, 5);
    EXPECT_DOUBLE_EQ(r.per_class_iou.at(4), 0.0);
    EXPECT_DOUBLE_EQ(r.per_class_iou.at(0), 0.5);
}

TEST(Iou, AllIgnoredPixelsFlagEmpty) {
    SegLabelMap gt = map_from(1, 2, {SegLabelMap::kIgnore, SegLabelMap::kIgnore});
    SegLabelMap pred = map_from(1, 2, {0, 1});
    IouReport r = confusion_and_iou(pred, gt, 2);
    EXPECT_TRUE(r.empty);
}

TEST(Iou, IgnoredPixelsLeaveTallies) {
    SegLabelMap gt = map_from(1, 4, {0, SegLabelMap::kIgnore, 1, 1});
    SegLabelMap pred = map_from(1, 4, {0, 0, 0, 1});
    IouReport r = confusion_and_iou(pred, gt, 2);
    EXPECT_DOUBLE_EQ(r.pacc, 2.0 / 3);
    EXPECT_DOUBLE_EQ(r.per_class_iou.at(0), 0.5);
    EXPECT_DOUBLE_EQ(r.per_class_iou.at(1), 0.5);
}

TEST(Iou, MismatchedShapesRejected) {
    EXPECT_THROW(confusion_and_iou(SegLabelMap(2, 2), SegLabelMap(2, 3), 2), ShapeError);
}

TEST(Iou, JointRelabelingInvariance) {
    Rng rng(100);
    SegLabelMap gt(8, 8), pred(8, 8);
    for (auto& v : gt.labels) v = static_cast<int>(rng.randint(0, 3));
    for (auto& v : pred.labels) v = static_cast<int>(rng.randint(0, 3));
    IouReport base = confusion_and_iou(pred, gt, 4);

    const int perm[4] = {2, 3, 1, 0};
    SegLabelMap gt2 = gt, pred2 = pred;
    for (auto& v : gt2.labels) v = perm[v];
    for (auto& v : pred2.labels) v = perm[v];
    IouReport renamed = confusion_and_iou(pred2, gt2, 4);
    EXPECT_DOUBLE_EQ(renamed.pacc, base.pacc);
    for (int c = 0; c < 4; ++c) EXPECT_DOUBLE_EQ(renamed.per_class_iou.at(perm[c]), base.per_class_iou.at(c));
}

TEST(Iou, BruteForceTallyOnRandomMap) {
    Rng rng(101);
    const int c = 5;
    SegLabelMap gt(16, 16), pred(16, 16);
    for (auto& v : gt.labels) v = rng.bernoulli(0.05) ? SegLabelMap::kIgnore : static_cast<int>(rng.randint(0, c - 1));
    for (auto& v : pred.labels) v = static_cast<int>(rng.randint(0, c - 1));
    IouReport r = confusion_and_iou(pred, gt, c);

    int64_t conf[5][5] = {};
    int64_t valid = 0;
    for (size_t i = 0; i < gt.labels.size(); ++i) {
        if (gt.labels[i] == SegLabelMap::kIgnore) continue;
        ++valid;
        ++conf[gt.labels[i]][pred.labels[i]];
    }
    int64_t diag = 0;
    for (int k = 0; k < c; ++k) diag += conf[k][k];
    EXPECT_DOUBLE_EQ(r.pacc, static_cast<double>(diag) / valid);
    for (int k = 0; k < c; ++k) {
        int64_t inter = conf[k][k], uni = 0;
        for (int j = 0; j < c; ++j) uni += conf[k][j] + conf[j][k];
        uni -= conf[k][k];
        if (uni == 0)
            EXPECT_EQ(r.per_class_iou.count(k), 0u);
        else
            EXPECT_DOUBLE_EQ(r.per_class_iou.at(k), static_cast<double>(inter) / uni);
    }
}

TEST(Hiou, ReferenceValues) {
    EXPECT_NEAR(hiou(38.0, 38.4), 38.2, 0.05);
    EXPECT_NEAR(hiou(88.2, 74.6), 80.8, 0.05);
}

TEST(Hiou, BasicProperties) {
    EXPECT_DOUBLE_EQ(hiou(0.37, 0.37), 0.37);
    EXPECT_DOUBLE_EQ(hiou(0.0, 0.9), 0.0);
    EXPECT_DOUBLE_EQ(hiou(0.0, 0.0), 0.0);
    Rng rng(102);
    for (int i = 0; i < 100; ++i) {
        const double a = rng.uniform(), b = rng.uniform();
        const double h = hiou(a, b);
        EXPECT_LE(h, (a + b) / 2 + 1e-15);
        EXPECT_DOUBLE_EQ(h, hiou(b, a));
    }
    EXPECT_THROW(hiou(-0.1, 0.5), ContractError);
}

MaskSet masks_of(const SegLabelMap& labels, int n) { return oracle_masks(labels, 0.0, n, 0); }

TEST(Recall, SelfProposalsScorePerfect) {
    SegLabelMap gt = map_from(4, 4, {0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3});
    MaskSet m = masks_of(gt, 6);
    for (double thr : {0.25, 0.5, 0.75}) {
        RecallResult r = recall_at_iou(m, m, thr);
        EXPECT_DOUBLE_EQ(r.recall, 1.0) << thr;
        EXPECT_FALSE(r.empty_gt);
    }
}

TEST(Recall, AllZeroProposalsMissEverything) {
    SegLabelMap gt = map_from(2, 2, {0, 0, 1, 1});
    MaskSet gtm = masks_of(gt, 2);
    MaskSet zeros(Tensor::zeros({3, 2, 2}));
    RecallResult r = recall_at_iou(zeros, gtm, 0.5);
    EXPECT_DOUBLE_EQ(r.recall, 0.0);
    EXPECT_FALSE(r.empty_gt);
}

TEST(Recall, EmptyGroundTruthIsFlaggedPerfect) {
    MaskSet props(Tensor::full({2, 2, 2}, 1.0));
    RecallResult a = recall_at_iou(props, MaskSet(Tensor::zeros({0, 2, 2})), 0.5);
    EXPECT_TRUE(a.empty_gt);
    EXPECT_DOUBLE_EQ(a.recall, 1.0);
    RecallResult b = recall_at_iou(props, MaskSet(Tensor::zeros({2, 2, 2})), 0.5);
    EXPECT_TRUE(b.empty_gt);
    EXPECT_DOUBLE_EQ(b.recall, 1.0);
}

TEST(Recall, MatchesExhaustiveOracleOnJitteredProposals) {
    SegLabelMap gt = map_from(8, 8, std::vector<int>(64, 0));
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) gt.labels[static_cast<size_t>(y) * 8 + x] = (y < 4) ? (x < 4 ? 1 : 2) : 0;
    MaskSet gtm = masks_of(gt, 3);
    MaskSet props = oracle_masks(gt, 0.35, 5, 7);

    Tensor pf = props.flat(), gf = gtm.flat();
    for (double thr : {0.3, 0.5, 0.7, 0.9}) {
        int hit = 0, total = 0;
        for (int g = 0; g < gtm.count(); ++g) {
            int gsz = 0;
            for (int p = 0; p < 64; ++p) gsz += gf.at(g, p) > 0.5 ? 1 : 0;
            if (gsz == 0) continue;
            ++total;
            double best = 0;
            for (int n = 0; n < props.count(); ++n) {
                int inter = 0, uni = 0;
                for (int p = 0; p < 64; ++p) {
                    const bool a = pf.at(n, p) >= 0.5, b = gf.at(g, p) > 0.5;
                    inter += a && b;
                    uni += a || b;
                }
                if (uni) best = std::max(best, double(inter) / uni);
            }
            hit += best >= thr;
        }
        RecallResult r = recall_at_iou(props, gtm, thr);
        EXPECT_DOUBLE_EQ(r.recall, double(hit) / total) << thr;
    }
}

TEST(Recall, MonotoneInThreshold) {
    SegLabelMap gt = map_from(8, 8, std::vector<int>(64, 0));
    for (int i = 20; i < 44; ++i) gt.labels[static_cast<size_t>(i)] = 1;
    MaskSet gtm = masks_of(gt, 2);
    MaskSet props = oracle_masks(gt, 0.4, 4, 11);
    double prev = 2.0;
    for (double thr : {0.1, 0.3, 0.5, 0.7, 0.9}) {
        const double r = recall_at_iou(props, gtm, thr).recall;
        EXPECT_LE(r, prev);
        prev = r;
    }
    EXPECT_THROW(recall_at_iou(props, gtm, 0.0), ContractError);
    EXPECT_THROW(recall_at_iou(props, gtm, 1.0), ContractError);
}

TEST(Report, TextFormatRoundsTrip) {
    EvalReport r;
    r.pacc = 0.875;
    r.miou_seen = 0.625;
    r.miou_unseen = 0.25;
    r.hiou_value = hiou(0.625, 0.25);
    r.per_class_iou = {{0, 1.0}, {3, 1.0 / 3}};
    r.recall_at = {{50, 0.75}};
    const std::string text = r.to_text();
    EXPECT_NE(text.find("pacc=0.875\n"), std::string::npos);
    EXPECT_NE(text.find("miou_seen=0.625\n"), std::string::npos);
    EXPECT_NE(text.find("miou_unseen=0.25\n"), std::string::npos);
    EXPECT_NE(text.find("iou.class_0=1\n"), std::string::npos);
    EXPECT_NE(text.find("iou.class_3=0.33333333333333331\n"), std::string::npos);
    EXPECT_NE(text.find("recall@50=0.75\n"), std::string::npos);
    EXPECT_NE(text.find("empty=0\n"), std::string::npos);
    EXPECT_EQ(r.to_text(), text);
}

}  // namespace
}  // namespace deop
