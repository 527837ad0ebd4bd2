#include "deop/cal.hpp"

#include <gtest/gtest.h>

#include "deop/classify.hpp"
#include "test_util.hpp"

namespace deop {
namespace {

using testutil::fd_param_err;

CalConfig query_cfg(int k) {
    CalConfig cfg;
    cfg.query_based = true;
    cfg.layers = k;
    cfg.num_heads = 2;
    return cfg;
}

TEST(QueryDecoder, ZeroQueriesGiveMaskOverArea) {
    Rng rng(50);
    QueryHeatmapDecoder dec(2, 4, query_cfg(0), rng);
    for (auto& v : dec.queries().vals()) v = 0.0;
    Tensor f_v = Tensor::randn({16, 4}, rng);
    Rng mrng(51);
    Tensor m = Tensor::zeros({2, 4, 4});
    for (auto& v : m.vals()) v = mrng.uniform();
    MaskSet masks(m);
    HeatmapSet h = dec.forward(f_v, 4, 4, masks);
    Tensor hf = h.flat(), mf = masks.flat();
    for (int n = 0; n < 2; ++n)
        for (int p = 0; p < 16; ++p) EXPECT_NEAR(hf.at(n, p), mf.at(n, p) / 16.0, 1e-13);
}

TEST(QueryDecoder, ZeroMaskAnnihilatesHeatmap) {
    Rng rng(52);
    QueryHeatmapDecoder dec(2, 8, query_cfg(1), rng);
    Tensor f_v = Tensor::randn({16, 8}, rng);
    Tensor m = Tensor::zeros({2, 4, 4});
    for (int p = 0; p < 16; ++p) m.vals()[static_cast<size_t>(p)] = 0.7;  // proposal 0 nonzero, proposal 1 zero
    HeatmapSet h = dec.forward(f_v, 4, 4, MaskSet(m));
    Tensor hf = h.flat();
    for (int p = 0; p < 16; ++p) {
        EXPECT_GT(hf.at(0, p), 0.0);
        EXPECT_DOUBLE_EQ(hf.at(1, p), 0.0);
    }
}

TEST(QueryDecoder, HandOracleK0) {
    Rng rng(53);
    QueryHeatmapDecoder dec(1, 2, query_cfg(0), rng);
    dec.queries() = Tensor::from({1, 2}, {0.8, -0.4});
    // single query: self-attention weight is 1, so q' = q wv wo
    ParamMap params;
    dec.collect_params("d", params);
    Tensor wv, wo;
    for (auto& [name, t] : params) {
        if (name == "d.out_attn.wv") wv = t;
        if (name == "d.out_attn.wo") wo = t;
    }
    Tensor f_v = Tensor::from({4, 2}, {0.1, 0.2, -0.3, 0.5, 0.7, -0.2, 0.0, 0.4});
    Tensor m = Tensor::from({1, 2, 2}, {1.0, 0.5, 0.25, 0.0});
    HeatmapSet h = dec.forward(f_v, 2, 2, MaskSet(m));

    const double q0 = 0.8, q1 = -0.4;
    double qv0 = q0 * wv.at(0, 0) + q1 * wv.at(1, 0);
    double qv1 = q0 * wv.at(0, 1) + q1 * wv.at(1, 1);
    double qo0 = qv0 * wo.at(0, 0) + qv1 * wo.at(1, 0);
    double qo1 = qv0 * wo.at(0, 1) + qv1 * wo.at(1, 1);
    std::vector<double> s(4), e(4);
    double mx = -1e300;
    for (int p = 0; p < 4; ++p) {
        s[static_cast<size_t>(p)] = (qo0 * f_v.at(p, 0) + qo1 * f_v.at(p, 1)) / std::sqrt(2.0);
        mx = std::max(mx, s[static_cast<size_t>(p)]);
    }
    double sum = 0;
    for (int p = 0; p < 4; ++p) {
        e[static_cast<size_t>(p)] = std::exp(s[static_cast<size_t>(p)] - mx);
        sum += e[static_cast<size_t>(p)];
    }
    Tensor hf = h.flat();
    const double mvals[] = {1.0, 0.5, 0.25, 0.0};
    for (int p = 0; p < 4; ++p)
        EXPECT_NEAR(hf.at(0, p), e[static_cast<size_t>(p)] / sum * mvals[p], 1e-12);
}

TEST(QueryDecoder, SupportContainedInMaskSupport) {
    Rng rng(54);
    QueryHeatmapDecoder dec(3, 8, query_cfg(1), rng);
    Tensor f_v = Tensor::randn({16, 8}, rng);
    Rng mrng(55);
    Tensor m = Tensor::zeros({3, 4, 4});
    for (auto& v : m.vals()) v = mrng.bernoulli(0.4) ? mrng.uniform() : 0.0;
    HeatmapSet h = dec.forward(f_v, 4, 4, MaskSet(m));
    Tensor hf = h.flat(), mf = MaskSet(m).flat();
    for (int n = 0; n < 3; ++n)
        for (int p = 0; p < 16; ++p) {
            EXPECT_GE(hf.at(n, p), 0.0);
            if (mf.at(n, p) == 0.0) EXPECT_DOUBLE_EQ(hf.at(n, p), 0.0);
        }
}

TEST(QueryDecoder, JointPermutationEquivariance) {
    Rng rng(56);
    QueryHeatmapDecoder dec(3, 8, query_cfg(1), rng);
    Tensor f_v = Tensor::randn({16, 8}, rng);
    Rng mrng(57);
    Tensor m = Tensor::zeros({3, 4, 4});
    for (auto& v : m.vals()) v = mrng.uniform();
    Tensor base = dec.forward(f_v, 4, 4, MaskSet(m)).flat().clone();

    // rotate queries and masks together
    Tensor q = dec.queries().clone();
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 8; ++j) dec.queries().at(i, j) = q.at((i + 1) % 3, j);
    Tensor m2 = Tensor::zeros({3, 4, 4});
    for (int i = 0; i < 3; ++i)
        for (int p = 0; p < 16; ++p) m2.vals()[static_cast<size_t>(i) * 16 + p] = m.vals()[static_cast<size_t>((i + 1) % 3) * 16 + p];
    Tensor rotated = dec.forward(f_v, 4, 4, MaskSet(m2)).flat();
    for (int i = 0; i < 3; ++i)
        for (int p = 0; p < 16; ++p) EXPECT_NEAR(rotated.at(i, p), base.at((i + 1) % 3, p), 1e-10);
}

TEST(QueryDecoder, DepthSweepKeepsInvariants) {
    Rng mrng(58);
    Tensor m = Tensor::zeros({2, 4, 4});
    for (auto& v : m.vals()) v = mrng.uniform();
    MaskSet masks(m);
    for (int k : {1, 3, 5}) {
        Rng rng(59);
        QueryHeatmapDecoder dec(2, 8, query_cfg(k), rng);
        Tensor f_v = Tensor::randn({16, 8}, rng);
        HeatmapSet h = dec.forward(f_v, 4, 4, masks);
        EXPECT_EQ(h.heatmaps.shape(), (Shape{2, 4, 4}));
        for (double v : h.heatmaps.vals()) EXPECT_GE(v, 0.0);
    }
}

TEST(ConvDecoder, RowsSumToOne) {
    Rng rng(60);
    CalConfig cfg;
    cfg.layers = 2;
    cfg.conv_channels = 6;
    ConvHeatmapDecoder dec(8, cfg, rng);
    Tensor f_v = Tensor::randn({16, 8}, rng);
    Rng mrng(61);
    Tensor m = Tensor::zeros({3, 4, 4});
    for (auto& v : m.vals()) v = mrng.uniform();
    HeatmapSet h = dec.forward(f_v, 4, 4, MaskSet(m), true);
    Tensor hf = h.flat();
    for (int n = 0; n < 3; ++n) {
        double s = 0;
        for (int p = 0; p < 16; ++p) {
            EXPECT_GE(hf.at(n, p), 0.0);
            s += hf.at(n, p);
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(ConvDecoder, ZeroMaskGivesUniform) {
    Rng rng(62);
    CalConfig cfg;
    cfg.layers = 1;
    cfg.conv_channels = 4;
    ConvHeatmapDecoder dec(8, cfg, rng);
    Tensor f_v = Tensor::randn({16, 8}, rng);
    HeatmapSet h = dec.forward(f_v, 4, 4, MaskSet(Tensor::zeros({1, 4, 4})), true);
    Tensor hf = h.flat();
    for (int p = 0; p < 16; ++p) EXPECT_NEAR(hf.at(0, p), 1.0 / 16, 1e-12);
}

// Straight-line reimplementation: im2col-free convolution, naive batch norm.
std::vector<std::vector<double>> conv3x3_ref(const std::vector<std::vector<double>>& in, int h, int w,
                                             const Tensor& kernel, const Tensor& bias, int out_ch) {
    const int in_ch = static_cast<int>(in.size());
    std::vector<std::vector<double>> out(static_cast<size_t>(out_ch),
                                         std::vector<double>(static_cast<size_t>(h) * w, 0.0));
    for (int oc = 0; oc < out_ch; ++oc)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double acc = bias.at(oc, 0);
                for (int ic = 0; ic < in_ch; ++ic)
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            const int iy = y + ky - 1, ix = x + kx - 1;
                            if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                            acc += kernel.at(oc, (ic * 3 + ky) * 3 + kx) *
                                   in[static_cast<size_t>(ic)][static_cast<size_t>(iy) * w + ix];
                        }
                out[static_cast<size_t>(oc)][static_cast<size_t>(y) * w + x] = acc;
            }
    return out;
}

TEST(ConvDecoder, MatchesStraightLineOracle) {
    const int d = 4, gh = 4, gw = 4, n = 2, ch = 3;
    Rng rng(63);
    CalConfig cfg;
    cfg.layers = 1;
    cfg.conv_channels = ch;
    ConvHeatmapDecoder dec(d, cfg, rng);
    Tensor f_v = Tensor::randn({16, d}, rng);
    Rng mrng(64);
    Tensor m = Tensor::zeros({n, gh, gw});
    for (auto& v : m.vals()) v = mrng.uniform();
    HeatmapSet h = dec.forward(f_v, gh, gw, MaskSet(m), true);

    ParamMap params;
    dec.collect_params("c", params);
    ParamMap state;
    dec.collect_state("c", state);
    Tensor k0, b0, gamma, beta, kf, bf;
    for (auto& [name, t] : params) {
        if (name == "c.conv0.w") k0 = t;
        if (name == "c.conv0.b") b0 = t;
        if (name == "c.bn0.gamma") gamma = t;
        if (name == "c.bn0.beta") beta = t;
        if (name == "c.final.w") kf = t;
        if (name == "c.final.b") bf = t;
    }

    // masked features per proposal
    std::vector<std::vector<std::vector<double>>> stage(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        std::vector<std::vector<double>> x(static_cast<size_t>(d), std::vector<double>(16));
        for (int c = 0; c < d; ++c)
            for (int p = 0; p < 16; ++p)
                x[static_cast<size_t>(c)][static_cast<size_t>(p)] =
                    f_v.at(p, c) * m.vals()[static_cast<size_t>(i) * 16 + p];
        stage[static_cast<size_t>(i)] = conv3x3_ref(x, gh, gw, k0, b0, ch);
    }
    // batch norm across both proposals jointly, then relu
    for (int c = 0; c < ch; ++c) {
        double mean = 0;
        for (int i = 0; i < n; ++i)
            for (int p = 0; p < 16; ++p) mean += stage[static_cast<size_t>(i)][static_cast<size_t>(c)][static_cast<size_t>(p)];
        mean /= n * 16;
        double var = 0;
        for (int i = 0; i < n; ++i)
            for (int p = 0; p < 16; ++p) {
                const double v = stage[static_cast<size_t>(i)][static_cast<size_t>(c)][static_cast<size_t>(p)] - mean;
                var += v * v;
            }
        var /= n * 16;
        const double istd = 1.0 / std::sqrt(var + 1e-5);
        for (int i = 0; i < n; ++i)
            for (int p = 0; p < 16; ++p) {
                double& v = stage[static_cast<size_t>(i)][static_cast<size_t>(c)][static_cast<size_t>(p)];
                v = (v - mean) * istd * gamma.at(c, 0) + beta.at(c, 0);
                v = std::max(v, 0.0);
            }
    }
    Tensor hf = h.flat();
    for (int i = 0; i < n; ++i) {
        auto fin = conv3x3_ref(stage[static_cast<size_t>(i)], gh, gw, kf, bf, 1);
        double mx = -1e300;
        for (double v : fin[0]) mx = std::max(mx, v);
        double sum = 0;
        std::vector<double> e(16);
        for (int p = 0; p < 16; ++p) {
            e[static_cast<size_t>(p)] = std::exp(fin[0][static_cast<size_t>(p)] - mx);
            sum += e[static_cast<size_t>(p)];
        }
        for (int p = 0; p < 16; ++p) EXPECT_NEAR(hf.at(i, p), e[static_cast<size_t>(p)] / sum, 1e-10);
    }
}

TEST(ConvDecoder, RunningStatsChangeOnlyInTraining) {
    Rng rng(65);
    CalConfig cfg;
    cfg.layers = 1;
    cfg.conv_channels = 4;
    ConvHeatmapDecoder dec(8, cfg, rng);
    Tensor f_v = Tensor::randn({16, 8}, rng);
    Rng mrng(66);
    Tensor m = Tensor::zeros({2, 4, 4});
    for (auto& v : m.vals()) v = mrng.uniform();

    ParamMap state;
    dec.collect_state("c", state);
    Tensor mean_before = state[0].second.clone();
    dec.forward(f_v, 4, 4, MaskSet(m), true);
    EXPECT_FALSE(testutil::bitwise_equal(state[0].second, mean_before));

    Tensor mean_after = state[0].second.clone();
    dec.forward(f_v, 4, 4, MaskSet(m), false);
    EXPECT_TRUE(testutil::bitwise_equal(state[0].second, mean_after));
}

TEST(Decoders, GradCheckThroughPooledClassification) {
    // tiny end-to-end: decoder -> heatmap pooling -> cosine classifier -> loss
    const int d = 4, n = 2;
    Rng rng(67);
    Tensor f_v = Tensor::randn({16, d}, rng);
    Rng mrng(68);
    Tensor m = Tensor::zeros({n, 4, 4});
    for (auto& v : m.vals()) v = mrng.uniform();
    MaskSet masks(m);
    std::vector<ClassInfo> classes = {{0, "a", true, 0}, {1, "b", true, 0}};
    ClassEmbeddingTable table = ClassEmbeddingTable::from_seeds(classes, d);
    Tensor pick_weights = Tensor::from({n, 2}, {1.0, -0.5, 0.25, 2.0});

    {
        QueryHeatmapDecoder dec(n, d, query_cfg(1), rng);
        dec.set_trainable(true);
        auto loss_fn = [&]() {
            HeatmapSet h = dec.forward(f_v, 4, 4, masks);
            Tensor f_i = pool(f_v, h);
            Tensor f_c = classify_segments(f_i, table.effective(), 0.07);
            return reduce_sum(mul(f_c, pick_weights));
        };
        ParamMap params;
        dec.collect_params("q", params);
        Rng pick(69);
        for (auto& [name, t] : params) EXPECT_LT(fd_param_err(loss_fn, t, 1e-6, 4, pick), 1e-4) << name;
    }
    {
        CalConfig ccfg;
        ccfg.layers = 1;
        ccfg.conv_channels = 3;
        ConvHeatmapDecoder dec(d, ccfg, rng);
        dec.set_trainable(true);
        auto loss_fn = [&]() {
            HeatmapSet h = dec.forward(f_v, 4, 4, masks, false);  // eval stats keep the objective fixed
            Tensor f_i = pool(f_v, h);
            Tensor f_c = classify_segments(f_i, table.effective(), 0.07);
            return reduce_sum(mul(f_c, pick_weights));
        };
        // one training pass seeds the running statistics
        dec.forward(f_v, 4, 4, masks, true);
        ParamMap params;
        dec.collect_params("c", params);
        Rng pick(70);
        for (auto& [name, t] : params) EXPECT_LT(fd_param_err(loss_fn, t, 1e-6, 4, pick), 1e-4) << name;
    }
}

}  // namespace
}  // namespace deop
