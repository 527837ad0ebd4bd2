#pragma once
// Finite-difference verification of tape gradients, module by module, plus
// the fully assembled one-pass loss. Each check returns its worst relative
// error; the suite passes below 1e-4.

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "deop/cal.hpp"
#include "deop/classify.hpp"
#include "deop/encoder.hpp"
#include "deop/losses.hpp"
#include "deop/proposals.hpp"
#include "deop/tensor.hpp"

namespace deop {
namespace detail {

// Central differences on up to max_coords sampled coordinates of one
// parameter tensor against a single tape backward pass.
inline double fd_max_rel_err(const std::function<Tensor()>& loss_fn, Tensor param, double eps = 1e-6,
                             int max_coords = 6, uint64_t seed = 99) {
    param.set_requires_grad(true);
    GradTape tape;
    double worst = 0.0;
    {
        TapeScope scope(tape);
        Tensor loss = loss_fn();
        tape.backward(loss);
    }
    const std::vector<double>* g = tape.find_grad(param.node());
    std::vector<double> ad(param.vals().size(), 0.0);
    if (g) ad = *g;

    Rng rng(seed);
    const int n = static_cast<int>(param.vals().size());
    std::vector<int> coords;
    if (n <= max_coords)
        for (int i = 0; i < n; ++i) coords.push_back(i);
    else
        for (int i = 0; i < max_coords; ++i) coords.push_back(static_cast<int>(rng.randint(0, n - 1)));

    for (int c : coords) {
        const double keep = param.vals()[static_cast<size_t>(c)];
        param.vals()[static_cast<size_t>(c)] = keep + eps;
        const double up = loss_fn().item();
        param.vals()[static_cast<size_t>(c)] = keep - eps;
        const double dn = loss_fn().item();
        param.vals()[static_cast<size_t>(c)] = keep;
        const double fd = (up - dn) / (2.0 * eps);
        const double a = ad[static_cast<size_t>(c)];
        const double rel = std::fabs(fd - a) / std::max({1.0, std::fabs(fd), std::fabs(a)});
        worst = std::max(worst, rel);
    }
    param.set_requires_grad(false);
    return worst;
}

inline double fd_over_params(const std::function<Tensor()>& loss_fn, const ParamMap& params, double eps = 1e-6,
                             int max_coords = 4) {
    double worst = 0.0;
    uint64_t salt = 7;
    for (const auto& [name, t] : params)
        worst = std::max(worst, fd_max_rel_err(loss_fn, t, eps, max_coords, salt++));
    return worst;
}

}  // namespace detail

// Bare losses on fixed soft maps.
inline double gradcheck_losses() {
    Rng rng(11);
    Tensor pred = Tensor::zeros({3, 12});
    for (double& v : pred.vals()) v = rng.uniform(0.05, 0.95);
    Tensor gt = Tensor::zeros({3, 12});
    for (double& v : gt.vals()) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
    double worst = detail::fd_max_rel_err([&] { return dice_loss(pred, gt); }, pred, 1e-6, 8, 3);
    worst = std::max(worst, detail::fd_max_rel_err([&] { return focal_loss(pred, gt); }, pred, 1e-6, 8, 4));
    worst = std::max(worst, detail::fd_max_rel_err([&] { return mask_pair_loss(pred, gt, {}); }, pred, 1e-6, 8, 5));
    return worst;
}

// Core ops chained: matmul, softmax, layer norm, reductions.
inline double gradcheck_tensor() {
    Rng rng(21);
    Tensor a = Tensor::randn({3, 4}, rng, 1.0);
    Tensor b = Tensor::randn({4, 3}, rng, 1.0);
    Tensor gamma = Tensor::full({1, 3}, 1.0);
    Tensor beta = Tensor::zeros({1, 3});
    auto loss = [&] {
        Tensor y = layer_norm(softmax(matmul(a, b), 1), gamma, beta);
        return reduce_sum(mul(y, sigmoid(matmul(a, b))));
    };
    double worst = detail::fd_max_rel_err(loss, a, 1e-6, 8, 5);
    worst = std::max(worst, detail::fd_max_rel_err(loss, b, 1e-6, 8, 6));
    worst = std::max(worst, detail::fd_max_rel_err(loss, gamma, 1e-6, 3, 7));
    return worst;
}

// A miniature encoder, blended and severed, against a fixed readout.
inline double gradcheck_encoder() {
    EncoderConfig cfg;
    cfg.image_size = 16;
    cfg.patch_size = 8;
    cfg.embed_dim = 8;
    cfg.num_layers = 2;
    cfg.num_heads = 2;
    cfg.severance = {SeverSpec::none(), SeverSpec::gps(0.5)};
    cfg.prompt.mode = PromptMode::add;
    Rng rng(31);
    VitEncoder enc(cfg, rng);
    Tensor img = Tensor::randn({3, 16, 16}, rng, 0.5);
    Tensor probe = Tensor::randn({cfg.grid() * cfg.grid() * cfg.embed_dim, 1}, rng, 1.0);
    auto loss = [&] {
        Tensor f = reshape(enc.encode(img), {1, cfg.grid() * cfg.grid() * cfg.embed_dim});
        return matmul(f, probe);
    };
    ParamMap params;
    enc.collect_body_params("enc", params);
    enc.collect_prompt_params("enc", params);
    return detail::fd_over_params(loss, params, 1e-6, 3);
}

// Proposal network through matching and the mask loss.
inline double gradcheck_proposals() {
    ProposalNetConfig cfg;
    cfg.image_size = 16;
    cfg.base_channels = 4;
    cfg.embed_dim = 8;
    cfg.num_queries = 2;
    cfg.decoder_layers = 1;
    cfg.num_heads = 2;
    cfg.mask_scale = 4;
    Rng rng(41);
    ProposalNetwork net(cfg, rng);
    Tensor img = Tensor::randn({3, 16, 16}, rng, 0.5);
    const int ms = cfg.mask_size();
    Tensor gt = Tensor::zeros({2, ms, ms});
    for (int y = 0; y < ms; ++y)
        for (int x = 0; x < ms; ++x) {
            gt.vals()[static_cast<size_t>(y) * ms + x] = x < ms / 2 ? 1.0 : 0.0;
            gt.vals()[static_cast<size_t>(ms) * ms + static_cast<size_t>(y) * ms + x] = x < ms / 2 ? 0.0 : 1.0;
        }
    MaskSet gt_set(gt);
    LossWeights lw;
    auto loss = [&] {
        MaskSet pred = net.propose(img);
        auto match = hungarian_match(pred, gt_set, lw);
        return mask_loss(pred, gt_set, match, lw);
    };
    ParamMap params;
    net.collect_params("p", params);
    return detail::fd_over_params(loss, params, 1e-6, 2);
}

namespace detail {

// Shared fixture for the assembled checks: a 2-class 8x8 sample pushed
// through encoder, anchor heatmaps, pooling, classification, assembly, and
// the training loss.
struct AssembledFixture {
    EncoderConfig ecfg;
    CalConfig ccfg;
    VitEncoder enc;
    QueryHeatmapDecoder calq;
    ConvHeatmapDecoder calc;
    ClassEmbeddingTable table;
    Tensor img;
    MaskSet masks;
    SegLabelMap gt;
    std::vector<int> ids{0, 1};
    double tau = 0.07;

    explicit AssembledFixture(bool query_based) {
        ecfg.image_size = 8;
        ecfg.patch_size = 4;
        ecfg.embed_dim = 8;
        ecfg.num_layers = 2;
        ecfg.num_heads = 2;
        ecfg.severance = {SeverSpec::none(), SeverSpec::gps(0.5)};
        ecfg.prompt.mode = PromptMode::add;
        ccfg.query_based = query_based;
        ccfg.layers = 1;
        ccfg.conv_channels = 6;
        ccfg.num_heads = 2;
        Rng rng(51);
        enc = VitEncoder(ecfg, rng);
        calq = QueryHeatmapDecoder(2, ecfg.embed_dim, ccfg, rng);
        calc = ConvHeatmapDecoder(ecfg.embed_dim, ccfg, rng);
        std::vector<ClassInfo> classes = {{0, "background", true, 1}, {1, "blob", true, 2}};
        table = ClassEmbeddingTable::from_seeds(classes, ecfg.embed_dim);
        img = Tensor::randn({3, 8, 8}, rng, 0.5);
        Tensor m = Tensor::zeros({2, 8, 8});
        gt = SegLabelMap(8, 8, 0);
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x) {
                const bool inside = y >= 2 && y < 6 && x >= 3 && x < 7;
                m.vals()[static_cast<size_t>(y) * 8 + x] = inside ? 0.1 : 0.9;
                m.vals()[64 + static_cast<size_t>(y) * 8 + x] = inside ? 0.9 : 0.1;
                if (inside) gt.at(y, x) = 1;
            }
        masks = MaskSet(m);
        if (!query_based) {
            // one training pass seeds usable batch-norm statistics
            Tensor f_v = reshape(enc.encode(img, &masks), {4, 8});
            calc.forward(f_v, 2, 2, masks, true);
        }
    }

    Tensor loss() {
        Tensor f_v = reshape(enc.encode(img, &masks), {4, 8});
        Tensor w = ccfg.query_based ? calq.forward(f_v, 2, 2, masks).flat()
                                    : calc.forward(f_v, 2, 2, masks, false).flat();
        Tensor pooled = pool(f_v, w);
        Tensor rows = table.effective_subset(ids);
        Tensor f_c = classify_segments(pooled, rows, tau);
        SegPrediction pred = assemble_prediction(f_c, masks, 8, 8);
        return training_loss(pred.scores, gt, ids);
    }

    ParamMap trainables() {
        ParamMap out;
        table.collect_params("table", out);
        enc.collect_prompt_params("enc", out);
        enc.collect_body_params("enc", out);
        if (ccfg.query_based) calq.collect_params("cal", out);
        else calc.collect_params("cal", out);
        return out;
    }
};

}  // namespace detail

// The assembled one-pass loss on a 2-class 8x8 sample, both heatmap paths.
inline double gradcheck_assembled(bool query_based) {
    detail::AssembledFixture fx(query_based);
    return detail::fd_over_params([&] { return fx.loss(); }, fx.trainables(), 1e-6, 2);
}

inline std::map<std::string, double> gradcheck_all() {
    std::map<std::string, double> out;
    out["losses"] = gradcheck_losses();
    out["tensor"] = gradcheck_tensor();
    out["encoder"] = gradcheck_encoder();
    out["proposals"] = gradcheck_proposals();
    out["assembled_query"] = gradcheck_assembled(true);
    out["assembled_conv"] = gradcheck_assembled(false);
    return out;
}

}  // namespace deop
