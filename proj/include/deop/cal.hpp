#pragma once

// Classification-anchor heatmap decoders. Both consume the encoder feature
// grid and the proposal masks and emit one nonnegative heatmap per proposal
// over the token grid, used downstream for heatmap-based pooling.

#include <string>
#include <vector>

#include "deop/masks.hpp"
#include "deop/nn.hpp"

namespace deop {

struct HeatmapSet {
    Tensor heatmaps;  // [N, gh, gw], all values >= 0

    HeatmapSet() = default;
    explicit HeatmapSet(Tensor h) : heatmaps(std::move(h)) {
        if (heatmaps.rank() != 3)
            throw ShapeError("heatmap set: expected [NxHxW], got " + shape_str(heatmaps.shape()));
    }

    int count() const { return heatmaps.dim(0); }
    int height() const { return heatmaps.dim(1); }
    int width() const { return heatmaps.dim(2); }
    Tensor flat() const { return reshape(heatmaps, {count(), height() * width()}); }
};

struct CalConfig {
    bool query_based = true;
    int layers = 1;         // K
    int conv_channels = 64;
    int num_heads = 2;

    void validate(bool conv_path) const {
        if (conv_path && layers < 1) throw ConfigError("heatmap decoder: conv path needs at least one layer");
        if (!conv_path && layers < 0) throw ConfigError("heatmap decoder: negative layer count");
    }
};

// Query path: learnable anchor queries refined by K standard decoder layers
// cross-attending to the feature grid, then a heatmap output layer:
// H = softmax(mhsa(q) x F_V^T / sqrt(d), spatial) * M.
class QueryHeatmapDecoder {
  public:
    QueryHeatmapDecoder() = default;

    QueryHeatmapDecoder(int n, int d, const CalConfig& cfg, Rng& rng) : n_(n), d_(d) {
        cfg.validate(false);
        queries_ = Tensor::randn({n, d}, rng, 0.02);
        layers_.reserve(static_cast<size_t>(cfg.layers));
        for (int l = 0; l < cfg.layers; ++l) layers_.emplace_back(d, cfg.num_heads, rng);
        out_attn_ = MultiHeadAttention(d, cfg.num_heads, rng);
    }

    Tensor& queries() { return queries_; }

    // f_v: [tokens, d] over a gh x gw grid; masks resample to that grid.
    HeatmapSet forward(const Tensor& f_v, int gh, int gw, const MaskSet& masks) const {
        if (f_v.rank() != 2 || f_v.dim(0) != gh * gw)
            throw ShapeError("heatmap decoder: features " + shape_str(f_v.shape()) + " do not cover a " +
                             std::to_string(gh) + "x" + std::to_string(gw) + " grid");
        if (f_v.dim(1) != d_)
            throw ShapeError("heatmap decoder: feature dim " + std::to_string(f_v.dim(1)) + " vs query dim " +
                             std::to_string(d_));
        if (masks.count() != n_)
            throw ShapeError("heatmap decoder: " + std::to_string(masks.count()) + " masks for " +
                             std::to_string(n_) + " queries");
        Tensor q = queries_;
        for (const auto& layer : layers_) q = layer.forward(q, f_v);
        Tensor q2 = out_attn_.forward(q, q);
        Tensor scores = scale(matmul(q2, transpose(f_v)), 1.0 / std::sqrt(static_cast<double>(d_)));
        Tensor attn = softmax(scores, 1);
        Tensor m = masks.resized(gh, gw).flat();
        return HeatmapSet(reshape(mul(attn, m), {n_, gh, gw}));
    }

    void collect_params(const std::string& prefix, ParamMap& out) const {
        out.emplace_back(prefix + ".queries", queries_);
        for (size_t l = 0; l < layers_.size(); ++l)
            layers_[l].collect_params(prefix + ".dec" + std::to_string(l), out);
        out_attn_.collect_params(prefix + ".out_attn", out);
    }

    void set_trainable(bool trainable) {
        ParamMap all;
        collect_params("q", all);
        mark_trainable(all, trainable);
    }

  private:
    int n_ = 0, d_ = 0;
    Tensor queries_;
    std::vector<TransformerDecoderLayer> layers_;
    MultiHeadAttention out_attn_;
};

// Conv path: per proposal, mask-weighted features pass K conv+bn+relu blocks
// and a single-channel conv; a spatial softmax produces the heatmap.
class ConvHeatmapDecoder {
  public:
    ConvHeatmapDecoder() = default;

    ConvHeatmapDecoder(int d, const CalConfig& cfg, Rng& rng) : d_(d), k_(cfg.layers) {
        cfg.validate(true);
        const int c = cfg.conv_channels;
        convs_.emplace_back(d, c, 3, 1, 1, rng);
        norms_.emplace_back(c);
        for (int l = 1; l < k_; ++l) {
            convs_.emplace_back(c, c, 3, 1, 1, rng);
            norms_.emplace_back(c);
        }
        final_ = Conv2d(c, 1, 3, 1, 1, rng);
    }

    HeatmapSet forward(const Tensor& f_v, int gh, int gw, const MaskSet& masks, bool training) {
        if (f_v.rank() != 2 || f_v.dim(0) != gh * gw || f_v.dim(1) != d_)
            throw ShapeError("heatmap decoder: bad feature shape " + shape_str(f_v.shape()));
        const int n = masks.count();
        const int t = gh * gw;
        Tensor ft = transpose(f_v);  // [d, tokens]
        Tensor m = masks.resized(gh, gw).flat();

        std::vector<Tensor> maps;
        maps.reserve(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) {
            Tensor mrow = broadcast_row(slice_rows(m, i, 1), d_);  // mask copied per channel
            maps.push_back(reshape(mul(ft, mrow), {d_, gh, gw}));
        }
        for (int l = 0; l < k_; ++l) {
            for (auto& x : maps) x = convs_[static_cast<size_t>(l)].forward(x);
            maps = norms_[static_cast<size_t>(l)].forward(maps, training);
            for (auto& x : maps) x = relu(x);
        }
        std::vector<Tensor> rows;
        rows.reserve(static_cast<size_t>(n));
        for (auto& x : maps) rows.push_back(softmax(reshape(final_.forward(x), {t}), 0));
        std::vector<Tensor> rows2d;
        rows2d.reserve(rows.size());
        for (auto& r : rows) rows2d.push_back(reshape(r, {1, t}));
        return HeatmapSet(reshape(concat_rows(rows2d), {n, gh, gw}));
    }

    void collect_params(const std::string& prefix, ParamMap& out) const {
        for (size_t l = 0; l < convs_.size(); ++l) {
            convs_[l].collect_params(prefix + ".conv" + std::to_string(l), out);
            norms_[l].collect_params(prefix + ".bn" + std::to_string(l), out);
        }
        final_.collect_params(prefix + ".final", out);
    }

    void collect_state(const std::string& prefix, ParamMap& out) const {
        for (size_t l = 0; l < norms_.size(); ++l) norms_[l].collect_state(prefix + ".bn" + std::to_string(l), out);
    }

    void set_trainable(bool trainable) {
        ParamMap all;
        collect_params("c", all);
        mark_trainable(all, trainable);
    }

  private:
    int d_ = 0, k_ = 0;
    std::vector<Conv2d> convs_;
    std::vector<BatchNorm2d> norms_;
    Conv2d final_;
};

}  // namespace deop
