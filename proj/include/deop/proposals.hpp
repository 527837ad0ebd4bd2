#pragma once

// Class-agnostic mask proposals: a small conv backbone with a query-based
// mask head, a label-map oracle source for isolation tests, and the
// Hungarian matching + mask loss used to train the network.

#include <string>
#include <utility>
#include <vector>

#include "deop/hungarian.hpp"
#include "deop/labels.hpp"
#include "deop/losses.hpp"
#include "deop/masks.hpp"
#include "deop/nn.hpp"

namespace deop {

struct ProposalNetConfig {
    int image_size = 64;
    int base_channels = 16;  // doubled at each of the three stride-2 stages
    int embed_dim = 32;      // per-pixel embedding and query width
    int num_queries = 8;
    int decoder_layers = 2;
    int num_heads = 2;
    int mask_scale = 4;  // proposal masks at image_size / mask_scale

    int mask_size() const { return image_size / mask_scale; }

    void validate() const {
        if (image_size % 8 != 0)
            throw ConfigError("proposals: image size " + std::to_string(image_size) + " not divisible by 8");
        if (image_size % mask_scale != 0)
            throw ConfigError("proposals: mask scale " + std::to_string(mask_scale) + " does not divide image size");
        if (embed_dim % num_heads != 0) throw ConfigError("proposals: embed dim not divisible by heads");
        if (num_queries < 1) throw ConfigError("proposals: need at least one query");
    }
};

struct ProposeTrace {
    Tensor f_p;         // [embed_dim, mask_pixels]
    Tensor embeddings;  // [N, embed_dim]
};

class ProposalNetwork {
  public:
    ProposalNetwork() = default;

    ProposalNetwork(ProposalNetConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
        cfg_.validate();
        const int bc = cfg_.base_channels, d = cfg_.embed_dim;
        c1_ = Conv2d(3, bc, 3, 2, 1, rng);
        c2_ = Conv2d(bc, 2 * bc, 3, 2, 1, rng);
        c3_ = Conv2d(2 * bc, 4 * bc, 3, 2, 1, rng);
        pix_proj_ = Conv2d(2 * bc, d, 1, 1, 0, rng);
        mem_proj_ = Linear(4 * bc, d, rng);
        queries_ = Tensor::randn({cfg_.num_queries, d}, rng, 0.02);
        layers_.reserve(static_cast<size_t>(cfg_.decoder_layers));
        for (int l = 0; l < cfg_.decoder_layers; ++l) layers_.emplace_back(d, cfg_.num_heads, rng);
        embed_head_ = Linear(d, d, rng);
    }

    const ProposalNetConfig& config() const { return cfg_; }
    Tensor& queries() { return queries_; }

    // image: [3, S, S] -> N masks at [S/4, S/4], values in (0,1).
    MaskSet propose(const Tensor& image, ProposeTrace* trace = nullptr) const {
        if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != cfg_.image_size || image.dim(2) != cfg_.image_size)
            throw ShapeError("proposals: expected [3x" + std::to_string(cfg_.image_size) + "x" +
                             std::to_string(cfg_.image_size) + "] image, got " + shape_str(image.shape()));
        Tensor f1 = relu(c1_.forward(image));
        Tensor f2 = relu(c2_.forward(f1));
        Tensor f3 = relu(c3_.forward(f2));

        const int ms = cfg_.mask_size();
        Tensor f2m = f2;
        if (f2.dim(1) != ms) {
            // mask grid differs from the mid-stage grid: resample per channel
            std::vector<Tensor> chans;
            for (int c = 0; c < f2.dim(0); ++c) {
                Tensor ch = reshape(slice_rows(reshape(f2, {f2.dim(0), f2.dim(1) * f2.dim(2)}), c, 1),
                                    {f2.dim(1), f2.dim(2)});
                chans.push_back(reshape(resize_bilinear(ch, ms, ms), {1, ms * ms}));
            }
            f2m = reshape(concat_rows(chans), {f2.dim(0), ms, ms});
        }
        Tensor fp = reshape(pix_proj_.forward(f2m), {cfg_.embed_dim, ms * ms});

        const int mem_tokens = f3.dim(1) * f3.dim(2);
        Tensor memory = mem_proj_.forward(transpose(reshape(f3, {f3.dim(0), mem_tokens})));

        Tensor q = queries_;
        for (const auto& layer : layers_) q = layer.forward(q, memory);
        Tensor emb = embed_head_.forward(q);

        if (trace) {
            trace->f_p = fp;
            trace->embeddings = emb;
        }
        Tensor logits = matmul(emb, fp);
        return MaskSet(reshape(sigmoid(logits), {cfg_.num_queries, ms, ms}));
    }

    void collect_params(const std::string& prefix, ParamMap& out) const {
        c1_.collect_params(prefix + ".c1", out);
        c2_.collect_params(prefix + ".c2", out);
        c3_.collect_params(prefix + ".c3", out);
        pix_proj_.collect_params(prefix + ".pix_proj", out);
        mem_proj_.collect_params(prefix + ".mem_proj", out);
        out.emplace_back(prefix + ".queries", queries_);
        for (size_t l = 0; l < layers_.size(); ++l)
            layers_[l].collect_params(prefix + ".dec" + std::to_string(l), out);
        embed_head_.collect_params(prefix + ".embed_head", out);
    }

    void set_trainable(bool trainable) {
        ParamMap all;
        collect_params("p", all);
        mark_trainable(all, trainable);
    }

  private:
    ProposalNetConfig cfg_;
    Conv2d c1_, c2_, c3_, pix_proj_;
    Linear mem_proj_;
    Tensor queries_;
    std::vector<TransformerDecoderLayer> layers_;
    Linear embed_head_;
};

// One binary mask per class region present in the label map, padded with
// all-zero masks to n. jitter flips boundary-adjacent pixels with the given
// probability (seeded). Ignore pixels belong to no mask.
inline MaskSet oracle_masks(const SegLabelMap& labels, double jitter, int n, uint64_t seed) {
    if (jitter < 0.0 || jitter > 1.0) throw ContractError("oracle masks: jitter outside [0,1]");
    std::vector<int> classes = labels.present_classes();
    if (static_cast<int>(classes.size()) > n)
        throw CapacityError("oracle masks: " + std::to_string(classes.size()) + " segments exceed " +
                            std::to_string(n) + " masks");
    Tensor m = Tensor::zeros({n, labels.h, labels.w});
    for (size_t s = 0; s < classes.size(); ++s) {
        const int cls = classes[s];
        for (int y = 0; y < labels.h; ++y)
            for (int x = 0; x < labels.w; ++x)
                if (labels.at(y, x) == cls)
                    m.vals()[(s * static_cast<size_t>(labels.h) + y) * labels.w + x] = 1.0;
    }
    if (jitter > 0.0) {
        Rng rng(seed);
        for (size_t s = 0; s < classes.size(); ++s) {
            const int cls = classes[s];
            for (int y = 0; y < labels.h; ++y)
                for (int x = 0; x < labels.w; ++x) {
                    bool boundary = false;
                    const int here = labels.at(y, x);
                    const int dy[] = {-1, 1, 0, 0}, dx[] = {0, 0, -1, 1};
                    for (int k = 0; k < 4 && !boundary; ++k) {
                        const int ny = y + dy[k], nx = x + dx[k];
                        if (ny < 0 || ny >= labels.h || nx < 0 || nx >= labels.w) continue;
                        boundary = labels.at(ny, nx) != here;
                    }
                    if (!boundary) continue;
                    if (rng.bernoulli(jitter)) {
                        double& v = m.vals()[(s * static_cast<size_t>(labels.h) + y) * labels.w + x];
                        v = (labels.at(y, x) == cls) ? 0.0 : 1.0;
                    }
                }
        }
    }
    return MaskSet(m);
}

// Matched (prediction index, ground-truth index) pairs covering every
// non-empty ground-truth mask at minimum total dice+focal cost.
inline std::vector<std::pair<int, int>> hungarian_match(const MaskSet& pred, const MaskSet& gt,
                                                        const LossWeights& w = {}) {
    if (pred.height() != gt.height() || pred.width() != gt.width())
        throw ShapeError("matching: prediction grid " + shape_str(pred.masks.shape()) + " vs gt " +
                         shape_str(gt.masks.shape()));
    std::vector<int> gt_rows;
    Tensor gf = gt.flat();
    for (int g = 0; g < gt.count(); ++g) {
        bool nonempty = false;
        for (int p = 0; p < gt.height() * gt.width() && !nonempty; ++p) nonempty = gf.at(g, p) > 0.0;
        if (nonempty) gt_rows.push_back(g);
    }
    if (static_cast<int>(gt_rows.size()) > pred.count())
        throw CapacityError("matching: " + std::to_string(gt_rows.size()) + " segments exceed " +
                            std::to_string(pred.count()) + " proposals");
    if (gt_rows.empty()) return {};

    Tensor pf = pred.flat();
    std::vector<std::vector<double>> cost(gt_rows.size(), std::vector<double>(static_cast<size_t>(pred.count())));
    {
        NoTapeScope off;
        for (size_t gi = 0; gi < gt_rows.size(); ++gi) {
            Tensor grow = slice_rows(gf, gt_rows[gi], 1);
            for (int p = 0; p < pred.count(); ++p)
                cost[gi][static_cast<size_t>(p)] = mask_pair_cost(slice_rows(pf, p, 1), grow, w);
        }
    }
    std::vector<int> assign = hungarian_min_assign(cost);
    std::vector<std::pair<int, int>> out;
    for (size_t gi = 0; gi < gt_rows.size(); ++gi) out.emplace_back(assign[gi], gt_rows[gi]);
    return out;
}

// Sum of dice+focal over matched pairs; unmatched predictions contribute
// nothing.
inline Tensor mask_loss(const MaskSet& pred, const MaskSet& gt, const std::vector<std::pair<int, int>>& assignment,
                        const LossWeights& w = {}) {
    Tensor pf = pred.flat(), gf = gt.flat();
    Tensor total = Tensor::scalar(0.0);
    for (const auto& [pi, gi] : assignment) {
        if (pi < 0 || pi >= pred.count() || gi < 0 || gi >= gt.count())
            throw ContractError("mask loss: assignment index out of range");
        total = add(total, mask_pair_loss(slice_rows(pf, pi, 1), slice_rows(gf, gi, 1), w));
    }
    return total;
}

}  // namespace deop
