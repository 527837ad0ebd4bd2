#pragma once

// Zero-shot segment classification: pooled per-proposal features scored
// against a fixed class-embedding table (with learnable offsets for seen
// classes only), assembled into per-pixel class scores.

#include <algorithm>
#include <string>
#include <vector>

#include "deop/cal.hpp"
#include "deop/labels.hpp"
#include "deop/losses.hpp"
#include "deop/masks.hpp"
#include "deop/nn.hpp"

namespace deop {

struct ClassInfo {
    int id = 0;
    std::string name;
    bool seen = true;
    uint64_t embed_seed = 0;
};

// Base embeddings are frozen; the learnable offsets tensor has one row per
// seen class and reaches the full table through a constant selection matrix,
// so unseen rows cannot change, even bitwise, during training.
class ClassEmbeddingTable {
  public:
    ClassEmbeddingTable() = default;

    ClassEmbeddingTable(std::vector<ClassInfo> classes, Tensor base) : classes_(std::move(classes)), base_(std::move(base)) {
        const int c = static_cast<int>(classes_.size());
        if (base_.rank() != 2 || base_.dim(0) != c)
            throw ShapeError("class table: base " + shape_str(base_.shape()) + " for " + std::to_string(c) + " classes");
        d_ = base_.dim(1);
        std::vector<int> seen_ids;
        for (const ClassInfo& ci : classes_)
            if (ci.seen) seen_ids.push_back(ci.id);
        offsets_ = Tensor::zeros({static_cast<int>(seen_ids.size()), d_});
        sel_ = Tensor::zeros({c, static_cast<int>(seen_ids.size())});
        for (size_t s = 0; s < seen_ids.size(); ++s) sel_.at(seen_ids[s], static_cast<int>(s)) = 1.0;
    }

    // Base rows drawn from each class's embedding seed: one unit Gaussian per
    // name token (split on '_'), summed and L2-normalized, so classes sharing
    // a shape or texture word share embedding structure.
    static ClassEmbeddingTable from_seeds(std::vector<ClassInfo> classes, int d) {
        const int c = static_cast<int>(classes.size());
        Tensor base = Tensor::zeros({c, d});
        for (int i = 0; i < c; ++i) {
            std::vector<double> acc(static_cast<size_t>(d), 0.0);
            const std::string& name = classes[static_cast<size_t>(i)].name;
            size_t start = 0;
            while (start <= name.size()) {
                size_t end = name.find('_', start);
                if (end == std::string::npos) end = name.size();
                const std::string token = name.substr(start, end - start);
                if (!token.empty()) {
                    Rng rng(hash_string(token));
                    double norm2 = 0.0;
                    std::vector<double> v(static_cast<size_t>(d));
                    for (auto& x : v) {
                        x = rng.normal();
                        norm2 += x * x;
                    }
                    const double inv = 1.0 / std::sqrt(norm2);
                    for (int j = 0; j < d; ++j) acc[static_cast<size_t>(j)] += v[static_cast<size_t>(j)] * inv;
                }
                start = end + 1;
            }
            double norm2 = 0.0;
            for (double x : acc) norm2 += x * x;
            const double inv = norm2 > 0 ? 1.0 / std::sqrt(norm2) : 0.0;
            for (int j = 0; j < d; ++j) base.at(i, j) = acc[static_cast<size_t>(j)] * inv;
        }
        return ClassEmbeddingTable(std::move(classes), std::move(base));
    }

    int num_classes() const { return static_cast<int>(classes_.size()); }
    int dim() const { return d_; }
    const std::vector<ClassInfo>& classes() const { return classes_; }
    const Tensor& base() const { return base_; }
    Tensor& offsets() { return offsets_; }
    const Tensor& offsets() const { return offsets_; }

    std::vector<int> seen_ids() const {
        std::vector<int> out;
        for (const ClassInfo& ci : classes_)
            if (ci.seen) out.push_back(ci.id);
        return out;
    }
    std::vector<int> unseen_ids() const {
        std::vector<int> out;
        for (const ClassInfo& ci : classes_)
            if (!ci.seen) out.push_back(ci.id);
        return out;
    }

    // base + sel * offsets, rows in class-id order.
    Tensor effective() const { return add(base_, matmul(sel_, offsets_)); }

    // Effective rows for the given class ids (constant selection, so offset
    // gradients flow only into the selected classes).
    Tensor effective_subset(const std::vector<int>& ids) const {
        Tensor pick = Tensor::zeros({static_cast<int>(ids.size()), num_classes()});
        for (size_t r = 0; r < ids.size(); ++r) {
            if (ids[r] < 0 || ids[r] >= num_classes())
                throw ContractError("class table: id " + std::to_string(ids[r]) + " out of range");
            pick.at(static_cast<int>(r), ids[r]) = 1.0;
        }
        return matmul(pick, effective());
    }

    void set_offsets_trainable(bool trainable) { offsets_.set_requires_grad(trainable); }

    void collect_params(const std::string& prefix, ParamMap& out) const {
        out.emplace_back(prefix + ".offsets", offsets_);
    }
    void collect_state(const std::string& prefix, ParamMap& out) const {
        out.emplace_back(prefix + ".base", base_);
    }

  private:
    std::vector<ClassInfo> classes_;
    Tensor base_;
    Tensor offsets_;
    Tensor sel_;
    int d_ = 0;
};

inline constexpr double kPoolEps = 1e-6;

// Weighted spatial average: F_I[n] = sum_p w[n,p] F_V[p] / max(sum_p w[n,p],
// eps). An all-zero weight row yields a zero vector and a degenerate flag.
inline Tensor pool(const Tensor& f_v, const Tensor& weights, std::vector<bool>* degenerate = nullptr) {
    if (f_v.rank() != 2 || weights.rank() != 2 || weights.dim(1) != f_v.dim(0))
        throw ShapeError("pool: weights " + shape_str(weights.shape()) + " vs features " + shape_str(f_v.shape()));
    for (double v : weights.vals())
        if (v < 0.0) throw ContractError("pool: negative weight");
    const int n = weights.dim(0), d = f_v.dim(1);
    Tensor num = matmul(weights, f_v);
    Tensor sums = row_sums(weights);
    if (degenerate) {
        degenerate->assign(static_cast<size_t>(n), false);
        for (int i = 0; i < n; ++i) (*degenerate)[static_cast<size_t>(i)] = sums.at(i) <= 0.0;
    }
    Tensor den = clamp(sums, kPoolEps, std::numeric_limits<double>::max());
    return divide(num, broadcast_col(reshape(den, {n, 1}), d));
}

inline Tensor pool(const Tensor& f_v, const MaskSet& weights, std::vector<bool>* degenerate = nullptr) {
    return pool(f_v, weights.flat(), degenerate);
}
inline Tensor pool(const Tensor& f_v, const HeatmapSet& weights, std::vector<bool>* degenerate = nullptr) {
    return pool(f_v, weights.flat(), degenerate);
}

// Row-wise L2 normalization; zero rows stay zero (flagged).
inline Tensor normalize_rows(const Tensor& x, std::vector<bool>* degenerate = nullptr) {
    if (x.rank() != 2) throw ShapeError("normalize: expected 2-d tensor, got " + shape_str(x.shape()));
    const int n = x.dim(0);
    if (degenerate) degenerate->assign(static_cast<size_t>(n), false);
    std::vector<Tensor> rows;
    rows.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        Tensor r = slice_rows(x, i, 1);
        double n2 = 0.0;
        for (double v : r.vals()) n2 += v * v;
        if (n2 <= 0.0) {
            if (degenerate) (*degenerate)[static_cast<size_t>(i)] = true;
            rows.push_back(Tensor::zeros({1, x.dim(1)}));
        } else {
            rows.push_back(div_by(r, sqrt(reduce_sum(mul(r, r)))));
        }
    }
    return concat_rows(rows);
}

// Cosine-similarity classifier: softmax over classes of
// normalize(F_I) . normalize(rows)^T / tau. Degenerate (zero-norm) pooled
// vectors score uniformly.
inline Tensor classify_segments(const Tensor& f_i, const Tensor& class_rows, double tau,
                                std::vector<bool>* degenerate = nullptr) {
    if (!(tau > 0.0)) throw ContractError("classify: temperature must be positive");
    if (f_i.rank() != 2 || class_rows.rank() != 2 || f_i.dim(1) != class_rows.dim(1))
        throw ShapeError("classify: features " + shape_str(f_i.shape()) + " vs table " + shape_str(class_rows.shape()));
    Tensor ni = normalize_rows(f_i, degenerate);
    Tensor nt = normalize_rows(class_rows);
    Tensor logits = scale(matmul(ni, transpose(nt)), 1.0 / tau);
    return softmax(logits, 1);
}

struct SegPrediction {
    Tensor scores;  // [num_classes, H*W]
    SegLabelMap labels;
};

// O[c,p] = sum_n F_C[n,c] * M[n,p]; the label map is the argmax over classes
// (lowest id wins ties).
inline SegPrediction assemble_prediction(const Tensor& f_c, const MaskSet& masks, int out_h, int out_w) {
    if (f_c.rank() != 2 || f_c.dim(0) != masks.count())
        throw ShapeError("assemble: scores " + shape_str(f_c.shape()) + " vs " + std::to_string(masks.count()) +
                         " masks");
    MaskSet up = (masks.height() == out_h && masks.width() == out_w) ? masks : masks.resized(out_h, out_w);
    SegPrediction out;
    out.scores = matmul(transpose(f_c), up.flat());
    out.labels = SegLabelMap(out_h, out_w);
    const int c = f_c.dim(1);
    for (int p = 0; p < out_h * out_w; ++p) {
        int best = 0;
        double best_v = out.scores.at(0, p);
        for (int k = 1; k < c; ++k)
            if (out.scores.at(k, p) > best_v) {
                best_v = out.scores.at(k, p);
                best = k;
            }
        out.labels.labels[static_cast<size_t>(p)] = best;
    }
    return out;
}

// Training loss over per-pixel class scores restricted to seen classes.
// scores: [S, P] raw rows matching class_ids; a per-pixel softmax over these
// rows precedes per-class dice+focal against the binary target maps. Ground
// truth mentioning any other class id is a protocol violation.
inline Tensor training_loss(const Tensor& scores, const SegLabelMap& gt, const std::vector<int>& class_ids,
                            const LossWeights& w = {}) {
    const int s = static_cast<int>(class_ids.size());
    if (scores.rank() != 2 || scores.dim(0) != s)
        throw ShapeError("training loss: scores " + shape_str(scores.shape()) + " for " + std::to_string(s) +
                         " classes");
    if (scores.dim(1) != gt.numel())
        throw ShapeError("training loss: " + std::to_string(scores.dim(1)) + " pixels vs label map " +
                         std::to_string(gt.numel()));
    std::vector<int> id_to_row(256, -1);
    for (int r = 0; r < s; ++r) id_to_row[static_cast<size_t>(class_ids[static_cast<size_t>(r)])] = r;
    int64_t n_valid = 0;
    for (int v : gt.labels) {
        if (v == SegLabelMap::kIgnore) continue;
        if (v < 0 || v > 255 || id_to_row[static_cast<size_t>(v)] < 0)
            throw ProtocolError("training loss: ground truth contains class " + std::to_string(v) +
                                " outside the training class set");
        ++n_valid;
    }
    if (n_valid == 0) throw ContractError("training loss: label map has no valid pixels");

    Tensor probs = softmax(scores, 0);
    const bool has_ignore = n_valid != gt.numel();
    Tensor valid;
    if (has_ignore) {
        valid = Tensor::zeros({1, static_cast<int>(gt.numel())});
        for (int64_t p = 0; p < gt.numel(); ++p)
            valid.at(static_cast<int>(p)) = gt.labels[static_cast<size_t>(p)] == SegLabelMap::kIgnore ? 0.0 : 1.0;
    }
    Tensor total = Tensor::scalar(0.0);
    for (int r = 0; r < s; ++r) {
        Tensor target = Tensor::zeros({1, static_cast<int>(gt.numel())});
        for (int64_t p = 0; p < gt.numel(); ++p)
            if (gt.labels[static_cast<size_t>(p)] == class_ids[static_cast<size_t>(r)])
                target.at(static_cast<int>(p)) = 1.0;
        Tensor row = slice_rows(probs, r, 1);
        total = add(total, mask_pair_loss(row, target, w, has_ignore ? &valid : nullptr));
    }
    return total;
}

}  // namespace deop
