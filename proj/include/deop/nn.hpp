#pragma once

// Layer primitives shared by the encoder, proposal network and heatmap
// decoders. Layers own their parameters as Tensors; collect_params walks them
// with dotted names for the optimizer and checkpoints.

#include <string>
#include <utility>
#include <vector>

#include "deop/tensor.hpp"

namespace deop {

using ParamMap = std::vector<std::pair<std::string, Tensor>>;

inline void mark_trainable(ParamMap& params, bool trainable) {
    for (auto& [name, t] : params) t.set_requires_grad(trainable);
}

// Broadcasts a [1, d] row over n rows via a ones column, keeping gradients.
inline Tensor broadcast_row(const Tensor& row, int n) {
    if (row.rank() != 2 || row.dim(0) != 1)
        throw ShapeError("broadcast_row: expected [1xd], got " + shape_str(row.shape()));
    return matmul(Tensor::full({n, 1}, 1.0), row);
}

// Broadcasts a [c, 1] column over n columns.
inline Tensor broadcast_col(const Tensor& col, int n) {
    if (col.rank() != 2 || col.dim(1) != 1)
        throw ShapeError("broadcast_col: expected [cx1], got " + shape_str(col.shape()));
    return matmul(col, Tensor::full({1, n}, 1.0));
}

struct Linear {
    Tensor w;  // [in, out]
    Tensor b;  // [1, out]

    Linear() = default;
    Linear(int in, int out, Rng& rng) {
        w = Tensor::randn({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
        b = Tensor::zeros({1, out});
    }

    // x: [n, in] -> [n, out]
    Tensor forward(const Tensor& x) const { return add(matmul(x, w), broadcast_row(b, x.dim(0))); }

    void collect_params(const std::string& prefix, ParamMap& out) const {
        out.emplace_back(prefix + ".w", w);
        out.emplace_back(prefix + ".b", b);
    }
};

struct LayerNorm {
    Tensor gamma;  // [d]
    Tensor beta;   // [d]

    LayerNorm() = default;
    explicit LayerNorm(int d) {
        gamma = Tensor::full({d}, 1.0);
        beta = Tensor::zeros({d});
    }

    Tensor forward(const Tensor& x) const { return layer_norm(x, gamma, beta); }

    void collect_params(const std::string& prefix, ParamMap& out) const {
        out.emplace_back(prefix + ".gamma", gamma);
        out.emplace_back(prefix + ".beta", beta);
    }
};

// How one self-attention layer's token mixing is altered.
enum class SeverMode { none, gps, mps };

struct LayerSever {
    SeverMode mode = SeverMode::none;
    double alpha = 0.0;   // gps blend toward the identity
    Tensor weights;       // mps: [T, T] replacement row weights
};

struct MultiHeadAttention {
    int d = 0;
    int heads = 0;
    Tensor wq, wk, wv, wo;  // each [d, d]

    MultiHeadAttention() = default;
    MultiHeadAttention(int d_, int heads_, Rng& rng) : d(d_), heads(heads_) {
        if (d % heads != 0)
            throw ConfigError("attention: model dim " + std::to_string(d) + " not divisible by " +
                              std::to_string(heads) + " heads");
        const double s = 1.0 / std::sqrt(static_cast<double>(d));
        wq = Tensor::randn({d, d}, rng, s);
        wk = Tensor::randn({d, d}, rng, s);
        wv = Tensor::randn({d, d}, rng, s);
        wo = Tensor::randn({d, d}, rng, s);
    }

    // x_q: [Tq, d], x_kv: [Tkv, d] -> [Tq, d]. With severance, Tq must equal
    // Tkv. weight_tap, when set, receives the per-head mixed weights.
    Tensor forward(const Tensor& x_q, const Tensor& x_kv, const LayerSever& sever = {},
                   std::vector<Tensor>* weight_tap = nullptr) const {
        const int tq = x_q.dim(0), tkv = x_kv.dim(0);
        const int dh = d / heads;
        const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

        const bool mps = sever.mode == SeverMode::mps;
        if (sever.mode != SeverMode::none && tq != tkv)
            throw ContractError("attention: severance requires self-attention");
        if (mps && (sever.weights.rank() != 2 || sever.weights.dim(0) != tq || sever.weights.dim(1) != tq))
            throw ShapeError("attention: replacement weights must be [" + std::to_string(tq) + "x" +
                             std::to_string(tq) + "], got " + shape_str(sever.weights.shape()));

        Tensor v = matmul(x_kv, wv);
        Tensor q, k;
        if (!mps) {
            q = matmul(x_q, wq);
            k = matmul(x_kv, wk);
        }

        std::vector<Tensor> head_outs;
        head_outs.reserve(static_cast<size_t>(heads));
        for (int h = 0; h < heads; ++h) {
            Tensor vh = slice_cols(v, h * dh, dh);
            Tensor w;
            if (mps) {
                w = sever.weights;
            } else {
                Tensor qh = slice_cols(q, h * dh, dh);
                Tensor kh = slice_cols(k, h * dh, dh);
                Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dh);
                w = softmax(scores, 1);
                if (sever.mode == SeverMode::gps)
                    w = add(scale(Tensor::eye(tq), sever.alpha), scale(w, 1.0 - sever.alpha));
            }
            if (weight_tap) weight_tap->push_back(w);
            head_outs.push_back(matmul(w, vh));
        }
        return matmul(concat_cols(head_outs), wo);
    }

    void collect_params(const std::string& prefix, ParamMap& out) const {
        out.emplace_back(prefix + ".wq", wq);
        out.emplace_back(prefix + ".wk", wk);
        out.emplace_back(prefix + ".wv", wv);
        out.emplace_back(prefix + ".wo", wo);
    }
};

struct Mlp {
    Linear fc1, fc2;

    Mlp() = default;
    Mlp(int d, int hidden, Rng& rng) : fc1(d, hidden, rng), fc2(hidden, d, rng) {}

    Tensor forward(const Tensor& x) const { return fc2.forward(relu(fc1.forward(x))); }

    void collect_params(const std::string& prefix, ParamMap& out) const {
        fc1.collect_params(prefix + ".fc1", out);
        fc2.collect_params(prefix + ".fc2", out);
    }
};

// Pre-norm encoder block: x + attn(ln1(x)), then x + mlp(ln2(x)).
struct TransformerBlock {
    LayerNorm ln1, ln2;
    MultiHeadAttention attn;
    Mlp mlp;

    TransformerBlock() = default;
    TransformerBlock(int d, int heads, Rng& rng)
        : ln1(d), ln2(d), attn(d, heads, rng), mlp(d, 4 * d, rng) {}

    Tensor forward(const Tensor& x, const LayerSever& sever = {}, std::vector<Tensor>* weight_tap = nullptr,
                   Tensor* attn_out_tap = nullptr) const {
        Tensor xn = ln1.forward(x);
        Tensor a = attn.forward(xn, xn, sever, weight_tap);
        if (attn_out_tap) *attn_out_tap = a;
        Tensor y = add(x, a);
        return add(y, mlp.forward(ln2.forward(y)));
    }

    void collect_params(const std::string& prefix, ParamMap& out) const {
        ln1.collect_params(prefix + ".ln1", out);
        ln2.collect_params(prefix + ".ln2", out);
        attn.collect_params(prefix + ".attn", out);
        mlp.collect_params(prefix + ".mlp", out);
    }
};

// Post-norm decoder layer: ln(q + self), ln(q + cross), ln(q + mlp).
struct TransformerDecoderLayer {
    MultiHeadAttention self_attn, cross_attn;
    Mlp mlp;
    LayerNorm ln1, ln2, ln3;

    TransformerDecoderLayer() = default;
    TransformerDecoderLayer(int d, int heads, Rng& rng)
        : self_attn(d, heads, rng), cross_attn(d, heads, rng), mlp(d, 4 * d, rng), ln1(d), ln2(d), ln3(d) {}

    Tensor forward(const Tensor& q, const Tensor& memory) const {
        Tensor x = ln1.forward(add(q, self_attn.forward(q, q)));
        x = ln2.forward(add(x, cross_attn.forward(x, memory)));
        return ln3.forward(add(x, mlp.forward(x)));
    }

    void collect_params(const std::string& prefix, ParamMap& out) const {
        self_attn.collect_params(prefix + ".self_attn", out);
        cross_attn.collect_params(prefix + ".cross_attn", out);
        mlp.collect_params(prefix + ".mlp", out);
        ln1.collect_params(prefix + ".ln1", out);
        ln2.collect_params(prefix + ".ln2", out);
        ln3.collect_params(prefix + ".ln3", out);
    }
};

struct Conv2d {
    int in_ch = 0, out_ch = 0, k = 0, stride = 1, pad = 0;
    Tensor w;  // [out_ch, in_ch*k*k]
    Tensor b;  // [out_ch, 1]

    Conv2d() = default;
    Conv2d(int in_ch_, int out_ch_, int k_, int stride_, int pad_, Rng& rng)
        : in_ch(in_ch_), out_ch(out_ch_), k(k_), stride(stride_), pad(pad_) {
        w = Tensor::randn({out_ch, in_ch * k * k}, rng, 1.0 / std::sqrt(static_cast<double>(in_ch) * k * k));
        b = Tensor::zeros({out_ch, 1});
    }

    // x: [in_ch, H, W] -> [out_ch, Ho, Wo]
    Tensor forward(const Tensor& x) const {
        if (x.rank() != 3 || x.dim(0) != in_ch)
            throw ShapeError("conv: expected [" + std::to_string(in_ch) + "xHxW], got " + shape_str(x.shape()));
        const int h = x.dim(1), wdt = x.dim(2);
        const int ho = (h + 2 * pad - k) / stride + 1;
        const int wo = (wdt + 2 * pad - k) / stride + 1;
        Tensor cols = im2col(x, k, stride, pad);
        Tensor y = add(matmul(w, cols), broadcast_col(b, ho * wo));
        return reshape(y, {out_ch, ho, wo});
    }

    void collect_params(const std::string& prefix, ParamMap& out) const {
        out.emplace_back(prefix + ".w", w);
        out.emplace_back(prefix + ".b", b);
    }
};

// Per-channel batch normalization over a batch of [C, H, W] maps. Statistics
// are shared across every map of the call. Training mode normalizes by batch
// statistics and updates running averages; eval mode uses the running ones.
struct BatchNorm2d {
    int ch = 0;
    double eps = 1e-5;
    double momentum = 0.1;
    Tensor gamma;         // [ch, 1]
    Tensor beta;          // [ch, 1]
    Tensor running_mean;  // [ch], plain state, never on tape
    Tensor running_var;   // [ch]

    BatchNorm2d() = default;
    explicit BatchNorm2d(int ch_) : ch(ch_) {
        gamma = Tensor::full({ch, 1}, 1.0);
        beta = Tensor::zeros({ch, 1});
        running_mean = Tensor::zeros({ch});
        running_var = Tensor::full({ch}, 1.0);
    }

    std::vector<Tensor> forward(const std::vector<Tensor>& xs, bool training) {
        if (xs.empty()) throw ContractError("batch_norm: empty batch");
        const int h = xs[0].dim(1), w = xs[0].dim(2);
        for (const Tensor& x : xs)
            if (x.rank() != 3 || x.dim(0) != ch || x.dim(1) != h || x.dim(2) != w)
                throw ShapeError("batch_norm: inconsistent map shape " + shape_str(x.shape()));
        const int n = static_cast<int>(xs.size());
        const int per_map = h * w;
        const int total = n * per_map;

        std::vector<Tensor> flats;
        flats.reserve(xs.size());
        for (const Tensor& x : xs) flats.push_back(reshape(x, {ch, per_map}));
        Tensor big = concat_cols(flats);  // [ch, n*h*w]

        Tensor mean_col, istd_col;
        if (training) {
            Tensor mu = scale(row_sums(big), 1.0 / total);      // [ch]
            mean_col = reshape(mu, {ch, 1});
            Tensor centered = sub(big, broadcast_col(mean_col, total));
            Tensor var = scale(row_sums(mul(centered, centered)), 1.0 / total);  // [ch]
            istd_col = reshape(pow_scalar(add_scalar(var, eps), -0.5), {ch, 1});
            {
                NoTapeScope off;
                for (int c = 0; c < ch; ++c) {
                    running_mean.at(c) = (1 - momentum) * running_mean.at(c) + momentum * mu.at(c);
                    running_var.at(c) = (1 - momentum) * running_var.at(c) + momentum * var.at(c);
                }
            }
        } else {
            mean_col = reshape(running_mean.clone(), {ch, 1});
            Tensor rv = running_var.clone();
            istd_col = reshape(pow_scalar(add_scalar(rv, eps), -0.5), {ch, 1});
        }

        Tensor norm = mul(sub(big, broadcast_col(mean_col, total)), broadcast_col(istd_col, total));
        Tensor out = add(mul(norm, broadcast_col(gamma, total)), broadcast_col(beta, total));

        std::vector<Tensor> ys;
        ys.reserve(xs.size());
        for (int i = 0; i < n; ++i) ys.push_back(reshape(slice_cols(out, i * per_map, per_map), {ch, h, w}));
        return ys;
    }

    void collect_params(const std::string& prefix, ParamMap& out) const {
        out.emplace_back(prefix + ".gamma", gamma);
        out.emplace_back(prefix + ".beta", beta);
    }

    // Running statistics ride along in checkpoints but never train.
    void collect_state(const std::string& prefix, ParamMap& out) const {
        out.emplace_back(prefix + ".running_mean", running_mean);
        out.emplace_back(prefix + ".running_var", running_var);
    }
};

}  // namespace deop
