#pragma once

// Analytic FLOP model plus a wall-clock comparison of the one-pass
// classification stream against a simulated multi-pass (masked-crop) stream.
// One multiply-accumulate counts as 2 FLOPs; element ops (softmax, norms,
// residuals) are counted per element. The formula sheet lives in the docs.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "deop/cal.hpp"
#include "deop/classify.hpp"
#include "deop/encoder.hpp"

namespace deop {

namespace flops {

// linear [n, in] x [in, out] with bias
inline int64_t linear(int64_t n, int64_t in, int64_t out) { return 2 * n * in * out + n * out; }

inline int64_t layer_norm(int64_t n, int64_t d) { return 8 * n * d; }

// q/k/v/o projections, scaled scores, softmax, weighted sum
inline int64_t attention(int64_t tq, int64_t tkv, int64_t d, int64_t heads) {
    int64_t f = linear(tq, d, d) + 2 * linear(tkv, d, d) + linear(tq, d, d);  // q, k+v, output
    f += tq * d;                  // score scaling
    f += 2 * tq * tkv * d;        // scores across all heads
    f += 5 * heads * tq * tkv;    // softmax
    f += 2 * tq * tkv * d;        // weighted values
    return f;
}

// value path only; mixing weights are provided
inline int64_t attention_mps(int64_t t, int64_t d) {
    return linear(t, d, d) + 2 * t * t * d + linear(t, d, d);
}

inline int64_t mlp(int64_t n, int64_t d) {
    return linear(n, d, 4 * d) + n * 4 * d + linear(n, 4 * d, d);
}

inline int64_t bilinear_resize(int64_t out_pixels) { return 8 * out_pixels; }

}  // namespace flops

struct FlopBreakdown {
    int64_t patch_embed = 0;
    int64_t blocks = 0;
    int64_t final_norm = 0;
    int64_t mps_build = 0;  // one-time mask-to-weights construction
    int64_t cal = 0;
    int64_t pool_classify = 0;

    int64_t encoder() const { return patch_embed + blocks + final_norm + mps_build; }
    int64_t total() const { return encoder() + cal + pool_classify; }
};

// Single encoder forward under the given config; n_masks only matters for
// mask-guided severance layers.
inline FlopBreakdown flops_encoder(const EncoderConfig& cfg, int n_masks = 0) {
    cfg.validate();
    FlopBreakdown b;
    const int64_t g = cfg.tokens();
    const int64_t d = cfg.embed_dim;
    const int64_t h = cfg.num_heads;
    int64_t extras = cfg.class_token ? 1 : 0;
    if (cfg.prompt.mode == PromptMode::prepend) extras += cfg.prompt.count;
    const int64_t t = g + extras;

    b.patch_embed = flops::linear(g, 3 * cfg.patch_size * cfg.patch_size, d) + g * d;  // projection + positions
    if (cfg.prompt.mode == PromptMode::add) b.patch_embed += g * d;

    bool any_mps = false;
    for (int l = 0; l < cfg.num_layers; ++l) {
        const SeverSpec spec =
            cfg.severance.empty() ? SeverSpec::none() : cfg.severance[static_cast<size_t>(l)];
        int64_t attn;
        if (spec.mode == SeverMode::mps) {
            attn = flops::attention_mps(t, d);
            any_mps = true;
        } else {
            attn = flops::attention(t, t, d, h);
            if (spec.mode == SeverMode::gps) attn += 3 * h * t * t;  // identity blend
        }
        b.blocks += flops::layer_norm(t, d) + attn + t * d;     // ln, attention, residual
        b.blocks += flops::layer_norm(t, d) + flops::mlp(t, d) + t * d;
    }
    b.final_norm = flops::layer_norm(t, d);
    if (any_mps && n_masks > 0)
        b.mps_build = flops::bilinear_resize(static_cast<int64_t>(n_masks) * g) + g * g * (2 * n_masks + 2);
    return b;
}

// Full one-pass stream: encoder once, then heatmaps, pooling, cosine
// classification, and score assembly at mask resolution.
inline FlopBreakdown flops_one_pass(const EncoderConfig& enc, const CalConfig& cal, int n_proposals,
                                    int num_classes, int mask_pixels) {
    if (n_proposals <= 0 || num_classes <= 0 || mask_pixels <= 0)
        throw ContractError("flops: proposal, class, and pixel counts must be positive");
    FlopBreakdown b = flops_encoder(enc, n_proposals);
    const int64_t g = enc.tokens();
    const int64_t d = enc.embed_dim;
    const int64_t n = n_proposals;
    const int64_t c = num_classes;
    const int64_t p = mask_pixels;

    if (cal.query_based) {
        cal.validate(false);
        const int64_t h = cal.num_heads;
        for (int l = 0; l < cal.layers; ++l) {
            b.cal += flops::attention(n, n, d, h) + n * d + flops::layer_norm(n, d);  // self
            b.cal += flops::attention(n, g, d, h) + n * d + flops::layer_norm(n, d);  // cross
            b.cal += flops::mlp(n, d) + n * d + flops::layer_norm(n, d);
        }
        b.cal += flops::attention(n, n, d, h);                           // heatmap query mixing
        b.cal += 2 * n * g * d + n * g + 5 * n * g + n * g;              // scores, scale, softmax, mask
        b.cal += flops::bilinear_resize(n * g);                          // mask onto the token grid
    } else {
        cal.validate(true);
        const int64_t ch = cal.conv_channels;
        int64_t per = d * g;                                      // mask application
        per += 2 * 9 * d * ch * g + ch * g + 8 * ch * g + ch * g;  // conv0 + bn + relu
        for (int l = 1; l < cal.layers; ++l) per += 2 * 9 * ch * ch * g + ch * g + 8 * ch * g + ch * g;
        per += 2 * 9 * ch * g + g + 5 * g;  // final conv + spatial softmax
        b.cal = n * per + flops::bilinear_resize(n * g);
    }

    b.pool_classify = 2 * n * g * d + n * g + n + n * d;  // weighted pooling
    b.pool_classify += 3 * n * d + 3 * c * d;             // row normalization
    b.pool_classify += 2 * n * c * d + n * c + 5 * n * c;  // cosine, temperature, softmax
    b.pool_classify += 2 * c * n * p;                      // score assembly
    return b;
}

// n_prime full encoder passes, one per crop.
inline int64_t flops_multi_pass(const EncoderConfig& enc, int n_prime) {
    if (n_prime < 1) throw ContractError("flops: n_prime must be >= 1");
    return static_cast<int64_t>(n_prime) * flops_encoder(enc).total();
}

// Masked bounding-box crop: the proposal binarized at 0.5 selects a box;
// pixels inside the box but outside the mask are zeroed; the box is resized
// back to the full input with bilinear sampling. An empty mask yields the
// whole image untouched.
inline Tensor crop_from_mask(const Tensor& image, const Tensor& mask) {
    if (image.rank() != 3 || image.dim(0) != 3)
        throw ShapeError("crop: expected [3xHxW] image, got " + shape_str(image.shape()));
    if (mask.rank() != 2) throw ShapeError("crop: expected [HxW] mask, got " + shape_str(mask.shape()));
    NoTapeScope off;
    const int h = image.dim(1), w = image.dim(2);
    Tensor up = (mask.dim(0) == h && mask.dim(1) == w) ? mask : resize_bilinear(mask, h, w);
    int y0 = h, y1 = -1, x0 = w, x1 = -1;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (up.at(y, x) >= 0.5) {
                y0 = std::min(y0, y);
                y1 = std::max(y1, y);
                x0 = std::min(x0, x);
                x1 = std::max(x1, x);
            }
    if (y1 < 0) return image.clone();

    const int bh = y1 - y0 + 1, bw = x1 - x0 + 1;
    Tensor out = Tensor::zeros({3, h, w});
    for (int c = 0; c < 3; ++c) {
        Tensor box = Tensor::zeros({bh, bw});
        for (int y = 0; y < bh; ++y)
            for (int x = 0; x < bw; ++x) {
                const double m = up.at(y0 + y, x0 + x);
                box.at(y, x) =
                    m >= 0.5 ? image.vals()[(static_cast<size_t>(c) * h + y0 + y) * w + x0 + x] : 0.0;
            }
        Tensor big = resize_bilinear(box, h, w);
        std::copy(big.vals().begin(), big.vals().end(),
                  out.vals().begin() + static_cast<int64_t>(c) * h * w);
    }
    return out;
}

struct BenchRow {
    int n_prime = 0;
    int64_t flops_one = 0;
    int64_t flops_multi = 0;
    double ratio_flops = 0.0;
    double t_one_ms = 0.0;
    double t_multi_ms = 0.0;
    double ratio_time = 0.0;
};

struct BenchConfig {
    std::vector<int> n_primes = {1, 5, 20};
    int min_timed = 20;  // timed iterations per stream (images cycle if fewer)
    int warmup = 3;
    double tau = 0.07;
};

inline std::string bench_csv(const std::vector<BenchRow>& rows) {
    std::ostringstream os;
    os.precision(17);
    os << "n_prime,flops_one,flops_multi,ratio_flops,t_one_ms,t_multi_ms,ratio_time\n";
    for (const BenchRow& r : rows)
        os << r.n_prime << "," << r.flops_one << "," << r.flops_multi << "," << r.ratio_flops << ","
           << r.t_one_ms << "," << r.t_multi_ms << "," << r.ratio_time << "\n";
    return os.str();
}

namespace detail {

inline double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

// Runs both streams single-threaded on the same images and reports median
// per-image wall time next to the analytic FLOP counts. Proposal generation
// is shared by both streams, so it stays outside the timed region.
inline std::vector<BenchRow> timed_compare(const std::vector<Tensor>& images,
                                           const std::vector<MaskSet>& proposals,
                                           const VitEncoder& one_pass_encoder, const CalConfig& cal_cfg,
                                           const QueryHeatmapDecoder& cal, const VitEncoder& crop_encoder,
                                           const Tensor& class_rows, const BenchConfig& bc = {}) {
    if (images.empty()) throw ContractError("bench: no images");
    if (images.size() != proposals.size())
        throw ShapeError("bench: " + std::to_string(images.size()) + " images vs " +
                         std::to_string(proposals.size()) + " proposal sets");

    const EncoderConfig& ec = one_pass_encoder.config();
    const int grid = ec.grid();
    const int d = ec.embed_dim;
    const int n = proposals[0].count();
    const int c = class_rows.dim(0);
    const int mask_pixels = proposals[0].height() * proposals[0].width();

    double sink = 0.0;
    auto run_one = [&](const Tensor& img, const MaskSet& m) {
        NoTapeScope off;
        Tensor f_v = reshape(one_pass_encoder.encode(img, &m), {grid * grid, d});
        HeatmapSet heat = cal.forward(f_v, grid, grid, m);
        Tensor f_i = pool(f_v, heat);
        Tensor f_c = classify_segments(f_i, class_rows, bc.tau);
        SegPrediction pred = assemble_prediction(f_c, m, m.height(), m.width());
        sink += pred.scores.at(0, 0);
    };
    auto run_multi = [&](const Tensor& img, const MaskSet& m, int n_prime) {
        NoTapeScope off;
        std::vector<Tensor> rows;
        const Tensor uniform = Tensor::full({1, grid * grid}, 1.0);
        for (int j = 0; j < n_prime; ++j) {
            const int pi = j % m.count();
            Tensor crop = crop_from_mask(img, m.map(pi));
            Tensor f_v = reshape(crop_encoder.encode(crop), {grid * grid, d});
            if (j < m.count()) {
                Tensor f_i = pool(f_v, uniform);
                rows.push_back(classify_segments(f_i, class_rows, bc.tau));
            }
        }
        Tensor f_c = concat_rows(rows);
        const int scored = f_c.dim(0);
        MaskSet used = scored == m.count()
                           ? m
                           : MaskSet(reshape(slice_rows(m.flat(), 0, scored), {scored, m.height(), m.width()}));
        SegPrediction pred = assemble_prediction(f_c, used, m.height(), m.width());
        sink += pred.scores.at(0, 0);
    };

    const int timed = std::max<int>(bc.min_timed, static_cast<int>(images.size()));
    const int rounds = bc.warmup + timed;
    using clock = std::chrono::steady_clock;

    std::vector<BenchRow> out;
    for (int n_prime : bc.n_primes) {
        if (n_prime < 1) throw ContractError("bench: n_prime must be >= 1");
        BenchRow row;
        row.n_prime = n_prime;
        row.flops_one = flops_one_pass(ec, cal_cfg, n, c, mask_pixels).total();
        row.flops_multi = flops_multi_pass(crop_encoder.config(), n_prime);
        row.ratio_flops = static_cast<double>(row.flops_multi) / static_cast<double>(row.flops_one);

        std::vector<double> t_one, t_multi;
        for (int k = 0; k < rounds; ++k) {
            const size_t i = static_cast<size_t>(k) % images.size();
            const auto a = clock::now();
            run_one(images[i], proposals[i]);
            const auto b = clock::now();
            if (k >= bc.warmup) t_one.push_back(std::chrono::duration<double, std::milli>(b - a).count());
        }
        for (int k = 0; k < rounds; ++k) {
            const size_t i = static_cast<size_t>(k) % images.size();
            const auto a = clock::now();
            run_multi(images[i], proposals[i], n_prime);
            const auto b = clock::now();
            if (k >= bc.warmup) t_multi.push_back(std::chrono::duration<double, std::milli>(b - a).count());
        }
        row.t_one_ms = detail::median(t_one);
        row.t_multi_ms = detail::median(t_multi);
        row.ratio_time = row.t_multi_ms / row.t_one_ms;
        out.push_back(row);
    }
    volatile double keep = sink;
    (void)keep;
    return out;
}

}  // namespace deop
