#pragma once

// Miniature ViT image encoder with per-layer patch severance and visual
// prompts. The encoder plays the role of a frozen pretrained backbone: the
// pipeline trains it once for the anchor embeddings, then freezes the body and
// trains only prompts (and downstream heads).

#include <optional>
#include <string>
#include <vector>

#include "deop/masks.hpp"
#include "deop/nn.hpp"
#include "deop/tensor.hpp"

namespace deop {

struct SeverSpec {
    SeverMode mode = SeverMode::none;
    double alpha = 0.0;

    static SeverSpec none() { return {SeverMode::none, 0.0}; }
    static SeverSpec gps(double alpha) { return {SeverMode::gps, alpha}; }
    static SeverSpec mps() { return {SeverMode::mps, 0.0}; }
};

using SeveranceSpec = std::vector<SeverSpec>;

// All layers untouched except the last, which blends fully to the identity.
inline SeveranceSpec default_severance(int num_layers) {
    SeveranceSpec s(static_cast<size_t>(num_layers), SeverSpec::none());
    if (num_layers > 0) s.back() = SeverSpec::gps(1.0);
    return s;
}

enum class PromptMode { off, prepend, add };

struct PromptConfig {
    PromptMode mode = PromptMode::add;
    int count = 1;  // prepend rows
};

struct EncoderConfig {
    int image_size = 64;
    int patch_size = 8;
    int embed_dim = 32;
    int num_layers = 4;
    int num_heads = 2;
    bool class_token = false;
    SeveranceSpec severance;  // empty means all-none
    PromptConfig prompt;

    int grid() const { return image_size / patch_size; }
    int tokens() const { return grid() * grid(); }

    void validate() const {
        if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
            throw ConfigError("encoder: image size " + std::to_string(image_size) + " not divisible by patch size " +
                              std::to_string(patch_size));
        if (embed_dim % num_heads != 0)
            throw ConfigError("encoder: embed dim " + std::to_string(embed_dim) + " not divisible by " +
                              std::to_string(num_heads) + " heads");
        if (!severance.empty() && static_cast<int>(severance.size()) != num_layers)
            throw ConfigError("encoder: severance spec has " + std::to_string(severance.size()) + " entries for " +
                              std::to_string(num_layers) + " layers");
        for (const SeverSpec& s : severance)
            if (s.mode == SeverMode::gps && (s.alpha < 0.0 || s.alpha > 1.0))
                throw ContractError("encoder: gps alpha " + std::to_string(s.alpha) + " outside [0,1]");
        if (prompt.mode == PromptMode::prepend && prompt.count < 1)
            throw ConfigError("encoder: prepend prompt count must be >= 1");
    }
};

// Per-layer probes captured during encode, for tests and diagnostics.
struct EncodeTrace {
    std::vector<Tensor> block_inputs;               // token matrix entering each block
    std::vector<std::vector<Tensor>> attn_weights;  // per layer, per head mixed weights
    std::vector<Tensor> attn_outputs;               // attention sub-layer output per block
};

// Eq-style mask-guided replacement weights on a flattened token grid:
// row i = sum_n masks[n][i] * masks[n], L1-normalized; an all-zero row becomes
// the identity row. The first extra_rows rows/cols (class token, prepended
// prompts) carry identity rows so those tokens attend only to themselves.
inline Tensor mps_weights_from_masks(const Tensor& flat_masks, int extra_rows = 0) {
    if (flat_masks.rank() != 2) throw ShapeError("mps weights: expected [NxT] masks, got " + shape_str(flat_masks.shape()));
    const int n = flat_masks.dim(0), t = flat_masks.dim(1);
    if (n == 0) throw ContractError("mps weights: empty mask set");
    const int full = extra_rows + t;
    Tensor w = Tensor::zeros({full, full});
    for (int e = 0; e < extra_rows; ++e) w.at(e, e) = 1.0;
    for (int i = 0; i < t; ++i) {
        double row_sum = 0.0;
        for (int j = 0; j < t; ++j) {
            double acc = 0.0;
            for (int m = 0; m < n; ++m) acc += flat_masks.at(m, i) * flat_masks.at(m, j);
            w.at(extra_rows + i, extra_rows + j) = acc;
            row_sum += acc;
        }
        if (row_sum > 0.0) {
            for (int j = 0; j < t; ++j) w.at(extra_rows + i, extra_rows + j) /= row_sum;
        } else {
            w.at(extra_rows + i, extra_rows + i) = 1.0;
        }
    }
    return w;
}

class VitEncoder {
  public:
    VitEncoder() = default;

    VitEncoder(EncoderConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
        cfg_.validate();
        const int d = cfg_.embed_dim;
        patch_proj_ = Linear(3 * cfg_.patch_size * cfg_.patch_size, d, rng);
        pos_embed_ = Tensor::randn({cfg_.tokens(), d}, rng, 0.02);
        if (cfg_.class_token) cls_token_ = Tensor::randn({1, d}, rng, 0.02);
        blocks_.reserve(static_cast<size_t>(cfg_.num_layers));
        for (int l = 0; l < cfg_.num_layers; ++l) blocks_.emplace_back(d, cfg_.num_heads, rng);
        final_ln_ = LayerNorm(d);
        if (cfg_.prompt.mode == PromptMode::prepend)
            prompt_ = Tensor::randn({cfg_.prompt.count, d}, rng, 0.02);
        else if (cfg_.prompt.mode == PromptMode::add)
            prompt_ = Tensor::randn({cfg_.tokens(), d}, rng, 0.02);
    }

    const EncoderConfig& config() const { return cfg_; }
    Tensor& prompt() { return prompt_; }
    const Tensor& prompt() const { return prompt_; }
    const TransformerBlock& block(int l) const { return blocks_[static_cast<size_t>(l)]; }

    // image: [3, H, W] -> [tokens, d], row-major over the patch grid.
    Tensor patch_embed(const Tensor& image) const {
        if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != cfg_.image_size || image.dim(2) != cfg_.image_size)
            throw ShapeError("encoder: expected [3x" + std::to_string(cfg_.image_size) + "x" +
                             std::to_string(cfg_.image_size) + "] image, got " + shape_str(image.shape()));
        Tensor cols = im2col(image, cfg_.patch_size, cfg_.patch_size, 0);  // [3*p*p, tokens]
        Tensor tokens = patch_proj_.forward(transpose(cols));
        return add(tokens, pos_embed_);
    }

    // Prompt attachment on the token matrix; off mode is the identity.
    Tensor apply_prompts(const Tensor& tokens) const {
        switch (cfg_.prompt.mode) {
            case PromptMode::off:
                return tokens;
            case PromptMode::prepend:
                return concat_rows({prompt_, tokens});
            case PromptMode::add:
                if (!same_shape(tokens, prompt_))
                    throw ShapeError("encoder: add-mode prompt " + shape_str(prompt_.shape()) +
                                     " does not match tokens " + shape_str(tokens.shape()));
                return add(tokens, prompt_);
        }
        throw ConfigError("encoder: bad prompt mode");
    }

    // Rows that precede the patch tokens in the running sequence.
    int extra_rows() const {
        int e = cfg_.class_token ? 1 : 0;
        if (cfg_.prompt.mode == PromptMode::prepend) e += cfg_.prompt.count;
        return e;
    }

    // Full forward pass. The result is [grid, grid, d] over patch tokens;
    // class-token and prompt rows are stripped. Layers configured for
    // mask-guided severance need `masks`; the masks are treated as constants.
    Tensor encode(const Tensor& image, const MaskSet* masks = nullptr, EncodeTrace* trace = nullptr) const {
        Tensor x = apply_prompts(patch_embed(image));
        if (cfg_.class_token) x = concat_rows({cls_token_, x});

        Tensor mps_w;
        for (int l = 0; l < cfg_.num_layers; ++l) {
            const SeverSpec spec = severance_at(l);
            LayerSever sever;
            sever.mode = spec.mode;
            sever.alpha = spec.alpha;
            if (spec.mode == SeverMode::mps) {
                if (!masks) throw ConfigError("encoder: layer " + std::to_string(l) + " needs a mask set");
                if (!mps_w.defined()) {
                    NoTapeScope off;
                    MaskSet grid_masks = masks->resized(cfg_.grid(), cfg_.grid());
                    mps_w = mps_weights_from_masks(grid_masks.flat(), extra_rows());
                }
                sever.weights = mps_w;
            }
            if (trace) trace->block_inputs.push_back(x);
            std::vector<Tensor>* tap = nullptr;
            if (trace) {
                trace->attn_weights.emplace_back();
                tap = &trace->attn_weights.back();
            }
            Tensor attn_out;
            x = blocks_[static_cast<size_t>(l)].forward(x, sever, tap, trace ? &attn_out : nullptr);
            if (trace) trace->attn_outputs.push_back(attn_out);
        }
        x = final_ln_.forward(x);
        const int e = extra_rows();
        if (e > 0) x = slice_rows(x, e, cfg_.tokens());
        return reshape(x, {cfg_.grid(), cfg_.grid(), cfg_.embed_dim});
    }

    // Everything that belongs to the pretrained body (prompts excluded).
    void collect_body_params(const std::string& prefix, ParamMap& out) const {
        patch_proj_.collect_params(prefix + ".patch_proj", out);
        out.emplace_back(prefix + ".pos_embed", pos_embed_);
        if (cfg_.class_token) out.emplace_back(prefix + ".cls_token", cls_token_);
        for (size_t l = 0; l < blocks_.size(); ++l)
            blocks_[l].collect_params(prefix + ".block" + std::to_string(l), out);
        final_ln_.collect_params(prefix + ".final_ln", out);
    }

    void collect_prompt_params(const std::string& prefix, ParamMap& out) const {
        if (cfg_.prompt.mode != PromptMode::off) out.emplace_back(prefix + ".prompt", prompt_);
    }

    void set_body_trainable(bool trainable) {
        ParamMap body;
        collect_body_params("enc", body);
        mark_trainable(body, trainable);
    }

    void set_prompt_trainable(bool trainable) {
        if (cfg_.prompt.mode != PromptMode::off) prompt_.set_requires_grad(trainable);
    }

  private:
    SeverSpec severance_at(int l) const {
        if (cfg_.severance.empty()) return SeverSpec::none();
        return cfg_.severance[static_cast<size_t>(l)];
    }

    EncoderConfig cfg_;
    Linear patch_proj_;
    Tensor pos_embed_;
    Tensor cls_token_;
    std::vector<TransformerBlock> blocks_;
    LayerNorm final_ln_;
    Tensor prompt_;
};

}  // namespace deop
