#pragma once
// End-to-end assembly: run configuration, the two training stages
// (mask proposals first, then the one-pass classification stream with the
// shared encoder frozen), evaluation, and checkpoint plumbing.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "deop/bench.hpp"
#include "deop/cal.hpp"
#include "deop/checkpoint.hpp"
#include "deop/classify.hpp"
#include "deop/common.hpp"
#include "deop/encoder.hpp"
#include "deop/losses.hpp"
#include "deop/metrics.hpp"
#include "deop/optim.hpp"
#include "deop/pnm.hpp"
#include "deop/proposals.hpp"
#include "deop/synthdata.hpp"
#include "deop/tensor.hpp"

namespace deop {

// Ablation lattice for the classification stream. "baseline" classifies each
// proposal from its own cropped encoder pass; every other mode runs the
// encoder once per image. "ps" adds visual prompts plus patch severance,
// "cal" adds learned anchor heatmaps, "deop" combines both.
enum class RunMode { baseline, baseline_plus, ps, cal, deop };

inline RunMode parse_run_mode(const std::string& s) {
    if (s == "baseline") return RunMode::baseline;
    if (s == "baseline+") return RunMode::baseline_plus;
    if (s == "ps" || s == "+ps") return RunMode::ps;
    if (s == "cal" || s == "+cal") return RunMode::cal;
    if (s == "deop") return RunMode::deop;
    throw ConfigError("mode: unknown value '" + s + "' (expect baseline|baseline+|ps|cal|deop)");
}

inline const char* run_mode_name(RunMode m) {
    switch (m) {
        case RunMode::baseline: return "baseline";
        case RunMode::baseline_plus: return "baseline+";
        case RunMode::ps: return "ps";
        case RunMode::cal: return "cal";
        default: return "deop";
    }
}

inline bool mode_uses_prompts(RunMode m) { return m == RunMode::ps || m == RunMode::deop; }
inline bool mode_uses_severance(RunMode m) { return m == RunMode::ps || m == RunMode::deop; }
inline bool mode_uses_cal(RunMode m) { return m == RunMode::cal || m == RunMode::deop; }

// Every tunable of a run, loadable from a key=value file with command-line
// overrides. Field names double as config keys.
struct RunConfig {
    std::string data_dir = "data";
    std::string out_dir = "out";
    uint64_t seed = 1234;

    int image_size = 64;
    int patch_size = 8;
    int embed_dim = 32;
    int layers = 4;
    int heads = 2;
    std::string severance = "gps";  // none | gps | mps, applied to the last block
    double gps_alpha = 1.0;
    std::string prompt = "add";  // off | prepend | add
    int prompt_count = 1;

    int proposals = 8;
    int base_channels = 16;
    int decoder_layers = 2;
    int mask_scale = 4;

    std::string cal = "query";  // query | conv
    int cal_layers = 1;
    int cal_channels = 64;

    double tau = 0.07;
    std::string embeddings = "visual";  // visual | hash
    int anchor_variants = 3;

    std::string mode = "deop";
    int pretrain_steps = 300;
    double pretrain_lr = 0.05;
    int proposal_steps = 2400;
    double proposal_lr = 0.005;
    int deop_steps = 1000;
    double deop_lr = 0.003;
    int batch = 8;
    std::string optimizer = "gd";  // gd | adam
    int log_every = 50;

    void set(const std::string& key, const std::string& value) {
        auto as_int = [&](int& dst) {
            size_t used = 0;
            int v = 0;
            try {
                v = std::stoi(value, &used);
            } catch (const std::exception&) {
                throw ConfigError(key + ": expected an integer, got '" + value + "'");
            }
            if (used != value.size()) throw ConfigError(key + ": expected an integer, got '" + value + "'");
            dst = v;
        };
        auto as_double = [&](double& dst) {
            size_t used = 0;
            double v = 0;
            try {
                v = std::stod(value, &used);
            } catch (const std::exception&) {
                throw ConfigError(key + ": expected a number, got '" + value + "'");
            }
            if (used != value.size()) throw ConfigError(key + ": expected a number, got '" + value + "'");
            dst = v;
        };
        auto as_u64 = [&](uint64_t& dst) {
            size_t used = 0;
            unsigned long long v = 0;
            try {
                v = std::stoull(value, &used);
            } catch (const std::exception&) {
                throw ConfigError(key + ": expected an unsigned integer, got '" + value + "'");
            }
            if (used != value.size()) throw ConfigError(key + ": expected an unsigned integer, got '" + value + "'");
            dst = v;
        };
        if (key == "data_dir") data_dir = value;
        else if (key == "out_dir") out_dir = value;
        else if (key == "seed") as_u64(seed);
        else if (key == "image_size") as_int(image_size);
        else if (key == "patch_size") as_int(patch_size);
        else if (key == "embed_dim") as_int(embed_dim);
        else if (key == "layers") as_int(layers);
        else if (key == "heads") as_int(heads);
        else if (key == "severance") severance = value;
        else if (key == "gps_alpha") as_double(gps_alpha);
        else if (key == "prompt") prompt = value;
        else if (key == "prompt_count") as_int(prompt_count);
        else if (key == "proposals") as_int(proposals);
        else if (key == "base_channels") as_int(base_channels);
        else if (key == "decoder_layers") as_int(decoder_layers);
        else if (key == "mask_scale") as_int(mask_scale);
        else if (key == "cal") cal = value;
        else if (key == "cal_layers") as_int(cal_layers);
        else if (key == "cal_channels") as_int(cal_channels);
        else if (key == "tau") as_double(tau);
        else if (key == "embeddings") embeddings = value;
        else if (key == "anchor_variants") as_int(anchor_variants);
        else if (key == "mode") mode = value;
        else if (key == "pretrain_steps") as_int(pretrain_steps);
        else if (key == "pretrain_lr") as_double(pretrain_lr);
        else if (key == "proposal_steps") as_int(proposal_steps);
        else if (key == "proposal_lr") as_double(proposal_lr);
        else if (key == "deop_steps") as_int(deop_steps);
        else if (key == "deop_lr") as_double(deop_lr);
        else if (key == "batch") as_int(batch);
        else if (key == "optimizer") optimizer = value;
        else if (key == "log_every") as_int(log_every);
        else throw ConfigError("config: unknown key '" + key + "'");
    }

    // key=value per line; blank lines and lines starting with '#' are skipped.
    void load_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw IoError(path + ": cannot open config file");
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            size_t a = line.find_first_not_of(" \t\r");
            if (a == std::string::npos) continue;
            size_t b = line.find_last_not_of(" \t\r");
            std::string body = line.substr(a, b - a + 1);
            if (body.empty() || body[0] == '#') continue;
            size_t eq = body.find('=');
            if (eq == std::string::npos)
                throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key=value, got '" + body + "'");
            std::string key = body.substr(0, eq);
            std::string value = body.substr(eq + 1);
            while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) key.pop_back();
            size_t v = value.find_first_not_of(" \t");
            value = v == std::string::npos ? std::string() : value.substr(v);
            set(key, value);
        }
    }

    void validate() const {
        if (severance != "none" && severance != "gps" && severance != "mps")
            throw ConfigError("severance: unknown value '" + severance + "'");
        if (prompt != "off" && prompt != "prepend" && prompt != "add")
            throw ConfigError("prompt: unknown value '" + prompt + "'");
        if (cal != "query" && cal != "conv") throw ConfigError("cal: unknown value '" + cal + "'");
        if (embeddings != "visual" && embeddings != "hash")
            throw ConfigError("embeddings: unknown value '" + embeddings + "'");
        if (optimizer != "gd" && optimizer != "adam")
            throw ConfigError("optimizer: unknown value '" + optimizer + "'");
        if (batch < 1) throw ConfigError("batch: must be positive");
        if (anchor_variants < 1) throw ConfigError("anchor_variants: must be positive");
        if (pretrain_steps < 0 || proposal_steps < 0 || deop_steps < 0)
            throw ConfigError("step counts must be nonnegative");
        parse_run_mode(mode);
        encoder_config(parse_run_mode(mode)).validate();
        plain_encoder_config().validate();
        proposal_config().validate();
        cal_config().validate(cal == "conv");
    }

    EncoderConfig plain_encoder_config() const {
        EncoderConfig e;
        e.image_size = image_size;
        e.patch_size = patch_size;
        e.embed_dim = embed_dim;
        e.num_layers = layers;
        e.num_heads = heads;
        e.severance.assign(static_cast<size_t>(layers), SeverSpec{});
        e.prompt.mode = PromptMode::off;
        e.prompt.count = prompt_count;
        return e;
    }

    EncoderConfig encoder_config(RunMode m) const {
        EncoderConfig e = plain_encoder_config();
        if (mode_uses_prompts(m)) {
            if (prompt == "prepend") e.prompt.mode = PromptMode::prepend;
            else if (prompt == "add") e.prompt.mode = PromptMode::add;
        }
        if (mode_uses_severance(m) && severance != "none")
            e.severance[static_cast<size_t>(layers - 1)] =
                severance == "gps" ? SeverSpec::gps(gps_alpha) : SeverSpec::mps();
        return e;
    }

    ProposalNetConfig proposal_config() const {
        ProposalNetConfig p;
        p.image_size = image_size;
        p.base_channels = base_channels;
        p.embed_dim = embed_dim;
        p.num_queries = proposals;
        p.decoder_layers = decoder_layers;
        p.num_heads = heads;
        p.mask_scale = mask_scale;
        return p;
    }

    CalConfig cal_config() const {
        CalConfig c;
        c.query_based = cal == "query";
        c.layers = cal_layers;
        c.conv_channels = cal_channels;
        c.num_heads = heads;
        return c;
    }

    // Text form of everything that shapes the proposal network; hashed into
    // its checkpoint fingerprint.
    std::string proposal_model_text() const {
        std::ostringstream os;
        os << "image_size=" << image_size << "\nbase_channels=" << base_channels << "\nembed_dim=" << embed_dim
           << "\nproposals=" << proposals << "\ndecoder_layers=" << decoder_layers << "\nheads=" << heads
           << "\nmask_scale=" << mask_scale << "\n";
        return os.str();
    }

    // Text form of everything that shapes the classification stream.
    std::string deop_model_text(RunMode m, int num_classes) const {
        std::ostringstream os;
        os.precision(17);
        os << "mode=" << run_mode_name(m) << "\nclasses=" << num_classes << "\nimage_size=" << image_size
           << "\npatch_size=" << patch_size << "\nembed_dim=" << embed_dim << "\nlayers=" << layers
           << "\nheads=" << heads << "\nseverance=" << (mode_uses_severance(m) ? severance : "none")
           << "\ngps_alpha=" << gps_alpha << "\nprompt=" << (mode_uses_prompts(m) ? prompt : "off")
           << "\nprompt_count=" << prompt_count << "\ncal=" << (mode_uses_cal(m) ? cal : "off")
           << "\ncal_layers=" << cal_layers << "\ncal_channels=" << cal_channels << "\ntau=" << tau << "\n";
        return os.str();
    }

    uint64_t proposal_fingerprint() const { return hash_string(proposal_model_text()); }
    uint64_t deop_fingerprint(RunMode m, int num_classes) const {
        return hash_string(deop_model_text(m, num_classes));
    }
};

namespace detail {

// Copies parameter values between two modules whose collect output lines up
// name for name.
inline void copy_params(const ParamMap& src, const ParamMap& dst) {
    if (src.size() != dst.size())
        throw ContractError("parameter copy: " + std::to_string(src.size()) + " vs " + std::to_string(dst.size()) +
                            " tensors");
    for (size_t i = 0; i < src.size(); ++i) {
        if (src[i].first != dst[i].first)
            throw ContractError("parameter copy: name mismatch " + src[i].first + " vs " + dst[i].first);
        if (src[i].second.shape() != dst[i].second.shape())
            throw ContractError("parameter copy: shape mismatch at " + src[i].first);
        dst[i].second.node()->v = src[i].second.vals();
    }
}

inline std::vector<int> batch_indices(Rng& rng, int pool, int batch) {
    std::vector<int> out(static_cast<size_t>(batch));
    for (int& i : out) i = static_cast<int>(rng.randint(0, pool - 1));
    return out;
}

}  // namespace detail

// The assembled model. Two encoder instances share one body: `plain` is the
// frozen backbone used for class anchors and per-crop classification;
// `encoder` carries the mode's prompts and severance on the same body weights.
struct DeopModel {
    RunConfig cfg;
    RunMode mode = RunMode::deop;
    std::vector<ClassInfo> classes;
    std::vector<int> seen_ids;

    VitEncoder plain;
    VitEncoder encoder;
    ProposalNetwork proposal_net;
    CalConfig calcfg;
    QueryHeatmapDecoder cal_query;
    ConvHeatmapDecoder cal_conv;
    ClassEmbeddingTable table;

    DeopModel(RunConfig config, std::vector<ClassInfo> class_list)
        : cfg(std::move(config)), mode(parse_run_mode(cfg.mode)), classes(std::move(class_list)) {
        cfg.validate();
        for (const ClassInfo& c : classes)
            if (c.seen) seen_ids.push_back(c.id);
        // Same seed for both encoders: prompt weights are drawn after the
        // body, so the bodies come out bit-identical.
        Rng r_enc(cfg.seed);
        encoder = VitEncoder(cfg.encoder_config(mode), r_enc);
        Rng r_plain(cfg.seed);
        plain = VitEncoder(cfg.plain_encoder_config(), r_plain);
        Rng r_prop(mix_seed(cfg.seed, 1));
        proposal_net = ProposalNetwork(cfg.proposal_config(), r_prop);
        calcfg = cfg.cal_config();
        Rng r_calq(mix_seed(cfg.seed, 2));
        cal_query = QueryHeatmapDecoder(cfg.proposals, cfg.embed_dim, calcfg, r_calq);
        Rng r_calc(mix_seed(cfg.seed, 3));
        cal_conv = ConvHeatmapDecoder(cfg.embed_dim, calcfg, r_calc);
        table = ClassEmbeddingTable::from_seeds(classes, cfg.embed_dim);
    }

    int grid() const { return encoder.config().grid(); }

    void copy_body_plain_to_encoder() {
        ParamMap src, dst;
        plain.collect_body_params("enc", src);
        encoder.collect_body_params("enc", dst);
        detail::copy_params(src, dst);
    }
    void copy_body_encoder_to_plain() {
        ParamMap src, dst;
        encoder.collect_body_params("enc", src);
        plain.collect_body_params("enc", dst);
        detail::copy_params(src, dst);
    }

    // Parameters the second stage optimizes, per the ablation mode. The
    // encoder body and the proposal network are never included.
    ParamMap deop_trainable_params() const {
        ParamMap out;
        table.collect_params("table", out);
        if (mode_uses_prompts(mode)) encoder.collect_prompt_params("enc", out);
        if (mode_uses_cal(mode)) {
            if (calcfg.query_based) cal_query.collect_params("cal", out);
            else cal_conv.collect_params("cal", out);
        }
        return out;
    }

    // Everything an evaluation run needs beyond the proposal checkpoint:
    // the (possibly pretrained) encoder body, mode-specific parameters, and
    // non-trained state (class anchor matrix, batch-norm statistics).
    ParamMap deop_checkpoint_map() const {
        ParamMap out;
        encoder.collect_body_params("enc", out);
        if (mode_uses_prompts(mode)) encoder.collect_prompt_params("enc", out);
        if (mode_uses_cal(mode)) {
            if (calcfg.query_based) {
                cal_query.collect_params("cal", out);
            } else {
                cal_conv.collect_params("cal", out);
                cal_conv.collect_state("cal", out);
            }
        }
        table.collect_params("table", out);
        table.collect_state("table", out);
        return out;
    }

    ParamMap proposal_params() const {
        ParamMap out;
        proposal_net.collect_params("prop", out);
        return out;
    }

    // Pooling weights for one image: anchor heatmaps when CAL is on, resized
    // proposal masks otherwise. f_v is [tokens, d].
    Tensor pool_weights(const Tensor& f_v, const MaskSet& masks, bool training) {
        const int g = grid();
        if (mode_uses_cal(mode)) {
            if (calcfg.query_based) return cal_query.forward(f_v, g, g, masks).flat();
            return cal_conv.forward(f_v, g, g, masks, training).flat();
        }
        return masks.resized(g, g).flat();
    }

    // One-pass classification rows for the image's proposals: [N, rows].
    Tensor segment_rows(const Tensor& image, const MaskSet& masks, const Tensor& class_rows, bool training) {
        Tensor f_v = encoder.encode(image, &masks);
        Tensor f2 = reshape(f_v, {grid() * grid(), cfg.embed_dim});
        Tensor w = pool_weights(f2, masks, training);
        Tensor pooled = pool(f2, w);
        return classify_segments(pooled, class_rows, cfg.tau);
    }

    // Multi-pass classification rows: one cropped encoder pass per proposal.
    Tensor crop_rows(const Tensor& image, const MaskSet& masks, const Tensor& class_rows) {
        const int t = grid() * grid();
        Tensor ones = Tensor::full({1, t}, 1.0);
        std::vector<Tensor> rows;
        rows.reserve(static_cast<size_t>(masks.count()));
        for (int i = 0; i < masks.count(); ++i) {
            Tensor crop = crop_from_mask(image, masks.map(i));
            Tensor f_v = reshape(plain.encode(crop), {t, cfg.embed_dim});
            rows.push_back(pool(f_v, ones));
        }
        return classify_segments(concat_rows(rows), class_rows, cfg.tau);
    }
};

// ---------------------------------------------------------------------------
// Stage 0: backbone preparation. The encoder plays the role of a pretrained
// frozen backbone, so it is trained once here (token-level classification on
// seen classes only) and then left untouched by both training stages. Class
// anchors are pooled exemplar features from this same frozen encoder, which
// is what lets unseen classes be recognized without any training pixels.

inline void pretrain_backbone(DeopModel& model, const std::vector<Sample>& train, std::ostream* log = nullptr) {
    const RunConfig& cfg = model.cfg;
    if (cfg.pretrain_steps == 0 || train.empty()) return;
    const int g = model.grid(), t = g * g, d = cfg.embed_dim;
    const int s = static_cast<int>(model.seen_ids.size());
    std::vector<int> id_to_row(256, -1);
    for (int r = 0; r < s; ++r) id_to_row[static_cast<size_t>(model.seen_ids[r])] = r;

    Rng head_rng(mix_seed(cfg.seed, 4));
    Linear head(d, s, head_rng);
    ParamMap params;
    model.plain.collect_body_params("enc", params);
    head.collect_params("head", params);
    mark_trainable(params, true);

    GradientDescent gd(cfg.pretrain_lr);
    Adam adam(cfg.pretrain_lr);
    Rng batch_rng(mix_seed(cfg.seed, 5));

    for (int step = 0; step < cfg.pretrain_steps; ++step) {
        GradTape tape;
        TapeScope scope(tape);
        Tensor total = Tensor::zeros({1});
        const std::vector<int> idx = detail::batch_indices(batch_rng, static_cast<int>(train.size()), cfg.batch);
        try {
            for (int bi : idx) {
                const Sample& sample = train[static_cast<size_t>(bi)];
                Tensor f_v = reshape(model.plain.encode(sample.image.to_tensor()), {t, d});
                Tensor logits = head.forward(f_v);
                Tensor probs = clamp(softmax(logits, 1), 1e-12, 1.0);
                SegLabelMap down = sample.labels.downsample_nearest(cfg.patch_size);
                Tensor onehot = Tensor::zeros({t, s});
                for (int p = 0; p < t; ++p) {
                    const int row = id_to_row[static_cast<size_t>(down.labels[static_cast<size_t>(p)])];
                    if (row < 0) throw ProtocolError("backbone pretraining: unseen class id in a training image");
                    onehot.at(p, row) = 1.0;
                }
                total = add(total, scale(reduce_sum(mul(deop::log(probs), onehot)), -1.0 / t));
            }
        } catch (const NumericError& e) {
            throw NumericError("backbone pretraining step " + std::to_string(step) + ": " + e.what());
        }
        Tensor loss = scale(total, 1.0 / cfg.batch);
        const double v = loss.item();
        if (!std::isfinite(v))
            throw NumericError("backbone pretraining step " + std::to_string(step) + ": loss diverged");
        tape.backward(loss);
        if (cfg.optimizer == "adam") adam.step(params, tape);
        else gd.step(params, tape);
        if (log && (step % cfg.log_every == 0 || step + 1 == cfg.pretrain_steps))
            (*log) << "pretrain step=" << step << " loss=" << v << "\n";
    }
    // the backbone is frozen from here on
    mark_trainable(params, false);
    model.copy_body_plain_to_encoder();
}

// Class anchor matrix from rendered exemplars: each class row is the average
// masked-pool of its exemplar features through the frozen plain encoder.
inline Tensor build_visual_anchors(DeopModel& model, const DatasetSpec& spec) {
    NoTapeScope guard;
    const int g = model.grid(), t = g * g, d = model.cfg.embed_dim;
    const int c = static_cast<int>(model.classes.size());
    Tensor base = Tensor::zeros({c, d});
    for (int cid = 0; cid < c; ++cid) {
        std::vector<double> acc(static_cast<size_t>(d), 0.0);
        for (int v = 0; v < model.cfg.anchor_variants; ++v) {
            Sample ex = render_class_exemplar(spec, cid, v);
            Tensor f_v = reshape(model.plain.encode(ex.image.to_tensor()), {t, d});
            SegLabelMap down = ex.labels.downsample_nearest(model.cfg.patch_size);
            Tensor w = Tensor::zeros({1, t});
            int hits = 0;
            for (int p = 0; p < t; ++p)
                if (down.labels[static_cast<size_t>(p)] == cid) {
                    w.at(0, p) = 1.0;
                    ++hits;
                }
            if (hits == 0) w = Tensor::full({1, t}, 1.0);
            Tensor pooled = pool(f_v, w);
            for (int k = 0; k < d; ++k) acc[static_cast<size_t>(k)] += pooled.at(0, k);
        }
        for (int k = 0; k < d; ++k) base.at(cid, k) = acc[static_cast<size_t>(k)] / model.cfg.anchor_variants;
    }
    return normalize_rows(base);
}

inline void prepare_backbone(DeopModel& model, const Dataset& ds, std::ostream* log = nullptr) {
    pretrain_backbone(model, ds.train, log);
    if (model.cfg.embeddings == "visual") {
        Tensor base = build_visual_anchors(model, ds.spec);
        model.table = ClassEmbeddingTable(model.classes, base);
    }
}

// ---------------------------------------------------------------------------
// Stage 1: the proposal network alone, against matched ground-truth masks.
// Proposals live at mask resolution but are supervised through the bilinear
// upsample at image resolution, the same geometry the recall metric and the
// assembled prediction see; coarse-grid supervision loses thin shapes.

inline void train_proposals(DeopModel& model, const Dataset& ds, std::ostream* log = nullptr) {
    const RunConfig& cfg = model.cfg;
    if (ds.train.empty()) throw ContractError("proposal training: empty training split");

    ParamMap params = model.proposal_params();
    mark_trainable(params, true);
    GradientDescent gd(cfg.proposal_lr);
    Adam adam(cfg.proposal_lr);
    Rng batch_rng(mix_seed(cfg.seed, 6));
    LossWeights lw;

    for (int step = 0; step < cfg.proposal_steps; ++step) {
        GradTape tape;
        TapeScope scope(tape);
        Tensor total = Tensor::zeros({1});
        const std::vector<int> idx = detail::batch_indices(batch_rng, static_cast<int>(ds.train.size()), cfg.batch);
        try {
            for (int bi : idx) {
                const Sample& sample = ds.train[static_cast<size_t>(bi)];
                MaskSet pred = model.proposal_net.propose(sample.image.to_tensor());
                MaskSet up = pred.resized(cfg.image_size, cfg.image_size);
                MaskSet gt = oracle_masks(sample.labels, 0.0, cfg.proposals, 0);
                auto match = hungarian_match(up, gt, lw);
                total = add(total, mask_loss(up, gt, match, lw));
            }
        } catch (const NumericError& e) {
            // Non-finite proposals surface in the matcher before any loss
            // value exists; keep the step index in the abort.
            throw NumericError("proposal training step " + std::to_string(step) + ": " + e.what());
        }
        Tensor loss = scale(total, 1.0 / cfg.batch);
        const double v = loss.item();
        if (!std::isfinite(v))
            throw NumericError("proposal training step " + std::to_string(step) + ": loss diverged");
        tape.backward(loss);
        if (cfg.optimizer == "adam") adam.step(params, tape);
        else gd.step(params, tape);
        if (log && (step % cfg.log_every == 0 || step + 1 == cfg.proposal_steps))
            (*log) << "proposal step=" << step << " loss=" << v << "\n";
    }
    // frozen in the second stage
    mark_trainable(params, false);
}

// ---------------------------------------------------------------------------
// Stage 2: the classification stream. The proposal network and the encoder
// body receive zero updates; what trains depends on the ablation mode.

namespace detail {

// Per-image constants of stage 2, computed once: proposal masks (the network
// is frozen) and, in modes whose encoder has no trainable inputs, the encoder
// features or crop-pooled rows as well.
struct DeopStepCache {
    std::vector<char> ready;
    std::vector<MaskSet> masks;
    std::vector<Tensor> feats;
    std::vector<Tensor> crop_pool;
    std::vector<SegLabelMap> gt;
    std::vector<std::vector<int>> present;
};

}  // namespace detail

inline void train_deop(DeopModel& model, const Dataset& ds, std::ostream* log = nullptr) {
    const RunConfig& cfg = model.cfg;
    if (ds.train.empty()) throw ContractError("stream training: empty training split");
    const int ms = cfg.image_size / cfg.mask_scale;
    const int factor = cfg.image_size / ms;
    const int t = model.grid() * model.grid(), d = cfg.embed_dim;

    // The encoder graph only carries gradients in prompt modes; elsewhere its
    // features per image are constants worth caching. Crop rows likewise.
    const bool encoder_static = !mode_uses_prompts(model.mode);
    const bool crop_stream = model.mode == RunMode::baseline;

    detail::DeopStepCache cache;
    cache.ready.assign(ds.train.size(), 0);
    cache.masks.resize(ds.train.size());
    cache.feats.resize(ds.train.size());
    cache.crop_pool.resize(ds.train.size());
    cache.gt.resize(ds.train.size());
    cache.present.resize(ds.train.size());

    auto warm = [&](int i) {
        if (cache.ready[static_cast<size_t>(i)]) return;
        NoTapeScope guard;
        const Sample& sample = ds.train[static_cast<size_t>(i)];
        Tensor img = sample.image.to_tensor();
        cache.masks[static_cast<size_t>(i)] = model.proposal_net.propose(img);
        cache.gt[static_cast<size_t>(i)] = sample.labels.downsample_nearest(factor);
        // Softmax competition only among classes the image contains (plus
        // background): absent classes would otherwise get pure suppression
        // every step, which slowly sinks all seen rows below the frozen
        // unseen rows.
        std::vector<int> present = cache.gt[static_cast<size_t>(i)].present_classes();
        if (present.empty() || present[0] != 0) present.insert(present.begin(), 0);
        cache.present[static_cast<size_t>(i)] = std::move(present);
        if (crop_stream) {
            const MaskSet& m = cache.masks[static_cast<size_t>(i)];
            Tensor ones = Tensor::full({1, t}, 1.0);
            std::vector<Tensor> rows;
            for (int p = 0; p < m.count(); ++p) {
                Tensor f_v = reshape(model.plain.encode(crop_from_mask(img, m.map(p))), {t, d});
                rows.push_back(pool(f_v, ones));
            }
            cache.crop_pool[static_cast<size_t>(i)] = concat_rows(rows);
        } else if (encoder_static) {
            cache.feats[static_cast<size_t>(i)] = reshape(model.encoder.encode(img, &cache.masks[static_cast<size_t>(i)]), {t, d});
        }
        cache.ready[static_cast<size_t>(i)] = 1;
    };

    ParamMap params = model.deop_trainable_params();
    mark_trainable(params, true);
    GradientDescent gd(cfg.deop_lr);
    Adam adam(cfg.deop_lr);
    Rng batch_rng(mix_seed(cfg.seed, 7));

    for (int step = 0; step < cfg.deop_steps; ++step) {
        GradTape tape;
        TapeScope scope(tape);
        Tensor total = Tensor::zeros({1});
        const std::vector<int> idx = detail::batch_indices(batch_rng, static_cast<int>(ds.train.size()), cfg.batch);
        try {
            for (int bi : idx) {
                warm(bi);
                const MaskSet& masks = cache.masks[static_cast<size_t>(bi)];
                const std::vector<int>& present = cache.present[static_cast<size_t>(bi)];
                Tensor class_rows = model.table.effective_subset(present);
                Tensor f_c;
                if (crop_stream) {
                    f_c = classify_segments(cache.crop_pool[static_cast<size_t>(bi)], class_rows, cfg.tau);
                } else {
                    Tensor f_v =
                        encoder_static
                            ? cache.feats[static_cast<size_t>(bi)]
                            : reshape(model.encoder.encode(ds.train[static_cast<size_t>(bi)].image.to_tensor(),
                                                           &masks),
                                      {t, d});
                    Tensor w = model.pool_weights(f_v, masks, true);
                    f_c = classify_segments(pool(f_v, w), class_rows, cfg.tau);
                }
                SegPrediction pred = assemble_prediction(f_c, masks, ms, ms);
                total = add(total, training_loss(pred.scores, cache.gt[static_cast<size_t>(bi)], present));
            }
        } catch (const NumericError& e) {
            throw NumericError("stream training step " + std::to_string(step) + ": " + e.what());
        }
        Tensor loss = scale(total, 1.0 / cfg.batch);
        const double v = loss.item();
        if (!std::isfinite(v))
            throw NumericError("stream training step " + std::to_string(step) + ": loss diverged");
        tape.backward(loss);
        if (cfg.optimizer == "adam") adam.step(params, tape);
        else gd.step(params, tape);
        if (log && (step % cfg.log_every == 0 || step + 1 == cfg.deop_steps))
            (*log) << "deop step=" << step << " loss=" << v << "\n";
    }
    mark_trainable(params, false);
}

// ---------------------------------------------------------------------------
// Evaluation over a sample list: dataset-level confusion, per-class IoU,
// seen/unseen mIoU, their harmonic mean, and proposal recall split by the
// ground-truth segment's class group.

struct EvalOutcome {
    EvalReport report;
    double recall50_seen = 0.0;
    double recall50_unseen = 0.0;

    std::string to_text() const {
        std::ostringstream os;
        os.precision(17);
        os << report.to_text();
        os << "recall_seen@50=" << recall50_seen << "\n";
        os << "recall_unseen@50=" << recall50_unseen << "\n";
        return os.str();
    }
};

inline EvalOutcome evaluate(DeopModel& model, const std::vector<Sample>& samples, const std::string& dump_dir = "",
                            int dump_count = 0) {
    NoTapeScope guard;
    const RunConfig& cfg = model.cfg;
    const int c = static_cast<int>(model.classes.size());
    std::vector<int64_t> tp(static_cast<size_t>(c), 0), fp(static_cast<size_t>(c), 0), fn(static_cast<size_t>(c), 0);
    int64_t correct = 0, valid = 0;
    // hits/totals per threshold, for all segments and per class group
    std::map<int, std::array<int64_t, 2>> rec_all;
    std::array<int64_t, 2> rec50_seen{0, 0}, rec50_unseen{0, 0};
    const std::vector<int> thresholds = {30, 50};

    Tensor class_rows = model.table.effective();
    int dumped = 0;
    for (size_t si = 0; si < samples.size(); ++si) {
        const Sample& sample = samples[si];
        Tensor img = sample.image.to_tensor();
        MaskSet masks = model.proposal_net.propose(img);
        Tensor f_c = model.mode == RunMode::baseline ? model.crop_rows(img, masks, class_rows)
                                                     : model.segment_rows(img, masks, class_rows, false);
        SegPrediction pred = assemble_prediction(f_c, masks, sample.labels.h, sample.labels.w);

        for (int y = 0; y < sample.labels.h; ++y)
            for (int x = 0; x < sample.labels.w; ++x) {
                const int g = sample.labels.at(y, x);
                if (g == SegLabelMap::kIgnore) continue;
                const int p = pred.labels.at(y, x);
                ++valid;
                if (p == g) {
                    ++correct;
                    ++tp[static_cast<size_t>(g)];
                } else {
                    ++fn[static_cast<size_t>(g)];
                    ++fp[static_cast<size_t>(p)];
                }
            }

        // Proposal recall: each present class contributes one ground-truth
        // segment; a segment counts as recalled when some binarized proposal
        // overlaps it at IoU >= threshold.
        MaskSet up = masks.resized(sample.labels.h, sample.labels.w);
        for (int cid : sample.labels.present_classes()) {
            MaskSet one(Tensor::zeros({1, sample.labels.h, sample.labels.w}));
            for (int y = 0; y < sample.labels.h; ++y)
                for (int x = 0; x < sample.labels.w; ++x)
                    if (sample.labels.at(y, x) == cid)
                        one.masks.vals()[static_cast<size_t>(y) * sample.labels.w + x] = 1.0;
            const bool is_seen = model.classes[static_cast<size_t>(cid)].seen;
            for (int th : thresholds) {
                RecallResult r = recall_at_iou(up, one, th / 100.0);
                const int64_t hit = r.recall >= 0.5 ? 1 : 0;
                rec_all[th][0] += hit;
                rec_all[th][1] += 1;
                if (th == 50) {
                    auto& bucket = is_seen ? rec50_seen : rec50_unseen;
                    bucket[0] += hit;
                    bucket[1] += 1;
                }
            }
        }

        if (!dump_dir.empty() && dumped < dump_count) {
            char stem[32];
            std::snprintf(stem, sizeof stem, "%04d", static_cast<int>(si));
            write_pgm(dump_dir + "/pred_" + stem + ".pgm", pred.labels);
            const int g = model.grid();
            Tensor f_v = reshape(model.encoder.encode(img, &masks), {g * g, cfg.embed_dim});
            Tensor w = model.pool_weights(f_v, masks, false);
            for (int p = 0; p < masks.count(); ++p) {
                double mx = 0.0;
                for (int q = 0; q < g * g; ++q) mx = std::max(mx, w.at(p, q));
                SegLabelMap hm(g, g, 0);
                for (int q = 0; q < g * g; ++q)
                    hm.labels[static_cast<size_t>(q)] =
                        mx > 0 ? static_cast<int>(std::lround(w.at(p, q) / mx * 255.0)) : 0;
                write_pgm(dump_dir + "/heat_" + stem + "_" + std::to_string(p) + ".pgm", hm);
            }
            ++dumped;
        }
    }

    EvalOutcome out;
    EvalReport& rep = out.report;
    if (valid == 0) {
        rep.empty = true;
        return out;
    }
    rep.pacc = static_cast<double>(correct) / static_cast<double>(valid);
    double sum_seen = 0.0, sum_unseen = 0.0;
    int n_seen = 0, n_unseen = 0;
    for (int k = 0; k < c; ++k) {
        const int64_t denom = tp[static_cast<size_t>(k)] + fp[static_cast<size_t>(k)] + fn[static_cast<size_t>(k)];
        if (denom == 0) continue;
        const double iou = static_cast<double>(tp[static_cast<size_t>(k)]) / static_cast<double>(denom);
        rep.per_class_iou[k] = iou;
        if (model.classes[static_cast<size_t>(k)].seen) {
            sum_seen += iou;
            ++n_seen;
        } else {
            sum_unseen += iou;
            ++n_unseen;
        }
    }
    rep.miou_seen = n_seen ? sum_seen / n_seen : 0.0;
    rep.miou_unseen = n_unseen ? sum_unseen / n_unseen : 0.0;
    rep.hiou_value = hiou(rep.miou_seen, rep.miou_unseen);
    for (const auto& [th, hits] : rec_all)
        rep.recall_at[th] = hits[1] ? static_cast<double>(hits[0]) / static_cast<double>(hits[1]) : 1.0;
    out.recall50_seen = rec50_seen[1] ? static_cast<double>(rec50_seen[0]) / static_cast<double>(rec50_seen[1]) : 1.0;
    out.recall50_unseen =
        rec50_unseen[1] ? static_cast<double>(rec50_unseen[0]) / static_cast<double>(rec50_unseen[1]) : 1.0;
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoint plumbing.

inline void save_proposal_checkpoint(const DeopModel& model, const std::string& path) {
    save_checkpoint(path, model.proposal_params(), model.cfg.proposal_fingerprint());
}

inline void load_proposal_checkpoint(DeopModel& model, const std::string& path) {
    load_checkpoint_into(path, model.cfg.proposal_fingerprint(), model.proposal_params());
}

inline void save_deop_checkpoint(const DeopModel& model, const std::string& path) {
    save_checkpoint(path, model.deop_checkpoint_map(),
                    model.cfg.deop_fingerprint(model.mode, static_cast<int>(model.classes.size())));
}

inline void load_deop_checkpoint(DeopModel& model, const std::string& path) {
    load_checkpoint_into(path, model.cfg.deop_fingerprint(model.mode, static_cast<int>(model.classes.size())),
                         model.deop_checkpoint_map());
    model.copy_body_encoder_to_plain();
}

}  // namespace deop
