#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "trimae/autodiff.hpp"
#include "trimae/checkpoint.hpp"
#include "trimae/core.hpp"

namespace trimae {

// 2-D sin-cos positional table for a gh x gw grid; first half of the channels
// encodes the row coordinate, second half the column. Trailing channels are
// zero when d is not divisible by 4.
inline Tensor sincos_2d(std::size_t gh, std::size_t gw, std::size_t d) {
    Tensor out({gh * gw, d});
    const std::size_t half = d / 2;
    const std::size_t quarter = half / 2;
    auto fill_axis = [&](std::size_t offset, bool row_axis) {
        for (std::size_t gy = 0; gy < gh; ++gy)
            for (std::size_t gx = 0; gx < gw; ++gx) {
                const double coord = static_cast<double>(row_axis ? gy : gx);
                for (std::size_t i = 0; i < quarter; ++i) {
                    const double omega =
                        1.0 / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(quarter));
                    out(gy * gw + gx, offset + i) = std::sin(coord * omega);
                    out(gy * gw + gx, offset + quarter + i) = std::cos(coord * omega);
                }
            }
    };
    fill_axis(0, true);
    fill_axis(half, false);
    return out;
}

struct ParameterSet {
    ModelConfig cfg;
    TaskMode mode = TaskMode::Pretrain;
    std::size_t num_classes = 2;
    std::vector<std::pair<std::string, ad::Var>> named;
    std::map<std::string, std::size_t> index;

    static ParameterSet init(const ModelConfig& cfg, TaskMode mode, std::size_t num_classes,
                             Rng& rng, double init_std = 0.02) {
        ParameterSet ps;
        ps.cfg = cfg;
        ps.mode = mode;
        ps.num_classes = num_classes;
        for (const auto& spec : parameter_specs(cfg, mode, num_classes)) {
            Tensor t(spec.shape);
            switch (spec.init) {
                case TensorSpec::Init::Normal:
                    for (std::size_t i = 0; i < t.size(); ++i) t[i] = init_std * rng.normal();
                    break;
                case TensorSpec::Init::One:
                    for (std::size_t i = 0; i < t.size(); ++i) t[i] = 1.0;
                    break;
                case TensorSpec::Init::Zero:
                    break;
            }
            ps.push(spec.name, std::move(t), spec.trainable);
        }
        ps.fill_positional_tables();
        return ps;
    }

    void push(const std::string& name, Tensor t, bool trainable) {
        index[name] = named.size();
        named.emplace_back(name, ad::leaf(std::move(t), trainable));
    }

    void fill_positional_tables() {
        const std::size_t g = cfg.grid();
        if (index.count("pos_embed")) {
            Tensor table({1 + g * g, cfg.width});
            const Tensor body = sincos_2d(g, g, cfg.width);
            for (std::size_t i = 0; i < body.size(); ++i) table[cfg.width + i] = body[i];
            var("pos_embed")->val = std::move(table);  // row 0 (global) stays zero
        }
        for (const char* mn : {"oct", "slo", "layers"}) {
            const std::string name = std::string("dec.") + mn + ".pos_embed";
            if (index.count(name)) var(name)->val = sincos_2d(g, g, cfg.decoder_width);
        }
    }

    // deep copy: fresh leaf nodes so later updates leave the clone untouched
    ParameterSet clone() const {
        ParameterSet out;
        out.cfg = cfg;
        out.mode = mode;
        out.num_classes = num_classes;
        for (const auto& [name, v] : named) out.push(name, v->val, v->requires_grad);
        return out;
    }

    const ad::Var& var(const std::string& name) const {
        auto it = index.find(name);
        if (it == index.end()) throw ConfigError("model", "unknown parameter: " + name);
        return named[it->second].second;
    }
    ad::Var& var(const std::string& name) {
        auto it = index.find(name);
        if (it == index.end()) throw ConfigError("model", "unknown parameter: " + name);
        return named[it->second].second;
    }
    bool has(const std::string& name) const { return index.count(name) > 0; }

    std::size_t total_elements() const {
        std::size_t n = 0;
        for (const auto& [name, v] : named) n += v->val.size();
        return n;
    }

    std::vector<std::pair<std::string, ad::Var>> trainable() const {
        std::vector<std::pair<std::string, ad::Var>> out;
        for (const auto& nv : named)
            if (nv.second->requires_grad) out.push_back(nv);
        return out;
    }

    void set_trainable(const std::function<bool(const std::string&)>& pred) {
        for (auto& [name, v] : named) {
            const bool fixed_table = name == "pos_embed" || name.ends_with(".pos_embed");
            v->requires_grad = !fixed_table && pred(name);
        }
    }

    void freeze_all() {
        set_trainable([](const std::string&) { return false; });
    }

    void to_checkpoint(Checkpoint& ck) const {
        ck.manifest["model.depth"] = std::to_string(cfg.depth);
        ck.manifest["model.width"] = std::to_string(cfg.width);
        ck.manifest["model.heads"] = std::to_string(cfg.heads);
        ck.manifest["model.patch"] = std::to_string(cfg.patch);
        ck.manifest["model.input"] = std::to_string(cfg.input);
        ck.manifest["model.decoder_width"] = std::to_string(cfg.decoder_width);
        ck.manifest["model.decoder_depth"] = std::to_string(cfg.decoder_depth);
        ck.manifest["model.decoder_heads"] = std::to_string(cfg.decoder_heads);
        ck.manifest["model.num_layer_classes"] = std::to_string(cfg.num_layer_classes);
        ck.manifest["model.mlp_ratio"] = std::to_string(cfg.mlp_ratio);
        ck.manifest["model.seg_head_width"] = std::to_string(cfg.seg_head_width);
        ck.manifest["model.in_channels"] = std::to_string(cfg.in_channels);
        ck.manifest["model.mode"] = mode == TaskMode::Pretrain ? "pretrain"
                                   : mode == TaskMode::Classify ? "classify"
                                   : mode == TaskMode::Segment ? "segment"
                                                               : "segment_linear";
        ck.manifest["model.num_classes"] = std::to_string(num_classes);
        for (const auto& [name, v] : named) ck.tensors.emplace_back(name, v->val);
    }

    static ModelConfig config_from_manifest(const std::map<std::string, std::string>& man) {
        auto get = [&](const std::string& k) -> std::size_t {
            auto it = man.find(k);
            if (it == man.end()) throw DataError("checkpoint", "manifest missing key " + k);
            return static_cast<std::size_t>(std::stoull(it->second));
        };
        ModelConfig cfg;
        cfg.depth = get("model.depth");
        cfg.width = get("model.width");
        cfg.heads = get("model.heads");
        cfg.patch = get("model.patch");
        cfg.input = get("model.input");
        cfg.decoder_width = get("model.decoder_width");
        cfg.decoder_depth = get("model.decoder_depth");
        cfg.decoder_heads = get("model.decoder_heads");
        cfg.num_layer_classes = get("model.num_layer_classes");
        cfg.mlp_ratio = get("model.mlp_ratio");
        cfg.seg_head_width = get("model.seg_head_width");
        cfg.in_channels = get("model.in_channels");
        return cfg;
    }

    static ParameterSet from_checkpoint(const Checkpoint& ck) {
        const ModelConfig cfg = config_from_manifest(ck.manifest);
        auto mode_it = ck.manifest.find("model.mode");
        TaskMode mode = TaskMode::Pretrain;
        if (mode_it != ck.manifest.end()) {
            if (mode_it->second == "classify") mode = TaskMode::Classify;
            else if (mode_it->second == "segment") mode = TaskMode::Segment;
            else if (mode_it->second == "segment_linear") mode = TaskMode::SegmentLinear;
        }
        std::size_t ncls = 2;
        if (auto it = ck.manifest.find("model.num_classes"); it != ck.manifest.end())
            ncls = static_cast<std::size_t>(std::stoull(it->second));
        ParameterSet ps;
        ps.cfg = cfg;
        ps.mode = mode;
        ps.num_classes = ncls;
        for (const auto& spec : parameter_specs(cfg, mode, ncls)) {
            const Tensor* t = ck.find(spec.name);
            if (!t) throw DataError("checkpoint", "missing tensor " + spec.name);
            if (t->shape() != spec.shape)
                throw DataError("checkpoint", "tensor shape mismatch for " + spec.name);
            ps.push(spec.name, *t, spec.trainable);
        }
        return ps;
    }
};

struct TokenProvenance {
    bool is_global = false;
    Modality modality = Modality::OCT;
    std::size_t patch_index = 0;
};

struct TokenSequence {
    ad::Var tokens;  // (N, d), row 0 is the global token
    std::vector<TokenProvenance> provenance;
};

namespace detail {

inline ad::Var attention(const ad::Var& q_in, const ad::Var& kv_in, std::size_t heads,
                         const ad::Var& wq, const ad::Var& bq, const ad::Var& wk,
                         const ad::Var& bk, const ad::Var& wv, const ad::Var& bv,
                         const ad::Var& wo, const ad::Var& bo) {
    using namespace ad;
    const std::size_t dm = wq->val.cols();
    const std::size_t hd = dm / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(hd));
    Var q = add(matmul(q_in, wq), bq);
    Var k = add(matmul(kv_in, wk), bk);
    Var v = add(matmul(kv_in, wv), bv);
    std::vector<Var> outs;
    for (std::size_t h = 0; h < heads; ++h) {
        Var qh = slice_cols(q, h * hd, (h + 1) * hd);
        Var kh = slice_cols(k, h * hd, (h + 1) * hd);
        Var vh = slice_cols(v, h * hd, (h + 1) * hd);
        Var scores = row_softmax(scale(matmul(qh, transpose(kh)), sc));
        outs.push_back(matmul(scores, vh));
    }
    return add(matmul(concat_cols(outs), wo), bo);
}

// Pre-norm transformer block with fused-qkv self-attention.
inline ad::Var transformer_block(const ad::Var& x, const ParameterSet& ps,
                                 const std::string& prefix, std::size_t heads) {
    using namespace ad;
    const std::size_t d = x->val.cols();
    Var xn = layer_norm(x, ps.var(prefix + ".norm1.gamma"), ps.var(prefix + ".norm1.beta"));
    Var qkv = add(matmul(xn, ps.var(prefix + ".attn.qkv.weight")),
                  ps.var(prefix + ".attn.qkv.bias"));
    Var q = slice_cols(qkv, 0, d);
    Var k = slice_cols(qkv, d, 2 * d);
    Var v = slice_cols(qkv, 2 * d, 3 * d);
    const std::size_t hd = d / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<Var> outs;
    for (std::size_t h = 0; h < heads; ++h) {
        Var qh = slice_cols(q, h * hd, (h + 1) * hd);
        Var kh = slice_cols(k, h * hd, (h + 1) * hd);
        Var vh = slice_cols(v, h * hd, (h + 1) * hd);
        Var scores = row_softmax(scale(matmul(qh, transpose(kh)), sc));
        outs.push_back(matmul(scores, vh));
    }
    Var attn = add(matmul(concat_cols(outs), ps.var(prefix + ".attn.out.weight")),
                   ps.var(prefix + ".attn.out.bias"));
    Var x1 = add(x, attn);
    Var x1n = layer_norm(x1, ps.var(prefix + ".norm2.gamma"), ps.var(prefix + ".norm2.beta"));
    Var h1 = gelu(add(matmul(x1n, ps.var(prefix + ".mlp.fc1.weight")),
                      ps.var(prefix + ".mlp.fc1.bias")));
    Var h2 = add(matmul(h1, ps.var(prefix + ".mlp.fc2.weight")),
                 ps.var(prefix + ".mlp.fc2.bias"));
    return add(x1, h2);
}

// Flattened patch rows for the visible indices of one modality; intensity
// planes are replicated across in_channels, layer maps one-hot expanded.
inline Tensor visible_patch_matrix(const Sample& sample, Modality m,
                                   const std::vector<std::size_t>& indices,
                                   const ModelConfig& cfg) {
    const std::size_t p = cfg.patch;
    if (m == Modality::LAYERS) {
        if (!sample.layers)
            throw DataError("model", "allocation references missing LAYERS modality in sample " +
                                         sample.sample_id);
        const Tensor raw = patchify(*sample.layers, p);
        const std::size_t C = cfg.num_layer_classes;
        Tensor out({indices.size(), p * p * C});
        for (std::size_t i = 0; i < indices.size(); ++i) {
            if (indices[i] >= raw.rows())
                throw ShapeError("model", "allocation index out of range");
            for (std::size_t j = 0; j < p * p; ++j) {
                const int cls = static_cast<int>(raw(indices[i], j));
                if (cls < 0 || static_cast<std::size_t>(cls) >= C)
                    throw DataError("model", "layer class out of range in sample " +
                                                 sample.sample_id);
                out(i, static_cast<std::size_t>(cls) * p * p + j) = 1.0;
            }
        }
        return out;
    }
    const ImagePlane* plane = nullptr;
    if (m == Modality::OCT) plane = &sample.oct;
    else {
        if (!sample.slo)
            throw DataError("model", "allocation references missing SLO modality in sample " +
                                         sample.sample_id);
        plane = &*sample.slo;
    }
    const Tensor raw = patchify(*plane, p);
    const std::size_t c = cfg.in_channels;
    Tensor out({indices.size(), p * p * c});
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= raw.rows())
            throw ShapeError("model", "allocation index out of range");
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t j = 0; j < p * p; ++j)
                out(i, ch * p * p + j) = raw(indices[i], j);
    }
    return out;
}

}  // namespace detail

// Visible patches -> embedded token sequence with the global token at row 0.
inline TokenSequence project_tokens(const Sample& sample, const TokenAllocation& alloc,
                                    const ParameterSet& ps) {
    using namespace ad;
    const auto modalities = active_modalities(ps.mode);
    if (alloc.indices.size() != modalities.size())
        throw ShapeError("model", "allocation modality count does not match mode");
    TokenSequence seq;
    std::vector<Var> parts;
    Var global = add(ps.var("global_token"), select_rows(ps.var("pos_embed"), {0}));
    parts.push_back(global);
    seq.provenance.push_back({true, Modality::OCT, 0});
    for (std::size_t mi = 0; mi < modalities.size(); ++mi) {
        const Modality m = modalities[mi];
        const auto& idx = alloc.indices[mi];
        if (idx.empty()) continue;
        Tensor patches = detail::visible_patch_matrix(sample, m, idx, ps.cfg);
        const std::string mn = modality_name(m);
        Var tok = add(matmul(constant(std::move(patches)), ps.var("proj." + mn + ".weight")),
                      ps.var("proj." + mn + ".bias"));
        std::vector<std::size_t> pos_rows;
        pos_rows.reserve(idx.size());
        for (std::size_t i : idx) pos_rows.push_back(1 + i);
        tok = add(tok, select_rows(ps.var("pos_embed"), pos_rows));
        tok = add(tok, ps.var("mod_embed." + mn));
        parts.push_back(tok);
        for (std::size_t i : idx) seq.provenance.push_back({false, m, i});
    }
    seq.tokens = concat_rows(parts);
    return seq;
}

inline TokenSequence encode(const TokenSequence& seq, const ParameterSet& ps) {
    TokenSequence out;
    out.provenance = seq.provenance;
    ad::Var x = seq.tokens;
    for (std::size_t i = 0; i < ps.cfg.depth; ++i)
        x = detail::transformer_block(x, ps, "encoder.block" + std::to_string(i), ps.cfg.heads);
    out.tokens = ad::layer_norm(x, ps.var("encoder.norm.gamma"), ps.var("encoder.norm.beta"));
    return out;
}

// Full-grid patch predictions for one modality. Queries are the projected
// encoder outputs at visible grid positions and a learned mask token
// elsewhere; keys/values are the projected full encoded sequence.
inline ad::Var decode_modality(const TokenSequence& encoded, Modality m,
                               const TokenAllocation& alloc, const ParameterSet& ps) {
    using namespace ad;
    if (ps.mode != TaskMode::Pretrain)
        throw ConfigError("model", "decoders exist only in pretraining mode");
    const auto modalities = active_modalities(ps.mode);
    std::size_t mi = modalities.size();
    for (std::size_t i = 0; i < modalities.size(); ++i)
        if (modalities[i] == m) mi = i;
    if (mi == modalities.size())
        throw ConfigError("model", "modality not active in this configuration");
    const std::string dn = std::string("dec.") + modality_name(m);
    const std::size_t P = ps.cfg.patches();

    Var ctx = add(matmul(encoded.tokens, ps.var(dn + ".proj.weight")), ps.var(dn + ".proj.bias"));
    // sequence row of each visible grid position
    std::vector<long> grid_map(P, -1);
    for (std::size_t row = 0; row < encoded.provenance.size(); ++row) {
        const auto& pr = encoded.provenance[row];
        if (!pr.is_global && pr.modality == m) grid_map[pr.patch_index] = static_cast<long>(row);
    }
    Var q = build_grid(ctx, ps.var(dn + ".mask_token"), std::move(grid_map));
    q = add(q, ps.var(dn + ".pos_embed"));

    Var qn = layer_norm(q, ps.var(dn + ".xattn.normq.gamma"), ps.var(dn + ".xattn.normq.beta"));
    Var cn = layer_norm(ctx, ps.var(dn + ".xattn.normc.gamma"), ps.var(dn + ".xattn.normc.beta"));
    Var xa = detail::attention(qn, cn, ps.cfg.decoder_heads,
                               ps.var(dn + ".xattn.q.weight"), ps.var(dn + ".xattn.q.bias"),
                               ps.var(dn + ".xattn.k.weight"), ps.var(dn + ".xattn.k.bias"),
                               ps.var(dn + ".xattn.v.weight"), ps.var(dn + ".xattn.v.bias"),
                               ps.var(dn + ".xattn.out.weight"), ps.var(dn + ".xattn.out.bias"));
    q = add(q, xa);
    Var qmn = layer_norm(q, ps.var(dn + ".mlp.norm.gamma"), ps.var(dn + ".mlp.norm.beta"));
    Var h = gelu(add(matmul(qmn, ps.var(dn + ".mlp.fc1.weight")), ps.var(dn + ".mlp.fc1.bias")));
    q = add(q, add(matmul(h, ps.var(dn + ".mlp.fc2.weight")), ps.var(dn + ".mlp.fc2.bias")));
    for (std::size_t i = 0; i < ps.cfg.decoder_depth; ++i)
        q = detail::transformer_block(q, ps, dn + ".block" + std::to_string(i),
                                      ps.cfg.decoder_heads);
    q = layer_norm(q, ps.var(dn + ".norm.gamma"), ps.var(dn + ".norm.beta"));
    return add(matmul(q, ps.var(dn + ".out.weight")), ps.var(dn + ".out.bias"));
}

inline ad::Var pooled_feature(const TokenSequence& encoded) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < encoded.provenance.size(); ++i)
        if (!encoded.provenance[i].is_global) rows.push_back(i);
    if (rows.empty()) throw DataError("model", "no non-global tokens to pool");
    return ad::mean_rows(ad::select_rows(encoded.tokens, rows));
}

inline ad::Var classify_logits(const TokenSequence& encoded, const ParameterSet& ps) {
    return ad::add(ad::matmul(pooled_feature(encoded), ps.var("head.weight")),
                   ps.var("head.bias"));
}

inline std::vector<double> classify_head(const TokenSequence& encoded, const ParameterSet& ps) {
    ad::Var probs = ad::row_softmax(classify_logits(encoded, ps));
    std::vector<double> out(probs->val.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = probs->val[i];
    return out;
}

// ---- upsampling maps ----

namespace detail {

inline std::shared_ptr<ad::RowMap> make_upsample_map(std::size_t in_h, std::size_t in_w,
                                                     std::size_t out_h, std::size_t out_w,
                                                     bool bicubic) {
    auto map = std::make_shared<ad::RowMap>();
    map->n_out = out_h * out_w;
    map->terms.resize(map->n_out);
    const double sy = static_cast<double>(in_h) / static_cast<double>(out_h);
    const double sx = static_cast<double>(in_w) / static_cast<double>(out_w);
    auto cubic = [](double t) {  // Catmull-Rom (a = -0.5)
        t = std::abs(t);
        if (t <= 1.0) return 1.5 * t * t * t - 2.5 * t * t + 1.0;
        if (t < 2.0) return -0.5 * t * t * t + 2.5 * t * t - 4.0 * t + 2.0;
        return 0.0;
    };
    auto clampi = [](long v, long lo, long hi) { return std::max(lo, std::min(hi, v)); };
    for (std::size_t oy = 0; oy < out_h; ++oy)
        for (std::size_t ox = 0; ox < out_w; ++ox) {
            const double cy = (static_cast<double>(oy) + 0.5) * sy - 0.5;
            const double cx = (static_cast<double>(ox) + 0.5) * sx - 0.5;
            auto& terms = map->terms[oy * out_w + ox];
            if (!bicubic) {
                const long y0 = static_cast<long>(std::floor(cy));
                const long x0 = static_cast<long>(std::floor(cx));
                const double fy = cy - static_cast<double>(y0);
                const double fx = cx - static_cast<double>(x0);
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx) {
                        const long yy = clampi(y0 + dy, 0, static_cast<long>(in_h) - 1);
                        const long xx = clampi(x0 + dx, 0, static_cast<long>(in_w) - 1);
                        const double w = (dy ? fy : 1.0 - fy) * (dx ? fx : 1.0 - fx);
                        if (w != 0.0)
                            terms.emplace_back(static_cast<std::size_t>(yy) * in_w +
                                                   static_cast<std::size_t>(xx),
                                               w);
                    }
            } else {
                const long y0 = static_cast<long>(std::floor(cy));
                const long x0 = static_cast<long>(std::floor(cx));
                for (int dy = -1; dy <= 2; ++dy)
                    for (int dx = -1; dx <= 2; ++dx) {
                        const double w = cubic(cy - static_cast<double>(y0 + dy)) *
                                         cubic(cx - static_cast<double>(x0 + dx));
                        if (w == 0.0) continue;
                        const long yy = clampi(y0 + dy, 0, static_cast<long>(in_h) - 1);
                        const long xx = clampi(x0 + dx, 0, static_cast<long>(in_w) - 1);
                        terms.emplace_back(static_cast<std::size_t>(yy) * in_w +
                                               static_cast<std::size_t>(xx),
                                           w);
                    }
            }
        }
    return map;
}

}  // namespace detail

// ConvNeXt segmentation head: (H*W, num_classes) logits from a full-grid
// encoded sequence.
inline ad::Var segment_head_convnext(const TokenSequence& encoded, const ParameterSet& ps) {
    using namespace ad;
    ps.cfg.validate_seg_head();
    const std::size_t g = ps.cfg.grid(), P = ps.cfg.patches(), p = ps.cfg.patch;
    const std::size_t r = p / 4;
    const std::size_t Wseg = ps.cfg.seg_head_width;
    const std::size_t ch = Wseg / (r * r);
    const std::size_t H4 = g * r, W4 = g * r;

    std::vector<std::size_t> grid_rows(P);
    std::size_t found = 0;
    for (std::size_t i = 0; i < encoded.provenance.size(); ++i) {
        const auto& pr = encoded.provenance[i];
        if (!pr.is_global) {
            grid_rows[pr.patch_index] = i;
            ++found;
        }
    }
    if (found != P)
        throw ShapeError("model", "segmentation head requires the full unmasked patch grid");

    Var tokens = select_rows(encoded.tokens, grid_rows);      // (P, d)
    Var y = add(matmul(tokens, ps.var("seg.proj.weight")), ps.var("seg.proj.bias"));

    // pixel shuffle (P, Wseg) -> (H4*W4, ch); token vector is cell-major
    auto idx = std::make_shared<std::vector<std::size_t>>(H4 * W4 * ch);
    for (std::size_t Y = 0; Y < H4; ++Y)
        for (std::size_t X = 0; X < W4; ++X)
            for (std::size_t c = 0; c < ch; ++c) {
                const std::size_t t = (Y / r) * g + (X / r);
                const std::size_t cell = (Y % r) * r + (X % r);
                (*idx)[(Y * W4 + X) * ch + c] = t * Wseg + cell * ch + c;
            }
    Var fm = permute_reshape(y, {H4 * W4, ch}, idx);

    for (std::size_t b = 0; b < 4; ++b) {
        const std::string bn = "seg.block" + std::to_string(b);
        Var d = depthwise_conv(fm, H4, W4, 7, ps.var(bn + ".dw.weight"), ps.var(bn + ".dw.bias"));
        d = layer_norm(d, ps.var(bn + ".norm.gamma"), ps.var(bn + ".norm.beta"));
        d = gelu(add(matmul(d, ps.var(bn + ".pw1.weight")), ps.var(bn + ".pw1.bias")));
        d = add(matmul(d, ps.var(bn + ".pw2.weight")), ps.var(bn + ".pw2.bias"));
        fm = add(fm, d);
    }
    Var logits4 = add(matmul(fm, ps.var("seg.out.weight")), ps.var("seg.out.bias"));
    auto up = detail::make_upsample_map(H4, W4, ps.cfg.input, ps.cfg.input, /*bicubic=*/false);
    return apply_row_map(logits4, up);  // (H*W, num_classes)
}

// Linear probing head: per-token 1x1 projection on the token grid, bicubic
// upsampling to full resolution.
inline ad::Var segment_head_linear(const TokenSequence& encoded, const ParameterSet& ps) {
    using namespace ad;
    const std::size_t g = ps.cfg.grid(), P = ps.cfg.patches();
    std::vector<std::size_t> grid_rows(P);
    std::size_t found = 0;
    for (std::size_t i = 0; i < encoded.provenance.size(); ++i)
        if (!encoded.provenance[i].is_global) {
            grid_rows[encoded.provenance[i].patch_index] = i;
            ++found;
        }
    if (found != P)
        throw ShapeError("model", "segmentation head requires the full unmasked patch grid");
    Var tokens = select_rows(encoded.tokens, grid_rows);
    Var logits_tok = add(matmul(tokens, ps.var("seglin.weight")), ps.var("seglin.bias"));
    auto up = detail::make_upsample_map(g, g, ps.cfg.input, ps.cfg.input, /*bicubic=*/true);
    return apply_row_map(logits_tok, up);
}

// Allocation marking every patch of the mode's modalities visible (downstream).
inline TokenAllocation full_allocation(const ParameterSet& ps) {
    TokenAllocation alloc;
    const std::size_t P = ps.cfg.patches();
    for (std::size_t mi = 0; mi < active_modalities(ps.mode).size(); ++mi) {
        std::vector<std::size_t> idx(P);
        std::iota(idx.begin(), idx.end(), 0);
        alloc.counts.push_back(P);
        alloc.indices.push_back(std::move(idx));
        alloc.budget += P;
    }
    return alloc;
}

struct ImportReport {
    std::vector<std::string> copied;
    std::vector<std::string> fresh;
    std::vector<std::string> mismatched;
};

// Copies encoder (and matching shared) tensors from a pretraining checkpoint
// into a freshly initialized target; projections without a compatible source
// stay freshly initialized. Encoder-shape conflicts are an error.
inline ImportReport import_encoder(const Checkpoint& ck, ParameterSet& target) {
    ImportReport report;
    for (auto& [name, v] : target.named) {
        const Tensor* src = ck.find(name);
        if (!src) {
            report.fresh.push_back(name);
            continue;
        }
        if (src->shape() != v->val.shape()) {
            report.mismatched.push_back(name);
            continue;
        }
        v->val = *src;
        report.copied.push_back(name);
    }
    for (const auto& name : report.mismatched)
        if (name.starts_with("encoder."))
            throw DataError("model", "encoder dimension mismatch importing tensor " + name);
    return report;
}

}  // namespace trimae
