#pragma once

#include <optional>
#include <string>
#include <vector>

#include "trimae/tensor.hpp"

namespace trimae {

enum class Modality { OCT, SLO, LAYERS };

inline const char* modality_name(Modality m) {
    switch (m) {
        case Modality::OCT: return "oct";
        case Modality::SLO: return "slo";
        case Modality::LAYERS: return "layers";
    }
    return "?";
}

inline bool is_categorical(Modality m) { return m == Modality::LAYERS; }

struct ImagePlane {
    std::size_t height = 0, width = 0;
    std::vector<double> values;  // row-major, in [0,1]

    ImagePlane() = default;
    ImagePlane(std::size_t h, std::size_t w) : height(h), width(w), values(h * w, 0.0) {}

    double& at(std::size_t y, std::size_t x) { return values[y * width + x]; }
    double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
};

struct LayerMap {
    std::size_t height = 0, width = 0;
    std::vector<int> values;  // class indices in [0, C)

    LayerMap() = default;
    LayerMap(std::size_t h, std::size_t w) : height(h), width(w), values(h * w, 0) {}

    int& at(std::size_t y, std::size_t x) { return values[y * width + x]; }
    int at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
};

struct Spacing {
    double mm_x = 1.0, mm_y = 1.0, mm_slice = 1.0;
    double voxel_volume() const { return mm_x * mm_y * mm_slice; }
};

struct Sample {
    std::string sample_id;
    std::string patient_id;
    ImagePlane oct;
    std::optional<ImagePlane> slo;
    std::optional<LayerMap> layers;
    std::optional<int> label;
    std::optional<LayerMap> mask;
    Spacing spacing;

    bool has(Modality m) const {
        switch (m) {
            case Modality::OCT: return oct.height > 0;
            case Modality::SLO: return slo.has_value();
            case Modality::LAYERS: return layers.has_value();
        }
        return false;
    }
};

enum class Variant { Tiny, Base, Large, Custom };

struct ModelConfig {
    std::size_t depth = 2;           // L
    std::size_t width = 16;          // d
    std::size_t heads = 2;           // A
    std::size_t patch = 8;           // p
    std::size_t input = 32;          // S
    std::size_t decoder_width = 32;  // d_dec
    std::size_t decoder_depth = 2;
    std::size_t decoder_heads = 4;
    std::size_t num_layer_classes = 11;  // C
    std::size_t mlp_ratio = 4;
    std::size_t seg_head_width = 6144;
    std::size_t in_channels = 1;  // intensity channels fed to OCT/SLO projections
    Variant variant = Variant::Custom;

    std::size_t grid() const { return input / patch; }
    std::size_t patches() const { return grid() * grid(); }

    static ModelConfig tiny() {
        ModelConfig c;
        c.depth = 2; c.width = 16; c.heads = 2; c.patch = 8; c.input = 32;
        c.decoder_width = 32; c.num_layer_classes = 3; c.seg_head_width = 64;
        c.in_channels = 1; c.variant = Variant::Tiny;
        return c;
    }
    static ModelConfig base() {
        ModelConfig c;
        c.depth = 12; c.width = 768; c.heads = 12; c.patch = 32; c.input = 512;
        c.decoder_width = 128; c.num_layer_classes = 11; c.seg_head_width = 6144;
        c.in_channels = 3; c.variant = Variant::Base;
        return c;
    }
    static ModelConfig large() {
        ModelConfig c = base();
        c.depth = 24; c.width = 1024; c.heads = 16; c.variant = Variant::Large;
        return c;
    }

    void validate() const {
        if (width == 0 || depth == 0 || heads == 0 || patch == 0 || input == 0)
            throw ConfigError("core", "model dimensions must be positive");
        if (width % heads != 0)
            throw ConfigError("core", "width must be divisible by heads (d mod A != 0)");
        if (input % patch != 0)
            throw ConfigError("core", "input size must be divisible by patch size (S mod p != 0)");
        if (decoder_width % decoder_heads != 0)
            throw ConfigError("core", "decoder width must be divisible by decoder heads");
        if (variant == Variant::Base &&
            (depth != 12 || width != 768 || heads != 12))
            throw ConfigError("core", "Base variant requires L=12, d=768, A=12");
        if (variant == Variant::Large &&
            (depth != 24 || width != 1024 || heads != 16))
            throw ConfigError("core", "Large variant requires L=24, d=1024, A=16");
        if (num_layer_classes < 2)
            throw ConfigError("core", "num_layer_classes must be at least 2");
    }

    void validate_seg_head() const {
        if (patch % 4 != 0)
            throw ConfigError("core", "ConvNeXt head requires patch size divisible by 4");
        const std::size_t cells = (patch / 4) * (patch / 4);
        if (seg_head_width % cells != 0)
            throw ConfigError("core",
                              "seg_head_width must be divisible by (p/4)^2 for the ConvNeXt head");
    }
};

struct TokenAllocation {
    std::size_t budget = 0;
    std::vector<std::size_t> counts;               // per modality
    std::vector<std::vector<std::size_t>> indices; // sorted unique patch indices
};

// ---- patch algebra ----

// Splits a row-major plane into raster-ordered p x p patches; returns (P, p^2).
inline Tensor patchify(const std::vector<double>& values, std::size_t H, std::size_t W,
                       std::size_t p) {
    if (H % p != 0)
        throw ShapeError("core", "height " + std::to_string(H) +
                                     " not divisible by patch size " + std::to_string(p));
    if (W % p != 0)
        throw ShapeError("core", "width " + std::to_string(W) +
                                     " not divisible by patch size " + std::to_string(p));
    const std::size_t gh = H / p, gw = W / p;
    Tensor out({gh * gw, p * p});
    for (std::size_t gy = 0; gy < gh; ++gy)
        for (std::size_t gx = 0; gx < gw; ++gx) {
            const std::size_t patch_idx = gy * gw + gx;
            for (std::size_t py = 0; py < p; ++py)
                for (std::size_t px = 0; px < p; ++px)
                    out(patch_idx, py * p + px) = values[(gy * p + py) * W + gx * p + px];
        }
    return out;
}

inline Tensor patchify(const ImagePlane& plane, std::size_t p) {
    return patchify(plane.values, plane.height, plane.width, p);
}

inline Tensor patchify(const LayerMap& map, std::size_t p) {
    std::vector<double> vals(map.values.begin(), map.values.end());
    return patchify(vals, map.height, map.width, p);
}

inline std::vector<double> unpatchify(const Tensor& patches, std::size_t p, std::size_t H,
                                      std::size_t W) {
    if (patches.rows() * p * p != H * W || patches.cols() != p * p)
        throw ShapeError("core", "unpatchify cardinality mismatch: " +
                                     std::to_string(patches.rows()) + " patches of " +
                                     std::to_string(patches.cols()) + " vs " +
                                     std::to_string(H) + "x" + std::to_string(W));
    const std::size_t gw = W / p;
    std::vector<double> out(H * W, 0.0);
    for (std::size_t i = 0; i < patches.rows(); ++i) {
        const std::size_t gy = i / gw, gx = i % gw;
        for (std::size_t py = 0; py < p; ++py)
            for (std::size_t px = 0; px < p; ++px)
                out[(gy * p + py) * W + gx * p + px] = patches(i, py * p + px);
    }
    return out;
}

// ---- parameter shape registry ----

enum class TaskMode { Pretrain, Classify, Segment, SegmentLinear };

struct TensorSpec {
    std::string name;
    std::vector<std::size_t> shape;
    bool trainable = true;
    enum class Init { Normal, Zero, One } init = Init::Normal;
};

namespace detail {

inline void encoder_block_specs(std::vector<TensorSpec>& out, const std::string& prefix,
                                std::size_t d, std::size_t mlp_ratio) {
    using I = TensorSpec::Init;
    out.push_back({prefix + ".norm1.gamma", {1, d}, true, I::One});
    out.push_back({prefix + ".norm1.beta", {1, d}, true, I::Zero});
    out.push_back({prefix + ".attn.qkv.weight", {d, 3 * d}, true, I::Normal});
    out.push_back({prefix + ".attn.qkv.bias", {1, 3 * d}, true, I::Zero});
    out.push_back({prefix + ".attn.out.weight", {d, d}, true, I::Normal});
    out.push_back({prefix + ".attn.out.bias", {1, d}, true, I::Zero});
    out.push_back({prefix + ".norm2.gamma", {1, d}, true, I::One});
    out.push_back({prefix + ".norm2.beta", {1, d}, true, I::Zero});
    out.push_back({prefix + ".mlp.fc1.weight", {d, mlp_ratio * d}, true, I::Normal});
    out.push_back({prefix + ".mlp.fc1.bias", {1, mlp_ratio * d}, true, I::Zero});
    out.push_back({prefix + ".mlp.fc2.weight", {mlp_ratio * d, d}, true, I::Normal});
    out.push_back({prefix + ".mlp.fc2.bias", {1, d}, true, I::Zero});
}

}  // namespace detail

inline std::size_t modality_channels(const ModelConfig& cfg, Modality m) {
    return is_categorical(m) ? cfg.num_layer_classes : cfg.in_channels;
}

inline std::vector<Modality> active_modalities(TaskMode mode) {
    if (mode == TaskMode::Pretrain)
        return {Modality::OCT, Modality::SLO, Modality::LAYERS};
    return {Modality::OCT};
}

// Every learnable (and fixed positional) tensor implied by the config+mode.
// Model instantiation and count_params both derive from this list.
inline std::vector<TensorSpec> parameter_specs(const ModelConfig& cfg, TaskMode mode,
                                               std::size_t num_classes = 2) {
    cfg.validate();
    using I = TensorSpec::Init;
    const std::size_t d = cfg.width, P = cfg.patches(), p = cfg.patch;
    std::vector<TensorSpec> out;

    for (Modality m : active_modalities(mode)) {
        const std::string mn = modality_name(m);
        const std::size_t c = modality_channels(cfg, m);
        out.push_back({"proj." + mn + ".weight", {p * p * c, d}, true, I::Normal});
        out.push_back({"proj." + mn + ".bias", {1, d}, true, I::Zero});
        out.push_back({"mod_embed." + mn, {1, d}, true, I::Normal});
    }
    out.push_back({"pos_embed", {1 + P, d}, false, I::Zero});
    out.push_back({"global_token", {1, d}, true, I::Normal});
    for (std::size_t i = 0; i < cfg.depth; ++i)
        detail::encoder_block_specs(out, "encoder.block" + std::to_string(i), d, cfg.mlp_ratio);
    out.push_back({"encoder.norm.gamma", {1, d}, true, I::One});
    out.push_back({"encoder.norm.beta", {1, d}, true, I::Zero});

    if (mode == TaskMode::Pretrain) {
        const std::size_t dd = cfg.decoder_width;
        for (Modality m : active_modalities(mode)) {
            const std::string dn = std::string("dec.") + modality_name(m);
            const std::size_t c_out = is_categorical(m) ? cfg.num_layer_classes : 1;
            out.push_back({dn + ".proj.weight", {d, dd}, true, I::Normal});
            out.push_back({dn + ".proj.bias", {1, dd}, true, I::Zero});
            out.push_back({dn + ".mask_token", {1, dd}, true, I::Normal});
            out.push_back({dn + ".pos_embed", {P, dd}, false, I::Zero});
            out.push_back({dn + ".xattn.normq.gamma", {1, dd}, true, I::One});
            out.push_back({dn + ".xattn.normq.beta", {1, dd}, true, I::Zero});
            out.push_back({dn + ".xattn.normc.gamma", {1, dd}, true, I::One});
            out.push_back({dn + ".xattn.normc.beta", {1, dd}, true, I::Zero});
            for (const char* nm : {"q", "k", "v", "out"}) {
                out.push_back({dn + ".xattn." + nm + ".weight", {dd, dd}, true, I::Normal});
                out.push_back({dn + ".xattn." + nm + ".bias", {1, dd}, true, I::Zero});
            }
            out.push_back({dn + ".mlp.norm.gamma", {1, dd}, true, I::One});
            out.push_back({dn + ".mlp.norm.beta", {1, dd}, true, I::Zero});
            out.push_back({dn + ".mlp.fc1.weight", {dd, 4 * dd}, true, I::Normal});
            out.push_back({dn + ".mlp.fc1.bias", {1, 4 * dd}, true, I::Zero});
            out.push_back({dn + ".mlp.fc2.weight", {4 * dd, dd}, true, I::Normal});
            out.push_back({dn + ".mlp.fc2.bias", {1, dd}, true, I::Zero});
            for (std::size_t i = 0; i < cfg.decoder_depth; ++i)
                detail::encoder_block_specs(out, dn + ".block" + std::to_string(i), dd, 4);
            out.push_back({dn + ".norm.gamma", {1, dd}, true, I::One});
            out.push_back({dn + ".norm.beta", {1, dd}, true, I::Zero});
            out.push_back({dn + ".out.weight", {dd, p * p * c_out}, true, I::Normal});
            out.push_back({dn + ".out.bias", {1, p * p * c_out}, true, I::Zero});
        }
    } else if (mode == TaskMode::Classify) {
        out.push_back({"head.weight", {d, num_classes}, true, I::Normal});
        out.push_back({"head.bias", {1, num_classes}, true, I::Zero});
    } else if (mode == TaskMode::SegmentLinear) {
        out.push_back({"seglin.weight", {d, num_classes}, true, I::Normal});
        out.push_back({"seglin.bias", {1, num_classes}, true, I::Zero});
    } else {
        cfg.validate_seg_head();
        const std::size_t Wseg = cfg.seg_head_width;
        const std::size_t ch = Wseg / ((p / 4) * (p / 4));
        out.push_back({"seg.proj.weight", {d, Wseg}, true, I::Normal});
        out.push_back({"seg.proj.bias", {1, Wseg}, true, I::Zero});
        for (std::size_t i = 0; i < 4; ++i) {
            const std::string bn = "seg.block" + std::to_string(i);
            out.push_back({bn + ".dw.weight", {ch, 49}, true, I::Normal});
            out.push_back({bn + ".dw.bias", {1, ch}, true, I::Zero});
            out.push_back({bn + ".norm.gamma", {1, ch}, true, I::One});
            out.push_back({bn + ".norm.beta", {1, ch}, true, I::Zero});
            out.push_back({bn + ".pw1.weight", {ch, 4 * ch}, true, I::Normal});
            out.push_back({bn + ".pw1.bias", {1, 4 * ch}, true, I::Zero});
            out.push_back({bn + ".pw2.weight", {4 * ch, ch}, true, I::Normal});
            out.push_back({bn + ".pw2.bias", {1, ch}, true, I::Zero});
        }
        out.push_back({"seg.out.weight", {ch, num_classes}, true, I::Normal});
        out.push_back({"seg.out.bias", {1, num_classes}, true, I::Zero});
    }
    return out;
}

inline std::size_t count_params(const ModelConfig& cfg, TaskMode mode,
                                std::size_t num_classes = 2) {
    std::size_t total = 0;
    for (const auto& spec : parameter_specs(cfg, mode, num_classes))
        total += Tensor::count(spec.shape);
    return total;
}

}  // namespace trimae
