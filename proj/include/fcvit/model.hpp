#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fcvit/block.hpp"

namespace fcvit {

struct StageConfig {
    std::size_t dim = 64;
    std::size_t depth = 1;
    std::size_t mlp_ratio = 4;
    std::size_t patch_kernel = 3;
    std::size_t patch_stride = 2;
    std::size_t mixer_kernel = 11;
    std::size_t groups = 8;
    std::size_t bottleneck_r = 8;
    // Ablation knobs, forwarded to every block of the stage.
    std::size_t mixer_repeats = 2;
    ContextMode context = ContextMode::bottleneck;
    bool dynamic_context = true;
    bool mixer_pointwise = false;

    BlockConfig block_config() const {
        BlockConfig b;
        b.dim = dim;
        b.mlp_ratio = mlp_ratio;
        b.mixer_kernel = mixer_kernel;
        b.groups = groups;
        b.bottleneck_r = bottleneck_r;
        b.mixer_repeats = mixer_repeats;
        b.context = context;
        b.dynamic_context = dynamic_context;
        b.mixer_pointwise = mixer_pointwise;
        return b;
    }

    /// Patch-embed padding: floor((k - s + 1) / 2).
    std::size_t patch_padding() const { return (patch_kernel - patch_stride + 1) / 2; }
};

struct ModelConfig {
    std::string name;
    std::vector<StageConfig> stages;
    std::size_t num_classes = 1000;
    std::size_t in_channels = 3;
    bool isotropic = false;
    std::size_t iso_patch = 16;

    void validate() const {
        if (stages.empty()) throw ConfigError("model: at least one stage required");
        if (isotropic && stages.size() != 1) throw ConfigError("model: isotropic models have exactly one stage");
        if (num_classes == 0 || in_channels == 0) throw ConfigError("model: num_classes and in_channels must be positive");
        for (const auto& s : stages) {
            if (s.depth == 0) throw ConfigError("model: stage depth must be positive");
            if (s.patch_stride == 0 || s.patch_kernel < s.patch_stride) {
                throw ConfigError("model: patch kernel must be >= patch stride");
            }
            s.block_config().validate();
        }
        if (isotropic && (stages[0].patch_kernel != iso_patch || stages[0].patch_stride != iso_patch)) {
            throw ConfigError("model: isotropic stem must be a stride-p p x p convolution");
        }
    }

    /// Product of the patch strides.
    std::size_t total_stride() const {
        std::size_t s = 1;
        for (const auto& st : stages) s *= st.patch_stride;
        return s;
    }
};

namespace presets {

inline ModelConfig hierarchical(std::string name, std::vector<std::size_t> dims, std::vector<std::size_t> depths,
                                std::vector<std::size_t> mlp, std::size_t groups = 8, std::size_t r = 8,
                                std::size_t k = 11, std::size_t classes = 1000) {
    ModelConfig c;
    c.name = std::move(name);
    c.num_classes = classes;
    for (std::size_t i = 0; i < dims.size(); ++i) {
        StageConfig s;
        s.dim = dims[i];
        s.depth = depths[i];
        s.mlp_ratio = mlp[i];
        s.patch_kernel = i == 0 ? 7 : 3;
        s.patch_stride = i == 0 ? 4 : 2;
        s.mixer_kernel = k;
        s.groups = groups;
        s.bottleneck_r = r;
        c.stages.push_back(s);
    }
    return c;
}

inline ModelConfig isotropic(std::string name, std::size_t dim, std::size_t depth, std::size_t patch = 16) {
    ModelConfig c;
    c.name = std::move(name);
    c.isotropic = true;
    c.iso_patch = patch;
    StageConfig s;
    s.dim = dim;
    s.depth = depth;
    s.mlp_ratio = 4;
    s.patch_kernel = patch;
    s.patch_stride = patch;
    c.stages.push_back(s);
    return c;
}

inline ModelConfig tiny() { return hierarchical("tiny", {32, 64, 160, 320}, {3, 3, 5, 2}, {8, 8, 4, 4}); }
inline ModelConfig b12() { return hierarchical("b12", {64, 128, 320, 512}, {2, 2, 6, 2}, {8, 8, 4, 4}); }
inline ModelConfig b24() { return hierarchical("b24", {64, 128, 320, 512}, {4, 4, 12, 4}, {8, 8, 4, 4}); }
inline ModelConfig b48() { return hierarchical("b48", {64, 128, 320, 512}, {8, 8, 24, 8}, {8, 8, 4, 4}); }
inline ModelConfig iso_256_12() { return isotropic("iso-256-12", 256, 12); }
inline ModelConfig iso_384_16() { return isotropic("iso-384-16", 384, 16); }

/// Test/toy configuration; four output classes for the synthetic dataset.
inline ModelConfig micro() { return hierarchical("micro", {8, 16, 32, 64}, {1, 1, 2, 1}, {8, 8, 4, 4}, 4, 4, 3, 4); }

inline std::vector<std::string> names() { return {"tiny", "b12", "b24", "b48", "iso-256-12", "iso-384-16", "micro"}; }

inline ModelConfig by_name(const std::string& name) {
    if (name == "tiny") return tiny();
    if (name == "b12") return b12();
    if (name == "b24") return b24();
    if (name == "b48") return b48();
    if (name == "iso-256-12") return iso_256_12();
    if (name == "iso-384-16") return iso_384_16();
    if (name == "micro") return micro();
    throw ConfigError("unknown preset '" + name + "'");
}

}  // namespace presets

template <Real T>
struct StageParams {
    ConvParams<T> embed;
    NormParams<T> embed_norm;
    std::vector<BlockParams<T>> blocks;
};

template <Real T>
struct ModelParams {
    ModelConfig config;
    std::vector<StageParams<T>> stages;
    NormParams<T> final_norm;
    Var<T> head_weight;  // [classes, d_last]
    Var<T> head_bias;    // [classes]

    /// Calls fn(name, var) for every tensor in registry order.
    void visit(const std::function<void(const std::string&, Var<T>&)>& fn) {
        for (std::size_t s = 0; s < stages.size(); ++s) {
            auto& st = stages[s];
            const std::string p = "stages." + std::to_string(s) + ".";
            fn(p + "embed.weight", st.embed.weight);
            fn(p + "embed.bias", st.embed.bias);
            fn(p + "embed_norm.weight", st.embed_norm.weight);
            fn(p + "embed_norm.bias", st.embed_norm.bias);
            for (std::size_t b = 0; b < st.blocks.size(); ++b) {
                st.blocks[b].visit(p + "blocks." + std::to_string(b) + ".", fn);
            }
        }
        fn("norm.weight", final_norm.weight);
        fn("norm.bias", final_norm.bias);
        fn("head.weight", head_weight);
        fn("head.bias", head_bias);
    }

    /// Every tensor with its stable name. The returned handles share storage
    /// with this model.
    std::vector<std::pair<std::string, Var<T>>> registry() const {
        std::vector<std::pair<std::string, Var<T>>> out;
        // visit() only reads the handles; the const_cast does not mutate.
        const_cast<ModelParams&>(*this).visit([&out](const std::string& n, Var<T>& v) { out.emplace_back(n, v); });
        return out;
    }

    std::vector<Var<T>> parameters() const {
        std::vector<Var<T>> v;
        for (auto& [n, p] : registry()) v.push_back(p);
        return v;
    }

    std::size_t num_blocks() const {
        std::size_t n = 0;
        for (const auto& s : stages) n += s.blocks.size();
        return n;
    }

    /// Copy with independent tensor storage.
    ModelParams clone() const {
        ModelParams c = *this;
        c.visit([](const std::string&, Var<T>& v) { v = Var<T>::leaf(v.value()); });
        return c;
    }

    /// Flat index -> (stage, block) for block-level access.
    const BlockParams<T>& block(std::size_t index) const {
        for (const auto& s : stages) {
            if (index < s.blocks.size()) return s.blocks[index];
            index -= s.blocks.size();
        }
        throw ConfigError("block index out of range");
    }
};

template <Real T>
ModelParams<T> build_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    ModelParams<T> m;
    m.config = cfg;
    std::size_t cin = cfg.in_channels;
    for (const auto& sc : cfg.stages) {
        StageParams<T> st;
        ConvSpec spec{cin, sc.dim, sc.patch_kernel, sc.patch_stride, sc.patch_padding(), 1};
        st.embed = ConvParams<T>::make(spec, rng);
        st.embed_norm = NormParams<T>::make(sc.dim);
        const BlockConfig bc = sc.block_config();
        for (std::size_t i = 0; i < sc.depth; ++i) st.blocks.push_back(build_block<T>(bc, rng));
        m.stages.push_back(std::move(st));
        cin = sc.dim;
    }
    m.final_norm = NormParams<T>::make(cin);
    m.head_weight = init_matrix<T>(cfg.num_classes, cin, rng);
    m.head_bias = Var<T>::leaf(Tensor<T>::zeros({cfg.num_classes}));
    return m;
}

/// Strided conv with padding floor((k - s + 1) / 2) followed by a per-position
/// channel norm. Requires H and W divisible by the stride; output is H/s x W/s.
template <Real T>
Var<T> overlapped_patch_embed(const Var<T>& x, const ConvParams<T>& conv, const NormParams<T>& norm,
                              double eps = 1e-5) {
    require_shape(x.value().ndim() == 4, "patch_embed: input must be NCHW");
    const std::size_t s = conv.spec.stride;
    if (x.shape()[2] % s != 0 || x.shape()[3] % s != 0) {
        throw ShapeError("patch_embed: spatial size " + std::to_string(x.shape()[2]) + "x" + std::to_string(x.shape()[3]) +
                         " not divisible by stride " + std::to_string(s));
    }
    Var<T> y = conv(x);
    require_shape(y.shape()[2] == x.shape()[2] / s && y.shape()[3] == x.shape()[3] / s,
                  "patch_embed: padding does not produce H/s output");
    return layer_norm_channels(y, norm.weight, norm.bias, eps);
}

/// Optional record of intermediate results from model_forward.
template <Real T>
struct ForwardTrace {
    std::vector<Shape> stage_shapes;                         // output of each stage
    std::vector<std::vector<GlobalContext<T>>> block_contexts;  // per block, per repetition
    std::vector<Var<T>> block_inputs;
};

template <Real T>
Var<T> model_forward(const ModelParams<T>& m, const Var<T>& x, ForwardTrace<T>* trace = nullptr) {
    require_shape(x.value().ndim() == 4 && x.shape()[1] == m.config.in_channels,
                  "model_forward: input must be [N," + std::to_string(m.config.in_channels) + ",H,W]");
    const std::size_t stride = m.config.total_stride();
    if (x.shape()[2] % stride != 0 || x.shape()[3] % stride != 0) {
        throw ShapeError("model_forward: resolution " + std::to_string(x.shape()[2]) + "x" + std::to_string(x.shape()[3]) +
                         " not divisible by total stride " + std::to_string(stride));
    }
    Var<T> h = x;
    for (const auto& st : m.stages) {
        h = overlapped_patch_embed(h, st.embed, st.embed_norm);
        for (const auto& b : st.blocks) {
            if (trace) {
                trace->block_inputs.push_back(h);
                trace->block_contexts.emplace_back();
                h = block_forward(h, b, &trace->block_contexts.back());
            } else {
                h = block_forward(h, b);
            }
        }
        if (trace) trace->stage_shapes.push_back(h.shape());
    }
    h = layer_norm_channels(h, m.final_norm.weight, m.final_norm.bias);
    return linear(global_avg_pool(h), m.head_weight, m.head_bias);
}

template <Real T>
std::size_t count_params(const ModelParams<T>& m) {
    std::size_t n = 0;
    for (const auto& [name, v] : m.registry()) n += v.numel();
    return n;
}

inline std::size_t conv_params(const ConvSpec& s, bool with_bias = true) {
    s.validate();
    return s.out_channels * (s.in_channels / s.groups) * s.kernel * s.kernel + (with_bias ? s.out_channels : 0);
}

inline std::size_t count_params(const BlockConfig& c) {
    c.validate();
    const std::size_t d = c.dim, hidden = d * c.mlp_ratio;
    std::size_t n = 0;
    for (std::size_t r = 0; r < c.mixer_repeats; ++r) {
        n += 2 * d;
        if (c.context == ContextMode::bottleneck) n += 3 * d * c.bottleneck_width();
        if (c.context == ContextMode::plain) n += d * d;
        if (c.context != ContextMode::none && c.dynamic_context) n += 2 * c.groups;
        n += conv_params(ConvSpec::depthwise(d, c.mixer_kernel));
        if (c.mixer_pointwise) n += conv_params(ConvSpec::pointwise(d, d));
    }
    n += 2 * d + conv_params(ConvSpec::pointwise(d, hidden)) + conv_params(ConvSpec::depthwise(hidden, 3)) +
         conv_params(ConvSpec::pointwise(hidden, d));
    return n;
}

/// Parameter count of the model build_model would produce, without building it.
inline std::size_t count_params(const ModelConfig& cfg) {
    cfg.validate();
    std::size_t n = 0, cin = cfg.in_channels;
    for (const auto& s : cfg.stages) {
        n += conv_params(ConvSpec{cin, s.dim, s.patch_kernel, s.patch_stride, s.patch_padding(), 1}) + 2 * s.dim;
        n += s.depth * count_params(s.block_config());
        cin = s.dim;
    }
    return n + 2 * cin + cfg.num_classes * cin + cfg.num_classes;
}

/// Multiply-accumulates of one convolution over an in_h x in_w input:
/// H'W' Co k^2 Ci / g.
inline std::uint64_t conv_macs(const ConvSpec& s, std::size_t in_h, std::size_t in_w) {
    s.validate();
    const std::uint64_t ho = s.output_extent(in_h), wo = s.output_extent(in_w);
    return ho * wo * s.out_channels * s.kernel * s.kernel * (s.in_channels / s.groups);
}

/// Analytic multiply-accumulate count of one forward pass at res x res.
/// Convolutions count H'W' Co k^2 Ci/g, linear maps in*out, the similarity and
/// the context modulation n*d each per repetition. Norms, activations and
/// pooling are not counted.
inline std::uint64_t count_flops(const ModelConfig& cfg, std::size_t res) {
    cfg.validate();
    if (res % cfg.total_stride() != 0) {
        throw ShapeError("count_flops: resolution not divisible by total stride " + std::to_string(cfg.total_stride()));
    }
    std::uint64_t macs = 0;
    std::uint64_t hw = res;
    std::uint64_t cin = cfg.in_channels;
    for (const auto& s : cfg.stages) {
        hw /= s.patch_stride;
        const std::uint64_t n = hw * hw;
        const std::uint64_t d = s.dim;
        const std::uint64_t k2 = s.mixer_kernel * s.mixer_kernel;
        macs += n * d * s.patch_kernel * s.patch_kernel * cin;
        const auto bc = s.block_config();
        std::uint64_t block = 0;
        for (std::size_t r = 0; r < s.mixer_repeats; ++r) {
            if (s.context == ContextMode::bottleneck) block += 3 * d * bc.bottleneck_width();
            if (s.context == ContextMode::plain) block += d * d;
            if (s.context != ContextMode::none) {
                if (s.dynamic_context) block += n * d;  // similarity
                block += n * d;                         // modulation
            }
            block += n * k2 * d;
            if (s.mixer_pointwise) block += n * d * d;
        }
        const std::uint64_t hidden = d * s.mlp_ratio;
        block += n * d * hidden + n * 9 * hidden + n * hidden * d;
        macs += block * s.depth;
        cin = d;
    }
    macs += cin * cfg.num_classes;
    return macs;
}

}  // namespace fcvit
