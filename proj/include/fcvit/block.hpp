#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fcvit/autograd.hpp"
#include "fcvit/ops.hpp"
#include "fcvit/random.hpp"

namespace fcvit {

/// How the global context vector is produced.
enum class ContextMode {
    none,        // no global context; the token mixer is a plain conv mixer
    plain,       // gc = W_v * mean(x)
    bottleneck,  // gc = W_r * maxout(W_s1 * mean(x), W_s2 * mean(x))
};

enum class Activation { gelu, identity };

struct BlockConfig {
    std::size_t dim = 64;
    std::size_t mlp_ratio = 4;
    std::size_t mixer_kernel = 11;
    std::size_t groups = 8;
    std::size_t bottleneck_r = 8;
    std::size_t mixer_repeats = 2;
    ContextMode context = ContextMode::bottleneck;
    // false: gc is broadcast unchanged to every position (similarity frozen to 1)
    bool dynamic_context = true;
    // Optional pointwise conv closing each token-mixer repetition.
    bool mixer_pointwise = false;
    Activation mixer_activation = Activation::gelu;
    double similarity_eps = 1e-5;
    double norm_eps = 1e-5;
    // Accepted for config compatibility; stochastic depth is not applied.
    double drop_path = 0.0;

    std::size_t bottleneck_width() const { return std::max<std::size_t>(dim / bottleneck_r, 1); }

    void validate() const {
        if (dim == 0 || mlp_ratio == 0 || mixer_repeats == 0) throw ConfigError("block: dim, mlp_ratio, mixer_repeats must be positive");
        if (mixer_kernel % 2 == 0) throw ConfigError("block: mixer kernel must be odd");
        if (groups == 0 || dim % groups != 0) {
            throw ConfigError("block: groups (" + std::to_string(groups) + ") must divide dim (" + std::to_string(dim) + ")");
        }
        if (bottleneck_r == 0) throw ConfigError("block: bottleneck ratio must be positive");
        if (dim >= bottleneck_r && dim % bottleneck_r != 0) throw ConfigError("block: bottleneck ratio must divide dim");
    }
};

template <Real T>
struct NormParams {
    Var<T> weight, bias;

    static NormParams make(std::size_t d) {
        return {Var<T>::leaf(Tensor<T>::ones({d})), Var<T>::leaf(Tensor<T>::zeros({d}))};
    }
};

template <Real T>
struct ConvParams {
    ConvSpec spec;
    Var<T> weight, bias;

    static ConvParams make(const ConvSpec& spec, Rng& rng, bool with_bias = true) {
        spec.validate();
        ConvParams p{spec, Var<T>::leaf(Tensor<T>(spec.weight_shape())), {}};
        for (auto& v : p.weight.mutable_value().data()) v = static_cast<T>(rng.truncated_normal(0.02));
        if (with_bias) p.bias = Var<T>::leaf(Tensor<T>::zeros({spec.out_channels}));
        return p;
    }

    Var<T> operator()(const Var<T>& x) const { return conv2d(x, weight, bias, spec); }
};

template <Real T>
Var<T> init_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
    Tensor<T> t({rows, cols});
    for (auto& v : t.data()) v = static_cast<T>(rng.truncated_normal(0.02));
    return Var<T>::leaf(std::move(t));
}

/// Competitive bottleneck: two squeezes to d/r, maxout, expand back to d.
template <Real T>
struct BottleneckParams {
    Var<T> w_s1;  // [d/r, d]
    Var<T> w_s2;  // [d/r, d]
    Var<T> w_r;   // [d, d/r]
    std::size_t r = 8;
};

/// Per-group affine rescale of the standardized token-global similarity.
template <Real T>
struct SimilarityParams {
    Var<T> alpha;  // [g]
    Var<T> beta;   // [g]
    std::size_t groups = 8;
    double eps = 1e-5;
};

template <Real T>
struct MixerRepetition {
    NormParams<T> norm;
    std::optional<BottleneckParams<T>> bottleneck;
    Var<T> w_v;  // plain context map [d, d]
    std::optional<SimilarityParams<T>> similarity;
    ConvParams<T> depthwise;
    std::optional<ConvParams<T>> pointwise;
};

template <Real T>
struct TokenMixerParams {
    std::vector<MixerRepetition<T>> reps;
};

template <Real T>
struct ChannelMixerParams {
    NormParams<T> norm;
    ConvParams<T> expand;     // d -> m d
    ConvParams<T> depthwise;  // k = 3 on m d channels
    ConvParams<T> project;    // m d -> d
    std::size_t mlp_ratio = 4;
};

/// Every learnable tensor of one block, with the config it was built from.
template <Real T>
struct BlockParams {
    BlockConfig config;
    TokenMixerParams<T> token;
    ChannelMixerParams<T> channel;

    /// Calls fn(name, var) for every tensor in a fixed order.
    void visit(const std::string& prefix, const std::function<void(const std::string&, Var<T>&)>& fn) {
        for (std::size_t r = 0; r < token.reps.size(); ++r) {
            auto& rep = token.reps[r];
            const std::string p = prefix + "token." + std::to_string(r) + ".";
            fn(p + "norm.weight", rep.norm.weight);
            fn(p + "norm.bias", rep.norm.bias);
            if (rep.bottleneck) {
                fn(p + "gc.w_s1", rep.bottleneck->w_s1);
                fn(p + "gc.w_s2", rep.bottleneck->w_s2);
                fn(p + "gc.w_r", rep.bottleneck->w_r);
            }
            if (rep.w_v) fn(p + "gc.w_v", rep.w_v);
            if (rep.similarity) {
                fn(p + "sim.alpha", rep.similarity->alpha);
                fn(p + "sim.beta", rep.similarity->beta);
            }
            fn(p + "dwconv.weight", rep.depthwise.weight);
            fn(p + "dwconv.bias", rep.depthwise.bias);
            if (rep.pointwise) {
                fn(p + "pwconv.weight", rep.pointwise->weight);
                fn(p + "pwconv.bias", rep.pointwise->bias);
            }
        }
        const std::string p = prefix + "channel.";
        fn(p + "norm.weight", channel.norm.weight);
        fn(p + "norm.bias", channel.norm.bias);
        fn(p + "fc1.weight", channel.expand.weight);
        fn(p + "fc1.bias", channel.expand.bias);
        fn(p + "dwconv.weight", channel.depthwise.weight);
        fn(p + "dwconv.bias", channel.depthwise.bias);
        fn(p + "fc2.weight", channel.project.weight);
        fn(p + "fc2.bias", channel.project.bias);
    }
};

/// Fresh block: conv/linear weights truncated normal (std 0.02), biases 0,
/// norm gamma 1 / beta 0, similarity alpha 1 / beta 0.
template <Real T>
BlockParams<T> build_block(const BlockConfig& cfg, Rng& rng) {
    cfg.validate();
    BlockParams<T> b;
    b.config = cfg;
    const std::size_t d = cfg.dim;
    for (std::size_t r = 0; r < cfg.mixer_repeats; ++r) {
        MixerRepetition<T> rep;
        rep.norm = NormParams<T>::make(d);
        if (cfg.context == ContextMode::bottleneck) {
            const std::size_t w = cfg.bottleneck_width();
            rep.bottleneck = BottleneckParams<T>{init_matrix<T>(w, d, rng), init_matrix<T>(w, d, rng),
                                                 init_matrix<T>(d, w, rng), cfg.bottleneck_r};
        } else if (cfg.context == ContextMode::plain) {
            rep.w_v = init_matrix<T>(d, d, rng);
        }
        if (cfg.context != ContextMode::none && cfg.dynamic_context) {
            rep.similarity = SimilarityParams<T>{Var<T>::leaf(Tensor<T>::ones({cfg.groups})),
                                                 Var<T>::leaf(Tensor<T>::zeros({cfg.groups})), cfg.groups,
                                                 cfg.similarity_eps};
        }
        rep.depthwise = ConvParams<T>::make(ConvSpec::depthwise(d, cfg.mixer_kernel), rng);
        if (cfg.mixer_pointwise) rep.pointwise = ConvParams<T>::make(ConvSpec::pointwise(d, d), rng);
        b.token.reps.push_back(std::move(rep));
    }
    const std::size_t hidden = d * cfg.mlp_ratio;
    b.channel.norm = NormParams<T>::make(d);
    b.channel.expand = ConvParams<T>::make(ConvSpec::pointwise(d, hidden), rng);
    b.channel.depthwise = ConvParams<T>::make(ConvSpec::depthwise(hidden, 3), rng);
    b.channel.project = ConvParams<T>::make(ConvSpec::pointwise(hidden, d), rng);
    b.channel.mlp_ratio = cfg.mlp_ratio;
    return b;
}

// ------------------------------------------------------------ global context

/// gc = W_r * maxout(W_s1 * xbar, W_s2 * xbar), xbar the spatial mean of x.
template <Real T>
Var<T> compute_global_context(const Var<T>& x, const BottleneckParams<T>& p) {
    require_shape(x.value().ndim() == 4, "compute_global_context: input must be NCHW");
    require_shape(p.w_s1.shape()[1] == x.shape()[1], "compute_global_context: dim mismatch");
    Var<T> xbar = global_avg_pool(x);
    return linear(maxout(linear(xbar, p.w_s1), linear(xbar, p.w_s2)), p.w_r);
}

/// gc = W_v * xbar.
template <Real T>
Var<T> compute_plain_global_context(const Var<T>& x, const Var<T>& w_v) {
    require_shape(x.value().ndim() == 4, "compute_plain_global_context: input must be NCHW");
    return linear(global_avg_pool(x), w_v);
}

/// Standardized token-global similarity S' of shape [N,g,H,W]. The raw score
/// of a token is its per-group inner product with the spatial mean of x.
template <Real T>
Var<T> token_global_similarity(const Var<T>& x, const SimilarityParams<T>& sp) {
    Var<T> raw = group_inner_product(x, global_avg_pool(x), sp.groups);
    return spatial_standardize(raw, sp.alpha, sp.beta, sp.eps);
}

/// Context produced by one token-mixer repetition. Null members are paths the
/// config disables.
template <Real T>
struct GlobalContext {
    Var<T> gc;      // [N,d]
    Var<T> sim;     // [N,g,H,W], normalized S'
    Var<T> gc_dyn;  // [N,d,H,W]
};

/// The conv part of one repetition: [pointwise] o act o depthwise.
template <Real T>
Var<T> mixer_convs(const Var<T>& z, const MixerRepetition<T>& rep, Activation act) {
    Var<T> y = rep.depthwise(z);
    if (act == Activation::gelu) y = gelu(y);
    if (rep.pointwise) y = (*rep.pointwise)(y);
    return y;
}

/// Residual branch of one repetition (without the skip connection).
template <Real T>
Var<T> mixer_branch(const Var<T>& x, const MixerRepetition<T>& rep, const BlockConfig& cfg,
                    GlobalContext<T>* ctx = nullptr) {
    Var<T> ln = layer_norm_channels(x, rep.norm.weight, rep.norm.bias, cfg.norm_eps);
    Var<T> z = ln;
    if (cfg.context != ContextMode::none) {
        Var<T> gc = rep.bottleneck ? compute_global_context(ln, *rep.bottleneck)
                                   : compute_plain_global_context(ln, rep.w_v);
        Var<T> sim;
        if (rep.similarity) {
            sim = token_global_similarity(ln, *rep.similarity);
        } else {
            sim = Var<T>::constant(Tensor<T>::ones({x.shape()[0], 1, x.shape()[2], x.shape()[3]}));
        }
        Var<T> gc_dyn = modulate_context(sim, gc);
        z = add(ln, gc_dyn);
        if (ctx) *ctx = {gc, sim, gc_dyn};
    }
    return mixer_convs(z, rep, cfg.mixer_activation);
}

/// Token mixer: each repetition adds its branch to the running features and
/// the next repetition recomputes its context from the updated map.
template <Real T>
Var<T> dynamic_token_mixer(const Var<T>& x, const TokenMixerParams<T>& p, const BlockConfig& cfg,
                           std::vector<GlobalContext<T>>* trace = nullptr) {
    require_shape(x.value().ndim() == 4 && x.shape()[1] == cfg.dim, "dynamic_token_mixer: input does not match block dim");
    Var<T> h = x;
    for (const auto& rep : p.reps) {
        GlobalContext<T> ctx;
        h = add(h, mixer_branch(h, rep, cfg, trace ? &ctx : nullptr));
        if (trace) trace->push_back(ctx);
    }
    return h;
}

/// x + fc2(gelu(dwconv3(gelu(fc1(norm(x)))))).
template <Real T>
Var<T> channel_mixer(const Var<T>& x, const ChannelMixerParams<T>& p, double eps = 1e-5) {
    Var<T> h = layer_norm_channels(x, p.norm.weight, p.norm.bias, eps);
    h = gelu(p.expand(h));
    h = gelu(p.depthwise(h));
    h = p.project(h);
    return add(x, h);
}

template <Real T>
Var<T> block_forward(const Var<T>& x, const BlockParams<T>& b, std::vector<GlobalContext<T>>* trace = nullptr) {
    return channel_mixer(dynamic_token_mixer(x, b.token, b.config, trace), b.channel, b.config.norm_eps);
}

}  // namespace fcvit
