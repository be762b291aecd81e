#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"

using namespace fcvit;
using fcvit::test::identical;
using fcvit::test::random_const;

namespace {

double relative_gap(double got, double want) { return std::abs(got - want) / want; }

}  // namespace

// ----------------------------------------------------------- patch embed

TEST(PatchEmbed, StageOneResolution) {
    Rng rng(0);
    StageConfig s;
    s.patch_kernel = 7;
    s.patch_stride = 4;
    EXPECT_EQ(s.patch_padding(), 2u);
    ConvSpec spec{3, 8, 7, 4, s.patch_padding(), 1};
    auto conv = ConvParams<double>::make(spec, rng);
    auto y = overlapped_patch_embed(random_const(rng, {1, 3, 224, 224}), conv, NormParams<double>::make(8));
    EXPECT_EQ(y.shape(), (Shape{1, 8, 56, 56}));
}

TEST(PatchEmbed, LaterStagePadding) {
    StageConfig s;
    EXPECT_EQ(s.patch_padding(), 1u);
    s.patch_kernel = s.patch_stride = 16;
    EXPECT_EQ(s.patch_padding(), 0u);
}

TEST(PatchEmbed, NonOverlappingEqualsPatchify) {
    Rng rng(1);
    ConvSpec spec{3, 4, 16, 16, 0, 1};
    auto conv = ConvParams<double>::make(spec, rng);
    auto x = random_const(rng, {1, 3, 224, 224});
    auto y = conv(x).value();
    ASSERT_EQ(y.shape(), (Shape{1, 4, 14, 14}));
    const auto& w = conv.weight.value();
    for (std::size_t o : {0u, 3u})
        for (std::size_t pi : {0u, 7u, 13u})
            for (std::size_t pj : {0u, 5u, 13u}) {
                long double acc = 0;
                for (std::size_t c = 0; c < 3; ++c)
                    for (std::size_t u = 0; u < 16; ++u)
                        for (std::size_t v = 0; v < 16; ++v) acc += w.at(o, c, u, v) * x.value().at(0, c, pi * 16 + u, pj * 16 + v);
                EXPECT_NEAR(y.at(0, o, pi, pj), static_cast<double>(acc), 1e-13);
            }
    EXPECT_EQ(overlapped_patch_embed(x, conv, NormParams<double>::make(4)).shape(), (Shape{1, 4, 14, 14}));
}

TEST(PatchEmbed, ConstantImageGivesIdenticalInteriorTokens) {
    Rng rng(2);
    ConvSpec spec{3, 6, 16, 16, 0, 1};
    auto conv = ConvParams<double>::make(spec, rng);
    Tensor<double> img({1, 3, 64, 64}, 0.7);
    auto y = overlapped_patch_embed(Var<double>::constant(img), conv, NormParams<double>::make(6)).value();
    for (std::size_t c = 0; c < 6; ++c)
        for (std::size_t p = 0; p < 16; ++p) EXPECT_EQ(y[c * 16 + p], y[c * 16]);

    // Overlapping kernels see padding at the border, so constancy holds on
    // the interior only.
    ConvSpec ov{3, 6, 7, 4, 2, 1};
    auto conv2 = ConvParams<double>::make(ov, rng);
    auto z = overlapped_patch_embed(Var<double>::constant(img), conv2, NormParams<double>::make(6)).value();
    for (std::size_t c = 0; c < 6; ++c)
        for (std::size_t i = 1; i < 15; ++i)
            for (std::size_t j = 1; j < 15; ++j) EXPECT_NEAR(z.at(0, c, i, j), z.at(0, c, 1, 1), 1e-12);
}

TEST(PatchEmbed, RejectsIndivisibleResolution) {
    Rng rng(3);
    auto conv = ConvParams<double>::make({3, 4, 7, 4, 2, 1}, rng);
    EXPECT_THROW(overlapped_patch_embed(random_const(rng, {1, 3, 30, 30}), conv, NormParams<double>::make(4)), ShapeError);
}

// ---------------------------------------------------------------- presets

TEST(Presets, MirrorConfigurationTable) {
    auto dims = [](const ModelConfig& c) {
        std::vector<std::size_t> d;
        for (const auto& s : c.stages) d.push_back(s.dim);
        return d;
    };
    auto depths = [](const ModelConfig& c) {
        std::vector<std::size_t> d;
        for (const auto& s : c.stages) d.push_back(s.depth);
        return d;
    };
    EXPECT_EQ(dims(presets::tiny()), (std::vector<std::size_t>{32, 64, 160, 320}));
    EXPECT_EQ(depths(presets::tiny()), (std::vector<std::size_t>{3, 3, 5, 2}));
    EXPECT_EQ(dims(presets::b12()), (std::vector<std::size_t>{64, 128, 320, 512}));
    EXPECT_EQ(depths(presets::b12()), (std::vector<std::size_t>{2, 2, 6, 2}));
    EXPECT_EQ(depths(presets::b24()), (std::vector<std::size_t>{4, 4, 12, 4}));
    EXPECT_EQ(depths(presets::b48()), (std::vector<std::size_t>{8, 8, 24, 8}));
    for (const auto& c : {presets::tiny(), presets::b12()}) {
        EXPECT_EQ(c.stages[0].mlp_ratio, 8u);
        EXPECT_EQ(c.stages[3].mlp_ratio, 4u);
        EXPECT_EQ(c.stages[0].patch_kernel, 7u);
        EXPECT_EQ(c.stages[0].patch_stride, 4u);
        for (std::size_t s = 1; s < 4; ++s) {
            EXPECT_EQ(c.stages[s].patch_kernel, 3u);
            EXPECT_EQ(c.stages[s].patch_stride, 2u);
        }
        EXPECT_EQ(c.stages[0].mixer_kernel, 11u);
        EXPECT_EQ(c.stages[0].groups, 8u);
        EXPECT_EQ(c.stages[0].bottleneck_r, 8u);
    }
    EXPECT_THROW(presets::by_name("huge"), ConfigError);
}

TEST(Presets, IsotropicHasIdenticalBlocks) {
    auto c = presets::iso_256_12();
    ASSERT_EQ(c.stages.size(), 1u);
    EXPECT_EQ(c.stages[0].dim, 256u);
    EXPECT_EQ(c.stages[0].depth, 12u);
    EXPECT_EQ(c.stages[0].patch_kernel, 16u);
    EXPECT_EQ(c.stages[0].patch_stride, 16u);
    auto m = build_model<float>(c, 0);
    EXPECT_EQ(m.num_blocks(), 12u);
    for (std::size_t b = 0; b < 12; ++b) EXPECT_EQ(m.block(b).config.dim, 256u);
}

TEST(Presets, BuildIsDeterministic) {
    auto a = build_model<double>(presets::micro(), 7);
    auto b = build_model<double>(presets::micro(), 7);
    auto c = build_model<double>(presets::micro(), 8);
    auto ra = a.registry(), rb = b.registry(), rc = c.registry();
    bool any_diff = false;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        EXPECT_EQ(ra[i].first, rb[i].first);
        EXPECT_TRUE(identical(ra[i].second.value(), rb[i].second.value())) << ra[i].first;
        any_diff = any_diff || !identical(ra[i].second.value(), rc[i].second.value());
    }
    EXPECT_TRUE(any_diff);
}

TEST(Presets, InitializationScheme) {
    auto m = build_model<double>(presets::micro(), 0);
    for (const auto& [name, v] : m.registry()) {
        const auto& t = v.value();
        if (name.ends_with("norm.weight") || name.ends_with("sim.alpha")) {
            for (double x : t.data()) EXPECT_EQ(x, 1.0) << name;
        } else if (name.ends_with("bias") || name.ends_with("sim.beta")) {
            for (double x : t.data()) EXPECT_EQ(x, 0.0) << name;
        } else {
            for (double x : t.data()) EXPECT_LE(std::abs(x), 0.04) << name;
        }
    }
}

// ---------------------------------------------------------------- forward

TEST(Forward, SpatialTraceAt224) {
    auto m = build_model<float>(presets::tiny(), 0);
    ForwardTrace<float> trace;
    NoGradGuard ng;
    auto y = model_forward(m, Var<float>::constant(Tensor<float>({1, 3, 224, 224}, 0.5f)), &trace);
    ASSERT_EQ(trace.stage_shapes.size(), 4u);
    const std::size_t expect[4][2] = {{32, 56}, {64, 28}, {160, 14}, {320, 7}};
    for (std::size_t s = 0; s < 4; ++s) {
        EXPECT_EQ(trace.stage_shapes[s], (Shape{1, expect[s][0], expect[s][1], expect[s][1]}));
    }
    EXPECT_EQ(y.shape(), (Shape{1, 1000}));
}

TEST(Forward, MicroLogitsAreFinite) {
    auto m = build_model<float>(presets::micro(), 0);
    Rng rng(1);
    auto y = model_forward(m, Var<float>::constant(rng.normal_tensor<float>({3, 3, 32, 32})));
    EXPECT_EQ(y.shape(), (Shape{3, 4}));
    EXPECT_TRUE(y.value().all_finite());
}

TEST(Forward, ZeroHeadGivesZeroLogits) {
    auto m = build_model<double>(presets::micro(), 0);
    m.head_weight.mutable_value().fill(0.0);
    Rng rng(2);
    auto y = model_forward(m, random_const(rng, {2, 3, 32, 32})).value();
    for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Forward, BatchConsistency) {
    auto m = build_model<double>(presets::micro(), 3);
    Rng rng(3);
    auto one = rng.normal_tensor<double>({1, 3, 32, 32});
    auto two = rng.normal_tensor<double>({1, 3, 32, 32});
    Tensor<double> batch({3, 3, 32, 32});
    std::copy_n(one.ptr(), one.numel(), batch.ptr());
    std::copy_n(two.ptr(), two.numel(), batch.ptr() + one.numel());
    std::copy_n(one.ptr(), one.numel(), batch.ptr() + 2 * one.numel());
    auto yb = model_forward(m, Var<double>::constant(batch)).value();
    auto y1 = model_forward(m, Var<double>::constant(one)).value();
    auto y2 = model_forward(m, Var<double>::constant(two)).value();
    for (std::size_t k = 0; k < 4; ++k) {
        EXPECT_EQ(yb.at(0, k), y1.at(0, k));
        EXPECT_EQ(yb.at(1, k), y2.at(0, k));
        EXPECT_EQ(yb.at(2, k), y1.at(0, k));
    }
}

TEST(Forward, RejectsIndivisibleResolution) {
    auto m = build_model<float>(presets::micro(), 0);
    EXPECT_THROW(model_forward(m, Var<float>::constant(Tensor<float>({1, 3, 48, 40}))), ShapeError);
    EXPECT_THROW(model_forward(m, Var<float>::constant(Tensor<float>({1, 1, 32, 32}))), ShapeError);
}

TEST(Forward, IsotropicKeepsTokenCount) {
    ModelConfig c = presets::isotropic("iso-small", 16, 3);
    c.num_classes = 5;
    c.stages[0].groups = 4;
    c.stages[0].bottleneck_r = 4;
    c.stages[0].mixer_kernel = 3;
    auto m = build_model<float>(c, 0);
    ForwardTrace<float> trace;
    NoGradGuard ng;
    model_forward(m, Var<float>::constant(Tensor<float>({1, 3, 64, 64}, 0.1f)), &trace);
    ASSERT_EQ(trace.block_inputs.size(), 3u);
    for (const auto& in : trace.block_inputs) EXPECT_EQ(in.shape(), (Shape{1, 16, 4, 4}));
    EXPECT_EQ(trace.stage_shapes[0], (Shape{1, 16, 4, 4}));
}

TEST(Forward, FullModelGradient) {
    ModelConfig c = presets::micro();
    auto m = build_model<double>(c, 5);
    Rng rng(5);
    // Moves every tensor off its special initial value (unit gains, zero biases).
    m.visit([&](const std::string&, Var<double>& v) {
        for (auto& x : v.mutable_value().data()) x += rng.normal() * 0.2;
    });
    auto x = Var<double>::constant(rng.normal_tensor<double>({2, 3, 32, 32}));
    const std::vector<std::size_t> labels{1, 3};
    auto r = finite_diff_check([&] { return cross_entropy(model_forward(m, x), std::span<const std::size_t>(labels)); },
                               m.parameters(), {60, 1e-5, 1e-3, 11});
    EXPECT_GE(r.checked, 50u);
    EXPECT_LT(r.max_rel_error, 1e-4);
}

// ----------------------------------------------------------------- audits

TEST(Audit, ParameterCountsMatchPublishedSizes) {
    const std::vector<std::pair<ModelConfig, double>> cases = {
        {presets::tiny(), 4.6e6},        {presets::b12(), 14e6},          {presets::b24(), 25.7e6},
        {presets::b48(), 49.1e6},        {presets::iso_256_12(), 8.2e6}, {presets::iso_384_16(), 23.2e6},
    };
    for (const auto& [cfg, want] : cases) {
        const auto n = count_params(build_model<float>(cfg, 0));
        EXPECT_LE(relative_gap(static_cast<double>(n), want), 0.03) << cfg.name << " " << n;
    }
}

TEST(Audit, FlopCountsMatchPublishedCosts) {
    const std::vector<std::pair<ModelConfig, double>> cases = {
        {presets::tiny(), 0.8e9},        {presets::b12(), 2.5e9},        {presets::b24(), 4.7e9},
        {presets::b48(), 9.2e9},         {presets::iso_256_12(), 1.4e9}, {presets::iso_384_16(), 4.0e9},
    };
    for (const auto& [cfg, want] : cases) {
        const auto f = count_flops(cfg, 224);
        EXPECT_LE(relative_gap(static_cast<double>(f), want), 0.10) << cfg.name << " " << f;
    }
}

TEST(Audit, AnalyticParameterCountMatchesBuiltModel) {
    for (const auto& name : presets::names()) {
        const auto cfg = presets::by_name(name);
        EXPECT_EQ(count_params(cfg), count_params(build_model<float>(cfg, 0))) << name;
    }
    auto cfg = presets::micro();
    for (auto mode : {ContextMode::none, ContextMode::plain, ContextMode::bottleneck})
        for (bool dynamic : {false, true})
            for (bool pw : {false, true}) {
                for (auto& st : cfg.stages) {
                    st.context = mode;
                    st.dynamic_context = dynamic;
                    st.mixer_pointwise = pw;
                    st.mixer_repeats = pw ? 1 : 2;
                }
                EXPECT_EQ(count_params(cfg), count_params(build_model<float>(cfg, 5)));
            }
}

TEST(Audit, PointwiseConvMacs) {
    EXPECT_EQ(conv_macs(ConvSpec::pointwise(2, 2), 1, 1), 4u);
    EXPECT_EQ(conv_macs(ConvSpec::depthwise(8, 3), 5, 5), 25u * 8 * 9);
    EXPECT_EQ(conv_macs(ConvSpec{3, 32, 7, 4, 2, 1}, 224, 224), 56u * 56 * 32 * 49 * 3);
}

TEST(Audit, MicroForwardCostAgreesWithConvLoop) {
    // Walks the built parameters rather than the config.
    auto m = build_model<float>(presets::micro(), 0);
    std::uint64_t macs = 0;
    std::size_t hw = 32;
    for (const auto& st : m.stages) {
        macs += conv_macs(st.embed.spec, hw, hw);
        hw /= st.embed.spec.stride;
        for (const auto& b : st.blocks) {
            const std::size_t n = hw * hw, d = b.config.dim;
            for (const auto& rep : b.token.reps) {
                macs += conv_macs(rep.depthwise.spec, hw, hw);
                macs += rep.bottleneck->w_s1.numel() + rep.bottleneck->w_s2.numel() + rep.bottleneck->w_r.numel();
                macs += 2 * n * d;
            }
            for (const auto* conv : {&b.channel.expand, &b.channel.depthwise, &b.channel.project}) {
                macs += conv_macs(conv->spec, hw, hw);
            }
        }
    }
    macs += m.head_weight.numel();
    EXPECT_EQ(count_flops(presets::micro(), 32), macs);
}

TEST(Registry, NamesAreUniqueAndStable) {
    auto m = build_model<float>(presets::micro(), 0);
    auto reg = m.registry();
    std::vector<std::string> names;
    for (const auto& [n, v] : reg) names.push_back(n);
    auto sorted = names;
    std::sort(sorted.begin(), sorted.end());
    EXPECT_EQ(std::adjacent_find(sorted.begin(), sorted.end()), sorted.end());
    EXPECT_EQ(names.front(), "stages.0.embed.weight");
    EXPECT_EQ(names.back(), "head.bias");
    EXPECT_NE(std::find(names.begin(), names.end(), "stages.2.blocks.1.token.1.gc.w_r"), names.end());
    EXPECT_NE(std::find(names.begin(), names.end(), "stages.3.blocks.0.channel.fc2.weight"), names.end());
}

TEST(Registry, CloneIsIndependent) {
    auto m = build_model<float>(presets::micro(), 0);
    auto c = m.clone();
    c.head_bias.mutable_value().fill(3.0f);
    EXPECT_EQ(m.head_bias.value()[0], 0.0f);
}

// ------------------------------------------------------------------ config

TEST(Config, JsonRoundTrip) {
    for (const auto& name : presets::names()) {
        const auto cfg = presets::by_name(name);
        nlohmann::json j = cfg;
        const auto back = config_from_json(nlohmann::json::parse(j.dump()));
        EXPECT_EQ(nlohmann::json(back), j) << name;
    }
}

TEST(Config, ValidationErrors) {
    auto bad = presets::micro();
    bad.stages[1].groups = 3;
    EXPECT_THROW(bad.validate(), ConfigError);
    auto bad2 = presets::micro();
    bad2.stages[0].patch_kernel = 2;
    EXPECT_THROW(bad2.validate(), ConfigError);
    EXPECT_THROW(config_from_json(nlohmann::json{{"stages", "nope"}}), ConfigError);
    EXPECT_THROW(load_config("/nonexistent/config.json"), ConfigError);
    EXPECT_EQ(load_config("tiny").name, "tiny");
}
