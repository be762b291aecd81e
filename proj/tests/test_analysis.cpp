#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"

using namespace fcvit;
using fcvit::test::identical;
using fcvit::test::random_const;

namespace {

ReferenceAttentionParams<double> random_attention(Rng& rng, std::size_t d, std::size_t heads) {
    return {rng.normal_tensor<double>({d, d}), rng.normal_tensor<double>({d, d}), rng.normal_tensor<double>({d, d}), heads};
}

Tensor<double> uniform_attention(std::size_t heads, std::size_t n) {
    return Tensor<double>({heads, n, n}, 1.0 / static_cast<double>(n));
}

Tensor<double> one_hot_rows(const std::vector<std::size_t>& cols, std::size_t n) {
    Tensor<double> a({cols.size(), n});
    for (std::size_t r = 0; r < cols.size(); ++r) a.at(r, cols[r]) = 1.0;
    return a;
}

ModelConfig small_isotropic() {
    ModelConfig c = presets::isotropic("iso-test", 16, 2, 8);
    c.num_classes = 3;
    c.stages[0].groups = 4;
    c.stages[0].bottleneck_r = 4;
    c.stages[0].mixer_kernel = 3;
    return c;
}

}  // namespace

// ------------------------------------------------------ reference attention

TEST(ReferenceAttention, RowsAreStochastic) {
    Rng rng(1);
    auto p = random_attention(rng, 8, 2);
    auto r = reference_self_attention(rng.normal_tensor<double>({2, 8, 10}), p);
    for (const auto& a : r.attn) {
        ASSERT_EQ(a.shape(), (Shape{2, 10, 10}));
        for (std::size_t row = 0; row < 20; ++row) {
            double s = 0;
            for (std::size_t j = 0; j < 10; ++j) s += a[row * 10 + j];
            EXPECT_NEAR(s, 1.0, 1e-6);
        }
    }
}

TEST(ReferenceAttention, ZeroQueryCollapsesToPlainContext) {
    for (std::size_t n : {1u, 4u, 196u}) {
        Rng rng(n);
        const std::size_t d = 8;
        auto p = random_attention(rng, d, 2);
        p.w_q.fill(0.0);
        auto x = rng.normal_tensor<double>({2, d, n});
        auto r = reference_self_attention(x, p);
        for (const auto& a : r.attn)
            for (double w : a.data()) EXPECT_NEAR(w, 1.0 / static_cast<double>(n), 1e-15);

        auto gc = compute_plain_global_context(Var<double>::constant(x.reshape({2, d, 1, n})), Var<double>::constant(p.w_v))
                      .value();
        for (std::size_t s = 0; s < 2; ++s)
            for (std::size_t c = 0; c < d; ++c)
                for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(r.y.at(s, c, i), gc.at(s, c), 1e-9);
    }
}

TEST(ReferenceAttention, SingleToken) {
    Rng rng(2);
    auto p = random_attention(rng, 4, 1);
    auto x = rng.normal_tensor<double>({1, 4, 1});
    auto r = reference_self_attention(x, p);
    EXPECT_EQ(r.attn[0][0], 1.0);
    for (std::size_t o = 0; o < 4; ++o) {
        double v = 0;
        for (std::size_t c = 0; c < 4; ++c) v += p.w_v.at(o, c) * x[c];
        EXPECT_NEAR(r.y[o], v, 1e-14);
    }
}

TEST(ReferenceAttention, TwoTokensUnrolled) {
    Rng rng(3);
    auto p = random_attention(rng, 2, 1);
    auto x = rng.normal_tensor<double>({1, 2, 2});
    auto r = reference_self_attention(x, p);

    using L = long double;
    auto proj = [&](const Tensor<double>& w, std::size_t o, std::size_t i) -> L {
        return static_cast<L>(w.at(o, 0)) * x.at(0, 0, i) + static_cast<L>(w.at(o, 1)) * x.at(0, 1, i);
    };
    for (std::size_t i = 0; i < 2; ++i) {
        const L s0 = proj(p.w_q, 0, i) * proj(p.w_k, 0, 0) + proj(p.w_q, 1, i) * proj(p.w_k, 1, 0);
        const L s1 = proj(p.w_q, 0, i) * proj(p.w_k, 0, 1) + proj(p.w_q, 1, i) * proj(p.w_k, 1, 1);
        const L a0 = 1.0L / (1.0L + std::exp(s1 - s0));
        const L a1 = 1.0L - a0;
        EXPECT_NEAR(r.attn[0].at(0, i, 0), static_cast<double>(a0), 1e-14);
        for (std::size_t c = 0; c < 2; ++c) {
            const L y = a0 * proj(p.w_v, c, 0) + a1 * proj(p.w_v, c, 1);
            EXPECT_NEAR(r.y.at(0, c, i), static_cast<double>(y), 1e-13);
        }
    }
}

TEST(ReferenceAttention, HeadsMustDivideWidth) {
    Rng rng(4);
    auto p = random_attention(rng, 6, 4);
    EXPECT_THROW(reference_self_attention(rng.normal_tensor<double>({1, 6, 3}), p), ShapeError);
}

// ------------------------------------------------------------- histogram

TEST(Histogram, UniformAttentionLandsInOneBin) {
    auto h = attention_log_histogram(uniform_attention(1, 196));
    const std::size_t bin = LogHistogram::bin_of(1.0 / 196.0);
    EXPECT_EQ(bin, 37u);
    EXPECT_LE(LogHistogram::bin_lower_edge(bin), -2.292);
    EXPECT_GT(LogHistogram::bin_lower_edge(bin + 1), -2.292);
    EXPECT_EQ(h.counts[bin], 196u * 196u);
    EXPECT_EQ(h.density[bin], 1.0);
}

TEST(Histogram, OneHotAttentionLandsInTopBin) {
    std::vector<std::size_t> cols(10);
    for (std::size_t i = 0; i < 10; ++i) cols[i] = (3 * i) % 10;
    auto h = attention_log_histogram(one_hot_rows(cols, 10));
    EXPECT_EQ(h.counts[LogHistogram::kBins - 1], 10u);
    EXPECT_EQ(h.counts[0], 90u);
    EXPECT_EQ(LogHistogram::bin_of(1.0), LogHistogram::kBins - 1);
    EXPECT_EQ(LogHistogram::bin_of(0.0), 0u);
    EXPECT_EQ(LogHistogram::bin_of(1e-9), 0u);
}

TEST(Histogram, DensityNormalizedAndCountsComplete) {
    Rng rng(5);
    auto r = reference_self_attention(rng.normal_tensor<double>({1, 8, 12}), random_attention(rng, 8, 4));
    auto h = attention_log_histogram(r.attn[0]);
    EXPECT_EQ(h.total, 4u * 12 * 12);
    double s = 0;
    for (double d : h.density) s += d;
    EXPECT_NEAR(s, 1.0, 1e-6);
}

TEST(Histogram, RandomLogitsHaveHeavierLeftTail) {
    const std::size_t n = 196, rows = 1000;
    Rng rng(7);
    Tensor<double> logits({rows, n});
    for (auto& v : logits.data()) v = rng.normal();
    auto attn = softmax(Var<double>::constant(logits), 1).value();
    auto h = attention_log_histogram(attn);

    // Independent count straight from the weights.
    std::size_t below = 0;
    for (double w : attn.data()) below += std::log10(w) < -3.0;
    std::size_t hist_below = 0;
    for (std::size_t b = 0; b < 30; ++b) hist_below += h.counts[b];
    EXPECT_EQ(hist_below, below);

    auto u = attention_log_histogram(uniform_attention(1, n));
    double tail = 0, tail_uniform = 0;
    for (std::size_t b = 0; b < 30; ++b) {
        tail += h.density[b];
        tail_uniform += u.density[b];
    }
    EXPECT_GT(tail, tail_uniform);
    EXPECT_GT(tail, 0.0);
}

TEST(Histogram, RejectsNegativeWeights) {
    Tensor<double> a({2, 2}, 0.5);
    a[1] = -0.5;
    EXPECT_THROW(attention_log_histogram(a), NumericError);
}

// ----------------------------------------------------------- consistency

TEST(Consistency, ReferenceValues) {
    EXPECT_NEAR(query_consistency(uniform_attention(1, 7)), 1.0, 1e-15);
    EXPECT_EQ(query_consistency(one_hot_rows({0, 1, 2, 3}, 4)), 0.0);
    EXPECT_NEAR(query_consistency(one_hot_rows({1, 1, 2}, 3)), 1.0 / 3.0, 1e-15);
}

TEST(Consistency, OneHotRowLowersScore) {
    auto u = uniform_attention(1, 4);
    auto a = u;
    for (std::size_t j = 0; j < 4; ++j) a.at(0, 2, j) = j == 1 ? 1.0 : 0.0;
    EXPECT_LT(query_consistency(a), query_consistency(u));
    auto b = a;
    for (std::size_t j = 0; j < 4; ++j) b.at(0, 3, j) = j == 3 ? 1.0 : 0.0;
    EXPECT_LT(query_consistency(b), query_consistency(a));
}

TEST(Consistency, Errors) {
    EXPECT_THROW(query_consistency(Tensor<double>({1, 1}, 1.0)), ShapeError);
    EXPECT_THROW(query_consistency(Tensor<double>({2, 2})), NumericError);
    EXPECT_THROW(head_consistency(Tensor<double>({1, 3})), ShapeError);
}

TEST(Consistency, HeadScore) {
    Tensor<double> maps({3, 2, 2});
    for (std::size_t i = 0; i < 4; ++i) maps[i] = maps[4 + i] = 1.0;
    maps[8] = 1.0;
    maps[11] = -1.0;
    // pairs (a,b), (a,c), (b,c) have cosines 1, 0, 0
    EXPECT_NEAR(head_consistency(maps), 1.0 / 3.0, 1e-15);
}

TEST(Stats, JsonReport) {
    auto st = attention_stats(uniform_attention(2, 4));
    ASSERT_TRUE(st.query_consistency.has_value());
    ASSERT_TRUE(st.head_consistency.has_value());
    EXPECT_EQ(*st.query_consistency, 1.0);
    auto j = to_json(st);
    EXPECT_EQ(j["histogram"]["counts"].size(), 60u);
    EXPECT_EQ(j["histogram"]["bin_edges_log10"].size(), 61u);
    EXPECT_EQ(j["histogram"]["total"], 32u);

    Tensor<double> bad({2, 2}, 0.4);
    EXPECT_THROW(attention_stats(bad), NumericError);
}

// ------------------------------------------------------- similarity export

TEST(ExportSimilarity, ShapeFollowsBlockResolution) {
    auto m = build_model<double>(presets::micro(), 0);
    Rng rng(6);
    auto img = rng.normal_tensor<double>({3, 64, 64});
    auto first = export_similarity_maps(m, img, 0);
    EXPECT_EQ(first.maps.shape(), (Shape{4, 16, 16}));
    EXPECT_TRUE(first.head_consistency.has_value());
    auto last = export_similarity_maps(m, img, m.num_blocks() - 1);
    EXPECT_EQ(last.maps.shape(), (Shape{4, 2, 2}));
    EXPECT_THROW(export_similarity_maps(m, img, m.num_blocks()), ConfigError);
}

TEST(ExportSimilarity, PresetsUseEightGroups) {
    auto c = presets::tiny();
    for (const auto& s : c.stages) EXPECT_EQ(s.groups, 8u);
}

TEST(ExportSimilarity, ConstantImageGivesBeta) {
    // A non-overlapping stem keeps a constant image constant up to the first
    // token-mixer repetition. The centered raw scores are rounding residues of
    // a few ulps of |raw| (about 1e-15), divided by eps = 1e-5.
    auto m = build_model<double>(small_isotropic(), 0);
    auto& sim = m.stages[0].blocks[0].token.reps[0].similarity;
    for (std::size_t g = 0; g < 4; ++g) sim->beta.mutable_value()[g] = 0.25 * static_cast<double>(g + 1);
    auto ex = export_similarity_maps(m, Tensor<double>({3, 32, 32}, 0.3), 0, 0);
    ASSERT_EQ(ex.maps.shape(), (Shape{4, 4, 4}));
    for (std::size_t g = 0; g < 4; ++g)
        for (std::size_t p = 0; p < 16; ++p) EXPECT_NEAR(ex.maps[g * 16 + p], 0.25 * static_cast<double>(g + 1), 1e-9);
    ASSERT_TRUE(ex.head_consistency.has_value());
    EXPECT_NEAR(*ex.head_consistency, 1.0, 1e-15);

    auto zero_beta = build_model<double>(small_isotropic(), 0);
    auto ex0 = export_similarity_maps(zero_beta, Tensor<double>({3, 32, 32}, 0.3), 0, 0);
    EXPECT_FALSE(ex0.head_consistency.has_value());
}

// Doubling the post-norm features leaves S' unchanged except through eps:
// per element |dz| <= |c| eps (3/4) / ((sd + eps)(sd + eps/4)), c the centered raw score.
TEST(ExportSimilarity, FeatureScalingInvariance) {
    auto m = build_model<double>(presets::micro(), 1);
    Rng rng(8);
    ForwardTrace<double> trace;
    model_forward(m, Var<double>::constant(rng.normal_tensor<double>({1, 3, 64, 64})), &trace);
    for (std::size_t b = 0; b < m.num_blocks(); ++b) {
        const auto& rep = m.block(b).token.reps[0];
        auto ln = layer_norm_channels(trace.block_inputs[b], rep.norm.weight, rep.norm.bias).value();
        Tensor<double> ln2 = ln;
        for (auto& v : ln2.data()) v *= 2.0;
        const auto& sp = *rep.similarity;
        auto a = token_global_similarity(Var<double>::constant(ln), sp).value();
        auto c = token_global_similarity(Var<double>::constant(ln2), sp).value();
        EXPECT_TRUE(identical(a, trace.block_contexts[b][0].sim.value()));

        auto lv = Var<double>::constant(ln);
        auto raw = group_inner_product(lv, global_avg_pool(lv), sp.groups).value();
        const std::size_t P = raw.dim(2) * raw.dim(3);
        for (std::size_t k = 0; k < sp.groups; ++k) {
            double mu = 0, v = 0;
            for (std::size_t p = 0; p < P; ++p) mu += raw[k * P + p];
            mu /= static_cast<double>(P);
            for (std::size_t p = 0; p < P; ++p) v += (raw[k * P + p] - mu) * (raw[k * P + p] - mu);
            const double sd = std::sqrt(v / static_cast<double>(P)), eps = sp.eps;
            const double alpha = std::abs(sp.alpha.value()[k]);
            for (std::size_t p = 0; p < P; ++p) {
                const double bound = alpha * std::abs(raw[k * P + p] - mu) * eps * 0.75 / ((sd + eps) * (sd + eps / 4));
                EXPECT_LE(std::abs(a[k * P + p] - c[k * P + p]), bound * 1.001 + 1e-12) << "block " << b;
            }
        }

        auto tight = sp;
        tight.eps = 1e-30;
        auto ta = token_global_similarity(Var<double>::constant(ln), tight).value();
        auto tc = token_global_similarity(Var<double>::constant(ln2), tight).value();
        EXPECT_LT(max_abs_diff(ta, tc), 1e-9) << "block " << b;
    }
}
