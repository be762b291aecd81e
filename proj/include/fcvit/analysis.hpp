#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "fcvit/model.hpp"

namespace fcvit {

/// Projections for plain multi-head self-attention over tokens of width d.
template <Real T>
struct ReferenceAttentionParams {
    Tensor<T> w_q, w_k, w_v;  // [d, d]
    std::size_t heads = 1;
};

template <Real T>
struct AttentionResult {
    Tensor<T> y;                  // [N, d, n]
    std::vector<Tensor<T>> attn;  // per sample, [heads, n, n], rows sum to 1
};

/// y_i = sum_j softmax_j(q_i . k_j) v_j per head. No 1/sqrt(d) scaling and
/// no positional encoding.
template <Real T>
AttentionResult<T> reference_self_attention(const Tensor<T>& x, const ReferenceAttentionParams<T>& p) {
    require_shape(x.ndim() == 3, "reference_self_attention: x must be [N, d, n]");
    const std::size_t N = x.dim(0), d = x.dim(1), n = x.dim(2);
    for (const auto* w : {&p.w_q, &p.w_k, &p.w_v}) {
        require_shape(w->shape() == Shape{d, d}, "reference_self_attention: projections must be [d, d]");
    }
    if (p.heads == 0 || d % p.heads != 0) throw ShapeError("reference_self_attention: heads must divide d");
    const std::size_t dh = d / p.heads;

    auto project = [&](const Tensor<T>& w, std::size_t s) {
        Tensor<T> out({d, n});
        for (std::size_t o = 0; o < d; ++o)
            for (std::size_t c = 0; c < d; ++c) {
                const T wv = w.at(o, c);
                for (std::size_t i = 0; i < n; ++i) out[o * n + i] += wv * x[(s * d + c) * n + i];
            }
        return out;
    };

    AttentionResult<T> res;
    res.y = Tensor<T>({N, d, n});
    for (std::size_t s = 0; s < N; ++s) {
        Tensor<T> q = project(p.w_q, s), k = project(p.w_k, s), v = project(p.w_v, s);
        Tensor<T> attn({p.heads, n, n});
        for (std::size_t h = 0; h < p.heads; ++h) {
            for (std::size_t i = 0; i < n; ++i) {
                T* row = attn.ptr() + (h * n + i) * n;
                for (std::size_t j = 0; j < n; ++j) {
                    T dot = 0;
                    for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) dot += q[c * n + i] * k[c * n + j];
                    row[j] = dot;
                }
                T mx = row[0];
                for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
                T z = 0;
                for (std::size_t j = 0; j < n; ++j) {
                    row[j] = std::exp(row[j] - mx);
                    z += row[j];
                }
                for (std::size_t j = 0; j < n; ++j) row[j] /= z;
                for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) {
                    T acc = 0;
                    for (std::size_t j = 0; j < n; ++j) acc += row[j] * v[c * n + j];
                    res.y[(s * d + c) * n + i] = acc;
                }
            }
        }
        check_finite(attn, "reference_self_attention");
        res.attn.push_back(std::move(attn));
    }
    check_finite(res.y, "reference_self_attention");
    return res;
}

// ------------------------------------------------------------ statistics

struct LogHistogram {
    static constexpr std::size_t kBins = 60;
    static constexpr double kLow = -6.0;
    static constexpr double kHigh = 0.0;
    static constexpr double kWidth = (kHigh - kLow) / kBins;

    std::vector<std::uint64_t> counts = std::vector<std::uint64_t>(kBins, 0);
    std::vector<double> density = std::vector<double>(kBins, 0.0);
    std::uint64_t total = 0;

    /// Bin holding log10(w); weights below 1e-6 (including 0) land in bin 0.
    static std::size_t bin_of(double w) {
        if (w < 1e-6) return 0;
        const double b = std::floor((std::log10(w) - kLow) / kWidth);
        return static_cast<std::size_t>(std::clamp(b, 0.0, static_cast<double>(kBins - 1)));
    }

    static double bin_lower_edge(std::size_t b) { return kLow + kWidth * static_cast<double>(b); }
};

/// Pools every weight of an attention tensor ([n, n] or [heads, n, n]) into a
/// 60-bin histogram of log10(w) over [-6, 0].
template <Real T>
LogHistogram attention_log_histogram(const Tensor<T>& attn) {
    LogHistogram h;
    for (T w : attn.data()) {
        if (w < 0 || !std::isfinite(w)) throw NumericError("attention_log_histogram: negative or non-finite weight");
        ++h.counts[LogHistogram::bin_of(static_cast<double>(w))];
        ++h.total;
    }
    for (std::size_t b = 0; b < LogHistogram::kBins; ++b) {
        h.density[b] = h.total ? static_cast<double>(h.counts[b]) / static_cast<double>(h.total) : 0.0;
    }
    return h;
}

namespace detail {

// Mean pairwise cosine between `rows` vectors of length `len` starting at p.
template <Real T>
double mean_pairwise_cosine(const T* p, std::size_t rows, std::size_t len, const char* what) {
    std::vector<double> norms(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0;
        for (std::size_t j = 0; j < len; ++j) s += double(p[r * len + j]) * double(p[r * len + j]);
        norms[r] = std::sqrt(s);
        if (norms[r] == 0.0) throw NumericError(std::string(what) + ": zero-norm row " + std::to_string(r));
    }
    double acc = 0;
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < rows; ++a)
        for (std::size_t b = a + 1; b < rows; ++b) {
            double dot = 0;
            for (std::size_t j = 0; j < len; ++j) dot += double(p[a * len + j]) * double(p[b * len + j]);
            acc += dot / (norms[a] * norms[b]);
            ++pairs;
        }
    return acc / static_cast<double>(pairs);
}

template <Real T>
std::pair<std::size_t, std::size_t> heads_and_n(const Tensor<T>& attn) {
    if (attn.ndim() == 2) {
        require_shape(attn.dim(0) == attn.dim(1), "attention matrix must be square");
        return {1, attn.dim(0)};
    }
    require_shape(attn.ndim() == 3 && attn.dim(1) == attn.dim(2), "attention must be [n, n] or [heads, n, n]");
    return {attn.dim(0), attn.dim(1)};
}

}  // namespace detail

/// Mean pairwise cosine between the rows of each head, averaged over heads.
/// 1 means every query sees the same distribution.
template <Real T>
double query_consistency(const Tensor<T>& attn) {
    auto [heads, n] = detail::heads_and_n(attn);
    if (n < 2) throw ShapeError("query_consistency: need at least two queries");
    double acc = 0;
    for (std::size_t h = 0; h < heads; ++h) acc += detail::mean_pairwise_cosine(attn.ptr() + h * n * n, n, n, "query_consistency");
    return acc / static_cast<double>(heads);
}

/// Mean pairwise cosine between the flattened slices along axis 0 (heads or
/// similarity groups). Requires at least two slices.
template <Real T>
double head_consistency(const Tensor<T>& maps) {
    require_shape(maps.ndim() >= 2 && maps.dim(0) >= 2, "head_consistency: need at least two maps");
    const std::size_t len = maps.numel() / maps.dim(0);
    return detail::mean_pairwise_cosine(maps.ptr(), maps.dim(0), len, "head_consistency");
}

struct AttentionStats {
    LogHistogram histogram;
    std::optional<double> query_consistency;
    std::optional<double> head_consistency;
};

/// Statistics of an attention tensor whose rows must sum to 1 within 1e-5.
template <Real T>
AttentionStats attention_stats(const Tensor<T>& attn) {
    auto [heads, n] = detail::heads_and_n(attn);
    for (std::size_t r = 0; r < heads * n; ++r) {
        double s = 0;
        for (std::size_t j = 0; j < n; ++j) s += attn[r * n + j];
        if (std::abs(s - 1.0) > 1e-5) throw NumericError("attention_stats: row " + std::to_string(r) + " is not stochastic");
    }
    AttentionStats st;
    st.histogram = attention_log_histogram(attn);
    if (n >= 2) st.query_consistency = query_consistency(attn);
    if (heads >= 2) st.head_consistency = head_consistency(attn);
    return st;
}

inline nlohmann::json to_json(const AttentionStats& s) {
    nlohmann::json j;
    std::vector<double> edges;
    for (std::size_t b = 0; b <= LogHistogram::kBins; ++b) edges.push_back(LogHistogram::bin_lower_edge(b));
    j["histogram"] = {{"bin_edges_log10", edges}, {"counts", s.histogram.counts}, {"density", s.histogram.density},
                      {"total", s.histogram.total}};
    j["query_consistency"] = s.query_consistency ? nlohmann::json(*s.query_consistency) : nlohmann::json(nullptr);
    j["head_consistency"] = s.head_consistency ? nlohmann::json(*s.head_consistency) : nlohmann::json(nullptr);
    return j;
}

// ------------------------------------------------------- similarity export

template <Real T>
struct SimilarityExport {
    Tensor<T> maps;                           // [g, H, W]
    std::optional<double> head_consistency;  // absent when some map has zero norm
};

/// Normalized token-global similarity of every group at block `block_index`
/// (counted across stages) for a single image. `repetition` selects the
/// token-mixer repetition; the default is the last one.
template <Real T>
SimilarityExport<T> export_similarity_maps(const ModelParams<T>& model, const Tensor<T>& image, std::size_t block_index,
                                           std::optional<std::size_t> repetition = std::nullopt) {
    if (block_index >= model.num_blocks()) {
        throw ConfigError("export_similarity_maps: block index " + std::to_string(block_index) + " out of range (model has " +
                          std::to_string(model.num_blocks()) + " blocks)");
    }
    Tensor<T> img = image;
    if (img.ndim() == 3) img = img.reshape({1, img.dim(0), img.dim(1), img.dim(2)});
    require_shape(img.ndim() == 4 && img.dim(0) == 1, "export_similarity_maps: expects a single image");

    NoGradGuard ng;
    ForwardTrace<T> trace;
    model_forward(model, Var<T>::constant(img), &trace);
    const auto& reps = trace.block_contexts.at(block_index);
    const std::size_t r = repetition.value_or(reps.size() - 1);
    if (r >= reps.size()) throw ConfigError("export_similarity_maps: repetition out of range");
    if (!reps[r].sim || !model.block(block_index).token.reps[r].similarity) {
        throw ConfigError("export_similarity_maps: block has no dynamic similarity path");
    }
    const auto& sim = reps[r].sim.value();
    SimilarityExport<T> out;
    out.maps = sim.reshape({sim.dim(1), sim.dim(2), sim.dim(3)});
    if (out.maps.dim(0) >= 2) {
        try {
            out.head_consistency = head_consistency(out.maps);
        } catch (const NumericError&) {
            out.head_consistency.reset();
        }
    }
    return out;
}

}  // namespace fcvit
