#pragma once

// Differentiable kernels. Every kernel checks shapes up front, rejects
// non-finite results and records a backward closure when gradients are live.
// Reductions run in a fixed index order so repeated calls are bit-identical.

#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include "fcvit/autograd.hpp"
#include "fcvit/tensor.hpp"

namespace fcvit {

struct ConvSpec {
    std::size_t in_channels = 1;
    std::size_t out_channels = 1;
    std::size_t kernel = 1;
    std::size_t stride = 1;
    std::size_t padding = 0;
    std::size_t groups = 1;

    static ConvSpec depthwise(std::size_t channels, std::size_t k, std::size_t stride = 1) {
        return {channels, channels, k, stride, k / 2, channels};
    }
    static ConvSpec pointwise(std::size_t in, std::size_t out) { return {in, out, 1, 1, 0, 1}; }

    void validate() const {
        if (in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 || groups == 0) {
            throw ShapeError("conv2d: channels, kernel, stride and groups must be positive");
        }
        if (in_channels % groups != 0 || out_channels % groups != 0) {
            throw ShapeError("conv2d: groups must divide in_channels and out_channels");
        }
    }

    Shape weight_shape() const { return {out_channels, in_channels / groups, kernel, kernel}; }

    std::size_t output_extent(std::size_t in) const {
        if (in + 2 * padding < kernel) throw ShapeError("conv2d: kernel larger than padded input");
        return (in + 2 * padding - kernel) / stride + 1;
    }
};

namespace detail {

// Output indices i in [lo, hi) whose tap i*stride + u - pad falls inside [0, extent).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t extent, std::size_t out_extent,
                                                       std::size_t u, std::size_t stride,
                                                       std::size_t pad) {
    long lo_num = static_cast<long>(pad) - static_cast<long>(u);
    long lo = lo_num <= 0 ? 0 : (lo_num + static_cast<long>(stride) - 1) / static_cast<long>(stride);
    long hi_num = static_cast<long>(extent) - 1 + static_cast<long>(pad) - static_cast<long>(u);
    long hi = hi_num < 0 ? 0 : hi_num / static_cast<long>(stride) + 1;
    hi = std::min<long>(hi, static_cast<long>(out_extent));
    if (lo > hi) lo = hi;
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// [outer, axis, inner] decomposition of a shape around `axis`.
struct AxisSplit {
    std::size_t outer = 1, axis = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
    require_shape(axis < s.size(), "axis out of range for " + shape_str(s));
    AxisSplit r;
    for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
    r.axis = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

template <Real T>
void require_same(const Var<T>& a, const Var<T>& b, const char* op) {
    require_shape(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                              " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <Real T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    detail::require_same(a, b, "add");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
    check_finite(out, "add");
    return make_result(std::move(out), {a, b}, [a, b](const Tensor<T>& g) {
        if (a.requires_grad()) a.accumulate_grad(g);
        if (b.requires_grad()) b.accumulate_grad(g);
    });
}

template <Real T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    detail::require_same(a, b, "sub");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] - b.value()[i];
    check_finite(out, "sub");
    return make_result(std::move(out), {a, b}, [a, b](const Tensor<T>& g) {
        if (a.requires_grad()) a.accumulate_grad(g);
        if (b.requires_grad()) {
            Tensor<T> n(g.shape());
            for (std::size_t i = 0; i < g.numel(); ++i) n[i] = -g[i];
            b.accumulate_grad(n);
        }
    });
}

template <Real T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    detail::require_same(a, b, "mul");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
    check_finite(out, "mul");
    return make_result(std::move(out), {a, b}, [a, b](const Tensor<T>& g) {
        if (a.requires_grad()) {
            Tensor<T> ga(g.shape());
            for (std::size_t i = 0; i < g.numel(); ++i) ga[i] = g[i] * b.value()[i];
            a.accumulate_grad(ga);
        }
        if (b.requires_grad()) {
            Tensor<T> gb(g.shape());
            for (std::size_t i = 0; i < g.numel(); ++i) gb[i] = g[i] * a.value()[i];
            b.accumulate_grad(gb);
        }
    });
}

template <Real T>
Var<T> scale(const Var<T>& a, T s) {
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * s;
    check_finite(out, "scale");
    return make_result(std::move(out), {a}, [a, s](const Tensor<T>& g) {
        Tensor<T> ga(g.shape());
        for (std::size_t i = 0; i < g.numel(); ++i) ga[i] = g[i] * s;
        a.accumulate_grad(ga);
    });
}

template <Real T>
Var<T> sum(const Var<T>& a) {
    T s = 0;
    for (auto v : a.value().data()) s += v;
    Tensor<T> out = Tensor<T>::scalar(s);
    check_finite(out, "sum");
    return make_result(std::move(out), {a}, [a](const Tensor<T>& g) {
        a.accumulate_grad(Tensor<T>(a.shape(), g[0]));
    });
}

template <Real T>
Var<T> mean(const Var<T>& a) {
    return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <Real T>
Var<T> reshape(const Var<T>& a, Shape shape) {
    Tensor<T> out = a.value().reshape(std::move(shape));
    return make_result(std::move(out), {a}, [a](const Tensor<T>& g) {
        a.accumulate_grad(g.reshape(a.shape()));
    });
}

/// Exact-erf GELU: 0.5 x (1 + erf(x / sqrt 2)).
template <Real T>
Var<T> gelu(const Var<T>& x) {
    Tensor<T> out(x.shape());
    const auto& xv = x.value();
    for (std::size_t i = 0; i < out.numel(); ++i) {
        T v = xv[i];
        out[i] = T(0.5) * v * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>));
    }
    check_finite(out, "gelu");
    return make_result(std::move(out), {x}, [x](const Tensor<T>& g) {
        const auto& xv = x.value();
        Tensor<T> gx(g.shape());
        const T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>;
        for (std::size_t i = 0; i < g.numel(); ++i) {
            T v = xv[i];
            T cdf = T(0.5) * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>));
            T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
            gx[i] = g[i] * (cdf + v * pdf);
        }
        x.accumulate_grad(gx);
    });
}

/// Elementwise max of two projections; ties route the gradient to `a`.
template <Real T>
Var<T> maxout(const Var<T>& a, const Var<T>& b) {
    detail::require_same(a, b, "maxout");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out[i] = a.value()[i] >= b.value()[i] ? a.value()[i] : b.value()[i];
    }
    check_finite(out, "maxout");
    return make_result(std::move(out), {a, b}, [a, b](const Tensor<T>& g) {
        Tensor<T> ga(g.shape()), gb(g.shape());
        for (std::size_t i = 0; i < g.numel(); ++i) {
            if (a.value()[i] >= b.value()[i]) {
                ga[i] = g[i];
            } else {
                gb[i] = g[i];
            }
        }
        if (a.requires_grad()) a.accumulate_grad(ga);
        if (b.requires_grad()) b.accumulate_grad(gb);
    });
}

// ------------------------------------------------------------------ linear

/// c[i,j] = sum_k a[i,k] b[k,j], k ascending.
template <Real T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    require_shape(a.value().ndim() == 2 && b.value().ndim() == 2, "matmul: operands must be 2-D");
    const std::size_t M = a.shape()[0], K = a.shape()[1], N = b.shape()[1];
    require_shape(b.shape()[0] == K, "matmul: inner extents differ " + shape_str(a.shape()) + " x " +
                                         shape_str(b.shape()));
    Tensor<T> out({M, N});
    const T* A = a.value().ptr();
    const T* B = b.value().ptr();
    T* C = out.ptr();
    for (std::size_t i = 0; i < M; ++i)
        for (std::size_t k = 0; k < K; ++k) {
            T av = A[i * K + k];
            for (std::size_t j = 0; j < N; ++j) C[i * N + j] += av * B[k * N + j];
        }
    check_finite(out, "matmul");
    return make_result(std::move(out), {a, b}, [a, b, M, K, N](const Tensor<T>& g) {
        const T* A = a.value().ptr();
        const T* B = b.value().ptr();
        if (a.requires_grad()) {
            Tensor<T> ga({M, K});
            for (std::size_t i = 0; i < M; ++i)
                for (std::size_t k = 0; k < K; ++k) {
                    T s = 0;
                    for (std::size_t j = 0; j < N; ++j) s += g[i * N + j] * B[k * N + j];
                    ga[i * K + k] = s;
                }
            a.accumulate_grad(ga);
        }
        if (b.requires_grad()) {
            Tensor<T> gb({K, N});
            for (std::size_t i = 0; i < M; ++i)
                for (std::size_t k = 0; k < K; ++k) {
                    T av = A[i * K + k];
                    for (std::size_t j = 0; j < N; ++j) gb[k * N + j] += av * g[i * N + j];
                }
            b.accumulate_grad(gb);
        }
    });
}

/// y[n,o] = bias[o] + sum_i w[o,i] x[n,i]. `bias` may be null.
template <Real T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias = {}) {
    require_shape(x.value().ndim() == 2 && w.value().ndim() == 2, "linear: expects 2-D input and weight");
    const std::size_t N = x.shape()[0], In = x.shape()[1], Out = w.shape()[0];
    require_shape(w.shape()[1] == In, "linear: weight " + shape_str(w.shape()) + " does not accept input " +
                                          shape_str(x.shape()));
    if (bias) require_shape(bias.shape() == Shape{Out}, "linear: bias shape mismatch");
    Tensor<T> out({N, Out});
    const T* X = x.value().ptr();
    const T* W = w.value().ptr();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < Out; ++o) {
            T s = bias ? bias.value()[o] : T(0);
            for (std::size_t i = 0; i < In; ++i) s += W[o * In + i] * X[n * In + i];
            out[n * Out + o] = s;
        }
    check_finite(out, "linear");
    return make_result(std::move(out), {x, w, bias}, [x, w, bias, N, In, Out](const Tensor<T>& g) {
        const T* X = x.value().ptr();
        const T* W = w.value().ptr();
        if (x.requires_grad()) {
            Tensor<T> gx({N, In});
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t o = 0; o < Out; ++o) {
                    T go = g[n * Out + o];
                    for (std::size_t i = 0; i < In; ++i) gx[n * In + i] += go * W[o * In + i];
                }
            x.accumulate_grad(gx);
        }
        if (w.requires_grad()) {
            Tensor<T> gw({Out, In});
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t o = 0; o < Out; ++o) {
                    T go = g[n * Out + o];
                    for (std::size_t i = 0; i < In; ++i) gw[o * In + i] += go * X[n * In + i];
                }
            w.accumulate_grad(gw);
        }
        if (bias && bias.requires_grad()) {
            Tensor<T> gb({Out});
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t o = 0; o < Out; ++o) gb[o] += g[n * Out + o];
            bias.accumulate_grad(gb);
        }
    });
}

// -------------------------------------------------------------- convolution

/// Grouped 2-D convolution with zero padding, NCHW. For each output element
/// the accumulation starts at the bias and runs over input channel, then
/// kernel row, then kernel column. Output extent is floor((H + 2p - k) / s) + 1.
template <Real T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, const ConvSpec& spec) {
    spec.validate();
    require_shape(x.value().ndim() == 4, "conv2d: input must be NCHW, got " + shape_str(x.shape()));
    const std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    require_shape(C == spec.in_channels, "conv2d: input has " + std::to_string(C) + " channels, spec expects " +
                                             std::to_string(spec.in_channels));
    require_shape(w.shape() == spec.weight_shape(),
                  "conv2d: weight " + shape_str(w.shape()) + " != " + shape_str(spec.weight_shape()));
    if (bias) require_shape(bias.shape() == Shape{spec.out_channels}, "conv2d: bias shape mismatch");

    const std::size_t Co = spec.out_channels, K = spec.kernel, S = spec.stride, P = spec.padding;
    const std::size_t Ho = spec.output_extent(H), Wo = spec.output_extent(W);
    const std::size_t cpg = C / spec.groups, opg = Co / spec.groups;

    Tensor<T> out({N, Co, Ho, Wo});
    const T* X = x.value().ptr();
    const T* Wt = w.value().ptr();
    T* Y = out.ptr();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t co = 0; co < Co; ++co) {
            T* yp = Y + (n * Co + co) * Ho * Wo;
            if (bias) std::fill(yp, yp + Ho * Wo, bias.value()[co]);
            const std::size_t grp = co / opg;
            for (std::size_t cl = 0; cl < cpg; ++cl) {
                const std::size_t c = grp * cpg + cl;
                const T* xp = X + (n * C + c) * H * W;
                for (std::size_t u = 0; u < K; ++u) {
                    auto [i0, i1] = detail::valid_range(H, Ho, u, S, P);
                    for (std::size_t v = 0; v < K; ++v) {
                        auto [j0, j1] = detail::valid_range(W, Wo, v, S, P);
                        const T wv = Wt[((co * cpg + cl) * K + u) * K + v];
                        for (std::size_t i = i0; i < i1; ++i) {
                            const T* xr = xp + (i * S + u - P) * W;
                            T* yr = yp + i * Wo;
                            for (std::size_t j = j0; j < j1; ++j) yr[j] += wv * xr[j * S + v - P];
                        }
                    }
                }
            }
        }
    check_finite(out, "conv2d");

    return make_result(std::move(out), {x, w, bias}, [=](const Tensor<T>& g) {
        const T* X = x.value().ptr();
        const T* Wt = w.value().ptr();
        const T* G = g.ptr();
        Tensor<T> gx, gw;
        if (x.requires_grad()) gx = Tensor<T>::zeros(x.shape());
        if (w.requires_grad()) gw = Tensor<T>::zeros(w.shape());
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t co = 0; co < Co; ++co) {
                const T* gp = G + (n * Co + co) * Ho * Wo;
                const std::size_t grp = co / opg;
                for (std::size_t cl = 0; cl < cpg; ++cl) {
                    const std::size_t c = grp * cpg + cl;
                    const std::size_t xoff = (n * C + c) * H * W;
                    for (std::size_t u = 0; u < K; ++u) {
                        auto [i0, i1] = detail::valid_range(H, Ho, u, S, P);
                        for (std::size_t v = 0; v < K; ++v) {
                            auto [j0, j1] = detail::valid_range(W, Wo, v, S, P);
                            const std::size_t widx = ((co * cpg + cl) * K + u) * K + v;
                            const T wv = Wt[widx];
                            T acc = 0;
                            for (std::size_t i = i0; i < i1; ++i) {
                                const std::size_t row = xoff + (i * S + u - P) * W;
                                for (std::size_t j = j0; j < j1; ++j) {
                                    const T go = gp[i * Wo + j];
                                    if (!gx.empty()) gx[row + j * S + v - P] += wv * go;
                                    acc += go * X[row + j * S + v - P];
                                }
                            }
                            if (!gw.empty()) gw[widx] += acc;
                        }
                    }
                }
            }
        if (!gx.empty()) x.accumulate_grad(gx);
        if (!gw.empty()) w.accumulate_grad(gw);
        if (bias && bias.requires_grad()) {
            Tensor<T> gb({Co});
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t co = 0; co < Co; ++co) {
                    const T* gp = G + (n * Co + co) * Ho * Wo;
                    for (std::size_t p = 0; p < Ho * Wo; ++p) gb[co] += gp[p];
                }
            bias.accumulate_grad(gb);
        }
    });
}

// ----------------------------------------------------------- normalization

namespace detail {

// Normalizes each [outer, :, inner] fibre of length `split.axis`.
template <Real T>
Var<T> layer_norm_fibres(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, double eps,
                         AxisSplit sp, const char* name) {
    if (!(eps > 0)) throw ShapeError(std::string(name) + ": eps must be positive");
    const std::size_t D = sp.axis;
    require_shape(gamma.shape() == Shape{D} && beta.shape() == Shape{D},
                  std::string(name) + ": affine parameters must have length " + std::to_string(D));
    Tensor<T> out(x.shape());
    Tensor<T> xhat(x.shape());
    std::vector<T> rstd(sp.outer * sp.inner);
    const T* X = x.value().ptr();
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t in = 0; in < sp.inner; ++in) {
            const std::size_t base = o * D * sp.inner + in;
            T m = 0;
            for (std::size_t d = 0; d < D; ++d) m += X[base + d * sp.inner];
            m /= static_cast<T>(D);
            T var = 0;
            for (std::size_t d = 0; d < D; ++d) {
                T c = X[base + d * sp.inner] - m;
                var += c * c;
            }
            var /= static_cast<T>(D);
            T r = T(1) / std::sqrt(var + static_cast<T>(eps));
            rstd[o * sp.inner + in] = r;
            for (std::size_t d = 0; d < D; ++d) {
                const std::size_t idx = base + d * sp.inner;
                T h = (X[idx] - m) * r;
                xhat[idx] = h;
                out[idx] = h * gamma.value()[d] + beta.value()[d];
            }
        }
    check_finite(out, name);
    return make_result(std::move(out), {x, gamma, beta},
                       [x, gamma, beta, sp, xhat = std::move(xhat), rstd = std::move(rstd)](const Tensor<T>& g) {
                           const std::size_t D = sp.axis;
                           Tensor<T> gx, gg, gb;
                           if (x.requires_grad()) gx = Tensor<T>::zeros(x.shape());
                           if (gamma.requires_grad()) gg = Tensor<T>::zeros(gamma.shape());
                           if (beta.requires_grad()) gb = Tensor<T>::zeros(beta.shape());
                           for (std::size_t o = 0; o < sp.outer; ++o)
                               for (std::size_t in = 0; in < sp.inner; ++in) {
                                   const std::size_t base = o * D * sp.inner + in;
                                   T s1 = 0, s2 = 0;
                                   for (std::size_t d = 0; d < D; ++d) {
                                       const std::size_t idx = base + d * sp.inner;
                                       T gh = g[idx] * gamma.value()[d];
                                       s1 += gh;
                                       s2 += gh * xhat[idx];
                                       if (!gg.empty()) gg[d] += g[idx] * xhat[idx];
                                       if (!gb.empty()) gb[d] += g[idx];
                                   }
                                   if (gx.empty()) continue;
                                   s1 /= static_cast<T>(D);
                                   s2 /= static_cast<T>(D);
                                   const T r = rstd[o * sp.inner + in];
                                   for (std::size_t d = 0; d < D; ++d) {
                                       const std::size_t idx = base + d * sp.inner;
                                       T gh = g[idx] * gamma.value()[d];
                                       gx[idx] = r * (gh - s1 - xhat[idx] * s2);
                                   }
                               }
                           if (!gx.empty()) x.accumulate_grad(gx);
                           if (!gg.empty()) gamma.accumulate_grad(gg);
                           if (!gb.empty()) beta.accumulate_grad(gb);
                       });
}

}  // namespace detail

/// Layer normalization over the last axis with population variance.
template <Real T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, double eps = 1e-5) {
    require_shape(x.value().ndim() >= 1, "layer_norm: empty input");
    return detail::layer_norm_fibres(x, gamma, beta, eps, detail::split_axis(x.shape(), x.value().ndim() - 1),
                                     "layer_norm");
}

/// Layer normalization over the channel axis of an NCHW map, per position.
template <Real T>
Var<T> layer_norm_channels(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, double eps = 1e-5) {
    require_shape(x.value().ndim() == 4, "layer_norm_channels: input must be NCHW");
    return detail::layer_norm_fibres(x, gamma, beta, eps, detail::split_axis(x.shape(), 1),
                                     "layer_norm_channels");
}

/// Max-shifted softmax along `axis`.
template <Real T>
Var<T> softmax(const Var<T>& x, std::size_t axis) {
    auto sp = detail::split_axis(x.shape(), axis);
    Tensor<T> out(x.shape());
    const T* X = x.value().ptr();
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t in = 0; in < sp.inner; ++in) {
            const std::size_t base = o * sp.axis * sp.inner + in;
            T mx = X[base];
            for (std::size_t a = 1; a < sp.axis; ++a) mx = std::max(mx, X[base + a * sp.inner]);
            T z = 0;
            for (std::size_t a = 0; a < sp.axis; ++a) {
                T e = std::exp(X[base + a * sp.inner] - mx);
                out[base + a * sp.inner] = e;
                z += e;
            }
            for (std::size_t a = 0; a < sp.axis; ++a) out[base + a * sp.inner] /= z;
        }
    check_finite(out, "softmax");
    Tensor<T> y = out;
    return make_result(std::move(out), {x}, [x, sp, y = std::move(y)](const Tensor<T>& g) {
        Tensor<T> gx(x.shape());
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t in = 0; in < sp.inner; ++in) {
                const std::size_t base = o * sp.axis * sp.inner + in;
                T dot = 0;
                for (std::size_t a = 0; a < sp.axis; ++a) dot += g[base + a * sp.inner] * y[base + a * sp.inner];
                for (std::size_t a = 0; a < sp.axis; ++a) {
                    const std::size_t idx = base + a * sp.inner;
                    gx[idx] = y[idx] * (g[idx] - dot);
                }
            }
        x.accumulate_grad(gx);
    });
}

// ------------------------------------------------------------ spatial ops

/// Mean over H and W: [N,C,H,W] -> [N,C].
template <Real T>
Var<T> global_avg_pool(const Var<T>& x) {
    require_shape(x.value().ndim() == 4, "global_avg_pool: input must be NCHW");
    const std::size_t N = x.shape()[0], C = x.shape()[1], P = x.shape()[2] * x.shape()[3];
    Tensor<T> out({N, C});
    const T* X = x.value().ptr();
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        T s = 0;
        for (std::size_t p = 0; p < P; ++p) s += X[nc * P + p];
        out[nc] = s / static_cast<T>(P);
    }
    check_finite(out, "global_avg_pool");
    return make_result(std::move(out), {x}, [x, N, C, P](const Tensor<T>& g) {
        Tensor<T> gx(x.shape());
        const T inv = T(1) / static_cast<T>(P);
        for (std::size_t nc = 0; nc < N * C; ++nc) {
            const T v = g[nc] * inv;
            for (std::size_t p = 0; p < P; ++p) gx[nc * P + p] = v;
        }
        x.accumulate_grad(gx);
    });
}

/// Per-group inner product of each token with a per-sample vector:
/// s[n,k,h,w] = sum_{c in group k} x[n,c,h,w] * v[n,c], c ascending.
template <Real T>
Var<T> group_inner_product(const Var<T>& x, const Var<T>& v, std::size_t groups) {
    require_shape(x.value().ndim() == 4, "group_inner_product: input must be NCHW");
    const std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    require_shape(v.shape() == Shape{N, C}, "group_inner_product: vector shape mismatch");
    if (groups == 0 || C % groups != 0) {
        throw ShapeError("group_inner_product: " + std::to_string(groups) + " groups do not divide " +
                         std::to_string(C) + " channels");
    }
    const std::size_t P = H * W, cpg = C / groups;
    Tensor<T> out({N, groups, H, W});
    const T* X = x.value().ptr();
    const T* V = v.value().ptr();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            T* op = out.ptr() + (n * groups + c / cpg) * P;
            const T* xp = X + (n * C + c) * P;
            const T vc = V[n * C + c];
            for (std::size_t p = 0; p < P; ++p) op[p] += xp[p] * vc;
        }
    check_finite(out, "group_inner_product");
    return make_result(std::move(out), {x, v}, [x, v, N, C, P, groups, cpg](const Tensor<T>& g) {
        const T* X = x.value().ptr();
        const T* V = v.value().ptr();
        Tensor<T> gx, gv;
        if (x.requires_grad()) gx = Tensor<T>::zeros(x.shape());
        if (v.requires_grad()) gv = Tensor<T>::zeros(v.shape());
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c) {
                const T* gp = g.ptr() + (n * groups + c / cpg) * P;
                const std::size_t off = (n * C + c) * P;
                T acc = 0;
                for (std::size_t p = 0; p < P; ++p) {
                    if (!gx.empty()) gx[off + p] = gp[p] * V[n * C + c];
                    acc += gp[p] * X[off + p];
                }
                if (!gv.empty()) gv[n * C + c] = acc;
            }
        if (!gx.empty()) x.accumulate_grad(gx);
        if (!gv.empty()) v.accumulate_grad(gv);
    });
}

/// Affine spatial standardization of every (sample, group) plane:
/// out = alpha[k] * (s - mean) / (std + eps) + beta[k], population std.
template <Real T>
Var<T> spatial_standardize(const Var<T>& s, const Var<T>& alpha, const Var<T>& beta, double eps) {
    require_shape(s.value().ndim() == 4, "spatial_standardize: input must be [N,G,H,W]");
    if (!(eps > 0)) throw ShapeError("spatial_standardize: eps must be positive");
    const std::size_t N = s.shape()[0], G = s.shape()[1], P = s.shape()[2] * s.shape()[3];
    require_shape(alpha.shape() == Shape{G} && beta.shape() == Shape{G},
                  "spatial_standardize: alpha/beta must have one entry per group");
    Tensor<T> out(s.shape());
    Tensor<T> z(s.shape());
    std::vector<T> sigma(N * G);
    const T* S = s.value().ptr();
    for (std::size_t ng = 0; ng < N * G; ++ng) {
        const T* sp = S + ng * P;
        T m = 0;
        for (std::size_t p = 0; p < P; ++p) m += sp[p];
        m /= static_cast<T>(P);
        T var = 0;
        for (std::size_t p = 0; p < P; ++p) var += (sp[p] - m) * (sp[p] - m);
        var /= static_cast<T>(P);
        const T sd = std::sqrt(var);
        sigma[ng] = sd;
        const T denom = sd + static_cast<T>(eps);
        const T a = alpha.value()[ng % G], b = beta.value()[ng % G];
        for (std::size_t p = 0; p < P; ++p) {
            T zz = (sp[p] - m) / denom;
            z[ng * P + p] = zz;
            out[ng * P + p] = a * zz + b;
        }
    }
    check_finite(out, "spatial_standardize");
    return make_result(
        std::move(out), {s, alpha, beta},
        [s, alpha, beta, N, G, P, eps, z = std::move(z), sigma = std::move(sigma)](const Tensor<T>& g) {
            Tensor<T> gs, ga, gb;
            if (s.requires_grad()) gs = Tensor<T>::zeros(s.shape());
            if (alpha.requires_grad()) ga = Tensor<T>::zeros(alpha.shape());
            if (beta.requires_grad()) gb = Tensor<T>::zeros(beta.shape());
            for (std::size_t ng = 0; ng < N * G; ++ng) {
                const std::size_t k = ng % G;
                const T a = alpha.value()[k];
                const T* gp = g.ptr() + ng * P;
                const T* zp = z.ptr() + ng * P;
                T sum_g = 0, sum_gz = 0;
                for (std::size_t p = 0; p < P; ++p) {
                    sum_g += gp[p];
                    sum_gz += gp[p] * zp[p];
                }
                if (!ga.empty()) ga[k] += sum_gz;
                if (!gb.empty()) gb[k] += sum_g;
                if (gs.empty()) continue;
                // z = c / D with c = s - mean, D = std + eps; dstd/ds_q = c_q / (P std).
                const T sd = sigma[ng];
                const T D = sd + static_cast<T>(eps);
                const T mean_gz = a * sum_g / static_cast<T>(P);
                // sum_p (a g_p) c_p / D^2 = a * sum_gz / D
                const T corr = sd > 0 ? (a * sum_gz / D) / (static_cast<T>(P) * sd) : T(0);
                for (std::size_t p = 0; p < P; ++p) {
                    const T c = zp[p] * D;
                    gs[ng * P + p] = (a * gp[p] - mean_gz) / D - corr * c;
                }
            }
            if (!gs.empty()) s.accumulate_grad(gs);
            if (!ga.empty()) alpha.accumulate_grad(ga);
            if (!gb.empty()) beta.accumulate_grad(gb);
        });
}

/// Per-position modulation of a channel vector by its group's map:
/// out[n,c,h,w] = sim[n, group(c), h, w] * gc[n,c].
template <Real T>
Var<T> modulate_context(const Var<T>& sim, const Var<T>& gc) {
    require_shape(sim.value().ndim() == 4 && gc.value().ndim() == 2, "modulate_context: expects [N,G,H,W] and [N,C]");
    const std::size_t N = sim.shape()[0], G = sim.shape()[1], H = sim.shape()[2], W = sim.shape()[3];
    const std::size_t C = gc.shape()[1];
    require_shape(gc.shape()[0] == N, "modulate_context: batch mismatch");
    require_shape(C % G == 0, "modulate_context: groups do not divide channels");
    const std::size_t P = H * W, cpg = C / G;
    Tensor<T> out({N, C, H, W});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const T* sp = sim.value().ptr() + (n * G + c / cpg) * P;
            const T gv = gc.value()[n * C + c];
            T* op = out.ptr() + (n * C + c) * P;
            for (std::size_t p = 0; p < P; ++p) op[p] = sp[p] * gv;
        }
    check_finite(out, "modulate_context");
    return make_result(std::move(out), {sim, gc}, [sim, gc, N, G, C, P, cpg](const Tensor<T>& g) {
        Tensor<T> gs, ggc;
        if (sim.requires_grad()) gs = Tensor<T>::zeros(sim.shape());
        if (gc.requires_grad()) ggc = Tensor<T>::zeros(gc.shape());
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c) {
                const T* sp = sim.value().ptr() + (n * G + c / cpg) * P;
                const T* gp = g.ptr() + (n * C + c) * P;
                const T gv = gc.value()[n * C + c];
                T acc = 0;
                for (std::size_t p = 0; p < P; ++p) {
                    if (!gs.empty()) gs[(n * G + c / cpg) * P + p] += gp[p] * gv;
                    acc += gp[p] * sp[p];
                }
                if (!ggc.empty()) ggc[n * C + c] = acc;
            }
        if (!gs.empty()) sim.accumulate_grad(gs);
        if (!ggc.empty()) gc.accumulate_grad(ggc);
    });
}

// ------------------------------------------------------------------- loss

/// Mean softmax cross-entropy of logits [N,K] against integer labels.
template <Real T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const std::size_t> labels) {
    require_shape(logits.value().ndim() == 2, "cross_entropy: logits must be [N,K]");
    const std::size_t N = logits.shape()[0], K = logits.shape()[1];
    require_shape(labels.size() == N, "cross_entropy: label count mismatch");
    Tensor<T> prob({N, K});
    T loss = 0;
    const T* L = logits.value().ptr();
    for (std::size_t n = 0; n < N; ++n) {
        if (labels[n] >= K) throw ShapeError("cross_entropy: label out of range");
        T mx = L[n * K];
        for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, L[n * K + k]);
        T z = 0;
        for (std::size_t k = 0; k < K; ++k) {
            prob[n * K + k] = std::exp(L[n * K + k] - mx);
            z += prob[n * K + k];
        }
        for (std::size_t k = 0; k < K; ++k) prob[n * K + k] /= z;
        loss += -(L[n * K + labels[n]] - mx - std::log(z));
    }
    Tensor<T> out = Tensor<T>::scalar(loss / static_cast<T>(N));
    check_finite(out, "cross_entropy");
    std::vector<std::size_t> lab(labels.begin(), labels.end());
    return make_result(std::move(out), {logits},
                       [logits, N, K, prob = std::move(prob), lab = std::move(lab)](const Tensor<T>& g) {
                           Tensor<T> gl({N, K});
                           const T s = g[0] / static_cast<T>(N);
                           for (std::size_t n = 0; n < N; ++n)
                               for (std::size_t k = 0; k < K; ++k)
                                   gl[n * K + k] = s * (prob[n * K + k] - (k == lab[n] ? T(1) : T(0)));
                           logits.accumulate_grad(gl);
                       });
}

}  // namespace fcvit
