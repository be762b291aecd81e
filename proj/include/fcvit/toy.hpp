#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fcvit/model.hpp"
#include "fcvit/random.hpp"

namespace fcvit {

// ---------------------------------------------------------------- dataset

enum class ToyPattern : std::size_t { horizontal_stripes = 0, vertical_stripes = 1, centered_disk = 2, checkerboard = 3 };

struct ToyDatasetSpec {
    std::size_t classes = 4;
    std::size_t image_size = 32;
    std::size_t samples_per_class = 128;
    std::uint64_t seed = 0;
    double noise = 0.1;
};

/// Per-image variation of a pattern.
struct PatternParams {
    std::size_t period = 8;  // stripe period / checker cell size, pixels
    std::size_t phase = 0;
    double radius = 8.0;
    std::array<double, 3> color{1.0, 1.0, 1.0};
};

/// Noise-free [3, S, S] rendering: `color` on the pattern, 0 elsewhere.
inline Tensor<double> render_pattern(ToyPattern pat, const PatternParams& p, std::size_t size) {
    Tensor<double> img({3, size, size});
    const double c = (static_cast<double>(size) - 1.0) / 2.0;
    for (std::size_t i = 0; i < size; ++i)
        for (std::size_t j = 0; j < size; ++j) {
            bool on = false;
            switch (pat) {
                case ToyPattern::horizontal_stripes: on = ((i + p.phase) % p.period) < p.period / 2; break;
                case ToyPattern::vertical_stripes: on = ((j + p.phase) % p.period) < p.period / 2; break;
                case ToyPattern::centered_disk: {
                    const double di = static_cast<double>(i) - c, dj = static_cast<double>(j) - c;
                    on = di * di + dj * dj <= p.radius * p.radius;
                    break;
                }
                case ToyPattern::checkerboard:
                    on = (((i + p.phase) / p.period) + ((j + p.phase) / p.period)) % 2 == 0;
                    break;
            }
            if (!on) continue;
            for (std::size_t ch = 0; ch < 3; ++ch) img[(ch * size + i) * size + j] = p.color[ch];
        }
    return img;
}

template <Real T>
struct ToyDataset {
    Tensor<T> images;  // [N, 3, S, S]
    std::vector<std::size_t> labels;
};

/// Class-balanced synthetic set; sample i has label i % classes.
template <Real T>
ToyDataset<T> gen_toy_dataset(const ToyDatasetSpec& spec) {
    if (spec.classes == 0 || spec.classes > 4) throw ConfigError("toy dataset: classes must be in [1, 4]");
    if (spec.image_size < 8 || spec.samples_per_class == 0) throw ConfigError("toy dataset: invalid size");
    Rng rng(spec.seed);
    const std::size_t N = spec.classes * spec.samples_per_class, S = spec.image_size;
    ToyDataset<T> ds;
    ds.images = Tensor<T>({N, 3, S, S});
    ds.labels.resize(N);
    static constexpr std::array<std::size_t, 3> kPeriods{4, 6, 8};
    for (std::size_t n = 0; n < N; ++n) {
        const std::size_t label = n % spec.classes;
        PatternParams p;
        p.period = kPeriods[rng.index(kPeriods.size())];
        p.phase = rng.index(p.period);
        p.radius = rng.uniform(0.2, 0.38) * static_cast<double>(S);
        for (auto& c : p.color) c = rng.uniform(0.5, 1.0);
        Tensor<double> img = render_pattern(static_cast<ToyPattern>(label), p, S);
        T* dst = ds.images.ptr() + n * 3 * S * S;
        for (std::size_t k = 0; k < img.numel(); ++k) dst[k] = static_cast<T>(img[k] + spec.noise * rng.normal());
        ds.labels[n] = label;
    }
    return ds;
}

// -------------------------------------------------------------- optimizer

struct AdamWOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.05;
};

/// Decoupled weight decay Adam. Decay applies to matrices and kernels
/// (rank >= 2); norms, biases and the similarity scalars are not decayed.
template <Real T>
class AdamW {
public:
    AdamW(std::vector<Var<T>> params, AdamWOptions opt) : params_(std::move(params)), opt_(opt) {
        for (const auto& p : params_) {
            m_.emplace_back(p.shape());
            v_.emplace_back(p.shape());
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    void step(double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
        for (std::size_t k = 0; k < params_.size(); ++k) {
            auto& p = params_[k];
            auto& val = p.mutable_value();
            const auto& g = p.grad();
            const bool decay = val.ndim() >= 2;
            for (std::size_t i = 0; i < val.numel(); ++i) {
                const double gi = g[i];
                m_[k][i] = static_cast<T>(opt_.beta1 * m_[k][i] + (1.0 - opt_.beta1) * gi);
                v_[k][i] = static_cast<T>(opt_.beta2 * v_[k][i] + (1.0 - opt_.beta2) * gi * gi);
                const double mhat = m_[k][i] / bc1, vhat = v_[k][i] / bc2;
                double upd = mhat / (std::sqrt(vhat) + opt_.eps);
                if (decay) upd += opt_.weight_decay * val[i];
                val[i] = static_cast<T>(val[i] - lr * upd);
            }
        }
    }

    const AdamWOptions& options() const { return opt_; }

private:
    std::vector<Var<T>> params_;
    AdamWOptions opt_;
    std::vector<Tensor<T>> m_, v_;
    std::size_t t_ = 0;
};

/// Cosine decay from `base` at step 0 to 0 at `total`.
inline double cosine_lr(double base, std::size_t step, std::size_t total) {
    if (total == 0) return base;
    const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
    return base * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

// --------------------------------------------------------------- training

struct TrainOptions {
    std::size_t steps = 500;
    std::size_t batch_size = 64;
    double lr = 1e-3;
    double weight_decay = 0.05;
    std::uint64_t seed = 0;
    // Receives one JSON object per step.
    std::function<void(const nlohmann::json&)> on_step;
};

struct StepRecord {
    std::size_t step = 0;
    double lr = 0, loss = 0, accuracy = 0;
};

struct TrainResult {
    std::vector<StepRecord> log;
    double final_loss = 0;
    double final_accuracy = 0;  // over the whole training set after the last step
};

template <Real T>
Tensor<T> gather_images(const Tensor<T>& images, std::span<const std::size_t> idx) {
    Shape s = images.shape();
    const std::size_t per = images.numel() / s[0];
    s[0] = idx.size();
    Tensor<T> out(s);
    for (std::size_t b = 0; b < idx.size(); ++b) {
        std::copy_n(images.ptr() + idx[b] * per, per, out.ptr() + b * per);
    }
    return out;
}

template <Real T>
std::size_t count_correct(const Tensor<T>& logits, std::span<const std::size_t> labels) {
    const std::size_t K = logits.dim(1);
    std::size_t ok = 0;
    for (std::size_t n = 0; n < labels.size(); ++n) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < K; ++k) {
            if (logits[n * K + k] > logits[n * K + best]) best = k;
        }
        ok += best == labels[n];
    }
    return ok;
}

/// (mean loss, accuracy) over a dataset without recording gradients.
template <Real T>
std::pair<double, double> evaluate(const ModelParams<T>& model, const ToyDataset<T>& data, std::size_t batch = 128) {
    NoGradGuard ng;
    const std::size_t N = data.labels.size();
    double loss = 0;
    std::size_t ok = 0;
    for (std::size_t start = 0; start < N; start += batch) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(N, start + batch); ++i) idx.push_back(i);
        std::vector<std::size_t> lab;
        for (auto i : idx) lab.push_back(data.labels[i]);
        Var<T> logits = model_forward(model, Var<T>::constant(gather_images(data.images, idx)));
        loss += static_cast<double>(cross_entropy(logits, std::span<const std::size_t>(lab)).value()[0]) *
                static_cast<double>(idx.size());
        ok += count_correct(logits.value(), lab);
    }
    return {loss / static_cast<double>(N), static_cast<double>(ok) / static_cast<double>(N)};
}

/// Minibatch AdamW with cosine decay and softmax cross-entropy. Batches are
/// drawn by reshuffling each epoch; when the batch covers the whole set the
/// samples are used in order so every step sees identical input.
template <Real T>
TrainResult train_toy(ModelParams<T>& model, const ToyDataset<T>& data, const TrainOptions& opt) {
    const std::size_t N = data.labels.size();
    if (N == 0) throw ConfigError("train_toy: empty dataset");
    const std::size_t B = std::min(opt.batch_size, N);
    AdamW<T> optim(model.parameters(), {opt.lr, 0.9, 0.999, 1e-8, opt.weight_decay});
    Rng rng(opt.seed);
    std::vector<std::size_t> order(N);
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = N;

    TrainResult res;
    for (std::size_t step = 0; step < opt.steps; ++step) {
        std::vector<std::size_t> idx;
        if (B == N) {
            idx = order;
        } else {
            for (std::size_t b = 0; b < B; ++b) {
                if (cursor == N) {
                    rng.shuffle(order);
                    cursor = 0;
                }
                idx.push_back(order[cursor++]);
            }
        }
        std::vector<std::size_t> lab;
        for (auto i : idx) lab.push_back(data.labels[i]);

        const double lr = cosine_lr(opt.lr, step, opt.steps);
        StepRecord rec{step, lr, 0, 0};
        try {
            optim.zero_grad();
            Var<T> logits = model_forward(model, Var<T>::constant(gather_images(data.images, idx)));
            Var<T> loss = cross_entropy(logits, std::span<const std::size_t>(lab));
            rec.loss = loss.value()[0];
            rec.accuracy = static_cast<double>(count_correct(logits.value(), lab)) / static_cast<double>(B);
            backward(loss);
            optim.step(lr);
        } catch (const NumericError& e) {
            throw NumericError("train_toy: diverged at step " + std::to_string(step) + " (lr " + std::to_string(lr) +
                               "): " + e.what());
        }
        if (!std::isfinite(rec.loss)) throw NumericError("train_toy: non-finite loss at step " + std::to_string(step));
        res.log.push_back(rec);
        if (opt.on_step) {
            opt.on_step({{"step", rec.step}, {"lr", rec.lr}, {"loss", rec.loss}, {"accuracy", rec.accuracy}});
        }
    }
    auto [loss, acc] = evaluate(model, data);
    res.final_loss = loss;
    res.final_accuracy = acc;
    return res;
}

}  // namespace fcvit
