#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "fcvit/autograd.hpp"
#include "fcvit/random.hpp"

namespace fcvit {

struct GradCheckOptions {
    std::size_t samples = 50;   // coordinates compared; all of them if fewer exist
    double step = 1e-5;         // h = step * (1 + |theta|)
    double kink_tolerance = 1e-3;
    std::uint64_t seed = 0;
};

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::size_t skipped = 0;  // coordinates rejected as sitting on a kink
};

/// Central-difference check of reverse-mode gradients of a scalar function
/// of `params`. Relative error is |analytic - numeric| / max(1, |numeric|).
///
/// A coordinate whose one-sided slopes disagree by more than
/// `kink_tolerance` sits on a non-differentiable point (a maxout tie) and is
/// replaced by another randomly drawn coordinate.
inline GradCheckResult finite_diff_check(const std::function<Var<double>()>& f, std::vector<Var<double>> params,
                                         const GradCheckOptions& opt = {}) {
    auto eval = [&]() {
        NoGradGuard ng;
        Var<double> l = f();
        if (l.numel() != 1) throw ShapeError("finite_diff_check: function must return a scalar");
        double v = l.value()[0];
        if (!std::isfinite(v)) throw NumericError("finite_diff_check: non-finite loss");
        return v;
    };

    for (auto& p : params) p.zero_grad();
    Var<double> loss = f();
    if (!std::isfinite(loss.value()[0])) throw NumericError("finite_diff_check: non-finite loss");
    backward(loss);

    std::vector<std::pair<std::size_t, std::size_t>> coords;
    for (std::size_t p = 0; p < params.size(); ++p)
        for (std::size_t i = 0; i < params[p].numel(); ++i) coords.emplace_back(p, i);
    if (coords.empty()) return {};

    Rng rng(opt.seed);
    rng.shuffle(coords);

    GradCheckResult res;
    const double f0 = eval();
    for (const auto& [p, i] : coords) {
        if (res.checked >= opt.samples) break;
        auto& val = params[p].mutable_value();
        const double theta = val[i];
        const double h = opt.step * (1.0 + std::abs(theta));
        val[i] = theta + h;
        const double fp = eval();
        val[i] = theta - h;
        const double fm = eval();
        val[i] = theta;

        const double numeric = (fp - fm) / (2.0 * h);
        const double scale = std::max(1.0, std::abs(numeric));
        if (std::abs((fp - f0) / h - (f0 - fm) / h) > opt.kink_tolerance * scale) {
            ++res.skipped;
            continue;
        }
        const double analytic = params[p].grad()[i];
        res.max_rel_error = std::max(res.max_rel_error, std::abs(analytic - numeric) / scale);
        ++res.checked;
    }
    return res;
}

}  // namespace fcvit
