#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "grenol/adamw.hpp"
#include "grenol/autodiff.hpp"

namespace grenol {

struct GradCheckEntry {
    std::string name;
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    bool finite = true;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double tolerance = 0.0;

    double max_rel_error() const {
        double worst = 0.0;
        for (const auto& e : entries) worst = std::max(worst, e.max_rel_error);
        return worst;
    }
    bool all_finite() const {
        return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.finite; });
    }
    bool passed() const { return all_finite() && max_rel_error() < tolerance; }
};

/// Scalar function of the parameters, built fresh on the given tape each call.
using TapeFunction = std::function<Var(Tape&)>;

/// Compares tape gradients of `fn` against central differences with step `h`.
///
/// Relative error is |a − n| / max(|a|, |n|, floor); the floor keeps entries whose true
/// gradient is ~0 from dominating with rounding noise.
inline GradCheckReport grad_check(const TapeFunction& fn, const std::vector<NamedTensor>& params, double h,
                                  double tol, double floor = 1e-8) {
    for (const auto& p : params) p.tensor->zero_grad();
    {
        Tape tape;
        Var out = fn(tape);
        tape.backward(out);
    }
    auto evaluate = [&] {
        Tape tape;
        return fn(tape).value()[0];
    };

    GradCheckReport report;
    report.tolerance = tol;
    for (const auto& p : params) {
        GradCheckEntry entry{p.name};
        Tensor& t = *p.tensor;
        const std::vector<double> analytic = t.has_grad() ? t.grad() : std::vector<double>(t.size(), 0.0);
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double saved = t[i];
            t[i] = saved + h;
            const double plus = evaluate();
            t[i] = saved - h;
            const double minus = evaluate();
            t[i] = saved;
            const double numeric = (plus - minus) / (2.0 * h);
            if (!std::isfinite(numeric) || !std::isfinite(analytic[i])) {
                entry.finite = false;
                entry.max_rel_error = std::numeric_limits<double>::infinity();
                continue;
            }
            const double abs_err = std::abs(analytic[i] - numeric);
            const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
            entry.max_abs_error = std::max(entry.max_abs_error, abs_err);
            entry.max_rel_error = std::max(entry.max_rel_error, abs_err / denom);
        }
        report.entries.push_back(std::move(entry));
    }
    return report;
}

} // namespace grenol
