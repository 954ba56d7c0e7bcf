#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "grenol/braingraph.hpp"
#include "grenol/denoiser.hpp"
#include "grenol/error.hpp"
#include "grenol/schedule.hpp"

namespace grenol {

/// Reverse-process mean: (n_t − (1 − α_t)/sqrt(1 − ᾱ_t) · ε̂) / sqrt(α_t).
inline std::vector<double> mu_theta(std::span<const double> noisy, std::size_t t, std::span<const double> eps_hat,
                                    const NoiseSchedule& schedule) {
    if (noisy.size() != eps_hat.size()) throw std::invalid_argument("mu_theta: noisy and predicted noise lengths differ");
    const double alpha = schedule.alpha(t);
    const double coef = (1.0 - alpha) / std::sqrt(1.0 - schedule.alpha_bar(t));
    const double inv_sqrt_alpha = 1.0 / std::sqrt(alpha);
    std::vector<double> mu(noisy.size());
    for (std::size_t i = 0; i < noisy.size(); ++i) mu[i] = inv_sqrt_alpha * (noisy[i] - coef * eps_hat[i]);
    return mu;
}

struct SampleTrace {
    std::vector<std::pair<std::size_t, std::vector<double>>> steps; // (t, n_t), t from T down to 1
    std::size_t denoiser_calls = 0;
};

/// One ancestral step n_t → n_{t−1} for a single subject, eval-mode batch norm.
template <typename Rng>
std::vector<double> reverse_step(ModelParams& params, std::span<const double> noisy, std::size_t t,
                                 const SourceBatch& src, const NoiseSchedule& schedule, Rng& rng,
                                 SampleTrace* trace = nullptr) {
    if (src.batch != 1) throw std::invalid_argument("reverse_step: expects a single source graph");
    schedule.check(t);
    const Tensor input({1, noisy.size()}, std::vector<double>(noisy.begin(), noisy.end()));
    const std::size_t ts[1] = {t};
    const Tensor eps_hat = predict_noise(params, input, ts, src, TrainState::evaluation());
    if (trace) ++trace->denoiser_calls;
    auto next = mu_theta(noisy, t, eps_hat.data(), schedule);
    if (t > 1) {
        const double sigma = schedule.sigma(t);
        const auto z = sample_noise(rng, next.size(), schedule.noise_std());
        for (std::size_t i = 0; i < next.size(); ++i) next[i] += sigma * z[i];
    }
    return next;
}

/// Denoises from n_T ~ N(0, k²I) down to n_0 guided by `source`, maps n_0 back to the
/// raw target metric through `scaler` (clipping to its fitted range) and rebuilds the
/// adjacency with the pairing function.
template <typename Rng>
BrainGraph sample_target(ModelParams& params, const BrainGraph& source, const NoiseSchedule& schedule,
                         const FeatureScaler& scaler, const std::string& target_metric, Rng& rng,
                         SampleTrace* trace = nullptr) {
    if (!scaler.has(target_metric)) {
        throw DataError(DataError::Kind::unknown_metric, "sample_target: no scaler fitted for '" + target_metric + "'");
    }
    const SourceGraph sg{source.scaled_nodes, source.adjacency};
    const SourceBatch src = make_source_batch(std::span<const SourceGraph>(&sg, 1));

    auto n = sample_noise(rng, source.scaled_nodes.size(), schedule.noise_std());
    for (std::size_t t = schedule.steps(); t >= 1; --t) {
        if (trace) trace->steps.emplace_back(t, n);
        n = reverse_step(params, n, t, src, schedule, rng, trace);
    }
    for (double v : n) {
        if (!std::isfinite(v)) throw NumericError("sample_target: non-finite prediction for '" + source.subject_id + "'");
    }

    BrainGraph out;
    out.subject_id = source.subject_id;
    out.hemisphere = source.hemisphere;
    out.metric_name = target_metric;
    out.nodes = scaler.inverse(target_metric, n);
    out.scaled_nodes.resize(n.size());
    for (std::size_t i = 0; i < n.size(); ++i) out.scaled_nodes[i] = std::clamp(n[i], 0.0, 1.0);
    out.adjacency = pairing_edges(out.nodes);
    return out;
}

} // namespace grenol
