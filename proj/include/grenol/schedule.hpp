#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "grenol/csv.hpp"

namespace grenol {

/// How the closed-form forward process weights the noise term.
enum class DiffusionMode {
    paper,    // n_t = sqrt(ᾱ_t)·x0 + (1 − ᾱ_t)·ε
    standard, // n_t = sqrt(ᾱ_t)·x0 + sqrt(1 − ᾱ_t)·ε
};

inline const char* to_string(DiffusionMode mode) { return mode == DiffusionMode::paper ? "paper" : "standard"; }

inline DiffusionMode parse_diffusion_mode(std::string_view text) {
    if (text == "paper") return DiffusionMode::paper;
    if (text == "standard") return DiffusionMode::standard;
    throw std::invalid_argument("unknown diffusion mode '" + std::string(text) + "' (expected paper or standard)");
}

struct ScheduleParams {
    std::size_t steps = 100;    // T
    double noise_std = 0.01;    // k, multiplies the standard deviation of every Gaussian draw
    DiffusionMode mode = DiffusionMode::paper;
    double offset = 0.008;      // s in the cosine schedule
    double max_beta = 0.999;
};

/// Precomputed cosine variance schedule. Arrays are indexed by timestep: entry 0 of
/// alpha_bar is the ᾱ_0 = 1 convention, entries 1..T hold the per-step values
/// (entry 0 of betas/alphas/sigmas is unused and set to 0/1/0).
class NoiseSchedule {
public:
    NoiseSchedule() : NoiseSchedule(ScheduleParams{}) {}

    explicit NoiseSchedule(const ScheduleParams& params) : params_(params) {
        if (params.steps < 1) throw std::invalid_argument("noise schedule needs T >= 1");
        if (!(params.noise_std > 0.0) || !std::isfinite(params.noise_std)) {
            throw std::invalid_argument("noise schedule needs k > 0");
        }
        if (!(params.offset >= 0.0) || !(params.max_beta > 0.0 && params.max_beta < 1.0)) {
            throw std::invalid_argument("noise schedule: invalid cosine constants");
        }
        const std::size_t T = params.steps;
        const double s = params.offset;
        auto f = [&](double t) {
            const double c = std::cos((t / static_cast<double>(T) + s) / (1.0 + s) * std::numbers::pi / 2.0);
            return c * c;
        };
        betas_.assign(T + 1, 0.0);
        alphas_.assign(T + 1, 1.0);
        alpha_bars_.assign(T + 1, 1.0);
        sigmas_.assign(T + 1, 0.0);
        const double f0 = f(0.0);
        for (std::size_t t = 1; t <= T; ++t) {
            const double prev = f(static_cast<double>(t - 1)) / f0;
            const double cur = f(static_cast<double>(t)) / f0;
            betas_[t] = std::clamp(1.0 - cur / prev, 1e-8, params.max_beta);
            alphas_[t] = 1.0 - betas_[t];
            alpha_bars_[t] = alpha_bars_[t - 1] * alphas_[t];
            sigmas_[t] = std::sqrt(betas_[t] * (1.0 - alpha_bars_[t - 1]) / (1.0 - alpha_bars_[t]));
        }
    }

    const ScheduleParams& params() const noexcept { return params_; }
    std::size_t steps() const noexcept { return params_.steps; }
    double noise_std() const noexcept { return params_.noise_std; }
    DiffusionMode mode() const noexcept { return params_.mode; }

    double beta(std::size_t t) const { return betas_.at(check(t)); }
    double alpha(std::size_t t) const { return alphas_.at(check(t)); }
    double sigma(std::size_t t) const { return sigmas_.at(check(t)); }
    /// ᾱ_t for t in 0..T.
    double alpha_bar(std::size_t t) const { return alpha_bars_.at(t); }

    const std::vector<double>& betas() const noexcept { return betas_; }
    const std::vector<double>& alphas() const noexcept { return alphas_; }
    const std::vector<double>& alpha_bars() const noexcept { return alpha_bars_; }
    const std::vector<double>& sigmas() const noexcept { return sigmas_; }

    /// Coefficient on ε in the closed-form forward process for this schedule's mode.
    double noise_coefficient(std::size_t t) const {
        const double ab = alpha_bars_.at(check(t));
        return params_.mode == DiffusionMode::paper ? 1.0 - ab : std::sqrt(1.0 - ab);
    }

    std::size_t check(std::size_t t) const {
        if (t < 1 || t > params_.steps) {
            throw std::out_of_range("timestep " + std::to_string(t) + " outside [1, " + std::to_string(params_.steps) +
                                    "]");
        }
        return t;
    }

private:
    ScheduleParams params_;
    std::vector<double> betas_;
    std::vector<double> alphas_;
    std::vector<double> alpha_bars_;
    std::vector<double> sigmas_;
};

inline NoiseSchedule cosine_schedule(std::size_t steps, double noise_std, DiffusionMode mode = DiffusionMode::paper) {
    ScheduleParams p;
    p.steps = steps;
    p.noise_std = noise_std;
    p.mode = mode;
    return NoiseSchedule(p);
}

/// Writes `t,beta,alpha,alpha_bar,sigma` rows for t = 1..T.
inline void write_schedule_csv(const NoiseSchedule& schedule, std::ostream& out) {
    out << "t,beta,alpha,alpha_bar,sigma\n";
    for (std::size_t t = 1; t <= schedule.steps(); ++t) {
        out << t << ',' << csv::format_double(schedule.beta(t)) << ',' << csv::format_double(schedule.alpha(t)) << ','
            << csv::format_double(schedule.alpha_bar(t)) << ',' << csv::format_double(schedule.sigma(t)) << '\n';
    }
}

/// I.i.d. N(0, k²) draws.
template <typename Rng>
std::vector<double> sample_noise(Rng& rng, std::size_t n, double noise_std) {
    std::normal_distribution<double> normal(0.0, noise_std);
    std::vector<double> out(n);
    for (double& v : out) v = normal(rng);
    return out;
}

struct NoisyNodes {
    std::vector<double> values;
    std::size_t t = 0;
    std::vector<double> noise;
};

inline NoisyNodes forward_diffuse(std::span<const double> x0, std::size_t t, std::span<const double> noise,
                                  const NoiseSchedule& schedule) {
    if (x0.size() != noise.size()) throw std::invalid_argument("forward_diffuse: x0 and noise lengths differ");
    const double signal = std::sqrt(schedule.alpha_bar(schedule.check(t)));
    const double coef = schedule.noise_coefficient(t);
    NoisyNodes out{std::vector<double>(x0.size()), t, std::vector<double>(noise.begin(), noise.end())};
    for (std::size_t i = 0; i < x0.size(); ++i) out.values[i] = signal * x0[i] + coef * noise[i];
    return out;
}

} // namespace grenol
