#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "grenol/error.hpp"
#include "grenol/tensor.hpp"

namespace grenol {

struct NamedTensor {
    std::string name;
    Tensor* tensor;
};

struct AdamWConfig {
    double lr = 1e-3;
    double weight_decay = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with decoupled weight decay. Moments are bound positionally to the parameter
/// list passed on the first step; later steps must pass the same list.
class AdamW {
public:
    explicit AdamW(AdamWConfig config = {}) : config_(config) {}

    const AdamWConfig& config() const noexcept { return config_; }
    std::size_t step_count() const noexcept { return step_; }
    const std::vector<std::vector<double>>& first_moments() const noexcept { return m_; }
    const std::vector<std::vector<double>>& second_moments() const noexcept { return v_; }

    void step(const std::vector<NamedTensor>& params) {
        for (const auto& p : params) {
            if (!p.tensor->has_grad()) throw std::invalid_argument("adamw: parameter '" + p.name + "' has no gradient");
        }
        if (m_.empty()) {
            names_.reserve(params.size());
            for (const auto& p : params) {
                names_.push_back(p.name);
                m_.emplace_back(p.tensor->size(), 0.0);
                v_.emplace_back(p.tensor->size(), 0.0);
            }
        }
        if (params.size() != m_.size()) throw std::invalid_argument("adamw: parameter list changed between steps");
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (params[i].name != names_[i] || params[i].tensor->size() != m_[i].size()) {
                throw ShapeError("adamw: parameter '" + params[i].name + "' does not match optimizer state");
            }
        }

        ++step_;
        const double t = static_cast<double>(step_);
        const double bias1 = 1.0 - std::pow(config_.beta1, t);
        const double bias2 = 1.0 - std::pow(config_.beta2, t);
        const double decay = 1.0 - config_.lr * config_.weight_decay;

        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor& p = *params[i].tensor;
            const auto& g = p.grad();
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t j = 0; j < p.size(); ++j) {
                p[j] *= decay;
                m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g[j];
                v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g[j] * g[j];
                const double m_hat = m[j] / bias1;
                const double v_hat = v[j] / bias2;
                p[j] -= config_.lr * m_hat / (std::sqrt(v_hat) + config_.eps);
            }
        }
    }

private:
    AdamWConfig config_;
    std::size_t step_ = 0;
    std::vector<std::string> names_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
};

} // namespace grenol
