#pragma once

#include "anchor/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

namespace anchor {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-8;
    double weight_decay = 0.1;
    double max_grad_norm = 1.0;  // <= 0 disables clipping
};

template <class T>
struct OptimizerState {
    AdamWConfig config;
    std::vector<std::vector<T>> first_moment;
    std::vector<std::vector<T>> second_moment;
    std::vector<bool> decay;  // per parameter: apply decoupled weight decay
    std::uint64_t step = 0;
};

template <class T>
OptimizerState<T> make_optimizer_state(std::span<const Tensor<T>> params, AdamWConfig config,
                                       std::vector<bool> decay = {}) {
    OptimizerState<T> state;
    state.config = config;
    for (const auto& p : params) {
        state.first_moment.emplace_back(p.size(), T{0});
        state.second_moment.emplace_back(p.size(), T{0});
    }
    state.decay = decay.empty() ? std::vector<bool>(params.size(), true) : std::move(decay);
    if (state.decay.size() != params.size()) {
        throw std::invalid_argument("make_optimizer_state: decay mask size mismatch");
    }
    return state;
}

struct StepReport {
    bool applied = false;
    double grad_norm = 0.0;    // before clipping
    double clip_scale = 1.0;   // factor applied to every gradient
    std::string error;
};

/// One AdamW update: global-norm clipping, then moment updates with bias
/// correction, then the step with decoupled weight decay. A non-finite
/// gradient aborts the step and leaves parameters and state untouched.
/// Parameters without a gradient are treated as having a zero gradient.
template <class T>
StepReport adamw_step(std::span<Tensor<T>> params, OptimizerState<T>& state, double lr) {
    StepReport report;
    if (state.first_moment.size() != params.size()) {
        throw std::invalid_argument("adamw_step: optimizer state built for " +
                                    std::to_string(state.first_moment.size()) + " parameters, got " +
                                    std::to_string(params.size()));
    }
    double sq = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (state.first_moment[i].size() != params[i].size()) {
            throw ShapeError("adamw_step: moment buffer shape mismatch for parameter " + std::to_string(i));
        }
        for (T g : params[i].grad()) {
            sq += static_cast<double>(g) * static_cast<double>(g);
        }
    }
    report.grad_norm = std::sqrt(sq);
    if (!std::isfinite(report.grad_norm)) {
        report.error = "non-finite gradient norm";
        return report;
    }
    const AdamWConfig& cfg = state.config;
    if (cfg.max_grad_norm > 0.0 && report.grad_norm > cfg.max_grad_norm) {
        report.clip_scale = cfg.max_grad_norm / report.grad_norm;
    }
    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    const T b1 = static_cast<T>(cfg.beta1);
    const T b2 = static_cast<T>(cfg.beta2);
    const T clip = static_cast<T>(report.clip_scale);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto values = params[i].mutable_values();
        const auto grad = params[i].grad();
        auto& m = state.first_moment[i];
        auto& v = state.second_moment[i];
        const T decay = state.decay[i] ? static_cast<T>(lr * cfg.weight_decay) : T{0};
        for (std::size_t j = 0; j < values.size(); ++j) {
            const T g = grad.empty() ? T{0} : grad[j] * clip;
            m[j] = b1 * m[j] + (T(1) - b1) * g;
            v[j] = b2 * v[j] + (T(1) - b2) * g * g;
            const T mhat = m[j] / static_cast<T>(bc1);
            const T vhat = v[j] / static_cast<T>(bc2);
            values[j] -= static_cast<T>(lr) * mhat / (std::sqrt(vhat) + static_cast<T>(cfg.eps)) + decay * values[j];
        }
    }
    report.applied = true;
    return report;
}

/// Linear warmup followed by cosine decay from the peak to zero.
struct LrSchedule {
    double peak = 1e-3;
    std::size_t warmup = 0;
    std::size_t total = 1;

    static LrSchedule with_ratio(double peak, double warmup_ratio, std::size_t total) {
        return {peak, static_cast<std::size_t>(std::floor(warmup_ratio * static_cast<double>(total))), total};
    }
};

/// Steps past the end clamp to the final value.
inline double lr_at(const LrSchedule& s, std::size_t step) {
    step = std::min(step, s.total);
    if (step < s.warmup) {
        return s.peak * static_cast<double>(step) / static_cast<double>(s.warmup);
    }
    if (s.total <= s.warmup) {
        return s.peak;
    }
    const double progress = static_cast<double>(step - s.warmup) / static_cast<double>(s.total - s.warmup);
    return std::max(0.0, s.peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

}  // namespace anchor
