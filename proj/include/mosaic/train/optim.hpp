#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <vector>

#include "mosaic/error.hpp"
#include "mosaic/model/model.hpp"
#include "mosaic/numerics/tensor.hpp"

namespace mosaic::train {

struct AdamWOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

template <typename T>
struct AdamWState {
    std::size_t step = 0;
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;
};

enum class StepStatus { applied, skipped_nonfinite_grad };

/// One AdamW update over `params` using their current gradients. Weight decay
/// is decoupled: theta *= 1 - lr * wd, then the bias-corrected Adam step. A
/// non-finite gradient anywhere skips the whole update (state untouched).
template <typename T>
StepStatus adamw_step(std::span<Tensor<T>> params, AdamWState<T>& state, double lr, const AdamWOptions& opt) {
    if (state.m.empty()) {
        for (auto& p : params) {
            state.m.emplace_back(p.numel(), T(0));
            state.v.emplace_back(p.numel(), T(0));
        }
    }
    require(state.m.size() == params.size(), "adamw_step: state does not match parameter list");
    for (auto& p : params) {
        for (T g : p.grad())
            if (!std::isfinite(g)) return StepStatus::skipped_nonfinite_grad;
    }
    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(opt.beta1, t);
    const double bc2 = 1.0 - std::pow(opt.beta2, t);
    const double step_size = lr / bc1;
    const double sqrt_bc2 = std::sqrt(bc2);
    const double decay = 1.0 - lr * opt.weight_decay;
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto data = params[k].data();
        auto grad = params[k].grad();
        auto& m = state.m[k];
        auto& v = state.v[k];
        require(m.size() == data.size(), "adamw_step: state shape mismatch");
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double g = grad[i];
            const double mi = opt.beta1 * m[i] + (1.0 - opt.beta1) * g;
            const double vi = opt.beta2 * v[i] + (1.0 - opt.beta2) * g * g;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            double theta = static_cast<double>(data[i]) * decay;
            theta -= step_size * mi / (std::sqrt(vi) / sqrt_bc2 + opt.eps);
            data[i] = static_cast<T>(theta);
        }
    }
    return StepStatus::applied;
}

struct OneCycleConfig {
    double max_lr = 1e-3;
    double warmup_fraction = 0.3;
    double div_factor = 25.0;
    double final_div_factor = 1e4;
};

/// Index of the step where the schedule peaks.
inline std::size_t onecycle_peak_step(std::size_t total_steps, const OneCycleConfig& cfg) {
    const auto warm = static_cast<long long>(std::llround(cfg.warmup_fraction * static_cast<double>(total_steps)));
    return static_cast<std::size_t>(std::clamp<long long>(warm - 1, 0, static_cast<long long>(total_steps) - 1));
}

/// Cosine ramp from max_lr/div_factor to max_lr over the warmup, then cosine
/// anneal to max_lr/final_div_factor at the last step.
inline double onecycle_lr(std::size_t step, std::size_t total_steps, const OneCycleConfig& cfg) {
    require(total_steps >= 1 && step < total_steps, "onecycle_lr: step out of range");
    const double start = cfg.max_lr / cfg.div_factor;
    const double end = cfg.max_lr / cfg.final_div_factor;
    const std::size_t peak = onecycle_peak_step(total_steps, cfg);
    auto cosine = [](double from, double to, double pct) {
        return to + (from - to) / 2.0 * (1.0 + std::cos(std::numbers::pi * pct));
    };
    if (step <= peak) {
        const double pct = peak == 0 ? 1.0 : static_cast<double>(step) / static_cast<double>(peak);
        return cosine(start, cfg.max_lr, pct);
    }
    const double pct = static_cast<double>(step - peak) / static_cast<double>(total_steps - 1 - peak);
    return cosine(cfg.max_lr, end, pct);
}

/// Exponential moving average of model parameters.
template <typename T>
struct EmaState {
    double decay = 0.9999;
    model::ModelParams<T> shadow;

    EmaState() = default;
    EmaState(const model::ModelParams<T>& params, double d) : decay(d), shadow(params.clone()) {
        // Handles alias the shadow's storage.
        for (auto t : shadow.tensors()) t.set_requires_grad(false);
    }
};

/// shadow <- decay * shadow + (1 - decay) * param, tensor by tensor.
template <typename T>
void ema_update(EmaState<T>& ema, const model::ModelParams<T>& params) {
    auto shadow = ema.shadow.named();
    auto live = params.named();
    require(shadow.size() == live.size(), "ema_update: parameter sets differ");
    for (std::size_t k = 0; k < live.size(); ++k) {
        auto& [sname, s] = shadow[k];
        const auto& [pname, p] = live[k];
        require(sname == pname && s.shape() == p.shape(), [&] { return "ema_update: shape mismatch for " + pname; });
        auto sd = s.data();
        auto pd = p.data();
        for (std::size_t i = 0; i < sd.size(); ++i)
            sd[i] = static_cast<T>(ema.decay * static_cast<double>(sd[i]) +
                                   (1.0 - ema.decay) * static_cast<double>(pd[i]));
    }
}

}  // namespace mosaic::train
