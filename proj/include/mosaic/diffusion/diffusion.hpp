#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mosaic/dataset/dataset.hpp"
#include "mosaic/error.hpp"
#include "mosaic/model/model.hpp"
#include "mosaic/numerics/ops.hpp"
#include "mosaic/numerics/prng.hpp"
#include "mosaic/numerics/tensor.hpp"

namespace mosaic::diffusion {

/// Reverse-process noise scale. `beta`: sigma_t^2 = beta_t. `posterior`:
/// sigma_t^2 = beta_t (1 - abar_{t-1}) / (1 - abar_t).
enum class SigmaRule { beta, posterior };

struct DiffusionConfig {
    std::size_t timesteps = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    SigmaRule sigma = SigmaRule::beta;
};

/// beta, alpha and alpha_bar for t = 1..T (stored at index t-1).
class NoiseSchedule {
public:
    NoiseSchedule() = default;
    explicit NoiseSchedule(std::vector<double> beta) : beta_(std::move(beta)) {
        require(!beta_.empty(), "NoiseSchedule: empty");
        alpha_.resize(beta_.size());
        alpha_bar_.resize(beta_.size());
        double prod = 1.0;
        for (std::size_t i = 0; i < beta_.size(); ++i) {
            require(beta_[i] > 0.0 && beta_[i] < 1.0, "NoiseSchedule: beta must lie in (0,1)");
            alpha_[i] = 1.0 - beta_[i];
            prod *= alpha_[i];
            alpha_bar_[i] = prod;
        }
    }

    std::size_t steps() const { return beta_.size(); }
    double beta(std::size_t t) const { return beta_[index(t)]; }
    double alpha(std::size_t t) const { return alpha_[index(t)]; }
    double alpha_bar(std::size_t t) const { return alpha_bar_[index(t)]; }
    /// abar_0 = 1.
    double alpha_bar_prev(std::size_t t) const { return t == 1 ? 1.0 : alpha_bar(t - 1); }

    double sigma(std::size_t t, SigmaRule rule) const {
        if (rule == SigmaRule::beta) return std::sqrt(beta(t));
        return std::sqrt(beta(t) * (1.0 - alpha_bar_prev(t)) / (1.0 - alpha_bar(t)));
    }

private:
    std::size_t index(std::size_t t) const {
        if (t < 1 || t > beta_.size())
            throw ContractViolation("timestep " + std::to_string(t) + " outside [1, " + std::to_string(beta_.size()) + "]");
        return t - 1;
    }

    std::vector<double> beta_, alpha_, alpha_bar_;
};

/// beta_t interpolates linearly from beta_start (t=1) to beta_end (t=T).
inline NoiseSchedule linear_schedule(const DiffusionConfig& cfg) {
    require(cfg.timesteps >= 1, "linear_schedule: need at least one step");
    require(cfg.beta_start > 0.0 && cfg.beta_start < cfg.beta_end && cfg.beta_end < 1.0,
            "linear_schedule: need 0 < beta_start < beta_end < 1");
    std::vector<double> beta(cfg.timesteps);
    const double span = cfg.timesteps > 1 ? static_cast<double>(cfg.timesteps - 1) : 1.0;
    for (std::size_t i = 0; i < cfg.timesteps; ++i)
        beta[i] = cfg.beta_start + (cfg.beta_end - cfg.beta_start) * static_cast<double>(i) / span;
    return NoiseSchedule(std::move(beta));
}

// ---------------------------------------------------------------------------
// Image <-> tensor

/// [N,3,4,4] tensor in the diffusion domain [-1,1] (x -> 2x - 1).
template <typename T = float>
Tensor<T> to_tensor(std::span<const dataset::ImageSample> images) {
    Tensor<T> t({images.size(), dataset::kChannels, dataset::kSide, dataset::kSide});
    for (std::size_t i = 0; i < images.size(); ++i)
        for (std::size_t j = 0; j < dataset::kImageValues; ++j)
            t[i * dataset::kImageValues + j] = static_cast<T>(2.0 * images[i].pixels[j] - 1.0);
    return t;
}

/// Clamps to [-1,1] and maps to [0,1].
template <typename T>
dataset::ImageSample to_image(std::span<const T> values) {
    require(values.size() == dataset::kImageValues, "to_image: expected 48 values");
    dataset::ImageSample img;
    for (std::size_t j = 0; j < dataset::kImageValues; ++j) {
        const double v = std::clamp(static_cast<double>(values[j]), -1.0, 1.0);
        img.pixels[j] = static_cast<float>((v + 1.0) / 2.0);
    }
    return img;
}

// ---------------------------------------------------------------------------
// Forward process

/// sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, with one timestep per leading
/// (batch) element.
template <typename T>
Tensor<T> q_sample(const Tensor<T>& x0, std::span<const std::size_t> t, const Tensor<T>& eps,
                   const NoiseSchedule& sched) {
    require(x0.shape() == eps.shape(), "q_sample: x0 and eps shapes differ");
    const bool single = x0.rank() == 3;
    const std::size_t batch = single ? 1 : x0.dim(0);
    require(t.size() == batch, "q_sample: one timestep per batch element required");
    const std::size_t per = x0.numel() / batch;
    Tensor<T> out(x0.shape());
    for (std::size_t b = 0; b < batch; ++b) {
        const double ab = sched.alpha_bar(t[b]);
        const T a = static_cast<T>(std::sqrt(ab)), s = static_cast<T>(std::sqrt(1.0 - ab));
        for (std::size_t j = 0; j < per; ++j) out[b * per + j] = a * x0[b * per + j] + s * eps[b * per + j];
    }
    return out;
}

template <typename T>
Tensor<T> q_sample(const Tensor<T>& x0, std::size_t t, const Tensor<T>& eps, const NoiseSchedule& sched) {
    std::vector<std::size_t> ts(x0.rank() == 3 ? 1 : x0.dim(0), t);
    return q_sample(x0, std::span<const std::size_t>(ts), eps, sched);
}

template <typename T>
Tensor<T> standard_normal(Shape shape, Prng& rng) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(rng.normal());
    return t;
}

/// Weighted denoising loss for a batch [B,3,4,4] in [-1,1]:
///   mean_b (1 - abar_{t_b}) * mean((eps_hat - eps)^2)
/// with t_b ~ U{1..T} and eps ~ N(0, I) drawn per element from `rng`
/// (t first, then the 48 noise values). `predictor(x_t, timesteps, rng)`
/// returns eps_hat.
template <typename T, typename Predictor>
Tensor<T> training_loss(Predictor&& predictor, const Tensor<T>& batch, const NoiseSchedule& sched, Prng& rng) {
    require(batch.rank() == 4, "training_loss: expected [B,3,4,4] batch");
    const std::size_t B = batch.dim(0), per = batch.numel() / B;
    std::vector<std::size_t> ts(B);
    std::vector<T> weight(B);
    Tensor<T> eps(batch.shape());
    for (std::size_t b = 0; b < B; ++b) {
        ts[b] = 1 + static_cast<std::size_t>(rng.uniform_int(sched.steps()));
        weight[b] = static_cast<T>(1.0 - sched.alpha_bar(ts[b]));
        for (std::size_t j = 0; j < per; ++j) eps[b * per + j] = static_cast<T>(rng.normal());
    }
    Tensor<T> x_t = q_sample(batch.detach(), std::span<const std::size_t>(ts), eps, sched);
    Tensor<T> pred = predictor(x_t, std::span<const std::size_t>(ts), rng);
    return ops::weighted_mse(pred, eps, std::span<const T>(weight));
}

template <typename T>
Tensor<T> training_loss(const model::ModelParams<T>& params, const model::ModelConfig& cfg, const Tensor<T>& batch,
                        const NoiseSchedule& sched, Prng& rng) {
    return training_loss<T>(
        [&](const Tensor<T>& x_t, std::span<const std::size_t> ts, Prng& r) {
            return model::predict_noise(params, cfg, x_t, ts, &r);
        },
        batch, sched, rng);
}

// ---------------------------------------------------------------------------
// Ancestral sampling

struct SamplerOptions {
    SigmaRule sigma = SigmaRule::beta;
    /// Images denoised together; results do not depend on it.
    std::size_t batch = 500;
    /// Global index of the first image, selecting its noise stream.
    std::uint64_t first_index = 0;
};

/// DDPM reverse process driven by `eps_fn(x_t [B,3,4,4], t) -> eps_hat`:
///   x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) eps_hat) / sqrt(alpha_t) + sigma_t z
/// with z = 0 at t = 1. Image i draws x_T and every z from its own stream
/// derive_seed(seed, first_index + i). The final state is clamped to [-1,1]
/// and mapped to [0,1].
template <typename T, typename EpsFn>
std::vector<dataset::ImageSample> sample_with(EpsFn&& eps_fn, const NoiseSchedule& sched, std::size_t n,
                                              std::uint64_t seed, const SamplerOptions& opt = {}) {
    constexpr std::size_t per = dataset::kImageValues;
    std::vector<dataset::ImageSample> out;
    out.reserve(n);
    const std::size_t chunk = std::max<std::size_t>(1, opt.batch);
    for (std::size_t start = 0; start < n; start += chunk) {
        const std::size_t B = std::min(chunk, n - start);
        std::vector<Prng> streams;
        streams.reserve(B);
        Tensor<T> x({B, dataset::kChannels, dataset::kSide, dataset::kSide});
        for (std::size_t b = 0; b < B; ++b) {
            streams.emplace_back(derive_seed(seed, opt.first_index + start + b));
            for (std::size_t j = 0; j < per; ++j) x[b * per + j] = static_cast<T>(streams[b].normal());
        }
        for (std::size_t t = sched.steps(); t >= 1; --t) {
            Tensor<T> eps = eps_fn(x, t);
            require(eps.numel() == x.numel(), "sampler: predictor returned wrong shape");
            const double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alpha(t));
            const double coef = sched.beta(t) / std::sqrt(1.0 - sched.alpha_bar(t));
            const double sigma = t > 1 ? sched.sigma(t, opt.sigma) : 0.0;
            Tensor<T> next(x.shape());
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t j = 0; j < per; ++j) {
                    const std::size_t i = b * per + j;
                    double v = inv_sqrt_alpha * (static_cast<double>(x[i]) - coef * static_cast<double>(eps[i]));
                    if (t > 1) v += sigma * streams[b].normal();
                    next[i] = static_cast<T>(v);
                }
            if (!all_finite(next)) throw NumericError("sampler: non-finite state at step t=" + std::to_string(t));
            x = next;
        }
        for (std::size_t b = 0; b < B; ++b)
            out.push_back(to_image<T>(std::span<const T>(x.data().data() + b * per, per)));
    }
    return out;
}

/// Samples `n` images from a trained noise predictor.
template <typename T>
std::vector<dataset::ImageSample> ddpm_sample(const model::ModelParams<T>& params, const model::ModelConfig& cfg,
                                              const NoiseSchedule& sched, std::size_t n, std::uint64_t seed,
                                              const SamplerOptions& opt = {}) {
    NoGradGuard no_grad;
    std::vector<std::size_t> ts;
    const bool noisy_top1 = cfg.kind == model::BackboneKind::cnn_top1_attn && cfg.attention.gumbel_noise_at_sampling;
    Prng gumbel(derive_seed(seed, 0x6761756d62656cULL + opt.first_index));
    return sample_with<T>(
        [&](const Tensor<T>& x, std::size_t t) {
            ts.assign(x.dim(0), t);
            return model::predict_noise(params, cfg, x, std::span<const std::size_t>(ts), noisy_top1 ? &gumbel : nullptr);
        },
        sched, n, seed, opt);
}

}  // namespace mosaic::diffusion
