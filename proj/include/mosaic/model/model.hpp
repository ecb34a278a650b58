#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mosaic/error.hpp"
#include "mosaic/numerics/ops.hpp"
#include "mosaic/numerics/prng.hpp"
#include "mosaic/numerics/tensor.hpp"

namespace mosaic::model {

enum class BackboneKind : std::uint8_t {
    cnn = 0,
    cnn_full_attn = 1,
    cnn_identity_attn = 2,
    cnn_top1_attn = 3,
};

inline constexpr BackboneKind kAllKinds[] = {BackboneKind::cnn, BackboneKind::cnn_full_attn,
                                             BackboneKind::cnn_identity_attn, BackboneKind::cnn_top1_attn};

constexpr std::string_view kind_name(BackboneKind k) {
    switch (k) {
        case BackboneKind::cnn: return "cnn";
        case BackboneKind::cnn_full_attn: return "cnn_full_attn";
        case BackboneKind::cnn_identity_attn: return "cnn_identity_attn";
        case BackboneKind::cnn_top1_attn: return "cnn_top1_attn";
    }
    return "?";
}

inline BackboneKind parse_kind(std::string_view s) {
    for (auto k : kAllKinds)
        if (kind_name(k) == s) return k;
    throw ContractViolation("unknown backbone kind '" + std::string(s) +
                            "' (expected cnn, cnn_full_attn, cnn_identity_attn or cnn_top1_attn)");
}

constexpr bool has_attention(BackboneKind k) { return k != BackboneKind::cnn; }
constexpr bool has_learnable_attention(BackboneKind k) {
    return k == BackboneKind::cnn_full_attn || k == BackboneKind::cnn_top1_attn;
}

inline constexpr std::size_t kHidden = 32;
inline constexpr std::size_t kImageChannels = 3;

struct AttentionConfig {
    /// Logit scale. nullopt picks 1/sqrt(d) for learnable projections and 1
    /// for identity attention.
    std::optional<double> scale;
    bool residual = true;
    double gumbel_temperature = 1.0;
    bool gumbel_hard = true;
    /// Keep Gumbel noise in top-1 selection at sampling time. Off means the
    /// sampler uses the noiseless argmax.
    bool gumbel_noise_at_sampling = false;
};

struct ModelConfig {
    BackboneKind kind = BackboneKind::cnn_full_attn;
    AttentionConfig attention;
    /// Learned per-timestep channel bias on the hidden layer.
    bool time_bias = false;
    /// Rows of the time-bias table (the diffusion step count).
    std::size_t timesteps = 1000;
};

inline double attention_scale(const ModelConfig& cfg) {
    require(has_attention(cfg.kind), "attention_scale: kind has no attention");
    if (cfg.attention.scale) {
        require(*cfg.attention.scale > 0.0, "attention scale must be positive");
        return *cfg.attention.scale;
    }
    return cfg.kind == BackboneKind::cnn_identity_attn ? 1.0 : 1.0 / std::sqrt(static_cast<double>(kHidden));
}

/// Learnable weights of one backbone. Tensors absent for a kind are left
/// undefined.
template <typename T>
struct ModelParams {
    BackboneKind kind = BackboneKind::cnn;
    Tensor<T> conv_w;    // [32,3,2,2]
    Tensor<T> conv_b;    // [32]
    Tensor<T> deconv_w;  // [32,3,2,2]
    Tensor<T> deconv_b;  // [3]
    Tensor<T> wq, wk, wv;  // [32,32], learnable attention kinds only
    Tensor<T> time_bias;   // [T,32], optional

    /// Defined tensors in a fixed order: the canonical ordering for
    /// checkpoints, optimizer state and EMA.
    std::vector<std::pair<std::string, Tensor<T>>> named() const {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        auto push = [&](const char* name, const Tensor<T>& t) {
            if (t.defined()) out.emplace_back(name, t);
        };
        push("conv.weight", conv_w);
        push("conv.bias", conv_b);
        push("deconv.weight", deconv_w);
        push("deconv.bias", deconv_b);
        push("attn.wq", wq);
        push("attn.wk", wk);
        push("attn.wv", wv);
        push("time_bias", time_bias);
        return out;
    }

    std::vector<Tensor<T>> tensors() const {
        std::vector<Tensor<T>> out;
        for (auto& [_, t] : named()) out.push_back(t);
        return out;
    }

    Tensor<T>* find(std::string_view name) {
        if (name == "conv.weight") return &conv_w;
        if (name == "conv.bias") return &conv_b;
        if (name == "deconv.weight") return &deconv_w;
        if (name == "deconv.bias") return &deconv_b;
        if (name == "attn.wq") return &wq;
        if (name == "attn.wk") return &wk;
        if (name == "attn.wv") return &wv;
        if (name == "time_bias") return &time_bias;
        return nullptr;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (auto& [_, t] : named()) n += t.numel();
        return n;
    }

    /// Deep copy with fresh leaves that require gradients.
    ModelParams clone() const {
        ModelParams out;
        out.kind = kind;
        for (auto& [name, t] : named()) *out.find(name) = t.detach().set_requires_grad(true);
        return out;
    }

    template <typename U>
    ModelParams<U> cast() const {
        ModelParams<U> out;
        out.kind = kind;
        for (auto& [name, t] : named()) *out.find(name) = mosaic::cast<U>(t).set_requires_grad(true);
        return out;
    }
};

namespace detail {
template <typename T>
Tensor<T> uniform_tensor(Shape shape, double bound, Prng& rng) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>((2.0 * rng.uniform() - 1.0) * bound);
    t.set_requires_grad(true);
    return t;
}
}  // namespace detail

/// Convolution kernels: U(-b, b) with b = sqrt(1 / fan_in), fan_in = dim(1)*2*2
/// (the framework convention for both conv and transposed conv). Attention
/// projections: Xavier uniform, b = sqrt(6 / (fan_in + fan_out)). Biases and
/// the time-bias table start at zero.
template <typename T = float>
ModelParams<T> init_model(const ModelConfig& cfg, std::uint64_t seed) {
    Prng rng(seed);
    ModelParams<T> p;
    p.kind = cfg.kind;
    const double conv_bound = std::sqrt(1.0 / static_cast<double>(kImageChannels * 4));
    p.conv_w = detail::uniform_tensor<T>({kHidden, kImageChannels, 2, 2}, conv_bound, rng);
    p.conv_b = Tensor<T>({kHidden}).set_requires_grad(true);
    p.deconv_w = detail::uniform_tensor<T>({kHidden, kImageChannels, 2, 2}, conv_bound, rng);
    p.deconv_b = Tensor<T>({kImageChannels}).set_requires_grad(true);
    if (has_learnable_attention(cfg.kind)) {
        const double xavier = std::sqrt(6.0 / static_cast<double>(2 * kHidden));
        p.wq = detail::uniform_tensor<T>({kHidden, kHidden}, xavier, rng);
        p.wk = detail::uniform_tensor<T>({kHidden, kHidden}, xavier, rng);
        p.wv = detail::uniform_tensor<T>({kHidden, kHidden}, xavier, rng);
    }
    if (cfg.time_bias) p.time_bias = Tensor<T>({cfg.timesteps, kHidden}).set_requires_grad(true);
    return p;
}

template <typename T = float>
ModelParams<T> init_model(BackboneKind kind, std::uint64_t seed) {
    ModelConfig cfg;
    cfg.kind = kind;
    return init_model<T>(cfg, seed);
}

/// Attention over tokens [B, n, 32] for the attention-bearing kinds.
///   full:     residual + softmax(QK^T / sqrt(d)) V with learned projections
///   identity: residual + softmax(Z Z^T) Z
///   top1:     residual + onehot(argmax of Gumbel-perturbed QK^T / sqrt(d)) V,
///             straight-through gradients of the soft sample
/// `rng` feeds the Gumbel noise; nullptr selects the noiseless argmax.
template <typename T>
Tensor<T> attention_block(const Tensor<T>& tokens, const ModelParams<T>& params, const ModelConfig& cfg,
                          Prng* rng) {
    require(has_attention(cfg.kind), "attention_block called for a kind without attention");
    require(params.kind == cfg.kind, "attention_block: parameter kind does not match config");
    const T s = static_cast<T>(attention_scale(cfg));
    switch (cfg.kind) {
        case BackboneKind::cnn_full_attn:
            return ops::scaled_dot_attention(tokens, params.wq, params.wk, params.wv, s, cfg.attention.residual);
        case BackboneKind::cnn_identity_attn: {
            auto alpha = ops::softmax(ops::scale(ops::bmm_nt(tokens, tokens), s));
            auto mixed = ops::bmm(alpha, tokens);
            return cfg.attention.residual ? ops::add(tokens, mixed) : mixed;
        }
        case BackboneKind::cnn_top1_attn: {
            auto q = ops::matmul(tokens, params.wq);
            auto k = ops::matmul(tokens, params.wk);
            auto v = ops::matmul(tokens, params.wv);
            auto alpha = ops::gumbel_softmax(ops::scale(ops::bmm_nt(q, k), s),
                                             static_cast<T>(cfg.attention.gumbel_temperature), cfg.attention.gumbel_hard,
                                             rng);
            auto mixed = ops::bmm(alpha, v);
            return cfg.attention.residual ? ops::add(tokens, mixed) : mixed;
        }
        case BackboneKind::cnn: break;
    }
    throw ContractViolation("attention_block: unreachable kind");
}

namespace detail {
template <typename T>
void check_finite(const Tensor<T>& t, const char* layer) {
    if (!all_finite(t)) throw NumericError(std::string("predict_noise: non-finite activations after ") + layer);
}
}  // namespace detail

/// Noise prediction for x_t [B,3,4,4] (or [3,4,4]):
///   conv2x2_s2 -> (+ time bias) -> ReLU -> attention over the 2x2 grid of
///   hidden cells (kind-dependent) -> deconv2x2_s2.
/// `timesteps` (1-based, one per batch element) is only read when the
/// time-bias table is present.
template <typename T>
Tensor<T> predict_noise(const ModelParams<T>& params, const ModelConfig& cfg, const Tensor<T>& x_t,
                        std::span<const std::size_t> timesteps, Prng* rng = nullptr) {
    require(params.kind == cfg.kind, "predict_noise: parameter kind does not match config");
    const bool single = x_t.rank() == 3;
    Tensor<T> x = single ? x_t.reshape({1, x_t.dim(0), x_t.dim(1), x_t.dim(2)}) : x_t;
    require(x.rank() == 4 && x.dim(1) == kImageChannels, "predict_noise: expected [B,3,H,W] input");
    Tensor<T> h = ops::conv2x2_s2(x, params.conv_w, params.conv_b);
    if (params.time_bias.defined()) {
        require(timesteps.size() == x.dim(0), "predict_noise: one timestep per batch element required");
        std::vector<std::size_t> rows;
        rows.reserve(timesteps.size());
        for (auto t : timesteps) {
            require(t >= 1 && t <= params.time_bias.dim(0), "predict_noise: timestep out of range");
            rows.push_back(t - 1);
        }
        h = ops::add_row_bias(h, params.time_bias, std::move(rows));
    }
    h = ops::relu(h);
    detail::check_finite(h, "conv");
    if (has_attention(cfg.kind)) {
        const std::size_t gh = h.dim(2), gw = h.dim(3);
        h = ops::from_tokens(attention_block(ops::to_tokens(h), params, cfg, rng), gh, gw);
        detail::check_finite(h, "attention");
    }
    Tensor<T> out = ops::deconv2x2_s2(h, params.deconv_w, params.deconv_b);
    detail::check_finite(out, "deconv");
    return single ? out.reshape({x_t.dim(0), x_t.dim(1), x_t.dim(2)}) : out;
}

}  // namespace mosaic::model
