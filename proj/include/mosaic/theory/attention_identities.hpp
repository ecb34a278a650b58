#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "mosaic/error.hpp"

namespace mosaic::theory {

using Vec = std::vector<double>;

inline double dot(const Vec& a, const Vec& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm(const Vec& a) { return std::sqrt(dot(a, a)); }

/// softmax_y(<q, k_y>), max-subtracted.
inline Vec attention_row(const Vec& query, const std::vector<Vec>& keys) {
    require(!keys.empty(), "attention_row: no keys");
    Vec a(keys.size());
    double mx = -INFINITY;
    for (std::size_t y = 0; y < keys.size(); ++y) mx = std::max(mx, a[y] = dot(query, keys[y]));
    double z = 0.0;
    for (double& v : a) z += (v = std::exp(v - mx));
    for (double& v : a) v /= z;
    return a;
}

/// alpha[x][y] = softmax_y(<z_x, z_y>) for every query x.
inline std::vector<Vec> attention_weights(const std::vector<Vec>& tokens) {
    std::vector<Vec> alpha;
    alpha.reserve(tokens.size());
    for (const auto& q : tokens) alpha.push_back(attention_row(q, tokens));
    return alpha;
}

/// mu = sum_y alpha[y] z_y.
inline Vec weighted_mean(const Vec& alpha, const std::vector<Vec>& tokens) {
    Vec mu(tokens.front().size(), 0.0);
    for (std::size_t y = 0; y < tokens.size(); ++y)
        for (std::size_t d = 0; d < mu.size(); ++d) mu[d] += alpha[y] * tokens[y][d];
    return mu;
}

/// Per-image attention quantities: weights, weighted means and the top-1
/// partner of every token (ties to the lowest index).
struct AttentionState {
    std::vector<Vec> alpha;
    std::vector<Vec> mu;
    std::vector<std::size_t> top1;

    explicit AttentionState(const std::vector<Vec>& tokens) : alpha(attention_weights(tokens)) {
        for (std::size_t x = 0; x < tokens.size(); ++x) {
            mu.push_back(weighted_mean(alpha[x], tokens));
            std::size_t best = 0;
            for (std::size_t y = 1; y < tokens.size(); ++y)
                if (alpha[x][y] > alpha[x][best]) best = y;
            top1.push_back(best);
        }
    }
};

/// Gradient of alpha_xy with respect to the query vector z_x (keys held
/// fixed): alpha_xy (z_y - mu_x).
inline Vec attention_weight_grad(const std::vector<Vec>& tokens, std::size_t x, std::size_t y) {
    require(tokens.size() >= 2, "attention_weight_grad: need at least two tokens");
    require(x < tokens.size() && y < tokens.size(), "attention_weight_grad: index out of range");
    const Vec alpha = attention_row(tokens[x], tokens);
    const Vec mu = weighted_mean(alpha, tokens);
    Vec g(mu.size());
    for (std::size_t d = 0; d < g.size(); ++d) g[d] = alpha[y] * (tokens[y][d] - mu[d]);
    return g;
}

/// max_x || sum_y alpha_xy (z_y - mu_x) ||; zero up to rounding.
inline double cancellation_residual(const std::vector<Vec>& tokens) {
    require(!tokens.empty(), "cancellation_residual: need at least one token");
    const AttentionState st(tokens);
    double worst = 0.0;
    for (std::size_t x = 0; x < tokens.size(); ++x) {
        Vec r(tokens[x].size(), 0.0);
        for (std::size_t y = 0; y < tokens.size(); ++y)
            for (std::size_t d = 0; d < r.size(); ++d) r[d] += st.alpha[x][y] * (tokens[y][d] - st.mu[x][d]);
        worst = std::max(worst, norm(r));
    }
    return worst;
}

}  // namespace mosaic::theory
