#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "mosaic/error.hpp"
#include "mosaic/theory/attention_identities.hpp"

namespace mosaic::theory {

/// Largest image support that may be enumerated.
inline constexpr std::size_t kMaxEnumeration = 1'000'000;

/// A finite distribution over images made of `slots` patches drawn from a
/// fixed alphabet. Each support image is a tuple of alphabet indices.
/// `alpha_bar` is the noise level of the smoothed distribution pi_t whose
/// score the estimator is fitted to.
struct ToyDistribution {
    std::vector<Vec> alphabet;
    std::size_t slots = 0;
    std::vector<std::vector<std::size_t>> images;
    std::vector<double> prob;
    double alpha_bar = 0.5;

    std::size_t patches() const { return alphabet.size(); }
    std::size_t width() const { return alphabet.front().size(); }

    /// Arbitrary table; probabilities are renormalized.
    static ToyDistribution from_table(std::vector<Vec> alphabet, std::size_t slots,
                                      std::vector<std::vector<std::size_t>> images, std::vector<double> weights,
                                      double alpha_bar) {
        require(images.size() == weights.size(), "ToyDistribution: one weight per image");
        require(!images.empty(), "ToyDistribution: empty support");
        if (images.size() > kMaxEnumeration)
            throw ContractViolation("ToyDistribution: support of " + std::to_string(images.size()) +
                                    " images exceeds the enumeration cap of " + std::to_string(kMaxEnumeration));
        ToyDistribution d;
        d.alphabet = std::move(alphabet);
        d.slots = slots;
        d.images = std::move(images);
        d.alpha_bar = alpha_bar;
        d.validate_shape();
        double total = 0.0;
        for (double w : weights) {
            require(w >= 0.0 && std::isfinite(w), "ToyDistribution: weights must be finite and non-negative");
            total += w;
        }
        require(total > 0.0, "ToyDistribution: weights sum to zero");
        for (double& w : weights) w /= total;
        d.prob = std::move(weights);
        for (const auto& img : d.images) {
            require(img.size() == slots, "ToyDistribution: image with wrong slot count");
            for (std::size_t i : img) require(i < d.patches(), "ToyDistribution: patch index out of range");
        }
        return d;
    }

    /// Patch independence: pi(phi) = prod_x marginals[x][phi_x]. Enumerates
    /// all P^L tuples (zero-probability ones included).
    static ToyDistribution factorized(std::vector<Vec> alphabet, const std::vector<Vec>& marginals, double alpha_bar) {
        require(!alphabet.empty() && !marginals.empty(), "ToyDistribution: empty alphabet or no slots");
        const std::size_t P = alphabet.size(), L = marginals.size();
        std::size_t count = 1;
        for (std::size_t x = 0; x < L; ++x) {
            require(marginals[x].size() == P, "ToyDistribution: marginal size must equal alphabet size");
            if (count > kMaxEnumeration / P)
                throw ContractViolation("ToyDistribution: P^L = " + std::to_string(P) + "^" + std::to_string(L) +
                                        " exceeds the enumeration cap of " + std::to_string(kMaxEnumeration));
            count *= P;
        }
        std::vector<std::vector<std::size_t>> images;
        std::vector<double> weights;
        images.reserve(count);
        std::vector<std::size_t> idx(L, 0);
        for (std::size_t n = 0; n < count; ++n) {
            double w = 1.0;
            for (std::size_t x = 0; x < L; ++x) w *= marginals[x][idx[x]];
            images.push_back(idx);
            weights.push_back(w);
            for (std::size_t x = L; x-- > 0;) {
                if (++idx[x] < P) break;
                idx[x] = 0;
            }
        }
        return from_table(std::move(alphabet), L, std::move(images), std::move(weights), alpha_bar);
    }

    static ToyDistribution uniform(std::vector<Vec> alphabet, std::size_t slots, double alpha_bar) {
        const Vec m(alphabet.size(), 1.0 / static_cast<double>(alphabet.size()));
        return factorized(std::move(alphabet), std::vector<Vec>(slots, m), alpha_bar);
    }

    /// P(phi_x = Phi) per slot.
    std::vector<Vec> slot_marginals() const {
        std::vector<Vec> m(slots, Vec(patches(), 0.0));
        for (std::size_t i = 0; i < images.size(); ++i)
            for (std::size_t x = 0; x < slots; ++x) m[x][images[i][x]] += prob[i];
        return m;
    }

    /// Slot-pooled marginal (1/L) sum_x P(phi_x = Phi).
    Vec marginal() const {
        Vec m(patches(), 0.0);
        for (const auto& sm : slot_marginals())
            for (std::size_t p = 0; p < m.size(); ++p) m[p] += sm[p] / static_cast<double>(slots);
        return m;
    }

    /// Exact score of pi_t = sum_Psi pi(Psi) N(sqrt(abar) Psi, (1-abar) I) at
    /// every support image, split per slot: scores()[i][x].
    std::vector<std::vector<Vec>> scores() const {
        const double sa = std::sqrt(alpha_bar), var = 1.0 - alpha_bar;
        const std::size_t S = images.size(), d = width();
        std::vector<std::vector<Vec>> out(S, std::vector<Vec>(slots, Vec(d, 0.0)));
        std::vector<double> logw(S);
        for (std::size_t i = 0; i < S; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < S; ++j) {
                if (prob[j] <= 0.0) {
                    logw[j] = -std::numeric_limits<double>::infinity();
                    continue;
                }
                double d2 = 0.0;
                for (std::size_t x = 0; x < slots; ++x)
                    for (std::size_t k = 0; k < d; ++k) {
                        const double diff = alphabet[images[i][x]][k] - sa * alphabet[images[j][x]][k];
                        d2 += diff * diff;
                    }
                logw[j] = std::log(prob[j]) - d2 / (2.0 * var);
                mx = std::max(mx, logw[j]);
            }
            double z = 0.0;
            for (double& w : logw) z += (w = std::exp(w - mx));
            for (std::size_t j = 0; j < S; ++j) {
                if (logw[j] == 0.0) continue;
                const double w = logw[j] / z;
                for (std::size_t x = 0; x < slots; ++x)
                    for (std::size_t k = 0; k < d; ++k)
                        out[i][x][k] += w * (sa * alphabet[images[j][x]][k] - alphabet[images[i][x]][k]) / var;
            }
        }
        return out;
    }

private:
    void validate_shape() const {
        require(!alphabet.empty(), "ToyDistribution: empty alphabet");
        require(slots >= 1, "ToyDistribution: need at least one slot");
        require(alpha_bar > 0.0 && alpha_bar < 1.0, "ToyDistribution: alpha_bar must lie in (0,1)");
        for (const auto& p : alphabet) require(p.size() == alphabet.front().size() && !p.empty(), "ToyDistribution: ragged alphabet");
    }
};

/// Lookup-table estimator g: one row per alphabet patch.
struct PatchTable {
    std::vector<Vec> rows;
    bool mean_centered = false;

    PatchTable() = default;
    PatchTable(std::size_t patches, std::size_t width, bool centered = false)
        : rows(patches, Vec(width, 0.0)), mean_centered(centered) {}
    explicit PatchTable(std::vector<Vec> r, bool centered = false) : rows(std::move(r)), mean_centered(centered) {}

    std::size_t patches() const { return rows.size(); }
    std::size_t width() const { return rows.front().size(); }

    /// Projects onto sum_Phi marginal(Phi) g(Phi) = 0.
    void center(const Vec& marginal) {
        require(marginal.size() == rows.size(), "PatchTable::center: marginal size mismatch");
        double total = 0.0;
        for (double m : marginal) total += m;
        Vec mean(width(), 0.0);
        for (std::size_t p = 0; p < rows.size(); ++p)
            for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += marginal[p] * rows[p][k] / total;
        for (auto& r : rows)
            for (std::size_t k = 0; k < mean.size(); ++k) r[k] -= mean[k];
    }
};

struct ToyLossOptions {
    /// false: the estimator is g alone (purely convolutional).
    bool attention = true;
};

namespace detail {

inline void check_compatible(const PatchTable& table, const ToyDistribution& dist) {
    require(table.patches() == dist.patches(), "toy loss: table needs one row per alphabet patch");
    require(table.width() == dist.width(), "toy loss: embedding width must equal patch width");
}

/// Estimator output per slot: z_x (+ sum_y alpha_xy z_y).
inline std::vector<Vec> estimator(const std::vector<Vec>& z, const std::vector<Vec>& alpha, bool attention) {
    std::vector<Vec> out = z;
    if (!attention) return out;
    for (std::size_t x = 0; x < z.size(); ++x)
        for (std::size_t y = 0; y < z.size(); ++y)
            for (std::size_t k = 0; k < z[x].size(); ++k) out[x][k] += alpha[x][y] * z[y][k];
    return out;
}

inline std::vector<Vec> tokens(const PatchTable& table, const std::vector<std::size_t>& img) {
    std::vector<Vec> z;
    z.reserve(img.size());
    for (std::size_t i : img) z.push_back(table.rows[i]);
    return z;
}

enum class GradientForm { exact, claimed_cancellation };

inline std::vector<Vec> loss_gradient(const PatchTable& table, const ToyDistribution& dist,
                                      const std::vector<std::vector<Vec>>& scores, const ToyLossOptions& opt,
                                      GradientForm form) {
    check_compatible(table, dist);
    const std::size_t L = dist.slots, d = table.width();
    std::vector<Vec> grad(table.patches(), Vec(d, 0.0));
    for (std::size_t i = 0; i < dist.images.size(); ++i) {
        const double w = dist.prob[i];
        if (w == 0.0) continue;
        const auto& img = dist.images[i];
        const auto z = tokens(table, img);
        const auto alpha = opt.attention ? attention_weights(z) : std::vector<Vec>{};
        const auto out = estimator(z, alpha, opt.attention);
        for (std::size_t x = 0; x < L; ++x) {
            Vec r(d);
            for (std::size_t k = 0; k < d; ++k) r[k] = out[x][k] - scores[i][x][k];
            // Query-side / direct term: (I + C_x)^T r_x with
            // C_x = sum_y alpha_xy z_y (z_y - mu_x)^T.
            Vec gx = r;
            if (opt.attention) {
                const Vec mu = weighted_mean(alpha[x], z);
                if (form == GradientForm::exact)
                    for (std::size_t y = 0; y < L; ++y) {
                        const double c = alpha[x][y] * dot(z[y], r);
                        for (std::size_t k = 0; k < d; ++k) gx[k] += c * (z[y][k] - mu[k]);
                    }
                // Key/value term for every slot w:
                //   exact:   alpha_xw (I + (z_w - mu_x) z_x^T)^T r_x
                //   claimed: alpha_xw (I + z_w (z_x - mu_x)^T)^T r_x
                for (std::size_t wslot = 0; wslot < L; ++wslot) {
                    const double a = alpha[x][wslot];
                    auto& gw = grad[img[wslot]];
                    if (form == GradientForm::exact) {
                        Vec dz(d);
                        for (std::size_t k = 0; k < d; ++k) dz[k] = z[wslot][k] - mu[k];
                        const double c = a * dot(dz, r);
                        for (std::size_t k = 0; k < d; ++k) gw[k] += 2.0 * w * (a * r[k] + c * z[x][k]);
                    } else {
                        const double c = a * dot(z[wslot], r);
                        for (std::size_t k = 0; k < d; ++k) gw[k] += 2.0 * w * (a * r[k] + c * (z[x][k] - mu[k]));
                    }
                }
            }
            for (std::size_t k = 0; k < d; ++k) grad[img[x]][k] += 2.0 * w * gx[k];
        }
    }
    return grad;
}

}  // namespace detail

/// L(g) = sum_phi pi(phi) sum_x || g~[phi](x) - s[phi](x) ||^2 over the
/// support of `dist`, with s the exact score of pi_t at the support points.
inline double toy_loss(const PatchTable& table, const ToyDistribution& dist, const std::vector<std::vector<Vec>>& scores,
                       const ToyLossOptions& opt = {}) {
    detail::check_compatible(table, dist);
    double loss = 0.0;
    for (std::size_t i = 0; i < dist.images.size(); ++i) {
        if (dist.prob[i] == 0.0) continue;
        const auto z = detail::tokens(table, dist.images[i]);
        const auto out = detail::estimator(z, opt.attention ? attention_weights(z) : std::vector<Vec>{}, opt.attention);
        double l = 0.0;
        for (std::size_t x = 0; x < dist.slots; ++x)
            for (std::size_t k = 0; k < table.width(); ++k) {
                const double r = out[x][k] - scores[i][x][k];
                l += r * r;
            }
        loss += dist.prob[i] * l;
    }
    return loss;
}

inline double toy_loss(const PatchTable& table, const ToyDistribution& dist, const ToyLossOptions& opt = {}) {
    return toy_loss(table, dist, dist.scores(), opt);
}

/// dL/dg for every table row. With attention, token w receives
///   2 sum_x E[ J_xw^T r_x ],
///   J_xw = delta_xw (I + sum_y alpha_xy z_y (z_y - mu_x)^T)
///        + alpha_xw (I + (z_w - mu_x) z_x^T),
/// where r_x is the residual at slot x.
inline std::vector<Vec> functional_gradient_all(const PatchTable& table, const ToyDistribution& dist,
                                                const ToyLossOptions& opt = {}) {
    return detail::loss_gradient(table, dist, dist.scores(), opt, detail::GradientForm::exact);
}

inline Vec functional_gradient(const PatchTable& table, const ToyDistribution& dist, std::size_t target_patch,
                               const ToyLossOptions& opt = {}) {
    require(target_patch < dist.patches(), "functional_gradient: target patch out of range");
    return functional_gradient_all(table, dist, opt)[target_patch];
}

/// The same expectation after discarding the query-side covariance
/// sum_y alpha_xy z_y (z_y - mu_x)^T (on the grounds that
/// sum_y alpha_xy (z_y - mu_x) = 0) and with the key-side factor written as
/// z_w (z_x - mu_x)^T. Kept to show that it does not match the loss.
inline Vec claimed_cancellation_gradient(const PatchTable& table, const ToyDistribution& dist, std::size_t target_patch) {
    require(target_patch < dist.patches(), "claimed_cancellation_gradient: target patch out of range");
    return detail::loss_gradient(table, dist, dist.scores(), {}, detail::GradientForm::claimed_cancellation)[target_patch];
}

/// Minimizer of the attention-free loss: the pi-weighted mean of the true
/// score over every slot where Phi occurs. Rows for patches with zero mass are
/// left at zero; `weight` reports that mass.
struct PatchScore {
    std::vector<Vec> rows;
    Vec weight;
};

inline PatchScore true_patch_score(const ToyDistribution& dist) {
    const auto s = dist.scores();
    PatchScore out{std::vector<Vec>(dist.patches(), Vec(dist.width(), 0.0)), Vec(dist.patches(), 0.0)};
    for (std::size_t i = 0; i < dist.images.size(); ++i)
        for (std::size_t x = 0; x < dist.slots; ++x) {
            const std::size_t p = dist.images[i][x];
            out.weight[p] += dist.prob[i];
            for (std::size_t k = 0; k < dist.width(); ++k) out.rows[p][k] += dist.prob[i] * s[i][x][k];
        }
    for (std::size_t p = 0; p < dist.patches(); ++p)
        if (out.weight[p] > 0.0)
            for (double& v : out.rows[p]) v /= out.weight[p];
    return out;
}

struct DescentOptions {
    std::size_t max_iterations = 200000;
    /// Stop once every supported row is within this distance of its
    /// Newton target ||grad|| / (2 mass).
    double tolerance = 1e-6;
    double match_tolerance = 1e-3;
    bool mean_centered = false;
};

struct RecoveryResult {
    PatchTable table;
    PatchScore analytic;
    std::size_t iterations = 0;
    bool converged = false;
    /// Max-norm gap to the analytic per-patch score over supported rows.
    double max_abs_err = 0.0;
    bool matches = false;
};

/// Gradient descent on the attention-free enumerated loss from g = 0,
/// followed by a comparison with true_patch_score.
inline RecoveryResult recover_local_optimum(const ToyDistribution& dist, const DescentOptions& opt = {}) {
    const auto scores = dist.scores();
    RecoveryResult res;
    res.analytic = true_patch_score(dist);
    res.table = PatchTable(dist.patches(), dist.width(), opt.mean_centered);
    double max_mass = 0.0;
    for (double m : res.analytic.weight) max_mass = std::max(max_mass, m);
    const double lr = 1.0 / (2.0 * max_mass);
    const Vec marginal = dist.marginal();
    for (; res.iterations < opt.max_iterations; ++res.iterations) {
        const auto g = detail::loss_gradient(res.table, dist, scores, {false}, detail::GradientForm::exact);
        double step = 0.0;
        for (std::size_t p = 0; p < g.size(); ++p)
            if (res.analytic.weight[p] > 0.0) step = std::max(step, norm(g[p]) / (2.0 * res.analytic.weight[p]));
        if (step < opt.tolerance) {
            res.converged = true;
            break;
        }
        for (std::size_t p = 0; p < g.size(); ++p)
            for (std::size_t k = 0; k < g[p].size(); ++k) res.table.rows[p][k] -= lr * g[p][k];
        if (opt.mean_centered) res.table.center(marginal);
    }
    for (std::size_t p = 0; p < dist.patches(); ++p) {
        if (res.analytic.weight[p] <= 0.0) continue;
        for (std::size_t k = 0; k < dist.width(); ++k)
            res.max_abs_err = std::max(res.max_abs_err, std::abs(res.table.rows[p][k] - res.analytic.rows[p][k]));
    }
    res.matches = res.max_abs_err <= opt.match_tolerance;
    return res;
}

}  // namespace mosaic::theory
