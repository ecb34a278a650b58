#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "mosaic/dataset/dataset.hpp"
#include "mosaic/diffusion/diffusion.hpp"
#include "mosaic/error.hpp"
#include "mosaic/theory/attention_identities.hpp"

namespace mosaic::theory {

inline constexpr std::size_t kPatchValues = dataset::kChannels * 4;  // 3 channels x 2x2

/// Quadrant q of a 48-value channel-major image as a 12-vector
/// (index c*4 + dr*2 + dc).
inline Vec extract_patch(std::span<const double> image, std::size_t q) {
    const auto [r0, c0] = dataset::quadrant_origin(q);
    Vec p(kPatchValues);
    for (std::size_t c = 0; c < dataset::kChannels; ++c)
        for (std::size_t dr = 0; dr < 2; ++dr)
            for (std::size_t dc = 0; dc < 2; ++dc)
                p[c * 4 + dr * 2 + dc] = image[c * dataset::kPixels + (r0 + dr) * dataset::kSide + c0 + dc];
    return p;
}

inline void insert_patch(std::span<double> image, std::size_t q, const Vec& p) {
    const auto [r0, c0] = dataset::quadrant_origin(q);
    for (std::size_t c = 0; c < dataset::kChannels; ++c)
        for (std::size_t dr = 0; dr < 2; ++dr)
            for (std::size_t dc = 0; dc < 2; ++dc)
                image[c * dataset::kPixels + (r0 + dr) * dataset::kSide + c0 + dc] = p[c * 4 + dr * 2 + dc];
}

/// Image in the model's [-1,1] domain.
inline Vec to_signed(const dataset::ImageSample& img) {
    Vec v(dataset::kImageValues);
    for (std::size_t j = 0; j < v.size(); ++j) v[j] = 2.0 * img.pixels[j] - 1.0;
    return v;
}

/// Weighted point set: each distinct value with its multiplicity.
struct WeightedSet {
    std::vector<Vec> values;
    std::vector<double> counts;

    std::size_t size() const { return values.size(); }

    void add(const Vec& v, double count = 1.0) {
        for (std::size_t i = 0; i < values.size(); ++i)
            if (values[i] == v) {
                counts[i] += count;
                return;
            }
        values.push_back(v);
        counts.push_back(count);
    }
};

/// All quadrant blocks of all training images, pooled across positions and
/// stored as distinct blocks with counts (same mixture as the full list).
inline WeightedSet patch_library(std::span<const dataset::ImageSample> images) {
    require(!images.empty(), "patch_library: empty dataset");
    WeightedSet lib;
    for (const auto& img : images) {
        const Vec v = to_signed(img);
        for (std::size_t q = 0; q < 4; ++q) lib.add(extract_patch(v, q));
    }
    return lib;
}

/// Distinct training images with counts.
inline WeightedSet image_library(std::span<const dataset::ImageSample> images) {
    require(!images.empty(), "image_library: empty dataset");
    WeightedSet lib;
    for (const auto& img : images) lib.add(to_signed(img));
    return lib;
}

namespace detail {

/// Normalized mixture responsibilities of every library point at phi, with
/// prior weights `prior` (need not sum to 1).
inline void responsibilities(std::span<const double> phi, const std::vector<Vec>& values, std::span<const double> prior,
                             double alpha_bar, std::span<double> out) {
    const double sa = std::sqrt(alpha_bar), inv2var = 1.0 / (2.0 * (1.0 - alpha_bar));
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < values.size(); ++i) {
        double d2 = 0.0;
        for (std::size_t k = 0; k < phi.size(); ++k) {
            const double d = phi[k] - sa * values[i][k];
            d2 += d * d;
        }
        out[i] = prior[i] > 0.0 ? std::log(prior[i]) - d2 * inv2var : -std::numeric_limits<double>::infinity();
        mx = std::max(mx, out[i]);
    }
    double z = 0.0;
    for (double& w : out) z += (w = std::exp(w - mx));
    for (double& w : out) w /= z;
}

/// sum_i out_i (sqrt(abar) v_i - phi) / (1 - abar) for responsibilities r.
inline void score_from(std::span<const double> phi, const std::vector<Vec>& values, std::span<const double> r,
                       double alpha_bar, std::span<double> out) {
    const double sa = std::sqrt(alpha_bar), inv_var = 1.0 / (1.0 - alpha_bar);
    for (std::size_t k = 0; k < phi.size(); ++k) out[k] = -phi[k];
    for (std::size_t i = 0; i < values.size(); ++i)
        if (r[i] != 0.0)
            for (std::size_t k = 0; k < phi.size(); ++k) out[k] += r[i] * sa * values[i][k];
    for (std::size_t k = 0; k < phi.size(); ++k) out[k] *= inv_var;
}

inline void check_mixture(std::span<const double> phi, const WeightedSet& lib, double alpha_bar) {
    require(lib.size() > 0, "mixture_score: empty library");
    require(alpha_bar > 0.0 && alpha_bar < 1.0, "mixture_score: alpha_bar must lie in (0,1)");
    for (const auto& v : lib.values) require(v.size() == phi.size(), "mixture_score: width mismatch");
}

}  // namespace detail

/// Score of the mixture sum_Psi c_Psi N(sqrt(abar) Psi, (1-abar) I) at phi:
///   sum_Psi w_Psi (sqrt(abar) Psi - phi) / (1 - abar),
///   w = softmax(log c_Psi - ||phi - sqrt(abar) Psi||^2 / (2 (1-abar))).
inline Vec mixture_score(std::span<const double> phi, const WeightedSet& lib, double alpha_bar) {
    detail::check_mixture(phi, lib, alpha_bar);
    Vec r(lib.size()), s(phi.size());
    detail::responsibilities(phi, lib.values, lib.counts, alpha_bar, r);
    detail::score_from(phi, lib.values, r, alpha_bar, s);
    return s;
}

/// log sum_Psi c_Psi N(phi; sqrt(abar) Psi, (1-abar) I). Its gradient is
/// mixture_score.
inline double log_mixture_density(std::span<const double> phi, const WeightedSet& lib, double alpha_bar) {
    detail::check_mixture(phi, lib, alpha_bar);
    const double sa = std::sqrt(alpha_bar), var = 1.0 - alpha_bar;
    const double norm_c = -0.5 * static_cast<double>(phi.size()) * std::log(2.0 * std::numbers::pi * var);
    double mx = -std::numeric_limits<double>::infinity();
    std::vector<double> terms(lib.size());
    for (std::size_t i = 0; i < lib.size(); ++i) {
        double d2 = 0.0;
        for (std::size_t k = 0; k < phi.size(); ++k) {
            const double d = phi[k] - sa * lib.values[i][k];
            d2 += d * d;
        }
        terms[i] = std::log(lib.counts[i]) - d2 / (2.0 * var);
        mx = std::max(mx, terms[i]);
    }
    double z = 0.0;
    for (double t : terms) z += std::exp(t - mx);
    return norm_c + mx + std::log(z);
}

inline Vec local_patch_score(std::span<const double> phi, const WeightedSet& patches, double alpha_bar) {
    return mixture_score(phi, patches, alpha_bar);
}

inline Vec local_patch_score(std::span<const double> phi, const WeightedSet& patches, std::size_t t,
                             const diffusion::NoiseSchedule& sched) {
    return mixture_score(phi, patches, sched.alpha_bar(t));
}

/// y*(x) = argmax over y != x of <phi_x, phi_y>, ties to the lowest index.
inline std::array<std::size_t, 4> top1_partners(const std::array<Vec, 4>& patches) {
    std::array<std::size_t, 4> out{};
    for (std::size_t x = 0; x < 4; ++x) {
        double best = -std::numeric_limits<double>::infinity();
        for (std::size_t y = 0; y < 4; ++y) {
            if (y == x) continue;
            const double s = dot(patches[x], patches[y]);
            if (s > best) {
                best = s;
                out[x] = y;
            }
        }
    }
    return out;
}

struct Top1Score {
    Vec score;  // 48 values, image layout
    std::array<std::size_t, 4> partner{};
};

namespace detail {

inline std::array<Vec, 4> quadrants(std::span<const double> image) {
    require(image.size() == dataset::kImageValues, "analytic score: expected 48 values");
    std::array<Vec, 4> phi;
    for (std::size_t q = 0; q < 4; ++q) phi[q] = extract_patch(image, q);
    return phi;
}

}  // namespace detail

/// Per quadrant: local_patch_score(phi_x) + local_patch_score(phi_{y*(x)}).
inline Top1Score top1_score(std::span<const double> image, const WeightedSet& patches, double alpha_bar) {
    const auto phi = detail::quadrants(image);
    std::array<Vec, 4> local;
    for (std::size_t q = 0; q < 4; ++q) local[q] = local_patch_score(phi[q], patches, alpha_bar);
    Top1Score out{Vec(dataset::kImageValues), top1_partners(phi)};
    for (std::size_t q = 0; q < 4; ++q) {
        Vec s = local[q];
        for (std::size_t k = 0; k < s.size(); ++k) s[k] += local[out.partner[q]][k];
        insert_patch(out.score, q, s);
    }
    return out;
}

inline Top1Score top1_score(std::span<const double> image, const WeightedSet& patches, std::size_t t,
                            const diffusion::NoiseSchedule& sched) {
    return top1_score(image, patches, sched.alpha_bar(t));
}

/// Per quadrant: the score at phi_x of the equal-weight sum of two patch
/// densities, the pooled marginal and the partner's posterior-weighted
/// mixture,
///   p(Phi) = sum_Psi [c_Psi / C + P(Psi | phi_{y*(x)})] N(Phi; sqrt(abar) Psi, (1-abar) I),
/// i.e. grad log [pi_t(phi_x = Phi) + pi_t(phi_{y*(x)} = Phi)] with the
/// second density conditioned on the current image.
inline Top1Score top1_mixture_score(std::span<const double> image, const WeightedSet& patches, double alpha_bar) {
    const auto phi = detail::quadrants(image);
    detail::check_mixture(phi[0], patches, alpha_bar);
    double total = 0.0;
    for (double c : patches.counts) total += c;
    const std::size_t n = patches.size();
    std::array<Vec, 4> post;
    for (std::size_t q = 0; q < 4; ++q) {
        post[q].resize(n);
        detail::responsibilities(phi[q], patches.values, patches.counts, alpha_bar, post[q]);
    }
    Top1Score out{Vec(dataset::kImageValues), top1_partners(phi)};
    Vec prior(n), r(n), s(kPatchValues);
    for (std::size_t q = 0; q < 4; ++q) {
        for (std::size_t i = 0; i < n; ++i) prior[i] = patches.counts[i] / total + post[out.partner[q]][i];
        detail::responsibilities(phi[q], patches.values, prior, alpha_bar, r);
        detail::score_from(phi[q], patches.values, r, alpha_bar, s);
        insert_patch(out.score, q, s);
    }
    return out;
}

/// Quadrant-wise local score over a whole image.
inline Vec local_image_score(std::span<const double> image, const WeightedSet& patches, double alpha_bar) {
    const auto phi = detail::quadrants(image);
    Vec out(dataset::kImageValues);
    for (std::size_t q = 0; q < 4; ++q) insert_patch(out, q, local_patch_score(phi[q], patches, alpha_bar));
    return out;
}

enum class AnalyticMode { local, top1, top1_mixture, dataset };

inline AnalyticMode parse_mode(const std::string& s) {
    if (s == "LOCAL" || s == "local") return AnalyticMode::local;
    if (s == "TOP1" || s == "top1") return AnalyticMode::top1;
    if (s == "TOP1_MIXTURE" || s == "top1_mixture") return AnalyticMode::top1_mixture;
    if (s == "DATASET" || s == "dataset") return AnalyticMode::dataset;
    throw ContractViolation("unknown analytic mode '" + s + "' (expected LOCAL, TOP1, TOP1_MIXTURE or DATASET)");
}

inline std::string to_string(AnalyticMode m) {
    switch (m) {
        case AnalyticMode::local: return "LOCAL";
        case AnalyticMode::top1: return "TOP1";
        case AnalyticMode::top1_mixture: return "TOP1_MIXTURE";
        case AnalyticMode::dataset: return "DATASET";
    }
    return "?";
}

struct AnalyticResult {
    std::vector<dataset::ImageSample> images;
    dataset::ConsistencyReport report;
};

/// Training-free sampler: the DDPM loop with eps_hat = -sqrt(1-abar_t) score.
/// LOCAL uses the pooled patch mixture per quadrant, TOP1 adds the attended
/// partner's local score, TOP1_MIXTURE mixes in the partner's patch density,
/// DATASET uses the exact whole-image mixture.
/// Consistency is reported as `runs` runs of n / runs samples.
inline AnalyticResult analytic_sample(AnalyticMode mode, std::span<const dataset::ImageSample> data,
                                      const diffusion::NoiseSchedule& sched, std::size_t n, std::uint64_t seed,
                                      std::size_t runs = 1, const diffusion::SamplerOptions& opt = {}) {
    require(n >= 1 && runs >= 1 && n % runs == 0, "analytic_sample: n must be a positive multiple of runs");
    const WeightedSet lib = mode == AnalyticMode::dataset ? image_library(data) : patch_library(data);
    auto eps_fn = [&](const Tensor<double>& x, std::size_t t) {
        const double ab = sched.alpha_bar(t), c = -std::sqrt(1.0 - ab);
        Tensor<double> eps(x.shape());
        constexpr std::size_t per = dataset::kImageValues;
        for (std::size_t b = 0; b < x.dim(0); ++b) {
            const std::span<const double> img(x.data().data() + b * per, per);
            Vec s;
            switch (mode) {
                case AnalyticMode::local: s = local_image_score(img, lib, ab); break;
                case AnalyticMode::top1: s = top1_score(img, lib, ab).score; break;
                case AnalyticMode::top1_mixture: s = top1_mixture_score(img, lib, ab).score; break;
                case AnalyticMode::dataset: s = mixture_score(img, lib, ab); break;
            }
            for (std::size_t j = 0; j < per; ++j) eps[b * per + j] = c * s[j];
        }
        return eps;
    };
    AnalyticResult res;
    res.images = diffusion::sample_with<double>(eps_fn, sched, n, seed, opt);
    res.report.samples_per_run = n / runs;
    for (std::size_t r = 0; r < runs; ++r) {
        std::size_t ok = 0;
        for (std::size_t i = r * res.report.samples_per_run; i < (r + 1) * res.report.samples_per_run; ++i)
            ok += dataset::is_consistent(res.images[i]);
        res.report.add_run(ok);
    }
    return res;
}

/// One-sided two-proportion z-test for p_a > p_b; returns the p-value.
inline double one_sided_p_value(std::size_t hits_a, std::size_t n_a, std::size_t hits_b, std::size_t n_b) {
    const double pa = static_cast<double>(hits_a) / static_cast<double>(n_a);
    const double pb = static_cast<double>(hits_b) / static_cast<double>(n_b);
    const double pool = static_cast<double>(hits_a + hits_b) / static_cast<double>(n_a + n_b);
    const double se = std::sqrt(pool * (1.0 - pool) * (1.0 / static_cast<double>(n_a) + 1.0 / static_cast<double>(n_b)));
    if (se == 0.0) return pa > pb ? 0.0 : 1.0;
    return 0.5 * std::erfc((pa - pb) / se / std::sqrt(2.0));
}

}  // namespace mosaic::theory
