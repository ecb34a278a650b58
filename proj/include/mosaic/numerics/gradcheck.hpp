#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "mosaic/numerics/ops.hpp"
#include "mosaic/numerics/prng.hpp"
#include "mosaic/numerics/tensor.hpp"

namespace mosaic {

/// One line of a verification report.
struct CheckRow {
    std::string check;
    std::size_t instances = 0;
    double max_rel_err = 0.0;
    double tolerance = 0.0;
    bool pass = false;
};

/// CSV `check,instances,max_rel_err,pass`.
inline void write_check_csv(std::ostream& os, const std::vector<CheckRow>& rows) {
    os << "check,instances,max_rel_err,pass\n";
    for (const auto& r : rows) os << r.check << ',' << r.instances << ',' << r.max_rel_err << ',' << (r.pass ? 1 : 0) << '\n';
}

/// ||a - b|| / max(||a||, ||b||, floor). The floor keeps all-but-zero
/// gradients from turning rounding noise into a large relative error.
inline double relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-8) {
    double diff = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

using ScalarBuilder = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

/// Relative error between reverse-mode gradients of `build(inputs)` and
/// central finite differences (step h) over every input element.
inline double gradient_relative_error(const ScalarBuilder& build, std::vector<Tensor<double>> inputs, double h = 1e-5) {
    for (auto& t : inputs) t.set_requires_grad(true);
    grad(build(inputs));
    std::vector<double> analytic, numeric;
    for (auto& t : inputs) analytic.insert(analytic.end(), t.grad().begin(), t.grad().end());
    NoGradGuard no_grad;
    for (auto& t : inputs) {
        for (std::size_t i = 0; i < t.numel(); ++i) {
            const double saved = t[i];
            t[i] = saved + h;
            const double up = build(inputs).item();
            t[i] = saved - h;
            const double down = build(inputs).item();
            t[i] = saved;
            numeric.push_back((up - down) / (2.0 * h));
        }
    }
    return relative_error(analytic, numeric);
}

namespace detail {

inline Tensor<double> random_tensor(Shape shape, Prng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.data()) v = lo + (hi - lo) * rng.uniform();
    return t;
}

// Random values bounded away from zero, for the ReLU kink.
inline Tensor<double> random_off_zero(Shape shape, Prng& rng) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.data()) {
        const double mag = 0.05 + 0.95 * rng.uniform();
        v = rng.uniform() < 0.5 ? -mag : mag;
    }
    return t;
}

// sum(out * R) for a fixed random R probes the whole Jacobian.
inline Tensor<double> project(const Tensor<double>& out, const Tensor<double>& r) {
    return ops::sum(ops::mul(out, r));
}

}  // namespace detail

/// Finite-difference checks of every differentiable operation, `instances`
/// random cases each, in double precision.
inline std::vector<CheckRow> op_gradient_suite(std::size_t instances, std::uint64_t seed, double tolerance = 1e-6) {
    using detail::project;
    using detail::random_tensor;
    using T = Tensor<double>;
    struct Case {
        const char* name;
        std::function<std::pair<ScalarBuilder, std::vector<T>>(Prng&)> make;
    };
    const std::vector<Case> cases = {
        {"add", [](Prng& rng) {
             auto r = random_tensor({3, 5}, rng);
             return std::pair{ScalarBuilder([r](const std::vector<T>& in) { return project(ops::add(in[0], in[1]), r); }),
                              std::vector<T>{random_tensor({3, 5}, rng), random_tensor({3, 5}, rng)}};
         }},
        {"sub", [](Prng& rng) {
             auto r = random_tensor({4}, rng);
             return std::pair{ScalarBuilder([r](const std::vector<T>& in) { return project(ops::sub(in[0], in[1]), r); }),
                              std::vector<T>{random_tensor({4}, rng), random_tensor({4}, rng)}};
         }},
        {"mul", [](Prng& rng) {
             auto r = random_tensor({2, 3}, rng);
             return std::pair{ScalarBuilder([r](const std::vector<T>& in) { return project(ops::mul(in[0], in[1]), r); }),
                              std::vector<T>{random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)}};
         }},
        {"scale", [](Prng& rng) {
             auto r = random_tensor({6}, rng);
             const double c = 3.0 * rng.uniform() - 1.5;
             return std::pair{ScalarBuilder([r, c](const std::vector<T>& in) { return project(ops::scale(in[0], c), r); }),
                              std::vector<T>{random_tensor({6}, rng)}};
         }},
        {"relu", [](Prng& rng) {
             auto r = random_tensor({10}, rng);
             return std::pair{ScalarBuilder([r](const std::vector<T>& in) { return project(ops::relu(in[0]), r); }),
                              std::vector<T>{detail::random_off_zero({10}, rng)}};
         }},
        {"sum_mean", [](Prng& rng) {
             return std::pair{ScalarBuilder([](const std::vector<T>& in) {
                                  return ops::add(ops::sum(ops::mul(in[0], in[0])), ops::mean(in[0]));
                              }),
                              std::vector<T>{random_tensor({7}, rng)}};
         }},
        {"matmul", [](Prng& rng) {
             auto r = random_tensor({2, 3, 4}, rng);
             return std::pair{ScalarBuilder([r](const std::vector<T>& in) { return project(ops::matmul(in[0], in[1]), r); }),
                              std::vector<T>{random_tensor({2, 3, 5}, rng), random_tensor({5, 4}, rng)}};
         }},
        {"bmm", [](Prng& rng) {
             auto r = random_tensor({2, 3, 4}, rng);
             return std::pair{ScalarBuilder([r](const std::vector<T>& in) { return project(ops::bmm(in[0], in[1]), r); }),
                              std::vector<T>{random_tensor({2, 3, 5}, rng), random_tensor({2, 5, 4}, rng)}};
         }},
        {"bmm_nt", [](Prng& rng) {
             auto r = random_tensor({2, 3, 4}, rng);
             return std::pair{ScalarBuilder([r](const std::vector<T>& in) { return project(ops::bmm_nt(in[0], in[1]), r); }),
                              std::vector<T>{random_tensor({2, 3, 5}, rng), random_tensor({2, 4, 5}, rng)}};
         }},
        {"softmax", [](Prng& rng) {
             auto r = random_tensor({3, 5}, rng);
             return std::pair{ScalarBuilder([r](const std::vector<T>& in) { return project(ops::softmax(in[0]), r); }),
                              std::vector<T>{random_tensor({3, 5}, rng, -3.0, 3.0)}};
         }},
        {"gumbel_softmax_soft", [](Prng& rng) {
             auto r = random_tensor({2, 4}, rng);
             const double tau = 0.5 + rng.uniform();
             const std::uint64_t noise_seed = rng.next_u64();
             // Re-seeded per evaluation so every call sees the same noise.
             return std::pair{ScalarBuilder([r, tau, noise_seed](const std::vector<T>& in) {
                                  Prng noise(noise_seed);
                                  return project(ops::gumbel_softmax(in[0], tau, false, &noise), r);
                              }),
                              std::vector<T>{random_tensor({2, 4}, rng, -2.0, 2.0)}};
         }},
        {"conv2x2_s2", [](Prng& rng) {
             auto r = random_tensor({2, 4, 2, 2}, rng);
             return std::pair{
                 ScalarBuilder([r](const std::vector<T>& in) { return project(ops::conv2x2_s2(in[0], in[1], in[2]), r); }),
                 std::vector<T>{random_tensor({2, 3, 4, 4}, rng), random_tensor({4, 3, 2, 2}, rng), random_tensor({4}, rng)}};
         }},
        {"deconv2x2_s2", [](Prng& rng) {
             auto r = random_tensor({2, 3, 4, 4}, rng);
             return std::pair{
                 ScalarBuilder([r](const std::vector<T>& in) { return project(ops::deconv2x2_s2(in[0], in[1], in[2]), r); }),
                 std::vector<T>{random_tensor({2, 4, 2, 2}, rng), random_tensor({4, 3, 2, 2}, rng), random_tensor({3}, rng)}};
         }},
        {"tokens_roundtrip", [](Prng& rng) {
             auto r1 = random_tensor({2, 4, 3}, rng);
             auto r2 = random_tensor({2, 3, 2, 2}, rng);
             return std::pair{ScalarBuilder([r1, r2](const std::vector<T>& in) {
                                  auto tok = ops::to_tokens(in[0]);
                                  return ops::add(project(tok, r1), project(ops::from_tokens(ops::mul(tok, r1), 2, 2), r2));
                              }),
                              std::vector<T>{random_tensor({2, 3, 2, 2}, rng)}};
         }},
        {"add_row_bias", [](Prng& rng) {
             auto r = random_tensor({3, 4, 2, 2}, rng);
             return std::pair{ScalarBuilder([r](const std::vector<T>& in) {
                                  return project(ops::add_row_bias(in[0], in[1], {2, 0, 2}), r);
                              }),
                              std::vector<T>{random_tensor({3, 4, 2, 2}, rng), random_tensor({5, 4}, rng)}};
         }},
        {"weighted_mse", [](Prng& rng) {
             auto target = random_tensor({3, 4}, rng);
             std::vector<double> w = {rng.uniform(), rng.uniform(), rng.uniform()};
             return std::pair{ScalarBuilder([target, w](const std::vector<T>& in) {
                                  return ops::weighted_mse(in[0], target, std::span<const double>(w));
                              }),
                              std::vector<T>{random_tensor({3, 4}, rng)}};
         }},
        {"scaled_dot_attention", [](Prng& rng) {
             auto r = random_tensor({2, 4, 6}, rng);
             const double s = 1.0 / std::sqrt(6.0);
             const bool residual = rng.uniform() < 0.5;
             return std::pair{ScalarBuilder([r, s, residual](const std::vector<T>& in) {
                                  return project(ops::scaled_dot_attention(in[0], in[1], in[2], in[3], s, residual), r);
                              }),
                              std::vector<T>{random_tensor({2, 4, 6}, rng), random_tensor({6, 6}, rng),
                                             random_tensor({6, 6}, rng), random_tensor({6, 6}, rng)}};
         }},
    };

    std::vector<CheckRow> rows;
    Prng master(seed);
    for (const auto& c : cases) {
        CheckRow row{std::string("grad.") + c.name, instances, 0.0, tolerance, true};
        for (std::size_t i = 0; i < instances; ++i) {
            Prng rng(derive_seed(master.state(), rows.size() * 1000003 + i));
            auto [build, inputs] = c.make(rng);
            row.max_rel_err = std::max(row.max_rel_err, gradient_relative_error(build, std::move(inputs)));
        }
        row.pass = row.max_rel_err < tolerance;
        rows.push_back(row);
    }
    return rows;
}

/// <deconv(x), y> against <x, conv(y)> with the same kernel array and zero
/// bias; returns the worst relative discrepancy over `instances` draws.
inline CheckRow conv_adjoint_check(std::size_t instances, std::uint64_t seed, double tolerance = 1e-10) {
    CheckRow row{"conv_deconv_adjoint", instances, 0.0, tolerance, true};
    Prng rng(seed);
    for (std::size_t i = 0; i < instances; ++i) {
        const std::size_t B = 1 + rng.uniform_int(3), C = 1 + rng.uniform_int(5), O = 1 + rng.uniform_int(5);
        const std::size_t h = 1 + rng.uniform_int(3), w = 1 + rng.uniform_int(3);
        auto x = detail::random_tensor({B, C, h, w}, rng);
        auto y = detail::random_tensor({B, O, 2 * h, 2 * w}, rng);
        auto k = detail::random_tensor({C, O, 2, 2}, rng);
        auto lhs_t = ops::deconv2x2_s2(x, k, Tensor<double>({O}));
        auto rhs_t = ops::conv2x2_s2(y, k, Tensor<double>({C}));
        double lhs = 0, rhs = 0, scale = 0;
        for (std::size_t j = 0; j < y.numel(); ++j) {
            lhs += lhs_t[j] * y[j];
            scale += std::abs(lhs_t[j] * y[j]);
        }
        for (std::size_t j = 0; j < x.numel(); ++j) rhs += x[j] * rhs_t[j];
        row.max_rel_err = std::max(row.max_rel_err, std::abs(lhs - rhs) / std::max(scale, 1e-300));
    }
    row.pass = row.max_rel_err < tolerance;
    return row;
}

}  // namespace mosaic
