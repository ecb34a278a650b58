#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "mosaic/numerics/gradcheck.hpp"
#include "mosaic/numerics/ops.hpp"
#include "oracles.hpp"

using mosaic::Prng;
using mosaic::Tensor;
namespace ops = mosaic::ops;

namespace {

oracle::Vec random_ints(std::size_t n, Prng& rng) {
    oracle::Vec v(n);
    for (auto& x : v) x = static_cast<double>(static_cast<int>(rng.uniform_int(17)) - 8);
    return v;
}

}  // namespace

// ---- conv2x2_s2

TEST(Conv, AllOnesGivesFour) {
    Tensor<double> x({1, 4, 4}, 1.0), k({1, 1, 2, 2}, 1.0), b({1}, 0.0);
    auto out = ops::conv2x2_s2(x, k, b);
    EXPECT_EQ(out.shape(), (mosaic::Shape{1, 2, 2}));
    for (double v : out.data()) EXPECT_EQ(v, 4.0);
}

TEST(Conv, ZeroKernelGivesBias) {
    Tensor<double> x({3, 4, 4}, 0.7), k({2, 3, 2, 2}, 0.0), b({2}, {1.5, -2.0});
    auto out = ops::conv2x2_s2(x, k, b);
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(out[i], 1.5);
        EXPECT_EQ(out[4 + i], -2.0);
    }
}

TEST(Conv, MatchesDirectLoopExactly) {
    // Integer-valued entries make every summation order exact.
    Prng rng(1);
    for (int rep = 0; rep < 50; ++rep) {
        const std::size_t B = 1 + rng.uniform_int(3), C = 1 + rng.uniform_int(4), O = 1 + rng.uniform_int(5);
        const std::size_t H = 2 * (1 + rng.uniform_int(3)), W = 2 * (1 + rng.uniform_int(3));
        const auto x = random_ints(B * C * H * W, rng), k = random_ints(O * C * 4, rng), b = random_ints(O, rng);
        auto out = ops::conv2x2_s2(Tensor<double>({B, C, H, W}, x), Tensor<double>({O, C, 2, 2}, k),
                                   Tensor<double>({O}, b));
        EXPECT_EQ(oracle::to_vec(out), oracle::conv_direct(x, k, b, B, C, H, W, O));
    }
}

TEST(Conv, MatchesDirectLoopOnRealValues) {
    Prng rng(2);
    const auto x = oracle::random_vec(2 * 3 * 16, rng), k = oracle::random_vec(32 * 3 * 4, rng),
               b = oracle::random_vec(32, rng);
    auto out = ops::conv2x2_s2(Tensor<double>({2, 3, 4, 4}, x), Tensor<double>({32, 3, 2, 2}, k),
                               Tensor<double>({32}, b));
    EXPECT_LT(oracle::rel_err(oracle::to_vec(out), oracle::conv_direct(x, k, b, 2, 3, 4, 4, 32)), 1e-15);
}

TEST(Conv, ShapeMismatchThrows) {
    Tensor<double> x({3, 4, 4}), b({2});
    EXPECT_THROW(ops::conv2x2_s2(x, Tensor<double>({2, 2, 2, 2}), b), mosaic::ContractViolation);
    EXPECT_THROW(ops::conv2x2_s2(Tensor<double>({3, 3, 4}), Tensor<double>({2, 3, 2, 2}), b),
                 mosaic::ContractViolation);
    EXPECT_THROW(ops::conv2x2_s2(x, Tensor<double>({2, 3, 2, 2}), Tensor<double>({3})), mosaic::ContractViolation);
}

// ---- deconv2x2_s2

TEST(Deconv, ImpulseResponse) {
    Prng rng(3);
    const auto kv = oracle::random_vec(2 * 3 * 4, rng);
    Tensor<double> x({2, 2, 2}, 0.0), k({2, 3, 2, 2}, kv), b({3}, 0.0);
    x[0] = 1.0;  // channel 0, cell (0,0)
    auto out = ops::deconv2x2_s2(x, k, b);
    ASSERT_EQ(out.shape(), (mosaic::Shape{3, 4, 4}));
    for (std::size_t o = 0; o < 3; ++o)
        for (std::size_t r = 0; r < 4; ++r)
            for (std::size_t c = 0; c < 4; ++c) {
                const double expect = (r < 2 && c < 2) ? kv[(o * 2 + r) * 2 + c] : 0.0;
                EXPECT_EQ(out[(o * 4 + r) * 4 + c], expect);
            }
}

TEST(Deconv, MatchesScatterLoopExactly) {
    Prng rng(4);
    for (int rep = 0; rep < 50; ++rep) {
        const std::size_t B = 1 + rng.uniform_int(3), C = 1 + rng.uniform_int(5), O = 1 + rng.uniform_int(4);
        const std::size_t h = 1 + rng.uniform_int(3), w = 1 + rng.uniform_int(3);
        const auto x = random_ints(B * C * h * w, rng), k = random_ints(C * O * 4, rng), b = random_ints(O, rng);
        auto out = ops::deconv2x2_s2(Tensor<double>({B, C, h, w}, x), Tensor<double>({C, O, 2, 2}, k),
                                     Tensor<double>({O}, b));
        EXPECT_EQ(oracle::to_vec(out), oracle::deconv_scatter(x, k, b, B, C, h, w, O));
    }
}

TEST(Deconv, AdjointOfConv) {
    const auto row = mosaic::conv_adjoint_check(200, 5);
    EXPECT_TRUE(row.pass) << row.max_rel_err;
}

// ---- softmax

TEST(Softmax, Uniform) {
    auto s = ops::softmax(Tensor<double>({4}, 0.0));
    for (double v : s.data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Softmax, LogTwo) {
    auto s = ops::softmax(Tensor<double>({2}, {std::log(2.0), 0.0}));
    EXPECT_NEAR(s[0], 2.0 / 3.0, 1e-15);
    EXPECT_NEAR(s[1], 1.0 / 3.0, 1e-15);
}

TEST(Softmax, LargeLogitsStayFinite) {
    auto s = ops::softmax(Tensor<float>({2}, {1000.f, 0.f}));
    EXPECT_FLOAT_EQ(s[0], 1.f);
    EXPECT_FLOAT_EQ(s[1], 0.f);
}

TEST(Softmax, NanPropagates) {
    auto s = ops::softmax(Tensor<double>({2, 3}, {0, std::numeric_limits<double>::quiet_NaN(), 1, 0, 1, 2}));
    EXPECT_TRUE(std::isnan(s[0]) && std::isnan(s[1]) && std::isnan(s[2]));
    EXPECT_FALSE(mosaic::all_finite(s));
    EXPECT_NEAR(s[3] + s[4] + s[5], 1.0, 1e-12);
}

TEST(Softmax, RowsSumToOne) {
    Prng rng(6);
    auto v = oracle::random_vec(50 * 7, rng, -20, 20);
    auto s = ops::softmax(Tensor<float>({50, 7}, std::vector<float>(v.begin(), v.end())));
    for (std::size_t r = 0; r < 50; ++r) {
        double total = 0;
        for (std::size_t i = 0; i < 7; ++i) {
            EXPECT_GT(s[r * 7 + i], 0.f);
            total += s[r * 7 + i];
        }
        EXPECT_NEAR(total, 1.0, 1e-6);
    }
}

// ---- gumbel_softmax

TEST(Gumbel, HardIsOneHot) {
    Prng rng(7), data(8);
    auto logits = Tensor<double>({20, 5}, oracle::random_vec(100, data, -2, 2));
    auto out = ops::gumbel_softmax(logits, 1.0, true, &rng);
    for (std::size_t r = 0; r < 20; ++r) {
        int ones = 0;
        for (std::size_t i = 0; i < 5; ++i) {
            const double v = out[r * 5 + i];
            EXPECT_TRUE(v == 0.0 || v == 1.0);
            ones += v == 1.0;
        }
        EXPECT_EQ(ones, 1);
    }
}

TEST(Gumbel, DominantLogitWins) {
    for (double tau : {1.0, 0.5, 0.1}) {
        Prng rng(9);
        Tensor<double> logits({4}, {10, -10, -10, -10});
        int hits = 0;
        const int n = 10000;
        for (int i = 0; i < n; ++i) hits += ops::gumbel_softmax(logits, tau, true, &rng)[0] == 1.0;
        EXPECT_GT(hits / double(n), 0.999) << "tau " << tau;
    }
}

TEST(Gumbel, NoiseFreeSoftIsSoftmax) {
    Prng data(10);
    Tensor<double> logits({3, 4}, oracle::random_vec(12, data, -3, 3));
    auto g = ops::gumbel_softmax(logits, 1.0, false, nullptr);
    auto s = ops::softmax(logits);
    for (std::size_t i = 0; i < 12; ++i) EXPECT_DOUBLE_EQ(g[i], s[i]);
}

TEST(Gumbel, StraightThroughGradientEqualsSoftGradient) {
    Prng data(11);
    const auto lv = oracle::random_vec(12, data, -2, 2), rv = oracle::random_vec(12, data);
    Tensor<double> r({3, 4}, rv);
    auto grad_of = [&](bool hard) {
        Tensor<double> logits({3, 4}, lv);
        logits.set_requires_grad();
        Prng noise(12);
        mosaic::grad(ops::sum(ops::mul(ops::gumbel_softmax(logits, 0.7, hard, &noise), r)));
        return oracle::grad_vec(logits);
    };
    const auto hard = grad_of(true), soft = grad_of(false);
    for (std::size_t i = 0; i < hard.size(); ++i) EXPECT_EQ(hard[i], soft[i]);
}

TEST(Gumbel, NonPositiveTemperatureThrows) {
    Tensor<double> logits({2}, {0, 1});
    EXPECT_THROW(ops::gumbel_softmax(logits, 0.0, true, nullptr), mosaic::ContractViolation);
    EXPECT_THROW(ops::gumbel_softmax(logits, -1.0, false, nullptr), mosaic::ContractViolation);
}

TEST(Gumbel, NoiseIsFinite) {
    Prng rng(13);
    for (int i = 0; i < 100000; ++i) ASSERT_TRUE(std::isfinite(ops::gumbel_noise(rng)));
}

// ---- attention

namespace {

Tensor<double> eye(std::size_t d) {
    Tensor<double> t({d, d});
    for (std::size_t i = 0; i < d; ++i) t[i * d + i] = 1.0;
    return t;
}

}  // namespace

TEST(Attention, IdenticalTokensDouble) {
    const oracle::Vec t = {0.3, -1.2, 2.0};
    oracle::Vec v;
    for (int i = 0; i < 4; ++i) v.insert(v.end(), t.begin(), t.end());
    auto out = ops::scaled_dot_attention(Tensor<double>({4, 3}, v), eye(3), eye(3), eye(3), 1.0, true);
    EXPECT_EQ(out.shape(), (mosaic::Shape{4, 3}));
    for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(out[i], 2 * t[i % 3], 1e-15);
}

TEST(Attention, SingleTokenWithoutResidual) {
    Tensor<double> tok({1, 3}, {0.5, -0.25, 4.0});
    auto out = ops::scaled_dot_attention(tok, eye(3), eye(3), eye(3), 1.0, false);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(out[i], tok[i]);
}

TEST(Attention, TwoTokensMatchScalarEvaluation) {
    Prng rng(14);
    const std::size_t d = 3;
    const auto tv = oracle::random_vec(2 * d, rng), qv = oracle::random_vec(d * d, rng),
               kv = oracle::random_vec(d * d, rng), vv = oracle::random_vec(d * d, rng);
    const double scale = 1.0 / std::sqrt(3.0);
    auto out = ops::scaled_dot_attention(Tensor<double>({2, d}, tv), Tensor<double>({d, d}, qv),
                                         Tensor<double>({d, d}, kv), Tensor<double>({d, d}, vv), scale, true);
    auto project = [&](const oracle::Vec& w) {
        std::vector<oracle::Vec> rows(2, oracle::Vec(d, 0.0));
        for (std::size_t n = 0; n < 2; ++n)
            for (std::size_t j = 0; j < d; ++j)
                for (std::size_t i = 0; i < d; ++i) rows[n][j] += tv[n * d + i] * w[i * d + j];
        return rows;
    };
    const auto q = project(qv), k = project(kv), v = project(vv);
    for (std::size_t x = 0; x < 2; ++x) {
        const auto alpha = oracle::attention_row(q, k, x, scale);
        for (std::size_t j = 0; j < d; ++j) {
            const double expect = tv[x * d + j] + alpha[0] * v[0][j] + alpha[1] * v[1][j];
            EXPECT_NEAR(out[x * d + j], expect, 1e-14);
        }
    }
}

TEST(Attention, PermutationEquivariant) {
    Prng rng(15);
    const std::size_t d = 4;
    const auto tv = oracle::random_vec(4 * d, rng);
    Tensor<double> wq({d, d}, oracle::random_vec(d * d, rng)), wk({d, d}, oracle::random_vec(d * d, rng)),
        wv({d, d}, oracle::random_vec(d * d, rng));
    const std::size_t perm[4] = {2, 0, 3, 1};
    oracle::Vec pv(tv.size());
    for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t j = 0; j < d; ++j) pv[n * d + j] = tv[perm[n] * d + j];
    auto a = ops::scaled_dot_attention(Tensor<double>({4, d}, tv), wq, wk, wv, 0.5, true);
    auto b = ops::scaled_dot_attention(Tensor<double>({4, d}, pv), wq, wk, wv, 0.5, true);
    for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t j = 0; j < d; ++j) EXPECT_NEAR(b[n * d + j], a[perm[n] * d + j], 1e-14);
}

TEST(Attention, DimensionMismatchThrows) {
    Tensor<double> tok({4, 3});
    EXPECT_THROW(ops::scaled_dot_attention(tok, eye(4), eye(3), eye(3), 1.0, true), mosaic::ContractViolation);
    EXPECT_THROW(ops::scaled_dot_attention(Tensor<double>({0, 3}), eye(3), eye(3), eye(3), 1.0, true),
                 mosaic::ContractViolation);
}

// ---- finite differences, every op

TEST(GradCheck, EveryOperationPassesFiniteDifferences) {
    for (const auto& row : mosaic::op_gradient_suite(100, 2024)) {
        EXPECT_TRUE(row.pass) << row.check << " max_rel_err " << row.max_rel_err;
        EXPECT_EQ(row.instances, 100u);
    }
}

TEST(GradCheck, ConvKernelAgainstIndependentOracle) {
    // Cross-check of the library harness with the test-side oracle.
    Prng rng(16);
    const auto x = oracle::random_vec(2 * 3 * 16, rng), k = oracle::random_vec(4 * 3 * 4, rng),
               b = oracle::random_vec(4, rng), r = oracle::random_vec(2 * 4 * 4, rng);
    Tensor<double> kt({4, 3, 2, 2}, k);
    kt.set_requires_grad();
    auto loss = [&](const Tensor<double>& kk) {
        return ops::sum(ops::mul(ops::conv2x2_s2(Tensor<double>({2, 3, 4, 4}, x), kk, Tensor<double>({4}, b)),
                                 Tensor<double>({2, 4, 2, 2}, r)));
    };
    mosaic::grad(loss(kt));
    auto f = [&](const oracle::Vec& kv) {
        const auto out = oracle::conv_direct(x, kv, b, 2, 3, 4, 4, 4);
        double s = 0;
        for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * r[i];
        return s;
    };
    EXPECT_LT(oracle::rel_err(oracle::grad_vec(kt), oracle::fd_gradient(f, k)), 1e-8);
}
