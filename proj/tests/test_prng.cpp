#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <vector>

#include "mosaic/numerics/prng.hpp"

using mosaic::derive_seed;
using mosaic::Prng;

TEST(Prng, SameSeedSameStream) {
    Prng a(42), b(42);
    for (int i = 0; i < 1000; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
}

TEST(Prng, KnownSplitMix64Output) {
    // Reference values of SplitMix64 seeded with 1234567.
    Prng rng(1234567);
    EXPECT_EQ(rng.next_u64(), 6457827717110365317ULL);
    EXPECT_EQ(rng.next_u64(), 3203168211198807973ULL);
}

TEST(Prng, ChildStreamsAreDeterministicAndDistinct) {
    EXPECT_EQ(derive_seed(7, 3), derive_seed(7, 3));
    std::set<std::uint64_t> seen;
    for (std::uint64_t i = 0; i < 10000; ++i) seen.insert(derive_seed(7, i));
    EXPECT_EQ(seen.size(), 10000u);
    EXPECT_NE(derive_seed(7, 0), derive_seed(8, 0));

    // Sibling streams should look uncorrelated.
    Prng a(derive_seed(99, 0)), b(derive_seed(99, 1));
    double sab = 0, sa = 0, sb = 0, saa = 0, sbb = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double x = a.uniform(), y = b.uniform();
        sab += x * y, sa += x, sb += y, saa += x * x, sbb += y * y;
    }
    const double cov = sab / n - (sa / n) * (sb / n);
    const double corr = cov / std::sqrt((saa / n - sa * sa / n / n) * (sbb / n - sb * sb / n / n));
    EXPECT_LT(std::abs(corr), 4.0 / std::sqrt(n));
}

TEST(Prng, UniformIntStaysInRangeAndCoversIt) {
    Prng rng(5);
    std::vector<int> counts(6, 0);
    for (int i = 0; i < 60000; ++i) {
        const auto v = rng.uniform_int(6);
        ASSERT_LT(v, 6u);
        ++counts[v];
    }
    for (int c : counts) EXPECT_NEAR(c, 10000, 500);
}

TEST(Prng, NormalMoments) {
    Prng rng(11);
    const int n = 200000;
    double s = 0, ss = 0;
    for (int i = 0; i < n; ++i) {
        const double z = rng.normal();
        s += z;
        ss += z * z;
    }
    EXPECT_NEAR(s / n, 0.0, 4.0 / std::sqrt(n));
    EXPECT_NEAR(ss / n, 1.0, 4.0 * std::sqrt(2.0 / n));
}

TEST(Prng, OpenUniformNeverHitsEndpoints) {
    Prng rng(3);
    for (int i = 0; i < 100000; ++i) {
        const double u = rng.uniform_open();
        ASSERT_GT(u, 0.0);
        ASSERT_LT(u, 1.0);
    }
}
