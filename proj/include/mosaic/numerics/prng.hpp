#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace mosaic {

/// SplitMix64 finalizer (Steele, Lea & Flood 2014). Bijective on 64 bits.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Seed of child stream `index` under `seed`:
///   mix64(mix64(seed) ^ mix64(index + 0x9e3779b97f4a7c15))
/// Children of the same parent with different indices start from
/// decorrelated states; nesting (child of child) is how run/image streams
/// are addressed.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) noexcept {
    return mix64(mix64(seed) ^ mix64(index + 0x9e3779b97f4a7c15ULL));
}

/// SplitMix64 generator: a Weyl sequence with increment 0x9e3779b97f4a7c15
/// passed through mix64. Uniforms use the top 53 bits; normals use
/// Box-Muller so streams are identical across standard libraries.
class Prng {
public:
    explicit constexpr Prng(std::uint64_t seed = 0) noexcept : state_(seed) {}

    constexpr std::uint64_t next_u64() noexcept {
        state_ += 0x9e3779b97f4a7c15ULL;
        return mix64(state_);
    }

    /// Uniform in [0, 1).
    double uniform() noexcept {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    /// Uniform in the open interval (0, 1).
    double uniform_open() noexcept {
        return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    }

    /// Uniform integer in [0, n). Lemire's multiply-shift with rejection.
    std::uint64_t uniform_int(std::uint64_t n) noexcept {
        std::uint64_t x = next_u64();
        __uint128_t m = static_cast<__uint128_t>(x) * n;
        auto low = static_cast<std::uint64_t>(m);
        if (low < n) {
            const std::uint64_t threshold = (0 - n) % n;
            while (low < threshold) {
                x = next_u64();
                m = static_cast<__uint128_t>(x) * n;
                low = static_cast<std::uint64_t>(m);
            }
        }
        return static_cast<std::uint64_t>(m >> 64);
    }

    double normal() noexcept {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = uniform_open();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    Prng child(std::uint64_t index) const noexcept { return Prng(derive_seed(state_, index)); }

    std::uint64_t state() const noexcept { return state_; }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace mosaic
