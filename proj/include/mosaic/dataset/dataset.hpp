#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "mosaic/dataset/colors.hpp"
#include "mosaic/error.hpp"
#include "mosaic/io/binary.hpp"
#include "mosaic/numerics/prng.hpp"

namespace mosaic::dataset {

inline constexpr std::size_t kChannels = 3;
inline constexpr std::size_t kSide = 4;
inline constexpr std::size_t kPixels = kSide * kSide;
inline constexpr std::size_t kImageValues = kChannels * kPixels;  // 48

/// One 4x4 RGB image, channel-major (value (c,row,col) at c*16 + row*4 + col),
/// values in [0,1].
struct ImageSample {
    std::array<float, kImageValues> pixels{};

    float& at(std::size_t c, std::size_t row, std::size_t col) { return pixels[c * kPixels + row * kSide + col]; }
    float at(std::size_t c, std::size_t row, std::size_t col) const { return pixels[c * kPixels + row * kSide + col]; }

    Rgb rgb(std::size_t row, std::size_t col) const { return {at(0, row, col), at(1, row, col), at(2, row, col)}; }
    void set_rgb(std::size_t row, std::size_t col, const Rgb& v) {
        for (std::size_t c = 0; c < kChannels; ++c) at(c, row, col) = v[c];
    }

    friend bool operator==(const ImageSample&, const ImageSample&) = default;
};

/// Top-left corner of quadrant q (0..3, row-major over the 2x2 grid of blocks).
constexpr std::pair<std::size_t, std::size_t> quadrant_origin(std::size_t q) { return {2 * (q / 2), 2 * (q % 2)}; }

inline void render_block(ImageSample& img, std::size_t quadrant, PairBlock block) {
    const auto [r0, c0] = quadrant_origin(quadrant);
    for (std::size_t dr = 0; dr < 2; ++dr) {
        img.set_rgb(r0 + dr, c0, anchor_rgb(block.key));
        img.set_rgb(r0 + dr, c0 + 1, anchor_rgb(block.value));
    }
}

inline ImageSample render(const std::array<PairBlock, 4>& blocks) {
    ImageSample img;
    for (std::size_t q = 0; q < 4; ++q) render_block(img, q, blocks[q]);
    return img;
}

/// Per-image draw: a uniform pattern, then each quadrant independently one of
/// that pattern's two blocks.
inline std::vector<ImageSample> generate_dataset(std::size_t n, std::uint64_t seed) {
    require(n >= 1, "generate_dataset: n must be >= 1");
    Prng rng(seed);
    std::vector<ImageSample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const Pattern& pattern = kPatterns[rng.uniform_int(3)];
        std::array<PairBlock, 4> blocks{};
        for (auto& b : blocks) b = pattern.pairs[rng.uniform_int(2)];
        out.push_back(render(blocks));
    }
    return out;
}

/// nullopt means the quadrant is malformed.
using QuadrantResult = std::optional<PairBlock>;

inline std::array<QuadrantResult, 4> quadrant_mapping(const ImageSample& img) {
    std::array<QuadrantResult, 4> out{};
    for (std::size_t q = 0; q < 4; ++q) {
        const auto [r0, c0] = quadrant_origin(q);
        const Color k0 = classify_pixel(img.rgb(r0, c0));
        const Color k1 = classify_pixel(img.rgb(r0 + 1, c0));
        const Color v0 = classify_pixel(img.rgb(r0, c0 + 1));
        const Color v1 = classify_pixel(img.rgb(r0 + 1, c0 + 1));
        if (k0 == k1 && v0 == v1 && k0 != v0) out[q] = PairBlock{k0, v0};
    }
    return out;
}

/// All quadrants well formed, and every pair present belongs to one single
/// pattern.
inline bool is_consistent(const std::array<QuadrantResult, 4>& quadrants) {
    for (const auto& q : quadrants)
        if (!q) return false;
    for (const Pattern& p : kPatterns) {
        bool all = true;
        for (const auto& q : quadrants) all = all && p.contains(*q);
        if (all) return true;
    }
    return false;
}

inline bool is_consistent(const ImageSample& img) { return is_consistent(quadrant_mapping(img)); }

struct ConsistencyReport {
    std::size_t samples_per_run = 0;
    std::size_t runs = 0;
    std::vector<std::size_t> per_run_consistent;
    std::vector<double> per_run_fraction;
    double mean = 0.0;
    double std = 0.0;

    void add_run(std::size_t consistent) {
        per_run_consistent.push_back(consistent);
        per_run_fraction.push_back(static_cast<double>(consistent) / static_cast<double>(samples_per_run));
        runs = per_run_fraction.size();
        mean = std::accumulate(per_run_fraction.begin(), per_run_fraction.end(), 0.0) / static_cast<double>(runs);
        double ss = 0.0;
        for (double f : per_run_fraction) ss += (f - mean) * (f - mean);
        std = runs > 1 ? std::sqrt(ss / static_cast<double>(runs - 1)) : 0.0;
    }

    std::size_t total_consistent() const {
        return std::accumulate(per_run_consistent.begin(), per_run_consistent.end(), std::size_t{0});
    }

    /// CSV with header `run,samples,consistent,fraction`.
    void write_csv(std::ostream& os) const {
        os << "run,samples,consistent,fraction\n";
        for (std::size_t r = 0; r < runs; ++r)
            os << r << ',' << samples_per_run << ',' << per_run_consistent[r] << ',' << per_run_fraction[r] << '\n';
    }
};

/// Random baseline: four blocks drawn with replacement from the six canonical
/// pairs, one per quadrant. Run r uses the child stream derive_seed(seed, r).
inline ConsistencyReport baseline_consistency(std::size_t samples_per_run, std::size_t runs, std::uint64_t seed) {
    require(samples_per_run >= 1 && runs >= 1, "baseline_consistency: counts must be >= 1");
    ConsistencyReport report;
    report.samples_per_run = samples_per_run;
    for (std::size_t r = 0; r < runs; ++r) {
        Prng rng(derive_seed(seed, r));
        std::size_t hits = 0;
        for (std::size_t s = 0; s < samples_per_run; ++s) {
            std::array<PairBlock, 4> blocks{};
            for (auto& b : blocks) b = kCanonicalPairs[rng.uniform_int(kCanonicalPairs.size())];
            hits += is_consistent(render(blocks)) ? 1 : 0;
        }
        report.add_run(hits);
    }
    return report;
}

struct ExactProbability {
    std::uint64_t numerator;
    std::uint64_t denominator;
    double value() const { return static_cast<double>(numerator) / static_cast<double>(denominator); }
};

/// Enumerates all 6^4 quadrant assignments of canonical pairs.
inline ExactProbability exact_baseline_probability() {
    std::uint64_t hits = 0, total = 0;
    const std::size_t n = kCanonicalPairs.size();
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t c = 0; c < n; ++c)
                for (std::size_t d = 0; d < n; ++d) {
                    const ImageSample img =
                        render({kCanonicalPairs[a], kCanonicalPairs[b], kCanonicalPairs[c], kCanonicalPairs[d]});
                    hits += is_consistent(img) ? 1 : 0;
                    ++total;
                }
    return {hits, total};
}

// ---------------------------------------------------------------------------
// MOSD file: "MOSD", u32 version, u32 count, count * 48 f32 (channel-major),
// all little-endian.

inline constexpr std::uint32_t kDatasetVersion = 1;

inline void write_dataset(std::ostream& os, std::span<const ImageSample> images) {
    io::write_magic(os, "MOSD");
    io::write_u32(os, kDatasetVersion);
    io::write_u32(os, static_cast<std::uint32_t>(images.size()));
    for (const auto& img : images)
        for (float v : img.pixels) io::write_f32(os, v);
}

inline void save_dataset(const std::filesystem::path& path, std::span<const ImageSample> images) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    write_dataset(os, images);
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline std::vector<ImageSample> read_dataset(std::istream& is, const std::string& context = "dataset") {
    io::Reader rd(is, context);
    rd.expect_magic("MOSD");
    const std::uint32_t version = rd.u32();
    if (version != kDatasetVersion) throw FormatError(context + ": unsupported version " + std::to_string(version));
    const std::uint32_t count = rd.u32();
    std::vector<ImageSample> out(count);
    for (auto& img : out)
        for (float& v : img.pixels) v = rd.f32();
    return out;
}

inline std::vector<ImageSample> load_dataset(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    return read_dataset(is, path.string());
}

}  // namespace mosaic::dataset
