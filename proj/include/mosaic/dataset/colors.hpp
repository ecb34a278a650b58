#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string_view>

namespace mosaic::dataset {

enum class Color : std::uint8_t { red, green, yellow, blue };

inline constexpr std::array<Color, 4> kColors = {Color::red, Color::green, Color::yellow, Color::blue};

using Rgb = std::array<float, 3>;

constexpr Rgb anchor_rgb(Color c) {
    switch (c) {
        case Color::red: return {1.f, 0.f, 0.f};
        case Color::green: return {0.f, 1.f, 0.f};
        case Color::yellow: return {1.f, 1.f, 0.f};
        case Color::blue: return {0.f, 0.f, 1.f};
    }
    return {0.f, 0.f, 0.f};
}

constexpr std::string_view color_name(Color c) {
    switch (c) {
        case Color::red: return "red";
        case Color::green: return "green";
        case Color::yellow: return "yellow";
        case Color::blue: return "blue";
    }
    return "?";
}

/// Nearest anchor by squared Euclidean distance; ties go to the earliest of
/// red, green, yellow, blue.
inline Color classify_pixel(const Rgb& rgb) {
    Color best = Color::red;
    float best_d = 0.f;
    bool first = true;
    for (Color c : kColors) {
        const Rgb a = anchor_rgb(c);
        float d = 0.f;
        for (int k = 0; k < 3; ++k) d += (rgb[k] - a[k]) * (rgb[k] - a[k]);
        if (first || d < best_d) {
            best = c;
            best_d = d;
            first = false;
        }
    }
    return best;
}

/// Ordered key -> value color pair, drawn as a 2x2 block with the key in the
/// left column and the value in the right column.
struct PairBlock {
    Color key;
    Color value;
    friend constexpr bool operator==(PairBlock, PairBlock) = default;
};

/// Two disjoint pairs that together cover all four colors.
struct Pattern {
    int id;
    std::array<PairBlock, 2> pairs;

    constexpr bool contains(PairBlock p) const { return pairs[0] == p || pairs[1] == p; }
};

inline constexpr std::array<Pattern, 3> kPatterns = {{
    {1, {{{Color::red, Color::green}, {Color::yellow, Color::blue}}}},
    {2, {{{Color::red, Color::yellow}, {Color::green, Color::blue}}}},
    {3, {{{Color::red, Color::blue}, {Color::green, Color::yellow}}}},
}};

/// The six pairs of all patterns, pattern-major: index 2*p + k is pair k of
/// pattern p.
inline constexpr std::array<PairBlock, 6> kCanonicalPairs = {
    kPatterns[0].pairs[0], kPatterns[0].pairs[1], kPatterns[1].pairs[0],
    kPatterns[1].pairs[1], kPatterns[2].pairs[0], kPatterns[2].pairs[1],
};

}  // namespace mosaic::dataset
