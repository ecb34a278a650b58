#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "mosaic/dataset/dataset.hpp"
#include "mosaic/error.hpp"

namespace mosaic::io {

/// 8-bit RGB raster, row-major, 3 bytes per pixel.
struct Raster {
    std::size_t width = 0, height = 0;
    std::vector<std::uint8_t> rgb;

    Raster() = default;
    Raster(std::size_t w, std::size_t h, std::uint8_t fill = 0) : width(w), height(h), rgb(w * h * 3, fill) {}

    std::uint8_t* px(std::size_t row, std::size_t col) { return rgb.data() + (row * width + col) * 3; }
    const std::uint8_t* px(std::size_t row, std::size_t col) const { return rgb.data() + (row * width + col) * 3; }

    friend bool operator==(const Raster&, const Raster&) = default;
};

inline std::uint8_t quantize(float v) {
    require(std::isfinite(v) && v >= 0.0f && v <= 1.0f, [&] { return "ppm: pixel value " + std::to_string(v) + " outside [0,1]"; });
    return static_cast<std::uint8_t>(std::lround(255.0 * static_cast<double>(v)));
}

/// rows x cols images, each pixel drawn as a scale x scale square. With
/// separators every image is framed by 1-pixel lines, so the raster is
/// rows*(4*scale+1)+1 high and cols*(4*scale+1)+1 wide.
struct SampleGrid {
    std::size_t rows = 1, cols = 1;
    std::size_t scale = 16;
    bool separators = true;
    std::uint8_t separator_value = 128;
    std::vector<dataset::ImageSample> images;

    std::size_t cell() const { return dataset::kSide * scale + (separators ? 1 : 0); }
    std::size_t width() const { return cols * cell() + (separators ? 1 : 0); }
    std::size_t height() const { return rows * cell() + (separators ? 1 : 0); }

    /// Up to `max_images` images laid out in rows of `cols`.
    static SampleGrid of(std::span<const dataset::ImageSample> imgs, std::size_t cols = 8, std::size_t max_images = 64,
                         std::size_t scale = 16) {
        require(cols >= 1, "SampleGrid: cols must be >= 1");
        SampleGrid g;
        const std::size_t n = std::min(imgs.size(), max_images);
        g.cols = std::min(cols, std::max<std::size_t>(n, 1));
        g.rows = std::max<std::size_t>(1, (n + g.cols - 1) / g.cols);
        g.scale = scale;
        g.images.assign(imgs.begin(), imgs.begin() + static_cast<std::ptrdiff_t>(n));
        return g;
    }

    Raster render() const {
        require(scale >= 1, "SampleGrid: scale must be >= 1");
        require(images.size() <= rows * cols, "SampleGrid: more images than cells");
        Raster r(width(), height(), separators ? separator_value : 0);
        const std::size_t off = separators ? 1 : 0;
        for (std::size_t i = 0; i < images.size(); ++i) {
            const std::size_t r0 = (i / cols) * cell() + off, c0 = (i % cols) * cell() + off;
            for (std::size_t y = 0; y < dataset::kSide * scale; ++y)
                for (std::size_t x = 0; x < dataset::kSide * scale; ++x) {
                    std::uint8_t* p = r.px(r0 + y, c0 + x);
                    for (std::size_t c = 0; c < 3; ++c) p[c] = quantize(images[i].at(c, y / scale, x / scale));
                }
        }
        return r;
    }
};

inline void write_ppm(std::ostream& os, const Raster& r) {
    os << "P6\n" << r.width << ' ' << r.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(r.rgb.data()), static_cast<std::streamsize>(r.rgb.size()));
}

inline void write_ppm(const std::filesystem::path& path, const Raster& r) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    write_ppm(os, r);
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline void write_ppm(const std::filesystem::path& path, const SampleGrid& grid) { write_ppm(path, grid.render()); }

/// Reads binary P6 with maxval 255. Comments are not supported.
inline Raster read_ppm(std::istream& is, const std::string& context = "ppm") {
    std::string magic;
    std::size_t w = 0, h = 0;
    int maxval = 0;
    if (!(is >> magic >> w >> h >> maxval) || magic != "P6") throw FormatError(context + ": not a binary P6 file");
    if (maxval != 255) throw FormatError(context + ": unsupported maxval " + std::to_string(maxval));
    is.get();
    Raster r(w, h);
    is.read(reinterpret_cast<char*>(r.rgb.data()), static_cast<std::streamsize>(r.rgb.size()));
    if (static_cast<std::size_t>(is.gcount()) != r.rgb.size()) throw FormatError(context + ": truncated pixel data");
    return r;
}

inline Raster read_ppm(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    return read_ppm(is, path.string());
}

/// Inverse of the grid layout: the images of a rendered grid, quantized.
inline std::vector<dataset::ImageSample> grid_images(const Raster& r, const SampleGrid& layout, std::size_t count) {
    std::vector<dataset::ImageSample> out(count);
    const std::size_t off = layout.separators ? 1 : 0;
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t r0 = (i / layout.cols) * layout.cell() + off, c0 = (i % layout.cols) * layout.cell() + off;
        for (std::size_t y = 0; y < dataset::kSide; ++y)
            for (std::size_t x = 0; x < dataset::kSide; ++x) {
                const std::uint8_t* p = r.px(r0 + y * layout.scale, c0 + x * layout.scale);
                for (std::size_t c = 0; c < 3; ++c) out[i].at(c, y, x) = static_cast<float>(p[c]) / 255.0f;
            }
    }
    return out;
}

}  // namespace mosaic::io
