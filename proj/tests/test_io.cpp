#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "mosaic/io/ppm.hpp"

using namespace mosaic;
using dataset::ImageSample;

namespace {

std::string to_bytes(const io::Raster& r) {
    std::ostringstream os;
    io::write_ppm(os, r);
    return os.str();
}

ImageSample solid(float r, float g, float b) {
    ImageSample img;
    for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x) img.set_rgb(y, x, {r, g, b});
    return img;
}

}  // namespace

TEST(Ppm, SingleImageScaleOneHeader) {
    io::SampleGrid g;
    g.scale = 1;
    g.separators = false;
    g.images = {solid(0.2f, 0.4f, 0.6f)};
    const std::string bytes = to_bytes(g.render());
    const std::string header = "P6\n4 4\n255\n";
    ASSERT_EQ(bytes.size(), header.size() + 48);
    EXPECT_EQ(bytes.substr(0, header.size()), header);
    EXPECT_EQ(static_cast<unsigned char>(bytes[header.size()]), 51);
    EXPECT_EQ(static_cast<unsigned char>(bytes[header.size() + 1]), 102);
    EXPECT_EQ(static_cast<unsigned char>(bytes[header.size() + 2]), 153);
}

TEST(Ppm, AllRedPayload) {
    io::SampleGrid g;
    g.scale = 3;
    g.separators = false;
    g.images = {solid(1, 0, 0)};
    const auto r = g.render();
    ASSERT_EQ(r.rgb.size(), 12u * 12u * 3u);
    for (std::size_t i = 0; i < r.rgb.size(); i += 3) {
        EXPECT_EQ(r.rgb[i], 255);
        EXPECT_EQ(r.rgb[i + 1], 0);
        EXPECT_EQ(r.rgb[i + 2], 0);
    }
}

TEST(Ppm, GridDimensions) {
    for (std::size_t rows : {1, 2, 5})
        for (std::size_t cols : {1, 3, 8})
            for (std::size_t scale : {1, 4, 16}) {
                io::SampleGrid g;
                g.rows = rows;
                g.cols = cols;
                g.scale = scale;
                const auto r = g.render();
                EXPECT_EQ(r.height, rows * (4 * scale + 1) + 1);
                EXPECT_EQ(r.width, cols * (4 * scale + 1) + 1);
            }
    const std::vector<ImageSample> ten(10, solid(0, 0, 1));
    const auto g = io::SampleGrid::of(ten, 4);
    EXPECT_EQ(g.rows, 3u);
    EXPECT_EQ(g.cols, 4u);
    EXPECT_EQ(g.width(), 4 * 65 + 1u);
}

TEST(Ppm, SeparatorsFrameEveryImage) {
    io::SampleGrid g;
    g.rows = 1;
    g.cols = 2;
    g.scale = 2;
    g.images = {solid(1, 1, 1), solid(1, 1, 1)};
    const auto r = g.render();
    for (std::size_t y = 0; y < r.height; ++y)
        for (std::size_t x : {std::size_t{0}, std::size_t{9}, std::size_t{18}}) EXPECT_EQ(r.px(y, x)[0], 128);
    EXPECT_EQ(r.px(1, 1)[0], 255);
    EXPECT_EQ(r.px(0, 5)[1], 128);
}

TEST(Ppm, RoundTripReproducesQuantizedPixels) {
    Prng rng(3);
    std::vector<ImageSample> imgs(7);
    for (auto& img : imgs)
        for (float& v : img.pixels) v = static_cast<float>(rng.uniform());
    const auto grid = io::SampleGrid::of(imgs, 3, 64, 5);
    std::stringstream ss;
    io::write_ppm(ss, grid.render());
    const auto back = io::read_ppm(ss);
    EXPECT_EQ(back, grid.render());
    const auto decoded = io::grid_images(back, grid, imgs.size());
    for (std::size_t i = 0; i < imgs.size(); ++i)
        for (std::size_t k = 0; k < 48; ++k)
            EXPECT_EQ(decoded[i].pixels[k], static_cast<float>(std::lround(255.0 * imgs[i].pixels[k])) / 255.0f);
}

TEST(Ppm, RoundsHalfwayUp) {
    EXPECT_EQ(io::quantize(0.0f), 0);
    EXPECT_EQ(io::quantize(1.0f), 255);
    EXPECT_EQ(io::quantize(0.5f), 128);
    EXPECT_EQ(io::quantize(0.499f), 127);
}

TEST(Ppm, RejectsOutOfRangePixels) {
    io::SampleGrid g;
    g.images = {solid(1.5f, 0, 0)};
    EXPECT_THROW(g.render(), ContractViolation);
    g.images = {solid(std::nanf(""), 0, 0)};
    EXPECT_THROW(g.render(), ContractViolation);
    g.images.assign(3, solid(0, 0, 0));
    EXPECT_THROW(g.render(), ContractViolation);
}

TEST(Ppm, ReaderRejectsMalformedFiles) {
    std::stringstream a("P3\n1 1\n255\n   ");
    EXPECT_THROW(io::read_ppm(a), FormatError);
    std::stringstream b("P6\n2 2\n255\nabc");
    EXPECT_THROW(io::read_ppm(b), FormatError);
    std::stringstream c("P6\n1 1\n65535\nabcdef");
    EXPECT_THROW(io::read_ppm(c), FormatError);
}
