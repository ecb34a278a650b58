#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include "mosaic/error.hpp"

// Little-endian primitive encoding independent of host byte order.
namespace mosaic::io {

inline void write_u8(std::ostream& os, std::uint8_t v) { os.put(static_cast<char>(v)); }

inline void write_u16(std::ostream& os, std::uint16_t v) {
    const char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
    os.write(b, 2);
}

inline void write_u32(std::ostream& os, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(b, 4);
}

inline void write_f32(std::ostream& os, float v) { write_u32(os, std::bit_cast<std::uint32_t>(v)); }

inline void write_magic(std::ostream& os, std::string_view magic) { os.write(magic.data(), static_cast<std::streamsize>(magic.size())); }

class Reader {
public:
    Reader(std::istream& is, std::string context) : is_(is), context_(std::move(context)) {}

    void bytes(char* dst, std::size_t n) {
        is_.read(dst, static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(is_.gcount()) != n)
            throw FormatError(context_ + ": unexpected end of file");
    }

    std::uint8_t u8() {
        char c;
        bytes(&c, 1);
        return static_cast<std::uint8_t>(c);
    }

    std::uint16_t u16() {
        unsigned char b[2];
        bytes(reinterpret_cast<char*>(b), 2);
        return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
    }

    std::uint32_t u32() {
        unsigned char b[4];
        bytes(reinterpret_cast<char*>(b), 4);
        std::uint32_t v = 0;
        for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
        return v;
    }

    float f32() { return std::bit_cast<float>(u32()); }

    void expect_magic(std::string_view magic) {
        std::array<char, 8> buf{};
        bytes(buf.data(), magic.size());
        if (std::string_view(buf.data(), magic.size()) != magic)
            throw FormatError(context_ + ": bad magic, expected " + std::string(magic));
    }

    bool at_eof() { return is_.peek() == std::char_traits<char>::eof(); }

    const std::string& context() const { return context_; }

private:
    std::istream& is_;
    std::string context_;
};

}  // namespace mosaic::io
