#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "mosaic/error.hpp"
#include "mosaic/io/binary.hpp"
#include "mosaic/model/model.hpp"

// MOSC checkpoint, little-endian:
//   "MOSC" | u32 version | u8 kind | u32 tensor count |
//   per tensor: u16 name length, name bytes, u8 rank, u32 dims[rank], f32 data
// EMA weights are stored under the same names prefixed with "ema.".
namespace mosaic::model {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::string_view kEmaPrefix = "ema.";

struct NamedArray {
    std::string name;
    Shape shape;
    std::vector<float> data;
};

struct Checkpoint {
    BackboneKind kind = BackboneKind::cnn;
    std::vector<NamedArray> tensors;

    const NamedArray* find(std::string_view name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t;
        return nullptr;
    }

    bool has_ema() const { return find(std::string(kEmaPrefix) + "conv.weight") != nullptr; }

    void add(std::string name, const Tensor<float>& t) {
        tensors.push_back({std::move(name), t.shape(), std::vector<float>(t.data().begin(), t.data().end())});
    }

    void add_params(const ModelParams<float>& p, std::string_view prefix = "") {
        for (const auto& [name, t] : p.named()) add(std::string(prefix) + name, t);
    }

    /// Rebuilds parameters stored under `prefix` ("" for raw, "ema." for EMA).
    ModelParams<float> params(std::string_view prefix = "") const {
        ModelParams<float> p;
        p.kind = kind;
        for (const auto& t : tensors) {
            if (t.name.size() <= prefix.size() || std::string_view(t.name).substr(0, prefix.size()) != prefix) continue;
            const std::string_view rest = std::string_view(t.name).substr(prefix.size());
            if (Tensor<float>* slot = p.find(rest)) *slot = Tensor<float>(t.shape, t.data).set_requires_grad(true);
        }
        if (!p.conv_w.defined() || !p.conv_b.defined() || !p.deconv_w.defined() || !p.deconv_b.defined())
            throw FormatError("checkpoint lacks convolution tensors under prefix '" + std::string(prefix) + "'");
        if (has_learnable_attention(kind) && (!p.wq.defined() || !p.wk.defined() || !p.wv.defined()))
            throw FormatError("checkpoint lacks attention projections for kind " + std::string(kind_name(kind)));
        return p;
    }
};

inline void write_checkpoint(std::ostream& os, const Checkpoint& ckpt) {
    io::write_magic(os, "MOSC");
    io::write_u32(os, kCheckpointVersion);
    io::write_u8(os, static_cast<std::uint8_t>(ckpt.kind));
    io::write_u32(os, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& t : ckpt.tensors) {
        require(t.name.size() <= 0xffff && t.shape.size() <= 0xff, "checkpoint: name or rank too large");
        io::write_u16(os, static_cast<std::uint16_t>(t.name.size()));
        os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
        io::write_u8(os, static_cast<std::uint8_t>(t.shape.size()));
        for (auto d : t.shape) io::write_u32(os, static_cast<std::uint32_t>(d));
        for (float v : t.data) io::write_f32(os, v);
    }
}

inline Checkpoint read_checkpoint(std::istream& is, const std::string& context = "checkpoint") {
    io::Reader rd(is, context);
    rd.expect_magic("MOSC");
    const auto version = rd.u32();
    if (version != kCheckpointVersion) throw FormatError(context + ": unsupported version " + std::to_string(version));
    Checkpoint ckpt;
    const auto kind = rd.u8();
    if (kind > 3) throw FormatError(context + ": unknown backbone kind " + std::to_string(kind));
    ckpt.kind = static_cast<BackboneKind>(kind);
    const auto count = rd.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedArray t;
        t.name.resize(rd.u16());
        rd.bytes(t.name.data(), t.name.size());
        const auto rank = rd.u8();
        for (std::uint8_t r = 0; r < rank; ++r) t.shape.push_back(rd.u32());
        t.data.resize(shape_numel(t.shape));
        for (float& v : t.data) v = rd.f32();
        ckpt.tensors.push_back(std::move(t));
    }
    return ckpt;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    // Write-then-rename so an interrupted save never clobbers the previous file.
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
        write_checkpoint(os, ckpt);
        if (!os) throw std::runtime_error("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
    return read_checkpoint(is, path.string());
}

}  // namespace mosaic::model
