#pragma once

// Minimal 8-bit RGB PNG writer for visual inspection of slices. One IDAT
// chunk, no interlacing, filter byte 0 on every row, zlib at default level.
// The [-1,1] slice range maps to 8 bits as round((v+1)/2 * 255) after
// clamping; the colormap is a pluggable lookup on that unit value.

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <zlib.h>

#include "uhfsynth/binio.hpp"
#include "uhfsynth/synthdata.hpp"

namespace uhfsynth {

using ColorLut = std::function<std::array<uint8_t, 3>(real)>; // unit value in [0,1] -> RGB

inline std::array<uint8_t, 3> gray_lut(real t) {
    const uint8_t g = static_cast<uint8_t>(std::lround(std::clamp(t, 0.0, 1.0) * 255.0));
    return {g, g, g};
}

// generic warm colormap standing in for a publication-grade one: dark blue
// through red to light yellow, monotone in luminance
inline std::array<uint8_t, 3> warm_lut(real t) {
    t = std::clamp(t, 0.0, 1.0);
    const real r = std::clamp(1.6 * t, 0.0, 1.0);
    const real g = std::clamp(1.6 * t - 0.45, 0.0, 1.0);
    const real b = std::clamp(0.45 - 1.4 * t, 0.0, 1.0) + std::clamp(2.5 * t - 1.8, 0.0, 0.7);
    return {static_cast<uint8_t>(std::lround(r * 255.0)),
            static_cast<uint8_t>(std::lround(g * 255.0)),
            static_cast<uint8_t>(std::lround(std::clamp(b, 0.0, 1.0) * 255.0))};
}

namespace detail {

inline void png_u32be(std::vector<uint8_t>& buf, uint32_t v) {
    for (int i = 3; i >= 0; --i) buf.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

inline void png_chunk(std::vector<uint8_t>& out, const char type[4],
                      const std::vector<uint8_t>& data) {
    png_u32be(out, static_cast<uint32_t>(data.size()));
    std::vector<uint8_t> body(type, type + 4);
    body.insert(body.end(), data.begin(), data.end());
    out.insert(out.end(), body.begin(), body.end());
    const uint32_t crc = static_cast<uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size())));
    png_u32be(out, crc);
}

} // namespace detail

inline void write_png_rgb(const std::string& path, int64_t height, int64_t width,
                          const std::vector<uint8_t>& rgb) {
    check(height >= 1 && width >= 1, "png: dims must be >= 1, got ", height, "x", width);
    check(static_cast<int64_t>(rgb.size()) == height * width * 3, "png: buffer holds ",
          rgb.size(), " bytes, dims need ", height * width * 3);

    std::vector<uint8_t> out{0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};

    std::vector<uint8_t> ihdr;
    detail::png_u32be(ihdr, static_cast<uint32_t>(width));
    detail::png_u32be(ihdr, static_cast<uint32_t>(height));
    ihdr.push_back(8); // bit depth
    ihdr.push_back(2); // color type: truecolor
    ihdr.push_back(0); // compression
    ihdr.push_back(0); // filter
    ihdr.push_back(0); // interlace
    detail::png_chunk(out, "IHDR", ihdr);

    std::vector<uint8_t> raw;
    raw.reserve(static_cast<size_t>(height * (width * 3 + 1)));
    for (int64_t h = 0; h < height; ++h) {
        raw.push_back(0); // filter: none
        const auto* row = rgb.data() + h * width * 3;
        raw.insert(raw.end(), row, row + width * 3);
    }
    uLongf comp_len = compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> comp(comp_len);
    const int rc = compress2(comp.data(), &comp_len, raw.data(), static_cast<uLong>(raw.size()),
                             Z_DEFAULT_COMPRESSION);
    check(rc == Z_OK, "png: zlib compression failed with code ", rc);
    comp.resize(comp_len);
    detail::png_chunk(out, "IDAT", comp);
    detail::png_chunk(out, "IEND", {});

    detail::write_file_bytes(path, out);
}

inline void write_slice_png(const std::string& path, const Slice& s,
                            const ColorLut& lut = gray_lut) {
    std::vector<uint8_t> rgb(static_cast<size_t>(s.height * s.width * 3));
    for (int64_t i = 0; i < s.height * s.width; ++i) {
        const real unit = (std::clamp(s.pix[static_cast<size_t>(i)], -1.0, 1.0) + 1.0) / 2.0;
        const auto c = lut(unit);
        rgb[static_cast<size_t>(3 * i)] = c[0];
        rgb[static_cast<size_t>(3 * i + 1)] = c[1];
        rgb[static_cast<size_t>(3 * i + 2)] = c[2];
    }
    write_png_rgb(path, s.height, s.width, rgb);
}

} // namespace uhfsynth
