#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace backdoorlab {

using Rgb = std::array<std::uint8_t, 3>;

/// Row-major RGB8 raster.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;  // 3 bytes per pixel

    static Image solid(int w, int h, Rgb color);

    std::uint8_t* at(int x, int y) { return pixels.data() + 3 * (static_cast<std::size_t>(y) * width + x); }
    const std::uint8_t* at(int x, int y) const {
        return pixels.data() + 3 * (static_cast<std::size_t>(y) * width + x);
    }
    void set(int x, int y, Rgb c) {
        auto* p = at(x, y);
        p[0] = c[0]; p[1] = c[1]; p[2] = c[2];
    }
};

/// Fills an axis-aligned rectangle, clipped to the image bounds.
void fill_rect(Image& img, int x0, int y0, int x1, int y1, Rgb color);

/// Fills the disc inscribed in the given rectangle, clipped to the image.
void fill_disc(Image& img, int x0, int y0, int x1, int y1, Rgb color);

void write_png(const Image& img, const std::string& path);
Image read_png(const std::string& path);

std::string base64_encode(const std::vector<std::uint8_t>& data);
std::vector<std::uint8_t> base64_decode(const std::string& text);

/// Inline manifest raster: base64 of the raw RGB8 bytes (size 3*w*h).
std::string encode_inline(const Image& img);
Image decode_inline(const std::string& text, int width, int height);

}  // namespace backdoorlab
