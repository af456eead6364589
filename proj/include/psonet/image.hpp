#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace psonet {

// Interleaved 8-bit image, row-major. channels is 1 (gray) or 3 (RGB).
struct ImageU8 {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<uint8_t> pixels;

    static ImageU8 filled(int width, int height, int channels, uint8_t value) {
        ImageU8 img{width, height, channels};
        img.pixels.assign(static_cast<size_t>(width) * height * channels, value);
        return img;
    }

    uint8_t& at(int y, int x, int c) {
        return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    uint8_t at(int y, int x, int c) const {
        return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
    }
};

// Planar CHW double image; the unit the model consumes.
struct ImageF {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<double> values;

    static ImageF zeros(int channels, int height, int width) {
        ImageF img{channels, height, width};
        img.values.assign(static_cast<size_t>(channels) * height * width, 0.0);
        return img;
    }

    double& at(int c, int y, int x) {
        return values[(static_cast<size_t>(c) * height + y) * width + x];
    }
    double at(int c, int y, int x) const {
        return values[(static_cast<size_t>(c) * height + y) * width + x];
    }

    size_t numel() const { return values.size(); }
};

// 8-bit PNG, color types gray / RGB on write; gray, RGB, and their alpha
// variants on read (alpha is dropped). Throws on anything else.
void write_png(const std::filesystem::path& path, const ImageU8& image);
ImageU8 read_png(const std::filesystem::path& path);

// Bilinear resampling with half-pixel centers and edge clamping.
ImageU8 resize_bilinear(const ImageU8& src, int out_height, int out_width);
ImageF resize_bilinear(const ImageF& src, int out_height, int out_width);

// Interleaved u8 -> planar double in [0, 255] (no normalization).
ImageF to_planar(const ImageU8& src);
// Planar double in [0, 255] -> interleaved u8 with clamping and rounding.
ImageU8 to_interleaved_u8(const ImageF& src);

} // namespace psonet
