#include "psonet/image.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "psonet/errors.hpp"

namespace psonet {

namespace {

void put_u32_be(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v >> 24));
    out.push_back(static_cast<uint8_t>(v >> 16));
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v));
}

uint32_t read_u32_be(const uint8_t* p) {
    return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
           (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

void append_chunk(std::vector<uint8_t>& out, const char type[4], const uint8_t* data, size_t len) {
    put_u32_be(out, static_cast<uint32_t>(len));
    const size_t type_pos = out.size();
    out.insert(out.end(), type, type + 4);
    if (len > 0) out.insert(out.end(), data, data + len);
    uint32_t crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, out.data() + type_pos, static_cast<uInt>(4 + len));
    put_u32_be(out, crc);
}

int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

} // namespace

void write_png(const std::filesystem::path& path, const ImageU8& image) {
    if (image.channels != 1 && image.channels != 3) {
        throw ValidationError("write_png supports 1 or 3 channels, got " +
                              std::to_string(image.channels));
    }
    if (image.width <= 0 || image.height <= 0 ||
        image.pixels.size() !=
            static_cast<size_t>(image.width) * image.height * image.channels) {
        throw ValidationError("write_png: image buffer does not match its dimensions");
    }

    const size_t stride = static_cast<size_t>(image.width) * image.channels;
    std::vector<uint8_t> raw;
    raw.reserve((stride + 1) * image.height);
    for (int y = 0; y < image.height; ++y) {
        raw.push_back(0); // filter: none
        const uint8_t* row = image.pixels.data() + static_cast<size_t>(y) * stride;
        raw.insert(raw.end(), row, row + stride);
    }

    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> compressed(bound);
    if (compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) !=
        Z_OK) {
        throw std::runtime_error("write_png: deflate failed");
    }
    compressed.resize(bound);

    std::vector<uint8_t> out;
    static const uint8_t signature[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    out.insert(out.end(), signature, signature + 8);

    uint8_t ihdr[13];
    ihdr[0] = static_cast<uint8_t>(image.width >> 24);
    ihdr[1] = static_cast<uint8_t>(image.width >> 16);
    ihdr[2] = static_cast<uint8_t>(image.width >> 8);
    ihdr[3] = static_cast<uint8_t>(image.width);
    ihdr[4] = static_cast<uint8_t>(image.height >> 24);
    ihdr[5] = static_cast<uint8_t>(image.height >> 16);
    ihdr[6] = static_cast<uint8_t>(image.height >> 8);
    ihdr[7] = static_cast<uint8_t>(image.height);
    ihdr[8] = 8;                                          // bit depth
    ihdr[9] = (image.channels == 3) ? 2 : 0;              // color type
    ihdr[10] = 0;                                         // compression
    ihdr[11] = 0;                                         // filter method
    ihdr[12] = 0;                                         // no interlace
    append_chunk(out, "IHDR", ihdr, sizeof(ihdr));
    append_chunk(out, "IDAT", compressed.data(), compressed.size());
    append_chunk(out, "IEND", nullptr, 0);

    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for writing: " + path.string());
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw std::runtime_error("write failed: " + path.string());
}

ImageU8 read_png(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ValidationError("cannot open image: " + path.string());
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());

    static const uint8_t signature[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    if (bytes.size() < 8 || std::memcmp(bytes.data(), signature, 8) != 0) {
        throw ValidationError("not a PNG file: " + path.string());
    }

    int width = 0, height = 0, bit_depth = 0, color_type = 0, interlace = 0;
    std::vector<uint8_t> idat;
    size_t pos = 8;
    bool saw_iend = false;
    while (pos + 8 <= bytes.size()) {
        const uint32_t len = read_u32_be(bytes.data() + pos);
        if (pos + 12 + len > bytes.size()) throw ValidationError("truncated PNG: " + path.string());
        const char* type = reinterpret_cast<const char*>(bytes.data() + pos + 4);
        const uint8_t* data = bytes.data() + pos + 8;
        if (std::memcmp(type, "IHDR", 4) == 0) {
            width = static_cast<int>(read_u32_be(data));
            height = static_cast<int>(read_u32_be(data + 4));
            bit_depth = data[8];
            color_type = data[9];
            interlace = data[12];
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), data, data + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            saw_iend = true;
            break;
        }
        pos += 12 + len;
    }
    if (width <= 0 || height <= 0 || !saw_iend) {
        throw ValidationError("malformed PNG: " + path.string());
    }
    if (bit_depth != 8) {
        throw ValidationError("unsupported PNG bit depth " + std::to_string(bit_depth) + ": " +
                              path.string());
    }
    if (interlace != 0) throw ValidationError("interlaced PNG unsupported: " + path.string());

    int src_channels = 0;
    switch (color_type) {
        case 0: src_channels = 1; break; // gray
        case 2: src_channels = 3; break; // rgb
        case 4: src_channels = 2; break; // gray + alpha
        case 6: src_channels = 4; break; // rgba
        default:
            throw ValidationError("unsupported PNG color type " + std::to_string(color_type) +
                                  ": " + path.string());
    }

    const size_t stride = static_cast<size_t>(width) * src_channels;
    std::vector<uint8_t> raw((stride + 1) * height);
    uLongf raw_len = static_cast<uLongf>(raw.size());
    if (uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
        raw_len != raw.size()) {
        throw ValidationError("PNG inflate failed: " + path.string());
    }

    // Undo per-row filters in place.
    std::vector<uint8_t> prev(stride, 0);
    const int bpp = src_channels;
    for (int y = 0; y < height; ++y) {
        uint8_t* row = raw.data() + static_cast<size_t>(y) * (stride + 1);
        const uint8_t filter = row[0];
        uint8_t* cur = row + 1;
        switch (filter) {
            case 0: break;
            case 1:
                for (size_t i = bpp; i < stride; ++i) cur[i] += cur[i - bpp];
                break;
            case 2:
                for (size_t i = 0; i < stride; ++i) cur[i] += prev[i];
                break;
            case 3:
                for (size_t i = 0; i < stride; ++i) {
                    const int a = (i >= static_cast<size_t>(bpp)) ? cur[i - bpp] : 0;
                    cur[i] = static_cast<uint8_t>(cur[i] + ((a + prev[i]) >> 1));
                }
                break;
            case 4:
                for (size_t i = 0; i < stride; ++i) {
                    const int a = (i >= static_cast<size_t>(bpp)) ? cur[i - bpp] : 0;
                    const int c = (i >= static_cast<size_t>(bpp)) ? prev[i - bpp] : 0;
                    cur[i] = static_cast<uint8_t>(cur[i] + paeth(a, prev[i], c));
                }
                break;
            default: throw ValidationError("unknown PNG filter: " + path.string());
        }
        std::copy(cur, cur + stride, prev.begin());
    }

    // Emit gray as-is, everything else as RGB with alpha discarded.
    const int out_channels = (src_channels == 1) ? 1 : 3;
    ImageU8 img{width, height, out_channels};
    img.pixels.resize(static_cast<size_t>(width) * height * out_channels);
    for (int y = 0; y < height; ++y) {
        const uint8_t* cur = raw.data() + static_cast<size_t>(y) * (stride + 1) + 1;
        for (int x = 0; x < width; ++x) {
            const uint8_t* px = cur + static_cast<size_t>(x) * src_channels;
            uint8_t* out = img.pixels.data() +
                           (static_cast<size_t>(y) * width + x) * out_channels;
            switch (src_channels) {
                case 1: out[0] = px[0]; break;
                case 2: out[0] = out[1] = out[2] = px[0]; break;
                case 3:
                case 4: out[0] = px[0]; out[1] = px[1]; out[2] = px[2]; break;
            }
        }
    }
    return img;
}

namespace {

struct LerpCoord {
    int lo, hi;
    double frac;
};

std::vector<LerpCoord> make_coords(int src, int dst) {
    std::vector<LerpCoord> coords(dst);
    const double scale = static_cast<double>(src) / dst;
    for (int i = 0; i < dst; ++i) {
        double pos = (i + 0.5) * scale - 0.5;
        pos = std::clamp(pos, 0.0, static_cast<double>(src - 1));
        const int lo = static_cast<int>(pos);
        coords[i] = {lo, std::min(lo + 1, src - 1), pos - lo};
    }
    return coords;
}

} // namespace

ImageF resize_bilinear(const ImageF& src, int out_height, int out_width) {
    if (src.height == out_height && src.width == out_width) return src;
    const auto ys = make_coords(src.height, out_height);
    const auto xs = make_coords(src.width, out_width);
    ImageF dst = ImageF::zeros(src.channels, out_height, out_width);
    for (int c = 0; c < src.channels; ++c) {
        for (int y = 0; y < out_height; ++y) {
            const auto& cy = ys[y];
            for (int x = 0; x < out_width; ++x) {
                const auto& cx = xs[x];
                const double top = src.at(c, cy.lo, cx.lo) * (1.0 - cx.frac) +
                                   src.at(c, cy.lo, cx.hi) * cx.frac;
                const double bot = src.at(c, cy.hi, cx.lo) * (1.0 - cx.frac) +
                                   src.at(c, cy.hi, cx.hi) * cx.frac;
                dst.at(c, y, x) = top * (1.0 - cy.frac) + bot * cy.frac;
            }
        }
    }
    return dst;
}

ImageU8 resize_bilinear(const ImageU8& src, int out_height, int out_width) {
    if (src.height == out_height && src.width == out_width) return src;
    return to_interleaved_u8(resize_bilinear(to_planar(src), out_height, out_width));
}

ImageF to_planar(const ImageU8& src) {
    ImageF dst = ImageF::zeros(src.channels, src.height, src.width);
    for (int y = 0; y < src.height; ++y) {
        for (int x = 0; x < src.width; ++x) {
            for (int c = 0; c < src.channels; ++c) {
                dst.at(c, y, x) = static_cast<double>(src.at(y, x, c));
            }
        }
    }
    return dst;
}

ImageU8 to_interleaved_u8(const ImageF& src) {
    ImageU8 dst{src.width, src.height, src.channels};
    dst.pixels.resize(src.numel());
    for (int y = 0; y < src.height; ++y) {
        for (int x = 0; x < src.width; ++x) {
            for (int c = 0; c < src.channels; ++c) {
                const double v = std::round(src.at(c, y, x));
                dst.at(y, x, c) = static_cast<uint8_t>(std::clamp(v, 0.0, 255.0));
            }
        }
    }
    return dst;
}

} // namespace psonet
