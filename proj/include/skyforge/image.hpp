#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <zlib.h>

#include <json.hpp>

namespace skyforge {

// Interleaved row-major float image, values nominally in [0, 1].
struct Image {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<float> data;

    Image() = default;
    Image(int w, int h, int c, float fill = 0.f)
        : width(w), height(h), channels(c),
          data(static_cast<std::size_t>(w) * h * c, fill) {}

    float& at(int x, int y, int c) {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    float at(int x, int y, int c) const {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    std::size_t size() const { return data.size(); }
    bool same_shape(const Image& o) const {
        return width == o.width && height == o.height && channels == o.channels;
    }
};

namespace detail {

inline void put_u32_be(std::vector<unsigned char>& out, std::uint32_t v) {
    out.push_back(static_cast<unsigned char>(v >> 24));
    out.push_back(static_cast<unsigned char>(v >> 16));
    out.push_back(static_cast<unsigned char>(v >> 8));
    out.push_back(static_cast<unsigned char>(v));
}

inline std::uint32_t get_u32_be(const unsigned char* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
           (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

inline void png_chunk(std::vector<unsigned char>& out, const char type[4],
                      const std::vector<unsigned char>& payload) {
    put_u32_be(out, static_cast<std::uint32_t>(payload.size()));
    std::size_t crc_start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    const std::uint32_t crc = static_cast<std::uint32_t>(
        ::crc32(0L, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start)));
    put_u32_be(out, crc);
}

inline std::vector<unsigned char> zlib_compress(const std::vector<unsigned char>& in) {
    uLongf bound = ::compressBound(static_cast<uLong>(in.size()));
    std::vector<unsigned char> out(bound);
    // Fixed compression level so outputs are byte-reproducible.
    if (::compress2(out.data(), &bound, in.data(), static_cast<uLong>(in.size()), 6) != Z_OK)
        throw std::runtime_error("png: deflate failed");
    out.resize(bound);
    return out;
}

inline std::vector<unsigned char> zlib_decompress(const unsigned char* p, std::size_t n,
                                                  std::size_t expected) {
    std::vector<unsigned char> out(expected);
    uLongf len = static_cast<uLongf>(expected);
    if (::uncompress(out.data(), &len, p, static_cast<uLong>(n)) != Z_OK || len != expected)
        throw std::runtime_error("png: inflate failed");
    return out;
}

inline int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

}  // namespace detail

inline unsigned char to_u8(float v) {
    const float c = std::clamp(v, 0.f, 1.f);
    return static_cast<unsigned char>(c * 255.f + 0.5f);
}

// Minimal PNG writer: 8-bit gray or RGB, filter 0 rows, fixed deflate level.
inline void write_png(const std::filesystem::path& path, const Image& img) {
    if (img.channels != 1 && img.channels != 3)
        throw std::invalid_argument("write_png: channels must be 1 or 3");
    const int bpp = img.channels;
    std::vector<unsigned char> raw;
    raw.reserve(static_cast<std::size_t>(img.height) * (1 + static_cast<std::size_t>(img.width) * bpp));
    for (int y = 0; y < img.height; ++y) {
        raw.push_back(0);  // filter type 0
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < bpp; ++c) raw.push_back(to_u8(img.at(x, y, c)));
    }

    std::vector<unsigned char> out;
    const unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    out.insert(out.end(), sig, sig + 8);

    std::vector<unsigned char> ihdr;
    detail::put_u32_be(ihdr, static_cast<std::uint32_t>(img.width));
    detail::put_u32_be(ihdr, static_cast<std::uint32_t>(img.height));
    ihdr.push_back(8);                                      // bit depth
    ihdr.push_back(img.channels == 3 ? 2 : 0);              // color type
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    detail::png_chunk(out, "IHDR", ihdr);
    detail::png_chunk(out, "IDAT", detail::zlib_compress(raw));
    detail::png_chunk(out, "IEND", {});

    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_png: cannot open " + path.string());
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

inline Image read_png(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_png: cannot open " + path.string());
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
    if (buf.size() < 8 || std::memcmp(buf.data(), "\x89PNG\r\n\x1a\n", 8) != 0)
        throw std::runtime_error("read_png: not a PNG: " + path.string());

    int width = 0, height = 0, channels = 0;
    std::vector<unsigned char> idat;
    std::size_t pos = 8;
    while (pos + 8 <= buf.size()) {
        const std::uint32_t len = detail::get_u32_be(buf.data() + pos);
        const char* type = reinterpret_cast<const char*>(buf.data() + pos + 4);
        const unsigned char* payload = buf.data() + pos + 8;
        if (std::memcmp(type, "IHDR", 4) == 0) {
            width = static_cast<int>(detail::get_u32_be(payload));
            height = static_cast<int>(detail::get_u32_be(payload + 4));
            const int bit_depth = payload[8];
            const int color_type = payload[9];
            if (bit_depth != 8 || (color_type != 0 && color_type != 2) || payload[12] != 0)
                throw std::runtime_error("read_png: unsupported format");
            channels = color_type == 2 ? 3 : 1;
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), payload, payload + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            break;
        }
        pos += 12 + len;
    }
    if (width <= 0 || height <= 0) throw std::runtime_error("read_png: missing IHDR");

    const int bpp = channels;
    const std::size_t stride = static_cast<std::size_t>(width) * bpp;
    auto raw = detail::zlib_decompress(idat.data(), idat.size(),
                                       static_cast<std::size_t>(height) * (stride + 1));

    Image img(width, height, channels);
    std::vector<unsigned char> prev(stride, 0), cur(stride, 0);
    for (int y = 0; y < height; ++y) {
        const unsigned char filter = raw[static_cast<std::size_t>(y) * (stride + 1)];
        const unsigned char* src = raw.data() + static_cast<std::size_t>(y) * (stride + 1) + 1;
        for (std::size_t i = 0; i < stride; ++i) {
            const int a = i >= static_cast<std::size_t>(bpp) ? cur[i - bpp] : 0;
            const int b = prev[i];
            const int c = i >= static_cast<std::size_t>(bpp) ? prev[i - bpp] : 0;
            int v = src[i];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += detail::paeth(a, b, c); break;
                default: throw std::runtime_error("read_png: bad filter");
            }
            cur[i] = static_cast<unsigned char>(v & 0xff);
        }
        for (int x = 0; x < width; ++x)
            for (int ch = 0; ch < bpp; ++ch)
                img.at(x, y, ch) = cur[static_cast<std::size_t>(x) * bpp + ch] / 255.f;
        std::swap(prev, cur);
    }
    return img;
}

// Single-channel raster of 32-bit little-endian floats, row-major, with a
// sidecar header file recording the dimensions.
inline void write_f32_raster(const std::filesystem::path& path, const Image& img) {
    if (img.channels != 1) throw std::invalid_argument("write_f32_raster: 1 channel expected");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_f32_raster: cannot open " + path.string());
    static_assert(sizeof(float) == 4);
    f.write(reinterpret_cast<const char*>(img.data.data()),
            static_cast<std::streamsize>(img.data.size() * 4));
    nlohmann::json hdr{{"width", img.width}, {"height", img.height}, {"dtype", "f32le"}};
    std::ofstream h(path.string() + ".json");
    h << hdr.dump(2) << "\n";
}

inline Image read_f32_raster(const std::filesystem::path& path) {
    std::ifstream h(path.string() + ".json");
    if (!h) throw std::runtime_error("read_f32_raster: missing header for " + path.string());
    nlohmann::json hdr = nlohmann::json::parse(h);
    Image img(hdr.at("width").get<int>(), hdr.at("height").get<int>(), 1);
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_f32_raster: cannot open " + path.string());
    f.read(reinterpret_cast<char*>(img.data.data()),
           static_cast<std::streamsize>(img.data.size() * 4));
    if (f.gcount() != static_cast<std::streamsize>(img.data.size() * 4))
        throw std::runtime_error("read_f32_raster: truncated raster " + path.string());
    return img;
}

}  // namespace skyforge
