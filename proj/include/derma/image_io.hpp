#pragma once

// 8-bit image containers and file codecs. Binary PPM (P6) and PGM (P5) are the
// dependency-free floor; PNG support covers 8-bit non-interlaced gray, gray+
// alpha, RGB, and RGBA with all five scanline filters on decode. Masks are
// written as PGM with values {0,255}.

#include <zlib.h>

#include <cctype>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace derma {

struct Image8 {
    int width = 0;
    int height = 0;
    int channels = 0;  // 1 gray, 2 gray+alpha, 3 RGB, 4 RGBA
    std::vector<std::uint8_t> pixels;  // row-major, interleaved channels

    Image8() = default;
    Image8(int w, int h, int c)
        : width(w), height(h), channels(c),
          pixels(static_cast<std::size_t>(w) * h * c, 0) {
        if (w < 1 || h < 1 || c < 1 || c > 4)
            throw std::invalid_argument("Image8: bad extents");
    }
    std::uint8_t& at(int y, int x, int c) {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    std::uint8_t at(int y, int x, int c) const {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
};

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in),
                                     std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed on " + path);
}

inline std::vector<std::uint8_t> zlib_deflate(const std::uint8_t* data, std::size_t n) {
    uLongf bound = compressBound(static_cast<uLong>(n));
    std::vector<std::uint8_t> out(bound);
    if (compress2(out.data(), &bound, data, static_cast<uLong>(n), 6) != Z_OK)
        throw std::runtime_error("zlib compression failed");
    out.resize(bound);
    return out;
}

inline std::vector<std::uint8_t> zlib_inflate(const std::uint8_t* data, std::size_t n) {
    z_stream zs{};
    if (inflateInit(&zs) != Z_OK) throw std::runtime_error("zlib init failed");
    zs.next_in = const_cast<Bytef*>(data);
    zs.avail_in = static_cast<uInt>(n);
    std::vector<std::uint8_t> out;
    std::uint8_t buf[65536];
    int rc = Z_OK;
    while (rc != Z_STREAM_END) {
        zs.next_out = buf;
        zs.avail_out = sizeof buf;
        rc = inflate(&zs, Z_NO_FLUSH);
        if (rc != Z_OK && rc != Z_STREAM_END) {
            inflateEnd(&zs);
            throw std::runtime_error("corrupt zlib stream");
        }
        out.insert(out.end(), buf, buf + (sizeof buf - zs.avail_out));
    }
    inflateEnd(&zs);
    return out;
}

inline void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

inline std::uint32_t get_be32(const std::uint8_t* p) {
    return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
           (static_cast<std::uint32_t>(p[2]) << 8) | p[3];
}

inline void png_chunk(std::vector<std::uint8_t>& out, const char type[4],
                      const std::vector<std::uint8_t>& data) {
    put_be32(out, static_cast<std::uint32_t>(data.size()));
    const std::size_t crc_start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    const uLong crc =
        crc32(0, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start));
    put_be32(out, static_cast<std::uint32_t>(crc));
}

inline int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    return pb <= pc ? b : c;
}

constexpr std::uint8_t kPngSig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};

}  // namespace detail

// ---- PPM / PGM ----

namespace detail {

inline int next_pnm_int(const std::vector<std::uint8_t>& b, std::size_t& i,
                        const std::string& path) {
    while (i < b.size()) {
        if (b[i] == '#') {
            while (i < b.size() && b[i] != '\n') ++i;
        } else if (std::isspace(b[i])) {
            ++i;
        } else {
            break;
        }
    }
    if (i >= b.size() || !std::isdigit(b[i]))
        throw std::runtime_error("malformed PNM header in " + path);
    int v = 0;
    while (i < b.size() && std::isdigit(b[i])) v = v * 10 + (b[i++] - '0');
    return v;
}

inline Image8 read_pnm(const std::string& path, char digit, int channels) {
    auto bytes = read_file(path);
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != digit)
        throw std::runtime_error(path + ": not a P" + std::string(1, digit) + " file");
    std::size_t i = 2;
    const int w = next_pnm_int(bytes, i, path);
    const int h = next_pnm_int(bytes, i, path);
    const int maxval = next_pnm_int(bytes, i, path);
    if (maxval != 255) throw std::runtime_error(path + ": only maxval 255 supported");
    ++i;  // single whitespace byte after maxval
    Image8 img(w, h, channels);
    if (bytes.size() - i < img.pixels.size())
        throw std::runtime_error(path + ": truncated pixel data");
    std::memcpy(img.pixels.data(), bytes.data() + i, img.pixels.size());
    return img;
}

}  // namespace detail

inline Image8 read_ppm(const std::string& path) { return detail::read_pnm(path, '6', 3); }
inline Image8 read_pgm(const std::string& path) { return detail::read_pnm(path, '5', 1); }

inline void write_ppm(const std::string& path, const Image8& img) {
    if (img.channels != 3) throw std::invalid_argument("write_ppm: needs 3 channels");
    std::string header =
        "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), img.pixels.begin(), img.pixels.end());
    detail::write_file(path, out);
}

inline void write_pgm(const std::string& path, const Image8& img) {
    if (img.channels != 1) throw std::invalid_argument("write_pgm: needs 1 channel");
    std::string header =
        "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), img.pixels.begin(), img.pixels.end());
    detail::write_file(path, out);
}

// ---- PNG ----

inline Image8 decode_png(const std::vector<std::uint8_t>& bytes, const std::string& name) {
    using namespace detail;
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kPngSig, 8) != 0)
        throw std::runtime_error(name + ": not a PNG file");
    std::size_t i = 8;
    int w = 0, h = 0, channels = 0;
    std::vector<std::uint8_t> idat;
    bool saw_ihdr = false, saw_iend = false;
    while (i + 8 <= bytes.size() && !saw_iend) {
        const std::uint32_t len = get_be32(&bytes[i]);
        if (i + 12 + len > bytes.size()) throw std::runtime_error(name + ": truncated chunk");
        const char* type = reinterpret_cast<const char*>(&bytes[i + 4]);
        const std::uint8_t* data = &bytes[i + 8];
        if (std::memcmp(type, "IHDR", 4) == 0) {
            if (len != 13) throw std::runtime_error(name + ": bad IHDR");
            w = static_cast<int>(get_be32(data));
            h = static_cast<int>(get_be32(data + 4));
            const int depth = data[8], color = data[9], interlace = data[12];
            if (depth != 8) throw std::runtime_error(name + ": only 8-bit PNG supported");
            if (interlace != 0) throw std::runtime_error(name + ": interlaced PNG unsupported");
            switch (color) {
                case 0: channels = 1; break;
                case 2: channels = 3; break;
                case 4: channels = 2; break;
                case 6: channels = 4; break;
                default: throw std::runtime_error(name + ": unsupported PNG color type");
            }
            saw_ihdr = true;
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), data, data + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            saw_iend = true;
        }
        i += 12 + len;
    }
    if (!saw_ihdr || w < 1 || h < 1) throw std::runtime_error(name + ": missing IHDR");
    auto raw = zlib_inflate(idat.data(), idat.size());
    const std::size_t stride = static_cast<std::size_t>(w) * channels;
    if (raw.size() != (stride + 1) * static_cast<std::size_t>(h))
        throw std::runtime_error(name + ": scanline size mismatch");

    Image8 img(w, h, channels);
    const int bpp = channels;
    std::vector<std::uint8_t> prev(stride, 0);
    for (int y = 0; y < h; ++y) {
        const std::uint8_t filter = raw[(stride + 1) * y];
        const std::uint8_t* src = &raw[(stride + 1) * y + 1];
        std::uint8_t* dst = &img.pixels[stride * y];
        for (std::size_t x = 0; x < stride; ++x) {
            const int a = x >= static_cast<std::size_t>(bpp) ? dst[x - bpp] : 0;
            const int b = prev[x];
            const int c = x >= static_cast<std::size_t>(bpp) ? prev[x - bpp] : 0;
            int v = src[x];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += paeth(a, b, c); break;
                default: throw std::runtime_error(name + ": unknown PNG filter");
            }
            dst[x] = static_cast<std::uint8_t>(v & 0xff);
        }
        std::memcpy(prev.data(), dst, stride);
    }
    return img;
}

inline Image8 read_png(const std::string& path) {
    return decode_png(detail::read_file(path), path);
}

inline std::vector<std::uint8_t> encode_png(const Image8& img) {
    using namespace detail;
    int color;
    switch (img.channels) {
        case 1: color = 0; break;
        case 2: color = 4; break;
        case 3: color = 2; break;
        case 4: color = 6; break;
        default: throw std::invalid_argument("encode_png: bad channel count");
    }
    const std::size_t stride = static_cast<std::size_t>(img.width) * img.channels;
    std::vector<std::uint8_t> raw((stride + 1) * img.height);
    for (int y = 0; y < img.height; ++y) {
        raw[(stride + 1) * y] = 0;  // filter: none
        std::memcpy(&raw[(stride + 1) * y + 1], &img.pixels[stride * y], stride);
    }
    auto compressed = zlib_deflate(raw.data(), raw.size());

    std::vector<std::uint8_t> out(kPngSig, kPngSig + 8);
    std::vector<std::uint8_t> ihdr;
    put_be32(ihdr, static_cast<std::uint32_t>(img.width));
    put_be32(ihdr, static_cast<std::uint32_t>(img.height));
    ihdr.push_back(8);
    ihdr.push_back(static_cast<std::uint8_t>(color));
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    png_chunk(out, "IHDR", ihdr);
    png_chunk(out, "IDAT", compressed);
    png_chunk(out, "IEND", {});
    return out;
}

inline void write_png(const std::string& path, const Image8& img) {
    detail::write_file(path, encode_png(img));
}

// ---- dispatch + conversions ----

inline Image8 read_image(const std::string& path) {
    auto bytes = detail::read_file(path);
    if (bytes.size() >= 8 && std::memcmp(bytes.data(), detail::kPngSig, 8) == 0)
        return decode_png(bytes, path);
    if (bytes.size() >= 2 && bytes[0] == 'P' && (bytes[1] == '5' || bytes[1] == '6')) {
        // Re-read through the PNM path to keep one parser.
        return bytes[1] == '6' ? read_ppm(path) : read_pgm(path);
    }
    throw std::runtime_error(path + ": unrecognized image format");
}

inline void write_image(const std::string& path, const Image8& img) {
    auto ends_with = [&](const char* suffix) {
        const std::size_t n = std::strlen(suffix);
        return path.size() >= n && path.compare(path.size() - n, n, suffix) == 0;
    };
    if (ends_with(".png")) write_png(path, img);
    else if (ends_with(".ppm")) write_ppm(path, img);
    else if (ends_with(".pgm")) write_pgm(path, img);
    else throw std::invalid_argument(path + ": unknown image extension");
}

/// Collapse to 3 channels: gray is replicated, alpha dropped.
inline Image8 to_rgb(const Image8& img) {
    if (img.channels == 3) return img;
    Image8 out(img.width, img.height, 3);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c)
                out.at(y, x, c) = img.channels <= 2 ? img.at(y, x, 0)
                                                    : img.at(y, x, c);
    return out;
}

/// Collapse to 1 channel; color converted by integer luma (BT.601 weights).
inline Image8 to_gray(const Image8& img) {
    if (img.channels == 1) return img;
    Image8 out(img.width, img.height, 1);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            if (img.channels == 2) {
                out.at(y, x, 0) = img.at(y, x, 0);
            } else {
                const int v = 299 * img.at(y, x, 0) + 587 * img.at(y, x, 1) +
                              114 * img.at(y, x, 2);
                out.at(y, x, 0) = static_cast<std::uint8_t>(v / 1000);
            }
        }
    return out;
}

}  // namespace derma
