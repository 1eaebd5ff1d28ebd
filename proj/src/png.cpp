#include "protoprp/png.hpp"

#include "protoprp/errors.hpp"
#include "protoprp/ptns.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>

namespace protoprp {

namespace {

void put_u32be(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
}

void put_chunk(std::vector<std::uint8_t>& out, const char type[4],
               const std::vector<std::uint8_t>& payload) {
    put_u32be(out, static_cast<std::uint32_t>(payload.size()));
    const std::size_t crc_start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    const auto crc = crc32(0L, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start));
    put_u32be(out, static_cast<std::uint32_t>(crc));
}

} // namespace

void write_png_rgb(const std::string& path, int width, int height,
                   const std::vector<std::uint8_t>& rgb) {
    if (width < 1 || height < 1)
        throw IoError("png: image dimensions must be positive");
    if (rgb.size() != static_cast<std::size_t>(width) * height * 3)
        throw IoError("png: pixel buffer size mismatch");

    // raw scanlines, each prefixed with filter byte 0
    std::vector<std::uint8_t> raw;
    raw.reserve(static_cast<std::size_t>(height) * (1 + 3 * width));
    for (int y = 0; y < height; ++y) {
        raw.push_back(0);
        const std::uint8_t* row = rgb.data() + static_cast<std::size_t>(y) * width * 3;
        raw.insert(raw.end(), row, row + 3 * width);
    }

    uLongf comp_len = compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> comp(comp_len);
    if (compress2(comp.data(), &comp_len, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK)
        throw IoError("png: zlib compression failed for " + path);
    comp.resize(comp_len);

    std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    std::vector<std::uint8_t> ihdr;
    put_u32be(ihdr, static_cast<std::uint32_t>(width));
    put_u32be(ihdr, static_cast<std::uint32_t>(height));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(2);  // truecolor RGB
    ihdr.push_back(0);  // compression
    ihdr.push_back(0);  // filter
    ihdr.push_back(0);  // no interlace
    put_chunk(out, "IHDR", ihdr);
    put_chunk(out, "IDAT", comp);
    put_chunk(out, "IEND", {});
    write_file_bytes(path, out);
}

void write_image_png(const std::string& path, const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 3)
        throw IoError("png: expected [3,H,W] image, got " + image.shape_str());
    const int h = image.dim(1), w = image.dim(2);
    std::vector<std::uint8_t> rgb(static_cast<std::size_t>(h) * w * 3);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                float v = image.at(c, y, x);
                if (v < 0.0f) v = 0.0f;
                if (v > 1.0f) v = 1.0f;
                rgb[(static_cast<std::size_t>(y) * w + x) * 3 + c] =
                    static_cast<std::uint8_t>(std::lround(255.0f * v));
            }
        }
    }
    write_png_rgb(path, w, h, rgb);
}

void relevance_rgb(float value, float vmax, std::uint8_t out[3]) {
    if (vmax <= 0.0f) {
        out[0] = out[1] = out[2] = 255;
        return;
    }
    long q = std::lround(255.0 * std::fabs(static_cast<double>(value)) / vmax);
    if (q < 0) q = 0;
    if (q > 255) q = 255;
    const auto shade = static_cast<std::uint8_t>(255 - q);
    if (value >= 0.0f) {
        out[0] = 255;
        out[1] = shade;
        out[2] = shade;
    } else {
        out[0] = shade;
        out[1] = shade;
        out[2] = 255;
    }
}

void write_relevance_png(const std::string& path, const Tensor& map2d) {
    if (map2d.rank() != 2)
        throw IoError("png: relevance render expects rank-2 map, got " + map2d.shape_str());
    const int h = map2d.dim(0), w = map2d.dim(1);
    const float vmax = map2d.max_abs();
    std::vector<std::uint8_t> rgb(static_cast<std::size_t>(h) * w * 3);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            relevance_rgb(map2d.at(y, x), vmax, rgb.data() + (static_cast<std::size_t>(y) * w + x) * 3);
    write_png_rgb(path, w, h, rgb);
}

} // namespace protoprp
