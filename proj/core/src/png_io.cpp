#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

#include "defectforge/image.hpp"

namespace df {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

std::uint8_t to_u8(float v) {
    // round-half-up on the 8-bit boundary
    const double x = std::floor(static_cast<double>(v) * 255.0 + 0.5);
    return static_cast<std::uint8_t>(std::clamp(x, 0.0, 255.0));
}

std::vector<std::uint8_t> read_png_bytes(const std::string& path, int& h, int& w, int& c) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng init failed for " + path);
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("failed to decode " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_packing(png);
    png_set_expand(png);
    if (png_get_color_type(png, info) == PNG_COLOR_TYPE_PALETTE)
        png_set_palette_to_rgb(png);
    png_read_update_info(png, info);

    h = static_cast<int>(png_get_image_height(png, info));
    w = static_cast<int>(png_get_image_width(png, info));
    c = static_cast<int>(png_get_channels(png, info));
    if (c != 1 && c != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError(path + ": only 8-bit gray or RGB PNGs supported");
    }

    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(h) * w * c);
    std::vector<png_bytep> rows(h);
    for (int y = 0; y < h; ++y)
        rows[y] = bytes.data() + static_cast<std::size_t>(y) * w * c;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return bytes;
}

void write_png_bytes(const std::string& path, const std::uint8_t* bytes, int h, int w, int c) {
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot open " + path + " for writing");

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng init failed for " + path);
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("failed to encode " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, w, h, 8,
                 c == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(h);
    for (int y = 0; y < h; ++y)
        rows[y] = const_cast<png_bytep>(bytes) + static_cast<std::size_t>(y) * w * c;
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

}  // namespace

Image read_png(const std::string& path) {
    int h = 0, w = 0, c = 0;
    const auto bytes = read_png_bytes(path, h, w, c);
    Image img(h, w, c);
    for (std::size_t i = 0; i < bytes.size(); ++i)
        img.data[i] = static_cast<float>(bytes[i]) / 255.0f;
    return img;
}

void write_png(const std::string& path, const Image& img) {
    std::vector<std::uint8_t> bytes(img.data.size());
    for (std::size_t i = 0; i < bytes.size(); ++i)
        bytes[i] = to_u8(img.data[i]);
    write_png_bytes(path, bytes.data(), img.height, img.width, img.channels);
}

RegionMask read_mask_png(const std::string& path) {
    int h = 0, w = 0, c = 0;
    const auto bytes = read_png_bytes(path, h, w, c);
    if (c != 1) throw IoError(path + ": masks must be single-channel PNGs");
    RegionMask mask(h, w);
    for (std::size_t i = 0; i < bytes.size(); ++i)
        mask.bits[i] = bytes[i] >= 128 ? 1 : 0;
    return mask;
}

void write_mask_png(const std::string& path, const RegionMask& mask) {
    std::vector<std::uint8_t> bytes(mask.bits.size());
    for (std::size_t i = 0; i < bytes.size(); ++i)
        bytes[i] = mask.bits[i] ? 255 : 0;
    write_png_bytes(path, bytes.data(), mask.height, mask.width, 1);
}

}  // namespace df
