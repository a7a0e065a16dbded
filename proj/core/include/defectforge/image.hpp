#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "defectforge/errors.hpp"

namespace df {

// H×W×C float image, values in [0,1], row-major, channel-last.
struct Image {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<float> data;

    Image() = default;
    Image(int h, int w, int c, float fill = 0.0f)
        : height(h), width(w), channels(c),
          data(static_cast<std::size_t>(h) * w * c, fill) {}

    float& at(int y, int x, int c) {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    float at(int y, int x, int c) const {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    std::size_t pixel_count() const {
        return static_cast<std::size_t>(height) * width;
    }
    bool same_shape(const Image& o) const {
        return height == o.height && width == o.width && channels == o.channels;
    }
};

// Binary pixel selector paired with an Image of the same H×W.
struct RegionMask {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> bits;

    RegionMask() = default;
    RegionMask(int h, int w, bool fill = false)
        : height(h), width(w),
          bits(static_cast<std::size_t>(h) * w, fill ? 1 : 0) {}

    bool at(int y, int x) const {
        return bits[static_cast<std::size_t>(y) * width + x] != 0;
    }
    void set(int y, int x, bool v) {
        bits[static_cast<std::size_t>(y) * width + x] = v ? 1 : 0;
    }
    std::size_t popcount() const {
        std::size_t n = 0;
        for (auto b : bits) n += (b != 0);
        return n;
    }
    bool empty_region() const { return popcount() == 0; }
};

struct BBox {
    int top = 0, left = 0, height = 0, width = 0;
};

// Per-channel counts over B equal-width bins on [0,1].
struct Histogram {
    int bins = 0;
    std::vector<std::vector<std::uint64_t>> counts;  // [channel][bin]
};

// Fusion weight field in [0,1]; exactly 0 outside the generating region.
struct SoftMask {
    int height = 0;
    int width = 0;
    std::vector<float> weights;

    SoftMask() = default;
    SoftMask(int h, int w, float fill = 0.0f)
        : height(h), width(w),
          weights(static_cast<std::size_t>(h) * w, fill) {}

    float at(int y, int x) const {
        return weights[static_cast<std::size_t>(y) * width + x];
    }
};

Histogram channel_histogram(const Image& img, const RegionMask& mask, int bins);

// Remaps src_region pixels per channel by CDF composition against the
// distribution of ref inside ref_region; pixels outside src_region are
// bit-identical to src.
Image hist_match_region(const Image& src, const RegionMask& src_region,
                        const Image& ref, const RegionMask& ref_region,
                        int bins = 256);

// Gaussian blur of the binary mask (std sigma, radius ceil(3*sigma),
// reflection boundary), then zeroed outside the mask.
SoftMask gaussian_fusion_mask(const RegionMask& region, double sigma);

// out = weights*patch + (1-weights)*background, pixelwise.
Image compose_region(const Image& background, const Image& patch,
                     const SoftMask& weights);

// Tight bounding box of the set bits, expanded by margin and clipped.
BBox region_bbox(const RegionMask& region, int margin = 0);

// Default fusion width: max(1, min(bbox_h, bbox_w)/4).
double default_fusion_sigma(const RegionMask& region);

Image crop_image(const Image& img, const BBox& box);
RegionMask crop_mask(const RegionMask& mask, const BBox& box);

// PNG boundary: 8-bit RGB or grayscale; masks are single-channel PNGs where
// value >= 128 means inside-region. Float<->8bit uses round-half-up.
Image read_png(const std::string& path);
void write_png(const std::string& path, const Image& img);
RegionMask read_mask_png(const std::string& path);
void write_mask_png(const std::string& path, const RegionMask& mask);

}  // namespace df
