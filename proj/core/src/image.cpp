#include "defectforge/image.hpp"

#include <algorithm>
#include <cmath>

namespace df {

namespace {

void check_mask_shape(const Image& img, const RegionMask& mask, const char* where) {
    if (img.height != mask.height || img.width != mask.width)
        throw ShapeMismatch(std::string(where) + ": image/mask dims differ");
}

int value_bin(float v, int bins) {
    // Classical floor(v*B) indexing; 1.0 falls into the last bin via clamp.
    int b = static_cast<int>(std::floor(static_cast<double>(v) * bins));
    return std::clamp(b, 0, bins - 1);
}

// Reflection without edge repeat: -1 -> 1, n -> n-2.
int reflect_index(int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
        if (i < 0) i = -i;
        if (i >= n) i = 2 * n - 2 - i;
    }
    return i;
}

}  // namespace

Histogram channel_histogram(const Image& img, const RegionMask& mask, int bins) {
    check_mask_shape(img, mask, "channel_histogram");
    if (bins < 2) throw ConfigError("channel_histogram: bins must be >= 2");
    if (mask.empty_region()) throw EmptyRegion("channel_histogram: empty mask");

    Histogram h;
    h.bins = bins;
    h.counts.assign(img.channels, std::vector<std::uint64_t>(bins, 0));
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            if (!mask.at(y, x)) continue;
            for (int c = 0; c < img.channels; ++c)
                ++h.counts[c][value_bin(img.at(y, x, c), bins)];
        }
    return h;
}

Image hist_match_region(const Image& src, const RegionMask& src_region,
                        const Image& ref, const RegionMask& ref_region,
                        int bins) {
    check_mask_shape(src, src_region, "hist_match_region");
    check_mask_shape(ref, ref_region, "hist_match_region");
    if (src.channels != ref.channels)
        throw ChannelMismatch("hist_match_region: channel counts differ");
    if (src_region.empty_region() || ref_region.empty_region())
        throw EmptyRegion("hist_match_region: empty region");

    const Histogram hs = channel_histogram(src, src_region, bins);
    const Histogram hr = channel_histogram(ref, ref_region, bins);
    const double n_src = static_cast<double>(src_region.popcount());
    const double n_ref = static_cast<double>(ref_region.popcount());

    // Per channel: cumulative distributions, then the classical discrete map
    // bin -> smallest ref bin whose CDF reaches the source CDF, at bin center.
    std::vector<std::vector<float>> lut(src.channels, std::vector<float>(bins, 0.0f));
    for (int c = 0; c < src.channels; ++c) {
        std::vector<double> cdf_ref(bins);
        double acc = 0.0;
        for (int b = 0; b < bins; ++b) {
            acc += static_cast<double>(hr.counts[c][b]) / n_ref;
            cdf_ref[b] = acc;
        }
        double cdf_src = 0.0;
        int rb = 0;
        for (int b = 0; b < bins; ++b) {
            cdf_src += static_cast<double>(hs.counts[c][b]) / n_src;
            while (rb < bins - 1 && cdf_ref[rb] < cdf_src - 1e-12) ++rb;
            lut[c][b] = std::clamp(static_cast<float>((rb + 0.5) / bins), 0.0f, 1.0f);
        }
    }

    Image out = src;
    for (int y = 0; y < src.height; ++y)
        for (int x = 0; x < src.width; ++x) {
            if (!src_region.at(y, x)) continue;
            for (int c = 0; c < src.channels; ++c)
                out.at(y, x, c) = lut[c][value_bin(src.at(y, x, c), bins)];
        }
    return out;
}

SoftMask gaussian_fusion_mask(const RegionMask& region, double sigma) {
    if (region.empty_region()) throw EmptyRegion("gaussian_fusion_mask: empty region");
    const int h = region.height, w = region.width;
    SoftMask out(h, w);

    if (sigma <= 0.0) {
        for (std::size_t i = 0; i < region.bits.size(); ++i)
            out.weights[i] = region.bits[i] ? 1.0f : 0.0f;
        return out;
    }

    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(2 * radius + 1);
    double ksum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
        ksum += kernel[i + radius];
    }
    for (auto& k : kernel) k /= ksum;

    // Separable blur with reflected borders.
    std::vector<double> tmp(static_cast<std::size_t>(h) * w, 0.0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i)
                acc += kernel[i + radius] *
                       (region.at(y, reflect_index(x + i, w)) ? 1.0 : 0.0);
            tmp[static_cast<std::size_t>(y) * w + x] = acc;
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i)
                acc += kernel[i + radius] * tmp[static_cast<std::size_t>(reflect_index(y + i, h)) * w + x];
            const bool inside = region.at(y, x);
            out.weights[static_cast<std::size_t>(y) * w + x] =
                inside ? static_cast<float>(std::clamp(acc, 0.0, 1.0)) : 0.0f;
        }
    return out;
}

Image compose_region(const Image& background, const Image& patch,
                     const SoftMask& weights) {
    if (!background.same_shape(patch) || background.height != weights.height ||
        background.width != weights.width)
        throw ShapeMismatch("compose_region: shape mismatch");

    Image out = background;
    for (int y = 0; y < background.height; ++y)
        for (int x = 0; x < background.width; ++x) {
            const float w = weights.at(y, x);
            if (w == 0.0f) continue;  // background stays bit-identical
            for (int c = 0; c < background.channels; ++c)
                out.at(y, x, c) = w * patch.at(y, x, c) + (1.0f - w) * background.at(y, x, c);
        }
    return out;
}

BBox region_bbox(const RegionMask& region, int margin) {
    if (region.empty_region()) throw EmptyRegion("region_bbox: empty region");
    int y0 = region.height, y1 = -1, x0 = region.width, x1 = -1;
    for (int y = 0; y < region.height; ++y)
        for (int x = 0; x < region.width; ++x)
            if (region.at(y, x)) {
                y0 = std::min(y0, y);
                y1 = std::max(y1, y);
                x0 = std::min(x0, x);
                x1 = std::max(x1, x);
            }
    y0 = std::max(0, y0 - margin);
    x0 = std::max(0, x0 - margin);
    y1 = std::min(region.height - 1, y1 + margin);
    x1 = std::min(region.width - 1, x1 + margin);
    return BBox{y0, x0, y1 - y0 + 1, x1 - x0 + 1};
}

double default_fusion_sigma(const RegionMask& region) {
    const BBox b = region_bbox(region, 0);
    return std::max(1.0, std::min(b.height, b.width) / 4.0);
}

Image crop_image(const Image& img, const BBox& box) {
    Image out(box.height, box.width, img.channels);
    for (int y = 0; y < box.height; ++y)
        for (int x = 0; x < box.width; ++x)
            for (int c = 0; c < img.channels; ++c)
                out.at(y, x, c) = img.at(box.top + y, box.left + x, c);
    return out;
}

RegionMask crop_mask(const RegionMask& mask, const BBox& box) {
    RegionMask out(box.height, box.width);
    for (int y = 0; y < box.height; ++y)
        for (int x = 0; x < box.width; ++x)
            out.set(y, x, mask.at(box.top + y, box.left + x));
    return out;
}

}  // namespace df
