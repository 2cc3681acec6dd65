#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "pmsm/common.hpp"

namespace pmsm {

/// H x W x 3 intensity grid, row-major interleaved RGB, values in [0, 1].
struct Image {
    static constexpr int channels = 3;

    int height = 0;
    int width = 0;
    std::vector<float> pixels;

    Image() = default;
    Image(int h, int w, float fill = 0.0f)
        : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * channels, fill) {
        if (h <= 0 || w <= 0) throw Error("image dimensions must be positive");
    }

    float& at(int y, int x, int c) {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    float at(int y, int x, int c) const {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }

    float gray(int y, int x) const {
        const float* p = &pixels[(static_cast<std::size_t>(y) * width + x) * channels];
        return (p[0] + p[1] + p[2]) / 3.0f;
    }

    bool empty() const { return pixels.empty(); }
    bool operator==(const Image&) const = default;
};

/// Axis-aligned rectangle in normalized image coordinates, 0 <= x0 < x1 <= 1.
struct NormRect {
    double x0 = 0.0, y0 = 0.0, x1 = 1.0, y1 = 1.0;

    bool valid() const {
        return 0.0 <= x0 && x0 < x1 && x1 <= 1.0 && 0.0 <= y0 && y0 < y1 && y1 <= 1.0;
    }
    double area() const { return std::max(0.0, x1 - x0) * std::max(0.0, y1 - y0); }
    double center_x() const { return 0.5 * (x0 + x1); }
    double center_y() const { return 0.5 * (y0 + y1); }
    bool contains(double x, double y) const { return x0 <= x && x <= x1 && y0 <= y && y <= y1; }
    bool contains(const NormRect& o) const {
        return x0 <= o.x0 && o.x1 <= x1 && y0 <= o.y0 && o.y1 <= y1;
    }

    bool operator==(const NormRect&) const = default;
};

inline double intersection_area(const NormRect& a, const NormRect& b) {
    const double w = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
    const double h = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
    return (w > 0 && h > 0) ? w * h : 0.0;
}

inline bool overlaps(const NormRect& a, const NormRect& b) { return intersection_area(a, b) > 0.0; }

inline double iou(const NormRect& a, const NormRect& b) {
    const double inter = intersection_area(a, b);
    const double uni = a.area() + b.area() - inter;
    return uni > 0 ? inter / uni : 0.0;
}

inline std::string to_string(const NormRect& r) {
    return "[" + std::to_string(r.x0) + ", " + std::to_string(r.y0) + ", " + std::to_string(r.x1) + ", " +
           std::to_string(r.y1) + "]";
}

/// Bilinear crop of `region` resized to out_h x out_w. Sample positions are
/// pixel-center aligned and clamped to the pixel extent of the region, so
/// content outside the region never bleeds into the crop.
inline Image crop_resize(const Image& src, const NormRect& region, int out_h, int out_w) {
    if (!region.valid()) throw Error("invalid crop region " + to_string(region));
    Image out(out_h, out_w);
    const double rx0 = region.x0 * src.width, rx1 = region.x1 * src.width;
    const double ry0 = region.y0 * src.height, ry1 = region.y1 * src.height;
    const double sx = (rx1 - rx0) / out_w, sy = (ry1 - ry0) / out_h;
    const double lo_x = std::clamp(std::floor(rx0), 0.0, src.width - 1.0);
    const double hi_x = std::clamp(std::max(lo_x, std::ceil(rx1) - 1.0), 0.0, src.width - 1.0);
    const double lo_y = std::clamp(std::floor(ry0), 0.0, src.height - 1.0);
    const double hi_y = std::clamp(std::max(lo_y, std::ceil(ry1) - 1.0), 0.0, src.height - 1.0);

    for (int oy = 0; oy < out_h; ++oy) {
        const double fy = std::clamp(ry0 + (oy + 0.5) * sy - 0.5, lo_y, hi_y);
        const int y0 = static_cast<int>(std::floor(fy));
        const int y1 = std::min(y0 + 1, static_cast<int>(hi_y));
        const double wy = fy - y0;
        for (int ox = 0; ox < out_w; ++ox) {
            const double fx = std::clamp(rx0 + (ox + 0.5) * sx - 0.5, lo_x, hi_x);
            const int x0 = static_cast<int>(std::floor(fx));
            const int x1 = std::min(x0 + 1, static_cast<int>(hi_x));
            const double wx = fx - x0;
            for (int c = 0; c < Image::channels; ++c) {
                const double top = (1 - wx) * src.at(y0, x0, c) + wx * src.at(y0, x1, c);
                const double bot = (1 - wx) * src.at(y1, x0, c) + wx * src.at(y1, x1, c);
                out.at(oy, ox, c) = static_cast<float>((1 - wy) * top + wy * bot);
            }
        }
    }
    return out;
}

inline Image resize(const Image& src, int out_h, int out_w) {
    if (src.height == out_h && src.width == out_w) return src;
    return crop_resize(src, NormRect{}, out_h, out_w);
}

}  // namespace pmsm
