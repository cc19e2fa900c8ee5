#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace r1a {

/// Grayscale image, double intensities (nominally 0..255), row-major.
struct Image {
    int w = 0, h = 0;
    std::vector<double> px;

    Image() = default;
    Image(int width, int height, double fill = 0.0)
        : w(width), h(height), px(std::size_t(width) * height, fill) {}

    double at(int x, int y) const { return px[std::size_t(y) * w + x]; }
    double& at(int x, int y) { return px[std::size_t(y) * w + x]; }

    /// Clamped read: out-of-range indices stick to the border pixel.
    double at_clamped(int x, int y) const {
        x = std::clamp(x, 0, w - 1);
        y = std::clamp(y, 0, h - 1);
        return at(x, y);
    }

    /// Reflected read (border mirrored without repeating the edge pixel).
    double at_reflected(int x, int y) const {
        if (x < 0) x = -x;
        if (x >= w) x = 2 * w - 2 - x;
        if (y < 0) y = -y;
        if (y >= h) y = 2 * h - 2 - y;
        return at(std::clamp(x, 0, w - 1), std::clamp(y, 0, h - 1));
    }

    bool inside(double x, double y) const {
        return x >= 0.0 && x <= double(w - 1) && y >= 0.0 && y <= double(h - 1);
    }
};

/// Bilinear sample with clamp-at-boundary; callers gate on inside().
inline double bilinear(const Image& img, double x, double y) {
    int x0 = int(std::floor(x));
    int y0 = int(std::floor(y));
    x0 = std::clamp(x0, 0, img.w - 2 >= 0 ? img.w - 2 : 0);
    y0 = std::clamp(y0, 0, img.h - 2 >= 0 ? img.h - 2 : 0);
    const double fx = std::clamp(x - x0, 0.0, 1.0);
    const double fy = std::clamp(y - y0, 0.0, 1.0);
    const int x1 = std::min(x0 + 1, img.w - 1);
    const int y1 = std::min(y0 + 1, img.h - 1);
    const double a = img.at(x0, y0), b = img.at(x1, y0);
    const double c = img.at(x0, y1), d = img.at(x1, y1);
    return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d);
}

/// Exact spatial gradient of the clamped-bilinear surface at (x, y) — the
/// derivative of what bilinear() actually computes, so finite differences of
/// the warp reproduce it to rounding error.
inline void bilinear_gradient(const Image& img, double x, double y, double& gx, double& gy) {
    int x0 = int(std::floor(x));
    int y0 = int(std::floor(y));
    x0 = std::clamp(x0, 0, img.w - 2 >= 0 ? img.w - 2 : 0);
    y0 = std::clamp(y0, 0, img.h - 2 >= 0 ? img.h - 2 : 0);
    const double fx = std::clamp(x - x0, 0.0, 1.0);
    const double fy = std::clamp(y - y0, 0.0, 1.0);
    const int x1 = std::min(x0 + 1, img.w - 1);
    const int y1 = std::min(y0 + 1, img.h - 1);
    const double a = img.at(x0, y0), b = img.at(x1, y0);
    const double c = img.at(x0, y1), d = img.at(x1, y1);
    gx = (1 - fy) * (b - a) + fy * (d - c);
    gy = (1 - fx) * (c - a) + fx * (d - b);
}

/// Separable Gaussian smoothing, kernel radius ceil(3σ), reflected borders.
inline Image gaussian_smooth(const Image& img, double sigma) {
    if (sigma <= 0.0) return img;
    const int radius = int(std::ceil(3.0 * sigma));
    std::vector<double> k(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i)
        sum += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (double& x : k) x /= sum;

    Image tmp(img.w, img.h), out(img.w, img.h);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            double s = 0.0;
            for (int i = -radius; i <= radius; ++i) s += k[i + radius] * img.at_reflected(x + i, y);
            tmp.at(x, y) = s;
        }
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            double s = 0.0;
            for (int i = -radius; i <= radius; ++i) s += k[i + radius] * tmp.at_reflected(x, y + i);
            out.at(x, y) = s;
        }
    return out;
}

/// Halve each dimension after a 5-tap binomial smooth ([1 4 6 4 1]/16).
inline Image downsample_half(const Image& img) {
    static const double k[5] = {1 / 16.0, 4 / 16.0, 6 / 16.0, 4 / 16.0, 1 / 16.0};
    Image tmp(img.w, img.h);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            double s = 0.0;
            for (int i = -2; i <= 2; ++i) s += k[i + 2] * img.at_reflected(x + i, y);
            tmp.at(x, y) = s;
        }
    Image smoothed(img.w, img.h);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            double s = 0.0;
            for (int i = -2; i <= 2; ++i) s += k[i + 2] * tmp.at_reflected(x, y + i);
            smoothed.at(x, y) = s;
        }
    const int nw = (img.w + 1) / 2, nh = (img.h + 1) / 2;
    Image out(nw, nh);
    for (int y = 0; y < nh; ++y)
        for (int x = 0; x < nw; ++x) out.at(x, y) = smoothed.at(std::min(2 * x, img.w - 1),
                                                                std::min(2 * y, img.h - 1));
    return out;
}

/// Gaussian pyramid, levels[0] = finest (original).
inline std::vector<Image> gaussian_pyramid(const Image& img, int levels) {
    std::vector<Image> pyr{img};
    for (int l = 1; l < levels; ++l) pyr.push_back(downsample_half(pyr.back()));
    return pyr;
}

}  // namespace r1a
