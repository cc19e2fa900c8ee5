#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "r1a/homography.hpp"
#include "r1a/image.hpp"
#include "r1a/kernels.hpp"

namespace r1a {

/// Canvas rectangle + shared normalization frame. All homographies in a
/// problem are expressed in this one normalized frame; pixel coordinates
/// appear only at warping and I/O boundaries.
struct WarpFrame {
    Rect canvas;
    NormalizationTransform norm;
};

struct WarpedImage {
    Image intensities;            // canvas-shaped, 0 where mask is false
    std::vector<std::uint8_t> mask;  // canvas-shaped booleans

    bool at_mask(int x, int y) const { return mask[std::size_t(y) * intensities.w + x] != 0; }
};

/// Minimum axis-aligned rectangle enclosing all warped corners, rounded
/// outward to integer pixels.
inline Rect compute_canvas(const std::vector<std::array<Vec2, 4>>& warp_corners) {
    if (warp_corners.empty()) throw std::invalid_argument("compute_canvas: no corners");
    double x_min = warp_corners[0][0].x, x_max = x_min;
    double y_min = warp_corners[0][0].y, y_max = y_min;
    for (const auto& quad : warp_corners)
        for (const Vec2& c : quad) {
            x_min = std::min(x_min, c.x);
            x_max = std::max(x_max, c.x);
            y_min = std::min(y_min, c.y);
            y_max = std::max(y_max, c.y);
        }
    // Outward rounding, but snap essentially-integral corners first: the
    // normalized-frame round trip leaves ~1e-13 noise that must not grow the
    // canvas of an unwarped image by a pixel.
    const auto snap = [](double a) {
        const double r = std::nearbyint(a);
        return std::abs(a - r) < 1e-9 ? r : a;
    };
    Rect r;
    r.x0 = long(std::floor(snap(x_min)));
    r.y0 = long(std::floor(snap(y_min)));
    r.w = int(long(std::ceil(snap(x_max))) - r.x0) + 1;
    r.h = int(long(std::ceil(snap(y_max))) - r.y0) + 1;
    return r;
}

/// Corner quadrilateral of a source image on the canvas: the image of the
/// source rectangle's corners under the inverse of the pull-map tau.
inline std::array<Vec2, 4> source_footprint(const HomographyParams& tau,
                                            const NormalizationTransform& norm, int src_w,
                                            int src_h) {
    const HomographyParams inv = invert(tau);
    const Vec2 corners[4] = {{0.0, 0.0},
                             {double(src_w - 1), 0.0},
                             {0.0, double(src_h - 1)},
                             {double(src_w - 1), double(src_h - 1)}};
    std::array<Vec2, 4> out;
    for (int k = 0; k < 4; ++k) out[k] = apply_pixel_map(inv, norm, corners[k]);
    return out;
}

namespace detail {

/// tau is the pull-map: canvas pixel → source pixel, through the normalized
/// frame.
inline Vec2 source_point(const HomographyParams& tau, const NormalizationTransform& norm,
                         double cx, double cy) {
    return norm.denormalize(apply_homography(tau, norm.normalize({cx, cy})));
}

}  // namespace detail

/// Pull-warp the source onto the canvas: per canvas pixel, sample the source
/// at t(p; τ) by bilinear interpolation; mask false (intensity 0) where the
/// sample point leaves the closed source rectangle. The grid variant picks
/// each pixel's cell by half-open tiling of the grid domain.
inline WarpedImage warp_image(const Image& source, const CellGrid& grid, const WarpFrame& frame) {
    const Rect& cv = frame.canvas;
    if (source.w < 2 || source.h < 2 || cv.w <= 0 || cv.h <= 0)
        throw std::invalid_argument("warp_image: empty source or canvas");
    for (int u = 0; u < grid.cells(); ++u)
        if (std::abs(to_matrix(grid.params[u]).det()) <= 1e-8)
            throw DegenerateTransformError("warp_image: degenerate transform in cell " +
                                           std::to_string(u));
    WarpedImage out;
    out.intensities = Image(cv.w, cv.h);
    out.mask.assign(std::size_t(cv.w) * cv.h, 0);
    for (int j = 0; j < cv.h; ++j) {
        const double cy = double(cv.y0 + j);
        for (int i = 0; i < cv.w; ++i) {
            const double cx = double(cv.x0 + i);
            const HomographyParams& tau =
                grid.cells() == 1 ? grid.params[0] : grid.params[grid.cell_at(cx, cy)];
            Vec2 s;
            try {
                s = detail::source_point(tau, frame.norm, cx, cy);
            } catch (const PointAtInfinityError&) {
                continue;  // stays masked out
            }
            // The round trip through the normalized frame costs ~1e-13 px of
            // noise; snap essentially-integral samples so integer-translation
            // warps stay exact pixel shifts and seam masks are deterministic.
            const double rx = std::nearbyint(s.x), ry = std::nearbyint(s.y);
            if (std::abs(s.x - rx) < 1e-9) s.x = rx;
            if (std::abs(s.y - ry) < 1e-9) s.y = ry;
            if (!source.inside(s.x, s.y)) continue;
            out.intensities.at(i, j) = bilinear(source, s.x, s.y);
            out.mask[std::size_t(j) * cv.w + i] = 1;
        }
    }
    return out;
}

inline WarpedImage warp_image(const Image& source, const HomographyParams& tau,
                              const WarpFrame& frame) {
    return warp_image(source, CellGrid::single(tau), frame);
}

/// Canvas pixel referenced by flat index into the canvas grid.
struct CanvasPixel {
    int i = 0, j = 0;  // canvas-local indices
};

/// Rows of ∂ vec(I∘ξ) / ∂ξ at ξ = τ for the listed canvas pixels: row p =
/// ∇Ĩ(t(p;τ))ᵀ · ∂t(p;ξ)/∂ξ where Ĩ is the σ=0.8-pre-smoothed source and the
/// gradient is the exact derivative of its bilinear interpolant (so finite
/// differences of the modeled warp match to rounding error). Rows of pixels
/// whose sample point leaves the source are zero.
inline Matrix intensity_jacobian_presmoothed(const Image& smoothed, const HomographyParams& tau,
                                             const std::vector<CanvasPixel>& pixels,
                                             const WarpFrame& frame) {
    Matrix J(pixels.size(), 8);
    const double s = frame.norm.scale;
    for (std::size_t r = 0; r < pixels.size(); ++r) {
        const double cx = double(frame.canvas.x0 + pixels[r].i);
        const double cy = double(frame.canvas.y0 + pixels[r].j);
        const Vec2 q = frame.norm.normalize({cx, cy});
        Vec2 sp;
        try {
            sp = frame.norm.denormalize(apply_homography(tau, q));
        } catch (const PointAtInfinityError&) {
            continue;
        }
        if (!smoothed.inside(sp.x, sp.y)) continue;
        double gx, gy;
        bilinear_gradient(smoothed, sp.x, sp.y, gx, gy);
        // d(source pixel)/d(param) = (1/s) · d t_normalized/d param
        const Matrix C = coordinate_jacobian(tau, q);
        for (int k = 0; k < 8; ++k) J(r, k) = (gx * C(0, k) + gy * C(1, k)) / s;
    }
    return J;
}

inline Matrix intensity_jacobian(const Image& source, const HomographyParams& tau,
                                 const std::vector<CanvasPixel>& pixels, const WarpFrame& frame,
                                 double presmooth_sigma = 0.8) {
    return intensity_jacobian_presmoothed(gaussian_smooth(source, presmooth_sigma), tau, pixels,
                                          frame);
}

/// Frame whose normalization is centered on the canvas rectangle (same RMS
/// corner-distance scale rule as normalization_for, shifted to the rect).
inline WarpFrame frame_for(const Rect& canvas) {
    NormalizationTransform n = normalization_for(canvas.w, canvas.h);
    n.offset.x += double(canvas.x0);
    n.offset.y += double(canvas.y0);
    return {canvas, n};
}

/// Smoothness linear system for one image's cell grid (Γ Δτ = t): for each
/// neighboring cell pair and each pixel of either cell, penalize the
/// disagreement of the two linearized maps with weight exp(−d_B²/σ²), d_B the
/// normalized-frame distance from the pixel to the shared cell edge. Γ is
/// symmetric PSD by construction.
struct SmoothnessSystem {
    Matrix gamma;               // 8C × 8C
    std::vector<double> t_vec;  // 8C
};

inline SmoothnessSystem smoothness_system(const CellGrid& grid, double sigma,
                                          const NormalizationTransform& norm) {
    if (sigma <= 0.0) throw std::invalid_argument("smoothness_system: sigma must be positive");
    const int C = grid.cells();
    SmoothnessSystem sys;
    sys.gamma = Matrix(8 * C, 8 * C);
    sys.t_vec.assign(8 * C, 0.0);

    auto cell_pixels = [&](int u, std::vector<Vec2>& out) {
        const auto b = grid.cell_bounds(u);
        out.clear();
        for (long y = long(std::ceil(b[2])); y < long(std::ceil(b[3])); ++y)
            for (long x = long(std::ceil(b[0])); x < long(std::ceil(b[1])); ++x)
                out.push_back({double(x), double(y)});
    };

    std::vector<Vec2> pu, pv;
    for (const auto& [u, v] : grid.adjacency()) {
        // shared edge segment in pixel coordinates
        const auto bu = grid.cell_bounds(u);
        const auto bv = grid.cell_bounds(v);
        const bool horizontal = v == u + 1 && u / grid.c2 == v / grid.c2;  // else v below u
        double ex0, ey0, ex1, ey1;
        if (horizontal) {
            ex0 = ex1 = bu[1];
            ey0 = bu[2];
            ey1 = bu[3];
        } else {
            ey0 = ey1 = bu[3];
            ex0 = bu[0];
            ex1 = bu[1];
        }
        (void)bv;

        auto seg_dist = [&](Vec2 p) {
            const double vx = ex1 - ex0, vy = ey1 - ey0;
            const double len2 = vx * vx + vy * vy;
            double t = len2 > 0.0 ? ((p.x - ex0) * vx + (p.y - ey0) * vy) / len2 : 0.0;
            t = std::clamp(t, 0.0, 1.0);
            const double dx = p.x - (ex0 + t * vx), dy = p.y - (ey0 + t * vy);
            return std::sqrt(dx * dx + dy * dy);
        };

        cell_pixels(u, pu);
        cell_pixels(v, pv);
        for (int side = 0; side < 2; ++side) {
            for (const Vec2& p : side == 0 ? pu : pv) {
                const double d = seg_dist(p) * norm.scale;
                const double w = std::exp(-d * d / (sigma * sigma));
                const Vec2 q = norm.normalize(p);
                const Matrix Ju = coordinate_jacobian(grid.params[u], q);
                const Matrix Jv = coordinate_jacobian(grid.params[v], q);
                const Vec2 tu = apply_homography(grid.params[u], q);
                const Vec2 tv = apply_homography(grid.params[v], q);
                const double du[2] = {tv.x - tu.x, tv.y - tu.y};
                for (int a = 0; a < 8; ++a) {
                    for (int b = 0; b < 8; ++b) {
                        double uu = 0.0, uv = 0.0, vv = 0.0;
                        for (int c = 0; c < 2; ++c) {
                            uu += Ju(c, a) * Ju(c, b);
                            uv += Ju(c, a) * Jv(c, b);
                            vv += Jv(c, a) * Jv(c, b);
                        }
                        sys.gamma(8 * u + a, 8 * u + b) += w * uu;
                        sys.gamma(8 * v + a, 8 * v + b) += w * vv;
                        sys.gamma(8 * u + a, 8 * v + b) -= w * uv;
                        sys.gamma(8 * v + b, 8 * u + a) -= w * uv;
                    }
                    double su = 0.0, sv = 0.0;
                    for (int c = 0; c < 2; ++c) {
                        su += Ju(c, a) * du[c];
                        sv -= Jv(c, a) * du[c];
                    }
                    sys.t_vec[8 * u + a] += w * su;
                    sys.t_vec[8 * v + a] += w * sv;
                }
            }
        }
    }
    return sys;
}

}  // namespace r1a
