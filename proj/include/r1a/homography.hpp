#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "r1a/matrix.hpp"

namespace r1a {

struct Vec2 {
    double x = 0.0, y = 0.0;
};

struct PointAtInfinityError : std::domain_error {
    using std::domain_error::domain_error;
};

struct DegenerateTransformError : std::domain_error {
    using std::domain_error::domain_error;
};

/// 8-parameter plane homography stored as the deviation from identity of the
/// 3×3 matrix with bottom-right entry fixed at 1:
///
///   H = [ 1+v0  v1   v2 ]      t(p) = ( (H p)_x / (H p)_w ,
///       [ v3   1+v4  v5 ]               (H p)_y / (H p)_w )
///       [ v6    v7    1 ]
///
/// so the zero vector is the identity map and parameter increments add.
struct HomographyParams {
    std::array<double, 8> v{};

    static HomographyParams identity() { return {}; }

    static HomographyParams translation(double tx, double ty) {
        HomographyParams t;
        t.v[2] = tx;
        t.v[5] = ty;
        return t;
    }

    HomographyParams& operator+=(const std::array<double, 8>& d) {
        for (int i = 0; i < 8; ++i) v[i] += d[i];
        return *this;
    }
};

/// Plain 3×3 matrix for homogeneous-coordinate plumbing.
struct Mat3 {
    std::array<double, 9> m{};  // row-major

    static Mat3 identity() {
        Mat3 I;
        I.m = {1, 0, 0, 0, 1, 0, 0, 0, 1};
        return I;
    }

    double operator()(int i, int j) const { return m[i * 3 + j]; }
    double& operator()(int i, int j) { return m[i * 3 + j]; }

    double det() const {
        return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
               m[2] * (m[3] * m[7] - m[4] * m[6]);
    }

    friend Mat3 operator*(const Mat3& A, const Mat3& B) {
        Mat3 C;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                double s = 0.0;
                for (int k = 0; k < 3; ++k) s += A(i, k) * B(k, j);
                C(i, j) = s;
            }
        return C;
    }

    Mat3 inverse() const {
        const auto& a = m;
        Mat3 adj;
        adj.m = {a[4] * a[8] - a[5] * a[7], a[2] * a[7] - a[1] * a[8], a[1] * a[5] - a[2] * a[4],
                 a[5] * a[6] - a[3] * a[8], a[0] * a[8] - a[2] * a[6], a[2] * a[3] - a[0] * a[5],
                 a[3] * a[7] - a[4] * a[6], a[1] * a[6] - a[0] * a[7], a[0] * a[4] - a[1] * a[3]};
        const double det = a[0] * adj.m[0] + a[1] * adj.m[3] + a[2] * adj.m[6];
        if (std::abs(det) < 1e-14)
            throw DegenerateTransformError("Mat3::inverse: singular matrix");
        for (double& x : adj.m) x /= det;
        return adj;
    }
};

inline Mat3 to_matrix(const HomographyParams& t) {
    Mat3 H;
    H.m = {1.0 + t.v[0], t.v[1], t.v[2], t.v[3], 1.0 + t.v[4], t.v[5], t.v[6], t.v[7], 1.0};
    return H;
}

/// Rescale so the bottom-right entry is 1 and strip the deviation.
inline HomographyParams from_matrix(const Mat3& H) {
    const double w = H(2, 2);
    if (std::abs(w) < 1e-10)
        throw DegenerateTransformError("from_matrix: bottom-right entry vanishes");
    HomographyParams t;
    t.v = {H(0, 0) / w - 1.0, H(0, 1) / w, H(0, 2) / w, H(1, 0) / w,
           H(1, 1) / w - 1.0, H(1, 2) / w, H(2, 0) / w, H(2, 1) / w};
    return t;
}

inline Vec2 apply_homography(const HomographyParams& t, Vec2 p) {
    const double den = t.v[6] * p.x + t.v[7] * p.y + 1.0;
    if (std::abs(den) < 1e-10)
        throw PointAtInfinityError("apply_homography: point maps to infinity");
    return {((1.0 + t.v[0]) * p.x + t.v[1] * p.y + t.v[2]) / den,
            (t.v[3] * p.x + (1.0 + t.v[4]) * p.y + t.v[5]) / den};
}

inline HomographyParams invert(const HomographyParams& t) {
    return from_matrix(to_matrix(t).inverse());
}

/// Composition such that apply(compose(a, b), p) = apply(a, apply(b, p)).
inline HomographyParams compose(const HomographyParams& a, const HomographyParams& b) {
    return from_matrix(to_matrix(a) * to_matrix(b));
}

/// Analytic 2×8 Jacobian of the dehomogenized map w.r.t. the 8 parameters
/// (quotient rule; derivative in a deviation entry equals derivative in the
/// full matrix entry).
inline Matrix coordinate_jacobian(const HomographyParams& t, Vec2 p) {
    const double den = t.v[6] * p.x + t.v[7] * p.y + 1.0;
    if (std::abs(den) < 1e-10)
        throw PointAtInfinityError("coordinate_jacobian: point maps to infinity");
    const double nx = (1.0 + t.v[0]) * p.x + t.v[1] * p.y + t.v[2];
    const double ny = t.v[3] * p.x + (1.0 + t.v[4]) * p.y + t.v[5];
    const double inv = 1.0 / den;
    const double inv2 = inv * inv;
    Matrix J(2, 8);
    J(0, 0) = p.x * inv;
    J(0, 1) = p.y * inv;
    J(0, 2) = inv;
    J(0, 6) = -nx * p.x * inv2;
    J(0, 7) = -nx * p.y * inv2;
    J(1, 3) = p.x * inv;
    J(1, 4) = p.y * inv;
    J(1, 5) = inv;
    J(1, 6) = -ny * p.x * inv2;
    J(1, 7) = -ny * p.y * inv2;
    return J;
}

/// Hartley-style conditioning frame: maps pixel coordinates to a centered,
/// scaled frame where all solver math runs.
struct NormalizationTransform {
    double scale = 1.0;
    Vec2 offset;  // pixel-coordinate centroid

    Vec2 normalize(Vec2 p) const { return {scale * (p.x - offset.x), scale * (p.y - offset.y)}; }
    Vec2 denormalize(Vec2 q) const { return {q.x / scale + offset.x, q.y / scale + offset.y}; }

    Mat3 matrix() const {
        Mat3 N;
        N.m = {scale, 0, -scale * offset.x, 0, scale, -scale * offset.y, 0, 0, 1};
        return N;
    }
};

/// Centroid at the image-domain center, scale such that the RMS distance of
/// the four corner pixels from the centroid is √2.
inline NormalizationTransform normalization_for(int width, int height) {
    if (width < 2 || height < 2)
        throw std::invalid_argument("normalization_for: domain too small");
    NormalizationTransform n;
    n.offset = {(width - 1) / 2.0, (height - 1) / 2.0};
    double rms = 0.0;
    const double cx[4] = {0.0, double(width - 1), 0.0, double(width - 1)};
    const double cy[4] = {0.0, 0.0, double(height - 1), double(height - 1)};
    for (int k = 0; k < 4; ++k) {
        const double dx = cx[k] - n.offset.x, dy = cy[k] - n.offset.y;
        rms += dx * dx + dy * dy;
    }
    rms = std::sqrt(rms / 4.0);
    n.scale = std::sqrt(2.0) / rms;
    return n;
}

/// Re-express a homography acting in one normalized frame as acting in
/// another (pixel maps are the invariant object: H_pix = N⁻¹ H N).
/// Pixel-frame matrix of a transform whose parameters live in frame n: the
/// 3×3 map acting directly on pixel coordinates.
inline Mat3 pixel_matrix(const HomographyParams& t, const NormalizationTransform& n) {
    return n.matrix().inverse() * to_matrix(t) * n.matrix();
}

/// Parameters (in frame n) of a transform given as a pixel-frame matrix.
inline HomographyParams params_from_pixel_matrix(const Mat3& M, const NormalizationTransform& n) {
    return from_matrix(n.matrix() * M * n.matrix().inverse());
}

inline HomographyParams change_frame(const HomographyParams& t, const NormalizationTransform& from,
                                     const NormalizationTransform& to) {
    return params_from_pixel_matrix(pixel_matrix(t, from), to);
}

/// Full pixel-frame map: pixel p → normalize → homography → denormalize.
inline Vec2 apply_pixel_map(const HomographyParams& t, const NormalizationTransform& n, Vec2 p) {
    return n.denormalize(apply_homography(t, n.normalize(p)));
}

/// Integer-origin canvas rectangle; pixel (i, j) sits at global coordinate
/// (x0 + i, y0 + j).
struct Rect {
    long x0 = 0, y0 = 0;
    int w = 0, h = 0;
};

/// Per-image grid of cells tiling a canvas rectangle, each cell carrying its
/// own homography. Half-open tiling: a pixel belongs to exactly one cell,
/// with the last row/column of cells closed at the far edge.
struct CellGrid {
    int c1 = 1, c2 = 1;  // cell rows, cell columns
    Rect domain;
    std::vector<HomographyParams> params;  // row-major, size c1*c2

    static CellGrid single(const HomographyParams& t) {
        CellGrid g;
        g.params = {t};
        return g;
    }

    int cells() const { return c1 * c2; }

    int cell_row(double y) const {
        const double rel = (y - double(domain.y0)) * c1 / double(domain.h);
        int r = int(std::floor(rel));
        return r < 0 ? 0 : (r >= c1 ? c1 - 1 : r);
    }
    int cell_col(double x) const {
        const double rel = (x - double(domain.x0)) * c2 / double(domain.w);
        int c = int(std::floor(rel));
        return c < 0 ? 0 : (c >= c2 ? c2 - 1 : c);
    }
    int cell_at(double x, double y) const { return cell_row(y) * c2 + cell_col(x); }

    /// Pixel-coordinate bounds of cell u: [x_lo, x_hi) × [y_lo, y_hi).
    std::array<double, 4> cell_bounds(int u) const {
        const int r = u / c2, c = u % c2;
        return {double(domain.x0) + double(domain.w) * c / c2,
                double(domain.x0) + double(domain.w) * (c + 1) / c2,
                double(domain.y0) + double(domain.h) * r / c1,
                double(domain.y0) + double(domain.h) * (r + 1) / c1};
    }

    /// Unordered neighbor pairs (right and down), symmetric by construction.
    std::vector<std::pair<int, int>> adjacency() const {
        std::vector<std::pair<int, int>> e;
        for (int r = 0; r < c1; ++r)
            for (int c = 0; c < c2; ++c) {
                const int u = r * c2 + c;
                if (c + 1 < c2) e.emplace_back(u, u + 1);
                if (r + 1 < c1) e.emplace_back(u, u + c2);
            }
        return e;
    }
};

}  // namespace r1a
