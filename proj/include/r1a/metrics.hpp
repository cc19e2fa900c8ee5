#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "r1a/regions.hpp"
#include "r1a/warp.hpp"

namespace r1a {

struct MetricConfig {
    double truncation_t = 25.0;      // intensity levels
    double success_threshold = 1.0;  // squared-pixel units
};

class MetricError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Truncated RMS intensity distance over the mask: sqrt((1/m) Σ min(diff², t²)),
/// range [0, t]. Robust to occlusions: gross disagreements saturate at t.
inline double truncated_l2(const Image& img1, const Image& img2,
                           const std::vector<std::uint8_t>& mask, const MetricConfig& cfg = {}) {
    if (img1.w != img2.w || img1.h != img2.h || mask.size() != img1.px.size())
        throw std::invalid_argument("truncated_l2: shape mismatch");
    const double t2 = cfg.truncation_t * cfg.truncation_t;
    double sum = 0.0;
    std::size_t m = 0;
    for (std::size_t p = 0; p < mask.size(); ++p) {
        if (!mask[p]) continue;
        const double d = img1.px[p] - img2.px[p];
        sum += std::min(d * d, t2);
        ++m;
    }
    if (m == 0) throw MetricError("truncated_l2: empty overlap");
    return std::sqrt(sum / double(m));
}

/// Mean squared displacement between two transforms over a pixel grid,
/// in squared pixels: (1/hw) Σ ||t(p;τ₁) − t(p;τ₂)||².
inline double transform_distance(const HomographyParams& tau1, const HomographyParams& tau2,
                                 const Rect& grid, const NormalizationTransform& n) {
    double sum = 0.0;
    for (long y = grid.y0; y < grid.y0 + grid.h; ++y)
        for (long x = grid.x0; x < grid.x0 + grid.w; ++x) {
            const Vec2 p{double(x), double(y)};
            try {
                const Vec2 a = apply_pixel_map(tau1, n, p);
                const Vec2 b = apply_pixel_map(tau2, n, p);
                const double dx = a.x - b.x, dy = a.y - b.y;
                sum += dx * dx + dy * dy;
            } catch (const PointAtInfinityError&) {
                throw MetricError("transform_distance: point at infinity at pixel (" +
                                  std::to_string(x) + ", " + std::to_string(y) + ")");
            }
        }
    return sum / (double(grid.w) * double(grid.h));
}

inline double transform_distance(const HomographyParams& tau1, const HomographyParams& tau2,
                                 int h, int w) {
    return transform_distance(tau1, tau2, Rect{0, 0, w, h}, normalization_for(w, h));
}

struct AlignmentTrial {
    HomographyParams tau_true;
    HomographyParams tau_est;
    int h = 0, w = 0;
};

inline double success_fraction(const std::vector<AlignmentTrial>& trials,
                               const MetricConfig& cfg = {}) {
    if (trials.empty()) throw std::invalid_argument("success_fraction: no trials");
    std::size_t hits = 0;
    for (const AlignmentTrial& t : trials)
        if (transform_distance(t.tau_true, t.tau_est, t.h, t.w) < cfg.success_threshold) ++hits;
    return double(hits) / double(trials.size());
}

/// Multi-image distance: truncated_l2 over every overlapping pair, averaged
/// with weights equal to the pair's overlap pixel count.
inline double aggregate_truncated_l2(const std::vector<WarpedImage>& warped,
                                     const MetricConfig& cfg = {}) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < warped.size(); ++i)
        for (std::size_t j = i + 1; j < warped.size(); ++j) {
            std::vector<std::uint8_t> both(warped[i].mask.size(), 0);
            std::size_t m = 0;
            for (std::size_t p = 0; p < both.size(); ++p) {
                both[p] = warped[i].mask[p] && warped[j].mask[p] ? 1 : 0;
                m += both[p];
            }
            if (m == 0) continue;
            num += double(m) * truncated_l2(warped[i].intensities, warped[j].intensities, both, cfg);
            den += double(m);
        }
    if (den == 0.0) throw MetricError("aggregate_truncated_l2: no overlapping pair");
    return num / den;
}

}  // namespace r1a
