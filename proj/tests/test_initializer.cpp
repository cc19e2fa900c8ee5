#include "r1a/initializer.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "oracles.hpp"
#include "r1a/rng.hpp"
#include "r1a/synth.hpp"

using namespace r1a;

namespace {

Image noise_image(int w, int h, std::uint64_t seed) {
    Image img(w, h);
    Rng rng(seed);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) img.at(x, y) = 255.0 * rng.uniform();
    return img;
}

Image crop(const Image& src, int x0, int y0, int w, int h) {
    Image out(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out.at(x, y) = src.at(x0 + x, y0 + y);
    return out;
}

/// Direct single-pixel descriptor: reflected reads and gradients evaluated
/// inline per window pixel, no shared precomputation.
std::vector<double> naive_pixel_descriptor(const Image& img, int x, int y) {
    std::vector<double> d(kDescriptorDim, 0.0);
    for (int dy = -8; dy < 8; ++dy)
        for (int dx = -8; dx < 8; ++dx) {
            const int px = x + dx, py = y + dy;
            const double gx = 0.5 * (img.at_reflected(px + 1, py) - img.at_reflected(px - 1, py));
            const double gy = 0.5 * (img.at_reflected(px, py + 1) - img.at_reflected(px, py - 1));
            const double mag = std::sqrt(gx * gx + gy * gy);
            const double theta = std::atan2(gy, gx);
            int bin = static_cast<int>((theta + std::numbers::pi) / (2.0 * std::numbers::pi) * 8.0);
            bin = std::clamp(bin, 0, 7);
            const int cell = ((dy + 8) / 4) * 4 + (dx + 8) / 4;
            d[cell * 8 + bin] += mag;
        }
    double n2 = 0.0;
    for (double v : d) n2 += v * v;
    n2 = std::sqrt(n2);
    if (n2 < 1e-12) return std::vector<double>(kDescriptorDim, 0.0);
    for (double& v : d) v = std::min(v / n2, 0.2);
    double c2 = 0.0;
    for (double v : d) c2 += v * v;
    c2 = std::sqrt(c2);
    for (double& v : d) v /= c2;
    return d;
}

DescriptorField random_field(int h, int w, std::uint64_t seed) {
    DescriptorField f(h, w);
    Rng rng(seed);
    for (double& v : f.data) v = rng.uniform();
    return f;
}

/// Mirrors the alternating per-axis estimation contract of bp_marginals, but
/// solves every axis pass with an exact min-marginal solver instead of
/// message passing.
using ExactSolver = std::function<std::vector<double>(const std::vector<double>&, int, int, int,
                                                      double)>;

MotionFieldMarginals exact_marginals_reference(const DescriptorField& s1,
                                               const DescriptorField& s2,
                                               const HomographyParams& tau,
                                               const NormalizationTransform& norm,
                                               const HMRFParams& params, const ExactSolver& solve) {
    const int h = s1.h, w = s1.w, L = params.L, n = 2 * L + 1;
    const std::size_t pixels = std::size_t(h) * w;
    std::vector<double> tgt_u(pixels), tgt_v(pixels);
    std::vector<int> u_cur(pixels), v_cur(pixels);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const Vec2 q = apply_pixel_map(tau, norm, {double(x), double(y)});
            const std::size_t p = std::size_t(y) * w + x;
            tgt_u[p] = q.x - x;
            tgt_v[p] = q.y - y;
            u_cur[p] = int(std::lround(std::clamp(tgt_u[p], double(-L), double(L))));
            v_cur[p] = int(std::lround(std::clamp(tgt_v[p], double(-L), double(L))));
        }

    MotionFieldMarginals out;
    out.h = h;
    out.w = w;
    out.L = L;
    out.omega_u.assign(pixels * n, 0.0);
    out.omega_v.assign(pixels * n, 0.0);

    std::vector<double> unary(pixels * n);
    for (int pass = 0; pass < 4; ++pass) {
        const bool u_axis = (pass % 2 == 0);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const std::size_t p = std::size_t(y) * w + x;
                for (int l = -L; l <= L; ++l) {
                    const int mx = x + (u_axis ? l : u_cur[p]);
                    const int my = y + (u_axis ? v_cur[p] : l);
                    double d = params.kappa;
                    if (mx >= 0 && mx < w && my >= 0 && my < h) {
                        double s = 0.0;
                        const double* a = s1.at(x, y);
                        const double* b = s2.at(mx, my);
                        for (int k = 0; k < kDescriptorDim; ++k) s += std::abs(a[k] - b[k]);
                        d = std::min(s, params.kappa);
                    }
                    const double tgt = u_axis ? tgt_u[p] : tgt_v[p];
                    unary[p * n + (l + L)] = d + params.eta * std::abs(double(l) - tgt);
                }
            }
        const std::vector<double> mu = solve(unary, h, w, n, params.alpha);
        std::vector<int>& cur = u_axis ? u_cur : v_cur;
        for (std::size_t p = 0; p < pixels; ++p) {
            int best = 0;
            for (int l = 1; l < n; ++l)
                if (mu[p * n + l] < mu[p * n + best]) best = l;
            cur[p] = best - L;
        }
        if (pass >= 2) {
            const std::vector<double> prob =
                oracle::softmin_probabilities(mu, int(pixels), n);
            (u_axis ? out.omega_u : out.omega_v) = prob;
        }
    }
    return out;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

MotionFieldMarginals point_mass_marginals(int h, int w, int L,
                                          const std::function<int(int, int)>& lu,
                                          const std::function<int(int, int)>& lv) {
    MotionFieldMarginals mg;
    mg.h = h;
    mg.w = w;
    mg.L = L;
    mg.omega_u.assign(std::size_t(h) * w * mg.labels(), 0.0);
    mg.omega_v.assign(std::size_t(h) * w * mg.labels(), 0.0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            mg.u_at(x, y)[lu(x, y) + L] = 1.0;
            mg.v_at(x, y)[lv(x, y) + L] = 1.0;
        }
    return mg;
}

/// High-precision ℓ₁-regression reference: minimizes the same weighted
/// objective by projected subgradient descent with a diminishing step,
/// keeping the best iterate seen.
HomographyParams l1_fit_subgradient(const MotionFieldMarginals& mg,
                                    const NormalizationTransform& norm, int iterations,
                                    double step0) {
    const int n = mg.labels();
    const auto objective = [&](const HomographyParams& t) {
        double f = 0.0;
        for (int y = 0; y < mg.h; ++y)
            for (int x = 0; x < mg.w; ++x) {
                const Vec2 q = apply_pixel_map(t, norm, {double(x), double(y)});
                for (int l = 0; l < n; ++l) {
                    const double lab = double(l - mg.L);
                    f += mg.u_at(x, y)[l] * std::abs(q.x - x - lab) +
                         mg.v_at(x, y)[l] * std::abs(q.y - y - lab);
                }
            }
        return f;
    };
    HomographyParams theta, best;
    double best_obj = objective(theta);
    for (int it = 1; it <= iterations; ++it) {
        std::array<double, 8> g{};
        for (int y = 0; y < mg.h; ++y)
            for (int x = 0; x < mg.w; ++x) {
                const Vec2 p{double(x), double(y)};
                const Vec2 q = apply_pixel_map(theta, norm, p);
                const Matrix J = coordinate_jacobian(theta, norm.normalize(p));
                const double a[2] = {q.x - x, q.y - y};
                for (int axis = 0; axis < 2; ++axis) {
                    const double* omega = axis == 0 ? mg.u_at(x, y) : mg.v_at(x, y);
                    double s = 0.0;
                    for (int l = 0; l < n; ++l) {
                        const double r = a[axis] - double(l - mg.L);
                        s += omega[l] * (r > 0.0 ? 1.0 : (r < 0.0 ? -1.0 : 0.0));
                    }
                    const double* jr = J.row(axis);
                    for (int i = 0; i < 8; ++i) g[i] += s * jr[i] / norm.scale;
                }
            }
        double gn = 0.0;
        for (double v : g) gn += v * v;
        gn = std::sqrt(gn);
        if (gn < 1e-14) break;
        const double step = step0 / std::sqrt(double(it));
        for (int i = 0; i < 8; ++i) theta.v[i] -= step * g[i] / gn;
        const double obj = objective(theta);
        if (obj < best_obj) {
            best_obj = obj;
            best = theta;
        }
    }
    return best;
}

}  // namespace

// ---------------------------------------------------------------------------
// dense_descriptor

TEST(DenseDescriptor, ConstantImageYieldsZeroDescriptors) {
    Image img(20, 18);
    for (double& p : img.px) p = 7.5;
    const DescriptorField f = dense_descriptor(img);
    EXPECT_EQ(f.h, 18);
    EXPECT_EQ(f.w, 20);
    for (double v : f.data) EXPECT_EQ(v, 0.0);
}

TEST(DenseDescriptor, TranslatedCopyMatchesOnInterior) {
    const Image base = noise_image(90, 44, 101);
    const Image img1 = crop(base, 20, 2, 60, 40);
    const Image img2 = crop(base, 15, 2, 60, 40);  // img2(x+5, y) == img1(x, y)
    const DescriptorField f1 = dense_descriptor(img1);
    const DescriptorField f2 = dense_descriptor(img2);
    for (int y = 10; y < 30; ++y)
        for (int x = 10; x < 45; ++x) {
            const double* a = f1.at(x, y);
            const double* b = f2.at(x + 5, y);
            for (int k = 0; k < kDescriptorDim; ++k) ASSERT_NEAR(a[k], b[k], 1e-10);
        }
}

TEST(DenseDescriptor, MatchesNaiveHistogramOracle) {
    const Image img = noise_image(24, 20, 202);
    const DescriptorField f = dense_descriptor(img);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            const std::vector<double> ref = naive_pixel_descriptor(img, x, y);
            const double* d = f.at(x, y);
            for (int k = 0; k < kDescriptorDim; ++k) ASSERT_NEAR(d[k], ref[k], 1e-10);
        }
}

TEST(DenseDescriptor, DescriptorsAreFiniteNonnegativeUnitNorm) {
    const Image img = noise_image(30, 22, 303);
    const DescriptorField f = dense_descriptor(img);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            const double* d = f.at(x, y);
            double n2 = 0.0;
            for (int k = 0; k < kDescriptorDim; ++k) {
                ASSERT_TRUE(std::isfinite(d[k]));
                ASSERT_GE(d[k], 0.0);
                ASSERT_LE(d[k], 0.2 / 0.2 + 1e-12);  // entries bounded after renorm
                n2 += d[k] * d[k];
            }
            ASSERT_NEAR(std::sqrt(n2), 1.0, 1e-12);
        }
}

TEST(DenseDescriptor, RejectsTooSmallImages) {
    EXPECT_THROW(dense_descriptor(Image(15, 30)), std::invalid_argument);
    EXPECT_THROW(dense_descriptor(Image(30, 15)), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// bp_marginals

TEST(BpMarginals, IdenticalFieldsWithStrongFidelityPeakAtZero) {
    const Image img = noise_image(24, 24, 404);
    const DescriptorField s = dense_descriptor(img);
    const NormalizationTransform norm = normalization_for(24, 24);
    HMRFParams params;
    params.kappa = 1e3;
    params.eta = 5.0;
    params.alpha = 1.0;
    params.L = 2;
    const MotionFieldMarginals mg = bp_marginals(s, s, HomographyParams::identity(), norm, params);
    for (int y = 1; y < 23; ++y)
        for (int x = 1; x < 23; ++x) {
            const double* ou = mg.u_at(x, y);
            const double* ov = mg.v_at(x, y);
            int bu = 0, bv = 0;
            for (int l = 1; l < mg.labels(); ++l) {
                if (ou[l] > ou[bu]) bu = l;
                if (ov[l] > ov[bv]) bv = l;
            }
            ASSERT_EQ(bu - params.L, 0) << "pixel " << x << "," << y;
            ASSERT_EQ(bv - params.L, 0) << "pixel " << x << "," << y;
        }
}

TEST(BpMarginals, PlantedTwoPixelShiftIsDetected) {
    const Image base = noise_image(74, 50, 505);
    const Image img1 = crop(base, 10, 3, 50, 40);
    const Image img2 = crop(base, 8, 3, 50, 40);  // content of img1 appears at +2 in img2
    const DescriptorField s1 = dense_descriptor(img1);
    const DescriptorField s2 = dense_descriptor(img2);
    const NormalizationTransform norm = normalization_for(50, 40);
    HMRFParams params;
    params.kappa = 1e3;
    params.eta = 1e-3;
    params.alpha = 1.0;
    params.L = 3;
    const MotionFieldMarginals mg =
        bp_marginals(s1, s2, HomographyParams::identity(), norm, params);
    int total = 0, hit_u = 0, hit_v = 0;
    for (int y = 12; y < 28; ++y)
        for (int x = 12; x < 36; ++x) {
            const double* ou = mg.u_at(x, y);
            const double* ov = mg.v_at(x, y);
            int bu = 0, bv = 0;
            for (int l = 1; l < mg.labels(); ++l) {
                if (ou[l] > ou[bu]) bu = l;
                if (ov[l] > ov[bv]) bv = l;
            }
            ++total;
            hit_u += (bu - params.L) == 2;
            hit_v += (bv - params.L) == 0;
        }
    EXPECT_GE(hit_u, static_cast<int>(0.95 * total)) << hit_u << "/" << total;
    EXPECT_GE(hit_v, static_cast<int>(0.95 * total));
}

TEST(BpMarginals, TinyGridMatchesEnumerationOracle) {
    // On a 2×2 grid the 4-neighborhood graph is a single cycle, where message
    // passing double-counts evidence around the loop with an O(alpha^2)
    // error; at weak smoothness the enumerated marginals are reproduced to
    // full precision.
    const DescriptorField s1 = random_field(2, 2, 606);
    const DescriptorField s2 = random_field(2, 2, 607);
    const NormalizationTransform norm = normalization_for(2, 2);
    HMRFParams params;
    params.kappa = 4.0;
    params.eta = 0.5;
    params.alpha = 1e-6;
    params.L = 1;
    const HomographyParams tau = HomographyParams::translation(0.3 * norm.scale, -0.2 * norm.scale);
    const MotionFieldMarginals got = bp_marginals(s1, s2, tau, norm, params);
    const MotionFieldMarginals want =
        exact_marginals_reference(s1, s2, tau, norm, params, oracle::grid_min_marginals);
    EXPECT_LT(max_abs_diff(got.omega_u, want.omega_u), 1e-10);
    EXPECT_LT(max_abs_diff(got.omega_v, want.omega_v), 1e-10);
}

TEST(BpMarginals, ChainGridsMatchEnumerationAtFullSmoothness) {
    // 1×4 and 4×1 grids are trees, where min-sum is exact at any smoothness.
    HMRFParams params;
    params.kappa = 6.0;
    params.eta = 0.8;
    params.alpha = 1.5;
    params.L = 1;
    const NormalizationTransform norm{0.05, {1.5, 1.5}};
    const HomographyParams tau = HomographyParams::translation(0.4 * norm.scale, 0.1 * norm.scale);
    {
        const DescriptorField s1 = random_field(1, 4, 708);
        const DescriptorField s2 = random_field(1, 4, 709);
        const MotionFieldMarginals got = bp_marginals(s1, s2, tau, norm, params);
        const MotionFieldMarginals want =
            exact_marginals_reference(s1, s2, tau, norm, params, oracle::grid_min_marginals);
        EXPECT_LT(max_abs_diff(got.omega_u, want.omega_u), 1e-10);
        EXPECT_LT(max_abs_diff(got.omega_v, want.omega_v), 1e-10);
    }
    {
        const DescriptorField s1 = random_field(4, 1, 710);
        const DescriptorField s2 = random_field(4, 1, 711);
        const MotionFieldMarginals got = bp_marginals(s1, s2, tau, norm, params);
        const MotionFieldMarginals want =
            exact_marginals_reference(s1, s2, tau, norm, params, oracle::grid_min_marginals);
        EXPECT_LT(max_abs_diff(got.omega_u, want.omega_u), 1e-10);
        EXPECT_LT(max_abs_diff(got.omega_v, want.omega_v), 1e-10);
    }
}

TEST(BpMarginals, LongChainMatchesDynamicProgramming) {
    HMRFParams params;
    params.kappa = 8.0;
    params.eta = 0.3;
    params.alpha = 2.0;
    params.L = 2;
    const NormalizationTransform norm{0.1, {4.0, 0.0}};
    const HomographyParams tau = HomographyParams::translation(-0.6 * norm.scale, 0.0);
    const DescriptorField s1 = random_field(1, 9, 812);
    const DescriptorField s2 = random_field(1, 9, 813);
    const MotionFieldMarginals got = bp_marginals(s1, s2, tau, norm, params);
    const ExactSolver dp = [](const std::vector<double>& unary, int h, int w, int n,
                              double alpha) {
        return oracle::chain_min_marginals(unary, h * w, n, alpha);
    };
    const MotionFieldMarginals want = exact_marginals_reference(s1, s2, tau, norm, params, dp);
    EXPECT_LT(max_abs_diff(got.omega_u, want.omega_u), 1e-10);
    EXPECT_LT(max_abs_diff(got.omega_v, want.omega_v), 1e-10);
}

TEST(BpMarginals, MarginalsAreNormalizedAndNonnegative) {
    const Image base = noise_image(60, 46, 914);
    const Image img1 = crop(base, 6, 3, 40, 40);
    const Image img2 = crop(base, 3, 2, 40, 40);
    const DescriptorField s1 = dense_descriptor(img1);
    const DescriptorField s2 = dense_descriptor(img2);
    const NormalizationTransform norm = normalization_for(40, 40);
    HMRFParams params;
    params.L = 2;
    const MotionFieldMarginals mg =
        bp_marginals(s1, s2, HomographyParams::identity(), norm, params);
    const int n = mg.labels();
    for (int y = 0; y < mg.h; ++y)
        for (int x = 0; x < mg.w; ++x) {
            double su = 0.0, sv = 0.0;
            for (int l = 0; l < n; ++l) {
                ASSERT_GE(mg.u_at(x, y)[l], 0.0);
                ASSERT_GE(mg.v_at(x, y)[l], 0.0);
                su += mg.u_at(x, y)[l];
                sv += mg.v_at(x, y)[l];
            }
            ASSERT_NEAR(su, 1.0, 1e-9);
            ASSERT_NEAR(sv, 1.0, 1e-9);
        }
}

TEST(BpMarginals, NonFiniteDescriptorsRaiseNumericalError) {
    DescriptorField s1 = random_field(3, 3, 915);
    const DescriptorField s2 = random_field(3, 3, 916);
    s1.at(1, 1)[40] = std::numeric_limits<double>::infinity();
    HMRFParams params;
    params.L = 1;
    EXPECT_THROW(bp_marginals(s1, s2, HomographyParams::identity(),
                              NormalizationTransform{1.0, {1.0, 1.0}}, params),
                 NumericalError);
}

TEST(BpMarginals, ValidatesShapesAndParameters) {
    const DescriptorField s1 = random_field(3, 3, 917);
    const DescriptorField s2 = random_field(3, 4, 918);
    const NormalizationTransform norm{1.0, {1.0, 1.0}};
    HMRFParams params;
    params.L = 1;
    EXPECT_THROW(bp_marginals(s1, s2, HomographyParams::identity(), norm, params),
                 std::invalid_argument);
    HMRFParams bad = params;
    bad.L = 0;
    EXPECT_THROW(bp_marginals(s1, s1, HomographyParams::identity(), norm, bad),
                 std::invalid_argument);
    bad = params;
    bad.eta = 0.0;
    EXPECT_THROW(bad.validate(), std::invalid_argument);
    bad = params;
    bad.kappa = -1.0;
    EXPECT_THROW(bad.validate(), std::invalid_argument);
    bad = params;
    bad.alpha = 0.0;
    EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(HmrfParams, DefaultLabelRangeScalesWithWidth) {
    EXPECT_EQ(default_hmrf_params(64).L, 8);
    EXPECT_EQ(default_hmrf_params(10).L, 2);
    EXPECT_EQ(default_hmrf_params(256).L, 32);
    const HMRFParams p = default_hmrf_params(40);
    EXPECT_GT(p.kappa, 0.0);
    EXPECT_GT(p.eta, 0.0);
    EXPECT_GT(p.alpha, 0.0);
}

// ---------------------------------------------------------------------------
// fit_homography_weighted

TEST(FitHomography, ConsistentPointMassesRecoverTransform) {
    const int h = 20, w = 20, L = 4;
    const NormalizationTransform norm = normalization_for(w, h);
    const HomographyParams tau0 =
        HomographyParams::translation(-3.0 * norm.scale, 2.0 * norm.scale);
    const MotionFieldMarginals mg = point_mass_marginals(
        h, w, L, [](int, int) { return -3; }, [](int, int) { return 2; });
    const HomographyParams fit =
        fit_homography_weighted(mg, HomographyParams::identity(), norm);
    EXPECT_LT(transform_distance(fit, tau0, h, w), 1e-12);
}

TEST(FitHomography, PointMassTranslationFieldRecovered) {
    const int h = 16, w = 24, L = 3;
    const NormalizationTransform norm = normalization_for(w, h);
    const MotionFieldMarginals mg = point_mass_marginals(
        h, w, L, [](int, int) { return 1; }, [](int, int) { return -2; });
    const HomographyParams want = HomographyParams::translation(norm.scale, -2.0 * norm.scale);
    const HomographyParams fit =
        fit_homography_weighted(mg, HomographyParams::identity(), norm);
    EXPECT_LT(transform_distance(fit, want, h, w), 1e-12);
}

TEST(FitHomography, WarmStartAtConsistentTransformIsAFixedPoint) {
    const int h = 18, w = 18, L = 3;
    const NormalizationTransform norm = normalization_for(w, h);
    const HomographyParams tau0 =
        HomographyParams::translation(2.0 * norm.scale, -1.0 * norm.scale);
    const MotionFieldMarginals mg = point_mass_marginals(
        h, w, L, [](int, int) { return 2; }, [](int, int) { return -1; });
    FitReport report;
    const HomographyParams fit = fit_homography_weighted(mg, tau0, norm, &report);
    EXPECT_LT(transform_distance(fit, tau0, h, w), 1e-16);
    EXPECT_LE(report.objective_history.size(), 3u);
}

TEST(FitHomography, ObjectiveMonotoneAcrossSweeps) {
    const int h = 20, w = 20, L = 4;
    const NormalizationTransform norm = normalization_for(w, h);
    Rng rng(1019);
    MotionFieldMarginals mg = point_mass_marginals(
        h, w, L, [](int, int) { return -2; }, [](int, int) { return 1; });
    // corrupt 25% of the pixels to arbitrary labels
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (rng.uniform() < 0.25) {
                double* ou = mg.u_at(x, y);
                double* ov = mg.v_at(x, y);
                std::fill(ou, ou + mg.labels(), 0.0);
                std::fill(ov, ov + mg.labels(), 0.0);
                ou[int(rng.uniform() * mg.labels())] = 1.0;
                ov[int(rng.uniform() * mg.labels())] = 1.0;
            }
    FitReport report;
    fit_homography_weighted(mg, HomographyParams::identity(), norm, &report);
    ASSERT_GE(report.objective_history.size(), 2u);
    for (std::size_t i = 1; i < report.objective_history.size(); ++i)
        EXPECT_LE(report.objective_history[i], report.objective_history[i - 1] + 1e-12);
}

TEST(FitHomography, CorruptedMarginalsMatchSubgradientOracle) {
    const int h = 16, w = 16, L = 4;
    const NormalizationTransform norm = normalization_for(w, h);
    Rng rng(1120);
    MotionFieldMarginals mg = point_mass_marginals(
        h, w, L, [](int, int) { return -2; }, [](int, int) { return 1; });
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (rng.uniform() < 0.20) {
                double* ou = mg.u_at(x, y);
                double* ov = mg.v_at(x, y);
                std::fill(ou, ou + mg.labels(), 0.0);
                std::fill(ov, ov + mg.labels(), 0.0);
                ou[int(rng.uniform() * mg.labels())] = 1.0;
                ov[int(rng.uniform() * mg.labels())] = 1.0;
            }
    const HomographyParams fit =
        fit_homography_weighted(mg, HomographyParams::identity(), norm);
    const HomographyParams ref = l1_fit_subgradient(mg, norm, 20000, 0.02);
    EXPECT_LT(transform_distance(fit, ref, h, w), 0.25);  // within half a pixel
}

TEST(FitHomography, SingularSystemFallsBackToRidgeWithWarning) {
    // A single-pixel field cannot determine 8 parameters: the normal system
    // is rank-deficient and the ridge path must engage.
    MotionFieldMarginals mg = point_mass_marginals(
        1, 1, 1, [](int, int) { return 1; }, [](int, int) { return 0; });
    const NormalizationTransform norm{1.0, {0.0, 0.0}};
    FitReport report;
    testing::internal::CaptureStderr();
    const HomographyParams fit =
        fit_homography_weighted(mg, HomographyParams::identity(), norm, &report);
    const std::string err = testing::internal::GetCapturedStderr();
    EXPECT_TRUE(report.ridged);
    EXPECT_NE(err.find("ridge"), std::string::npos);
    for (double v : fit.v) EXPECT_TRUE(std::isfinite(v));
}

TEST(FitHomography, RejectsInvalidMarginals) {
    MotionFieldMarginals mg = point_mass_marginals(
        2, 2, 1, [](int, int) { return 0; }, [](int, int) { return 0; });
    const NormalizationTransform norm = normalization_for(2, 2);
    mg.omega_u[0] = -0.5;
    EXPECT_THROW(fit_homography_weighted(mg, HomographyParams::identity(), norm),
                 std::invalid_argument);
    mg.omega_u[0] = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(fit_homography_weighted(mg, HomographyParams::identity(), norm),
                 std::invalid_argument);
    mg.omega_u.pop_back();
    EXPECT_THROW(fit_homography_weighted(mg, HomographyParams::identity(), norm),
                 std::invalid_argument);
}

// ---------------------------------------------------------------------------
// em_initialize

TEST(EmInitialize, IdenticalImagesReturnIdentity) {
    const Image img = noise_image(40, 40, 1221);
    HMRFParams params;
    params.L = 2;
    const HomographyParams tau = em_initialize(img, img, params, 1e-3);
    EXPECT_LT(transform_distance(tau, HomographyParams::identity(), 40, 40), 1e-12);
}

TEST(EmInitialize, RecoversEightPixelTranslation) {
    const AlignmentScene scene = gen_alignment_scene(48, 8.0, 0.0, 1322);
    HMRFParams params;
    params.L = 10;
    const HomographyParams tau = em_initialize(scene.img1, scene.img2, params, 1e-3);
    EXPECT_LT(transform_distance(tau, scene.tau_true, 48, 48), 1.0);
}

TEST(EmInitialize, PyramidScaleRecoversLargeTranslation) {
    // A 12-px shift exceeds the L=4 label range at full resolution but is
    // reachable after two halvings, where it becomes a 3-px shift.
    const AlignmentScene scene = gen_alignment_scene(128, 12.0, 0.0, 1423);
    const Image c1 = downsample_half(downsample_half(scene.img1));
    const Image c2 = downsample_half(downsample_half(scene.img2));
    ASSERT_EQ(c1.w, 32);
    HMRFParams params;
    params.L = 4;
    const HomographyParams tau = em_initialize(c1, c2, params, 1e-3);
    const NormalizationTransform cnorm = normalization_for(32, 32);
    const HomographyParams truth = HomographyParams::translation(-3.0 * cnorm.scale, 0.0);
    EXPECT_LT(transform_distance(tau, truth, 32, 32), 1.0);
}

TEST(EmInitialize, ValidatesInputs) {
    const Image ok = noise_image(32, 32, 1524);
    const Image small = noise_image(31, 32, 1525);
    const HMRFParams params = default_hmrf_params(32);
    EXPECT_THROW(em_initialize(small, ok, params), std::invalid_argument);
    EXPECT_THROW(em_initialize(ok, small, params), std::invalid_argument);
    EXPECT_THROW(em_initialize(ok, ok, params, 0.0), std::invalid_argument);
    const Image other = noise_image(34, 32, 1526);
    EXPECT_THROW(em_initialize(ok, other, params), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// chain_pairwise

TEST(ChainPairwise, IdentitiesComposeToIdentities) {
    const std::vector<HomographyParams> pairwise(4);
    const std::vector<HomographyParams> out = chain_pairwise(pairwise, 2);
    ASSERT_EQ(out.size(), 5u);
    for (const HomographyParams& t : out)
        for (double v : t.v) EXPECT_NEAR(v, 0.0, 1e-15);
}

TEST(ChainPairwise, TranslationsAccumulateForwardAndBackward) {
    const NormalizationTransform norm = normalization_for(64, 64);
    const HomographyParams t10 = HomographyParams::translation(10.0 * norm.scale, 0.0);
    const std::vector<HomographyParams> pairwise{t10, t10};

    const std::vector<HomographyParams> fwd = chain_pairwise(pairwise, 0);
    ASSERT_EQ(fwd.size(), 3u);
    const Vec2 probe{21.0, 17.0};
    const Vec2 q2 = apply_pixel_map(fwd[2], norm, probe);
    EXPECT_NEAR(q2.x, probe.x + 20.0, 1e-9);
    EXPECT_NEAR(q2.y, probe.y, 1e-9);
    for (double v : fwd[0].v) EXPECT_NEAR(v, 0.0, 1e-15);

    const std::vector<HomographyParams> mid = chain_pairwise(pairwise, 1);
    const Vec2 q0 = apply_pixel_map(mid[0], norm, probe);
    EXPECT_NEAR(q0.x, probe.x - 10.0, 1e-9);
    const Vec2 q2b = apply_pixel_map(mid[2], norm, probe);
    EXPECT_NEAR(q2b.x, probe.x + 10.0, 1e-9);
}

TEST(ChainPairwise, RandomChainMatchesMatrixProductOracle) {
    Rng rng(1627);
    const auto random_tau = [&rng] {
        HomographyParams t;
        for (int i = 0; i < 6; ++i) t.v[i] = 0.1 * (rng.uniform() - 0.5);
        t.v[6] = 0.004 * (rng.uniform() - 0.5);
        t.v[7] = 0.004 * (rng.uniform() - 0.5);
        return t;
    };
    std::vector<HomographyParams> pairwise(4);
    for (HomographyParams& t : pairwise) t = random_tau();
    const std::size_t reference = 2;
    const std::vector<HomographyParams> out = chain_pairwise(pairwise, reference);

    // reference implementation: accumulate raw 3×3 products
    std::vector<Mat3> mats(5);
    mats[reference] = Mat3::identity();
    for (std::size_t j = reference + 1; j < 5; ++j)
        mats[j] = to_matrix(pairwise[j - 1]) * mats[j - 1];
    for (std::size_t j = reference; j-- > 0;)
        mats[j] = to_matrix(pairwise[j]).inverse() * mats[j + 1];
    for (std::size_t j = 0; j < 5; ++j) {
        const HomographyParams want = from_matrix(mats[j]);
        for (int i = 0; i < 8; ++i) ASSERT_NEAR(out[j].v[i], want.v[i], 1e-10);
    }
}

TEST(ChainPairwise, DegenerateCompositionRaises) {
    HomographyParams a;  // projective row sends the composition's corner to zero
    a.v[6] = 1.0;
    HomographyParams b;
    b.v[2] = -1.0;
    EXPECT_THROW(chain_pairwise({b, a}, 0), DegenerateTransformError);
    EXPECT_THROW(chain_pairwise({b, a}, 3), std::invalid_argument);
}
