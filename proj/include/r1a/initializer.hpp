#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <future>
#include <iostream>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "r1a/homography.hpp"
#include "r1a/image.hpp"
#include "r1a/kernels.hpp"
#include "r1a/metrics.hpp"

namespace r1a {

inline constexpr int kDescriptorDim = 128;

/// Per-pixel gradient-orientation descriptors: a length-128 nonnegative
/// vector for every pixel, stored row-major by pixel.
struct DescriptorField {
    int h = 0, w = 0;
    std::vector<double> data;

    DescriptorField() = default;
    DescriptorField(int height, int width)
        : h(height),
          w(width),
          data(static_cast<std::size_t>(height) * static_cast<std::size_t>(width) * kDescriptorDim,
               0.0) {
        if (height < 1 || width < 1)
            throw std::invalid_argument("DescriptorField: dimensions must be positive");
    }

    double* at(int x, int y) {
        return data.data() +
               (static_cast<std::size_t>(y) * static_cast<std::size_t>(w) + x) * kDescriptorDim;
    }
    const double* at(int x, int y) const {
        return data.data() +
               (static_cast<std::size_t>(y) * static_cast<std::size_t>(w) + x) * kDescriptorDim;
    }
};

/// Markov-random-field energy weights for coarse motion estimation. Labels
/// are integer displacements −L..L per axis.
struct HMRFParams {
    double kappa = 5.0;   // truncation of the descriptor matching cost
    double eta = 1e-3;    // fidelity weight toward the current global transform
    double alpha = 10.0;  // quadratic smoothness weight between neighboring pixels
    int L = 8;            // maximum displacement magnitude per axis

    void validate() const {
        if (!(kappa > 0.0)) throw std::invalid_argument("HMRFParams: kappa must be positive");
        if (!(eta > 0.0)) throw std::invalid_argument("HMRFParams: eta must be positive");
        if (!(alpha > 0.0)) throw std::invalid_argument("HMRFParams: alpha must be positive");
        if (L < 1) throw std::invalid_argument("HMRFParams: L must be >= 1");
    }
};

/// Default energy weights for a motion search at the given image width: the
/// label range scales with the frame (an eighth of the width).
inline HMRFParams default_hmrf_params(int width) {
    HMRFParams p;
    p.L = std::max(2, width / 8);
    return p;
}

/// Per-pixel label distributions over the 2L+1 integer displacements of each
/// axis; every vector sums to one.
struct MotionFieldMarginals {
    int h = 0, w = 0, L = 0;
    std::vector<double> omega_u, omega_v;  // h·w·(2L+1), row-major by pixel

    int labels() const { return 2 * L + 1; }
    std::size_t index(int x, int y) const {
        return (static_cast<std::size_t>(y) * static_cast<std::size_t>(w) + x) *
               static_cast<std::size_t>(labels());
    }
    double* u_at(int x, int y) { return omega_u.data() + index(x, y); }
    const double* u_at(int x, int y) const { return omega_u.data() + index(x, y); }
    double* v_at(int x, int y) { return omega_v.data() + index(x, y); }
    const double* v_at(int x, int y) const { return omega_v.data() + index(x, y); }
};

namespace detail {

/// Orientation bin in 0..7 for a gradient vector; bins split (−π, π] evenly.
inline int orientation_bin(double gx, double gy) {
    const double theta = std::atan2(gy, gx);
    int b = static_cast<int>((theta + std::numbers::pi) * (8.0 / (2.0 * std::numbers::pi)));
    if (b > 7) b = 7;
    if (b < 0) b = 0;
    return b;
}

}  // namespace detail

/// Computes a 128-dimensional gradient-orientation descriptor at every pixel:
/// 8-bin orientation histograms over a 4×4 grid of 4×4-pixel subpatches of the
/// 16×16 window centered at the pixel (window offsets −8..+7), each histogram
/// entry weighted by gradient magnitude. The concatenated vector is scaled to
/// unit ℓ₂ norm, clamped at 0.2 per entry, and renormalized; an all-flat
/// window yields the zero vector. Reads outside the image reflect at the
/// borders.
inline DescriptorField dense_descriptor(const Image& img) {
    if (img.w < 16 || img.h < 16)
        throw std::invalid_argument("dense_descriptor: image must be at least 16x16");

    // Gradient magnitude and orientation bin on a margin-extended grid so the
    // window accumulation below is pure table lookup.
    constexpr int M = 8;
    const int ew = img.w + 2 * M, eh = img.h + 2 * M;
    std::vector<double> mag(static_cast<std::size_t>(ew) * eh);
    std::vector<int> bin(static_cast<std::size_t>(ew) * eh);
    for (int y = -M; y < img.h + M; ++y)
        for (int x = -M; x < img.w + M; ++x) {
            const double gx = 0.5 * (img.at_reflected(x + 1, y) - img.at_reflected(x - 1, y));
            const double gy = 0.5 * (img.at_reflected(x, y + 1) - img.at_reflected(x, y - 1));
            const std::size_t e = static_cast<std::size_t>(y + M) * ew + (x + M);
            mag[e] = std::hypot(gx, gy);
            bin[e] = detail::orientation_bin(gx, gy);
        }

    DescriptorField field(img.h, img.w);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            double* d = field.at(x, y);
            for (int dy = -M; dy < M; ++dy) {
                const int cell_row = (dy + M) / 4;
                const std::size_t erow = static_cast<std::size_t>(y + dy + M) * ew + (x + M);
                for (int dx = -M; dx < M; ++dx) {
                    const int cell = cell_row * 4 + (dx + M) / 4;
                    d[cell * 8 + bin[erow + dx]] += mag[erow + dx];
                }
            }
            double norm2 = 0.0;
            for (int k = 0; k < kDescriptorDim; ++k) norm2 += d[k] * d[k];
            norm2 = std::sqrt(norm2);
            if (norm2 < 1e-12) {
                for (int k = 0; k < kDescriptorDim; ++k) d[k] = 0.0;
                continue;
            }
            double clipped2 = 0.0;
            for (int k = 0; k < kDescriptorDim; ++k) {
                d[k] = std::min(d[k] / norm2, 0.2);
                clipped2 += d[k] * d[k];
            }
            clipped2 = std::sqrt(clipped2);
            for (int k = 0; k < kDescriptorDim; ++k) d[k] /= clipped2;
        }
    return field;
}

namespace detail {

/// out[j] = min_i f[i] + a·(i−j)², the lower envelope of parabolas rooted at
/// the samples (linear-time distance transform).
inline void quadratic_min_transform(const double* f, int n, double a, double* out, int* hull,
                                    double* z) {
    constexpr double inf = std::numeric_limits<double>::infinity();
    int k = 0;
    hull[0] = 0;
    z[0] = -inf;
    z[1] = inf;
    for (int q = 1; q < n; ++q) {
        double s;
        while (true) {
            const int p = hull[k];
            s = ((f[q] + a * q * q) - (f[p] + a * p * p)) / (2.0 * a * (q - p));
            if (s <= z[k])
                --k;
            else
                break;
        }
        ++k;
        hull[k] = q;
        z[k] = s;
        z[k + 1] = inf;
    }
    k = 0;
    for (int q = 0; q < n; ++q) {
        while (z[k + 1] < q) ++k;
        const int i = hull[k];
        out[q] = f[i] + a * (q - i) * (q - i);
    }
}

/// Runs fn(y) over rows, splitting across threads when asked; fn returns a
/// row-local maximum and the results are max-combined, so the outcome is
/// independent of the split.
template <typename F>
inline double max_over_rows(int h, bool parallel, const F& fn) {
    unsigned tasks = parallel ? std::min<unsigned>(std::thread::hardware_concurrency(),
                                                   static_cast<unsigned>((h + 3) / 4))
                              : 1u;
    if (tasks <= 1) {
        double m = 0.0;
        for (int y = 0; y < h; ++y) m = std::max(m, fn(y));
        return m;
    }
    std::vector<std::future<double>> futs;
    futs.reserve(tasks);
    for (unsigned t = 0; t < tasks; ++t) {
        const int y0 = static_cast<int>(static_cast<long>(h) * t / tasks);
        const int y1 = static_cast<int>(static_cast<long>(h) * (t + 1) / tasks);
        futs.push_back(std::async(std::launch::async, [y0, y1, &fn] {
            double m = 0.0;
            for (int y = y0; y < y1; ++y) m = std::max(m, fn(y));
            return m;
        }));
    }
    double m = 0.0;
    for (auto& f : futs) m = std::max(m, f.get());
    return m;
}

struct EnvelopeScratch {
    std::vector<double> total, in, out, z;
    std::vector<int> hull;
    void ensure(int n) {
        if (static_cast<int>(total.size()) < n) {
            total.resize(n);
            in.resize(n);
            out.resize(n);
            z.resize(n + 1);
            hull.resize(n);
        }
    }
};

/// Min-sum message passing for one displacement axis on the 4-connected pixel
/// grid with quadratic pairwise cost a·(l−l')². Messages update in
/// checkerboard order (all even-parity senders, then all odd), row-parallel
/// within a phase; senders of one parity only write message slots of the
/// other, so the result is independent of row scheduling. Returns per-pixel
/// beliefs (unary plus incoming messages). Messages are min-normalized; the
/// sweep loop stops when they stabilize or after h+w+2 sweeps.
inline std::vector<double> axis_min_sum(const std::vector<double>& unary, int h, int w, int n,
                                        double alpha) {
    const std::size_t field = static_cast<std::size_t>(h) * w * n;
    // Incoming-message slots indexed by the receiving pixel:
    // 0 = from the left neighbor, 1 = from the right, 2 = from above, 3 = from below.
    std::array<std::vector<double>, 4> msg;
    for (auto& m : msg) m.assign(field, 0.0);

    const bool parallel = field >= 32768 && h >= 8;
    const int max_sweeps = h + w + 2;

    const auto send_from_row = [&](int y, int color) {
        static thread_local EnvelopeScratch scratch;
        scratch.ensure(n);
        double delta = 0.0;
        for (int x = (y + color) % 2 == 0 ? 0 : 1; x < w; x += 2) {
            const std::size_t p = (static_cast<std::size_t>(y) * w + x) * n;
            // Total incoming plus unary at the sender; each outgoing message
            // subtracts its receiver's own contribution.
            for (int l = 0; l < n; ++l)
                scratch.total[l] = unary[p + l] + msg[0][p + l] + msg[1][p + l] + msg[2][p + l] +
                                   msg[3][p + l];
            struct Send {
                bool exists;
                int exclude;       // slot of the receiver's message at the sender
                int write;         // slot at the receiver this message lands in
                std::ptrdiff_t o;  // receiver offset in label-strided units
            };
            const Send sends[4] = {
                {x > 0, 0, 1, -static_cast<std::ptrdiff_t>(n)},
                {x + 1 < w, 1, 0, static_cast<std::ptrdiff_t>(n)},
                {y > 0, 2, 3, -static_cast<std::ptrdiff_t>(w) * n},
                {y + 1 < h, 3, 2, static_cast<std::ptrdiff_t>(w) * n},
            };
            for (const Send& s : sends) {
                if (!s.exists) continue;
                const double* ex = msg[s.exclude].data() + p;
                for (int l = 0; l < n; ++l) scratch.in[l] = scratch.total[l] - ex[l];
                quadratic_min_transform(scratch.in.data(), n, alpha, scratch.out.data(),
                                        scratch.hull.data(), scratch.z.data());
                double lo = scratch.out[0];
                for (int l = 1; l < n; ++l) lo = std::min(lo, scratch.out[l]);
                double* dst = msg[s.write].data() + p + s.o;
                for (int l = 0; l < n; ++l) {
                    const double nv = scratch.out[l] - lo;
                    const double d = std::abs(nv - dst[l]);
                    if (!(d <= delta)) delta = d;  // picks up NaN as well
                    dst[l] = nv;
                }
            }
        }
        return delta;
    };

    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double delta = 0.0;
        for (int color = 0; color < 2; ++color) {
            const double d =
                max_over_rows(h, parallel, [&](int y) { return send_from_row(y, color); });
            if (!(d <= delta)) delta = d;
        }
        if (!std::isfinite(delta))
            throw NumericalError("bp_marginals: message divergence", sweep + 1);
        if (delta < 1e-12) break;
    }

    std::vector<double> beliefs(field);
    for (std::size_t i = 0; i < field; ++i)
        beliefs[i] = unary[i] + msg[0][i] + msg[1][i] + msg[2][i] + msg[3][i];
    return beliefs;
}

inline double l1_descriptor_distance(const double* a, const double* b) {
    double s = 0.0;
    for (int k = 0; k < kDescriptorDim; ++k) s += std::abs(a[k] - b[k]);
    return s;
}

}  // namespace detail

/// Approximate posterior marginals of the per-pixel displacement field under
/// the motion energy
///   Σ_p min(‖s₁(p) − s₂(p + w(p))‖₁, κ)  +  η Σ_p ‖w(p) − g(p)‖₁
///   + α Σ_{p∼q} ‖w(p) − w(q)‖₂²,
/// where g(p) = t(p; τ) − p is the displacement the current global transform
/// predicts (t evaluated through `norm`, the shared normalization frame) and
/// p∼q ranges over 4-neighborhoods. Displacements outside the second field
/// cost the truncation value κ. The two axes are estimated by alternating
/// min-sum message passing (u, v, u, v), each pass holding the other axis at
/// its current per-pixel best label, initialized from g rounded and clamped to
/// −L..L; the reported marginals come from the final pass of each axis,
/// converted to probabilities by a softmin of the beliefs at unit temperature.
inline MotionFieldMarginals bp_marginals(const DescriptorField& s1, const DescriptorField& s2,
                                         const HomographyParams& tau,
                                         const NormalizationTransform& norm,
                                         const HMRFParams& params) {
    params.validate();
    if (s1.h != s2.h || s1.w != s2.w)
        throw std::invalid_argument("bp_marginals: descriptor fields must have the same shape");
    if (s1.h < 1 || s1.w < 1) throw std::invalid_argument("bp_marginals: empty descriptor field");

    const int h = s1.h, w = s1.w, L = params.L, n = 2 * L + 1;
    const std::size_t pixels = static_cast<std::size_t>(h) * w;

    std::vector<double> tgt_u(pixels), tgt_v(pixels);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            Vec2 q;
            try {
                q = apply_pixel_map(tau, norm, {double(x), double(y)});
            } catch (const PointAtInfinityError&) {
                throw NumericalError("bp_marginals: transform sends a pixel to infinity", 0);
            }
            tgt_u[static_cast<std::size_t>(y) * w + x] = q.x - x;
            tgt_v[static_cast<std::size_t>(y) * w + x] = q.y - y;
        }

    const auto rounded_label = [L](double t) {
        return static_cast<int>(std::lround(std::clamp(t, double(-L), double(L))));
    };
    std::vector<int> u_cur(pixels), v_cur(pixels);
    for (std::size_t p = 0; p < pixels; ++p) {
        u_cur[p] = rounded_label(tgt_u[p]);
        v_cur[p] = rounded_label(tgt_v[p]);
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
                const std::size_t p = static_cast<std::size_t>(y) * w + x;
                const double tgt = u_axis ? tgt_u[p] : tgt_v[p];
                for (int l = -L; l <= L; ++l) {
                    const int mx = x + (u_axis ? l : u_cur[p]);
                    const int my = y + (u_axis ? v_cur[p] : l);
                    double d = params.kappa;
                    if (mx >= 0 && mx < w && my >= 0 && my < h)
                        d = std::min(detail::l1_descriptor_distance(s1.at(x, y), s2.at(mx, my)),
                                     params.kappa);
                    const double e = d + params.eta * std::abs(double(l) - tgt);
                    if (!std::isfinite(e))
                        throw NumericalError("bp_marginals: non-finite energy terms", 0);
                    unary[p * n + (l + L)] = e;
                }
            }

        const std::vector<double> beliefs = detail::axis_min_sum(unary, h, w, n, params.alpha);

        std::vector<int>& cur = u_axis ? u_cur : v_cur;
        for (std::size_t p = 0; p < pixels; ++p) {
            const double* b = beliefs.data() + p * n;
            int best = 0;
            for (int l = 1; l < n; ++l)
                if (b[l] < b[best]) best = l;
            cur[p] = best - L;
        }

        if (pass >= 2) {
            std::vector<double>& omega = u_axis ? out.omega_u : out.omega_v;
            for (std::size_t p = 0; p < pixels; ++p) {
                const double* b = beliefs.data() + p * n;
                double lo = b[0];
                for (int l = 1; l < n; ++l) lo = std::min(lo, b[l]);
                if (!std::isfinite(lo))
                    throw NumericalError("bp_marginals: non-finite beliefs", 0);
                double sum = 0.0;
                for (int l = 0; l < n; ++l) {
                    const double v = std::exp(-(b[l] - lo));
                    omega[p * n + l] = v;
                    sum += v;
                }
                for (int l = 0; l < n; ++l) omega[p * n + l] /= sum;
            }
        }
    }
    return out;
}

/// Per-sweep diagnostics of the reweighted fit below.
struct FitReport {
    std::vector<double> objective_history;  // true objective after each accepted sweep
    bool ridged = false;                    // a singular normal system needed a ridge
};

/// Fits the 8 transform parameters to motion marginals by minimizing
///   F(τ) = Σ_p Σ_l ω^u_{p,l}·|t_u(p;τ) − x_p − l| + ω^v_{p,l}·|t_v(p;τ) − y_p − l|
/// with iteratively reweighted least squares on the linearized coordinate map,
/// warm-started at tau_init: each sweep solves the weighted normal equations
/// of the Gauss–Newton model and backtracks the step until the true objective
/// does not increase. Stops after 20 sweeps or when the relative objective
/// change drops below 1e-8. A singular normal system falls back to a 1e-8
/// ridge with a warning.
inline HomographyParams fit_homography_weighted(const MotionFieldMarginals& mg,
                                                const HomographyParams& tau_init,
                                                const NormalizationTransform& norm,
                                                FitReport* report = nullptr) {
    if (mg.h < 1 || mg.w < 1 || mg.L < 0)
        throw std::invalid_argument("fit_homography_weighted: empty marginals");
    const int n = mg.labels();
    const std::size_t pixels = static_cast<std::size_t>(mg.h) * mg.w;
    if (mg.omega_u.size() != pixels * n || mg.omega_v.size() != pixels * n)
        throw std::invalid_argument("fit_homography_weighted: marginal sizes inconsistent");
    for (double v : mg.omega_u)
        if (!(v >= 0.0) || !std::isfinite(v))
            throw std::invalid_argument("fit_homography_weighted: invalid marginal entries");
    for (double v : mg.omega_v)
        if (!(v >= 0.0) || !std::isfinite(v))
            throw std::invalid_argument("fit_homography_weighted: invalid marginal entries");

    const double inf = std::numeric_limits<double>::infinity();
    const auto objective = [&](const HomographyParams& t) {
        double f = 0.0;
        for (int y = 0; y < mg.h; ++y)
            for (int x = 0; x < mg.w; ++x) {
                Vec2 q;
                try {
                    q = apply_pixel_map(t, norm, {double(x), double(y)});
                } catch (const PointAtInfinityError&) {
                    return inf;
                }
                const double au = q.x - x, av = q.y - y;
                const double* ou = mg.u_at(x, y);
                const double* ov = mg.v_at(x, y);
                for (int l = 0; l < n; ++l) {
                    const double lab = double(l - mg.L);
                    f += ou[l] * std::abs(au - lab) + ov[l] * std::abs(av - lab);
                }
            }
        return f;
    };

    HomographyParams tau = tau_init;
    double obj = objective(tau);
    if (!std::isfinite(obj))
        throw std::invalid_argument(
            "fit_homography_weighted: initial transform leaves the finite domain");
    if (report) {
        report->objective_history.assign(1, obj);
        report->ridged = false;
    }

    constexpr double kResidualFloor = 1e-6;  // keeps reweighting finite at exact fits
    bool warned = false;
    for (int sweep = 0; sweep < 20; ++sweep) {
        Matrix H(8, 8);
        std::vector<double> g(8, 0.0);
        for (int y = 0; y < mg.h; ++y)
            for (int x = 0; x < mg.w; ++x) {
                const Vec2 p{double(x), double(y)};
                const Vec2 q = apply_pixel_map(tau, norm, p);
                const Matrix J = coordinate_jacobian(tau, norm.normalize(p));
                // Pixel-frame derivative of the coordinate map: the output
                // denormalization divides by the frame scale.
                const double a[2] = {q.x - x, q.y - y};
                for (int axis = 0; axis < 2; ++axis) {
                    const double* omega = axis == 0 ? mg.u_at(x, y) : mg.v_at(x, y);
                    double wsum = 0.0, csum = 0.0;
                    for (int l = 0; l < n; ++l) {
                        const double lab = double(l - mg.L);
                        const double wl =
                            omega[l] / std::max(std::abs(a[axis] - lab), kResidualFloor);
                        wsum += wl;
                        csum += wl * lab;
                    }
                    if (wsum <= 0.0) continue;
                    const double rhs = csum / wsum - a[axis];
                    const double* jr = J.row(axis);
                    const double s = 1.0 / norm.scale;
                    for (int i = 0; i < 8; ++i) {
                        const double ji = jr[i] * s;
                        g[i] += wsum * rhs * ji;
                        for (int j = 0; j < 8; ++j) H(i, j) += wsum * ji * (jr[j] * s);
                    }
                }
            }

        std::vector<double> step;
        try {
            const QrResult qr = thin_qr(H);
            std::vector<double> qtg(8, 0.0);
            for (int i = 0; i < 8; ++i)
                for (int r = 0; r < 8; ++r) qtg[i] += qr.Q(r, i) * g[r];
            step = solve_upper_triangular(qr.R, qtg);
        } catch (const std::invalid_argument&) {
            if (!warned) {
                std::cerr << "fit_homography_weighted: singular normal system; adding a 1e-8 "
                             "ridge\n";
                warned = true;
            }
            if (report) report->ridged = true;
            for (int i = 0; i < 8; ++i) H(i, i) += 1e-8;
            const QrResult qr = thin_qr(H);
            std::vector<double> qtg(8, 0.0);
            for (int i = 0; i < 8; ++i)
                for (int r = 0; r < 8; ++r) qtg[i] += qr.Q(r, i) * g[r];
            step = solve_upper_triangular(qr.R, qtg);
        }

        HomographyParams trial = tau;
        double new_obj = inf;
        double scale = 1.0;
        for (int bt = 0; bt < 40; ++bt) {
            for (int i = 0; i < 8; ++i) trial.v[i] = tau.v[i] + scale * step[i];
            new_obj = objective(trial);
            if (new_obj <= obj + 1e-12) break;
            scale *= 0.5;
        }
        if (!(new_obj <= obj + 1e-12)) break;  // no non-increasing step exists

        const double rel = std::abs(obj - new_obj) / std::max(obj, 1e-30);
        tau = trial;
        obj = new_obj;
        if (report) report->objective_history.push_back(obj);
        if (rel < 1e-8) break;
    }
    return tau;
}

/// Estimates the coarse transform pulling image-2 content onto image 1's
/// pixel grid by alternating motion-marginal estimation (bp_marginals at the
/// current transform) with the weighted parameter fit above, starting from
/// the identity. Stops when the mean squared pixel displacement between
/// consecutive iterates drops below epsilon; after 30 rounds without
/// convergence the last iterate is returned with a warning. Transform
/// parameters are expressed in the normalization frame of the shared image
/// domain.
inline HomographyParams em_initialize(const Image& img1, const Image& img2,
                                      const HMRFParams& params, double epsilon = 1e-3) {
    params.validate();
    if (img1.w < 32 || img1.h < 32 || img2.w < 32 || img2.h < 32)
        throw std::invalid_argument("em_initialize: images must be at least 32x32");
    if (img1.w != img2.w || img1.h != img2.h)
        throw std::invalid_argument("em_initialize: images must share one pixel grid");
    if (!(epsilon > 0.0)) throw std::invalid_argument("em_initialize: epsilon must be positive");

    const NormalizationTransform norm = normalization_for(img1.w, img1.h);
    const DescriptorField s1 = dense_descriptor(img1);
    const DescriptorField s2 = dense_descriptor(img2);

    HomographyParams tau;
    for (int round = 0; round < 30; ++round) {
        const MotionFieldMarginals mg = bp_marginals(s1, s2, tau, norm, params);
        const HomographyParams next = fit_homography_weighted(mg, tau, norm);
        const double d = transform_distance(next, tau, img1.h, img1.w);
        tau = next;
        if (d < epsilon) return tau;
    }
    std::cerr << "em_initialize: no convergence in 30 rounds; returning the last iterate\n";
    return tau;
}

/// Composes consecutive pairwise transforms (pairwise[i] pulls image-(i+1)
/// content into image i's frame) into one transform per image mapping
/// reference-frame coordinates to that image, via 3×3 matrix products with
/// the bottom-right entry renormalized to one. A composition whose
/// bottom-right entry vanishes raises the degenerate-transform error.
inline std::vector<HomographyParams> chain_pairwise(const std::vector<HomographyParams>& pairwise,
                                                    std::size_t reference) {
    const std::size_t count = pairwise.size() + 1;
    if (reference >= count)
        throw std::invalid_argument("chain_pairwise: reference index out of range");
    std::vector<HomographyParams> out(count);
    for (std::size_t j = reference + 1; j < count; ++j)
        out[j] = compose(pairwise[j - 1], out[j - 1]);
    for (std::size_t j = reference; j-- > 0;) out[j] = compose(invert(pairwise[j]), out[j + 1]);
    return out;
}

}  // namespace r1a
