#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <stdexcept>
#include <utility>
#include <vector>

#include "r1a/homography.hpp"
#include "r1a/image.hpp"
#include "r1a/kernels.hpp"
#include "r1a/matrix.hpp"
#include "r1a/rng.hpp"

// Seeded generators for synthetic decomposition and alignment experiments,
// measured regularity constants of a generated instance, and a convex
// nuclear-norm baseline used as a comparison fixture in tests.

namespace r1a {

/// A planted decomposition problem: an exactly rank-1 matrix corrupted by a
/// sparse ±1 matrix and by per-column parametric deformations.
struct SynthInstance {
    Rank1Factors L_star;               // ground-truth rank-1 part (σ, unit u, unit v)
    Matrix S_star;                     // ground-truth sparse part, entries in {−1, 0, +1}
    std::vector<std::size_t> support;  // flat row-major indices of S_star nonzeros, ascending
    std::vector<Matrix> jacobians;     // one m×d Jacobian per column
    Matrix delta_tau_star;             // d×n planted increments, column i for column i of D
    Matrix D;                          // observed matrix: L* + S* − Σ_i J_i Δτ*_i e_iᵀ
    double rho = 0.0;                  // sparse support density
    std::uint64_t seed = 0;
};

/// Measured regularity constants of an instance (max/average forms; see
/// assumption_constants for the exact definitions).
struct AssumptionConstants {
    double mu = 0.0;      // factor spread: max(√m·||u||_∞, √n·||v||_∞)
    double nu = 0.0;      // Jacobian row spread: max_{j,i} ||Q_jᵀe_i||·√(m/d)
    double kappa = 0.0;   // factor/Jacobian coherence: max_i ||Q_iᵀu||·√(m/d)
    double delta = 0.0;   // mean pairwise Jacobian coherence: max_i avg_{j≠i} ||Q_jᵀQ_i||₂
    double gamma = 0.0;   // increment size: max_i ||R_iΔτ*_i||·√(nd)/σ
    double alpha1 = 0.0;  // max fraction of nonzeros in any column of S*
    double alpha2 = 0.0;  // max fraction of nonzeros in any row of S*
};

/// Draws a planted instance. All randomness comes from one seeded stream in a
/// fixed order (u, v, support, signs, Jacobians, increments), so instances
/// are bit-identical across reruns for a fixed seed.
///
/// Distributions: u ~ N(0, I_m/m), v ~ N(0, I_n/n), L* = uvᵀ; S* carries
/// independent ±1 signs on a uniformly chosen support of round(ρmn) cells;
/// Jacobian entries are N(0, d/m); increments are planted through the QR
/// factors J_i = Q_iR_i by drawing g ~ N(0, (||L*||₂/(nd))·I_d) and solving
/// R_iΔτ*_i = g. The observation is D = L* + S* − Σ_i J_iΔτ*_i e_iᵀ, i.e.
/// column i of D additionally loses J_iΔτ*_i.
inline SynthInstance gen_rpca_instance(std::size_t m, std::size_t n, std::size_t d,
                                       double rho, std::uint64_t seed) {
    if (m == 0 || n == 0 || d == 0)
        throw std::invalid_argument("gen_rpca_instance: empty dimension");
    if (d > m) throw std::invalid_argument("gen_rpca_instance: d must not exceed m");
    if (!(rho > 0.0 && rho < 1.0))
        throw std::invalid_argument("gen_rpca_instance: rho must lie in (0, 1)");

    Rng rng(seed);
    SynthInstance inst;
    inst.rho = rho;
    inst.seed = seed;

    // Rank-1 ground truth, stored in normalized-factor form.
    std::vector<double> u(m), v(n);
    const double su = 1.0 / std::sqrt(static_cast<double>(m));
    const double sv = 1.0 / std::sqrt(static_cast<double>(n));
    for (double& x : u) x = rng.normal() * su;
    for (double& x : v) x = rng.normal() * sv;
    const double un = norm2(u), vn = norm2(v);
    inst.L_star.sigma = un * vn;
    inst.L_star.u = u;
    inst.L_star.v = v;
    for (double& x : inst.L_star.u) x /= un;
    for (double& x : inst.L_star.v) x /= vn;
    detail::canonical_sign(inst.L_star);

    // Sparse part: uniform support of round(ρmn) cells via partial
    // Fisher-Yates, then independent ±1 signs in ascending index order.
    const std::size_t mn = m * n;
    const std::size_t nnz = static_cast<std::size_t>(std::llround(rho * static_cast<double>(mn)));
    if (nnz == 0)
        std::cerr << "gen_rpca_instance: rho*m*n rounds to zero; sparse part is empty\n";
    std::vector<std::size_t> idx(mn);
    for (std::size_t k = 0; k < mn; ++k) idx[k] = k;
    inst.support.reserve(nnz);
    for (std::size_t t = 0; t < nnz; ++t) {
        const std::size_t j = t + static_cast<std::size_t>(rng.below(mn - t));
        std::swap(idx[t], idx[j]);
        inst.support.push_back(idx[t]);
    }
    std::sort(inst.support.begin(), inst.support.end());
    inst.S_star = Matrix(m, n);
    for (std::size_t f : inst.support)
        inst.S_star.data()[f] = rng.uniform() < 0.5 ? -1.0 : 1.0;

    // Per-column Jacobians, entries N(0, d/m) drawn row-major.
    const double sj = std::sqrt(static_cast<double>(d) / static_cast<double>(m));
    inst.jacobians.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Matrix J(m, d);
        for (std::size_t k = 0; k < J.size(); ++k) J.data()[k] = rng.normal() * sj;
        inst.jacobians.push_back(std::move(J));
    }

    // Planted increments through the QR factors of each Jacobian.
    inst.delta_tau_star = Matrix(d, n);
    const double sg = std::sqrt(inst.L_star.sigma / static_cast<double>(n * d));
    for (std::size_t i = 0; i < n; ++i) {
        const QrResult qr = thin_qr(inst.jacobians[i]);
        if (!qr.deficient_cols.empty())
            throw std::runtime_error("gen_rpca_instance: rank-deficient Jacobian draw");
        std::vector<double> g(d);
        for (double& x : g) x = rng.normal() * sg;
        inst.delta_tau_star.set_col(i, solve_upper_triangular(qr.R, g));
    }

    // Observation.
    inst.D = inst.L_star.reconstruct();
    inst.D += inst.S_star;
    for (std::size_t i = 0; i < n; ++i) {
        const std::vector<double> w = matvec(inst.jacobians[i], inst.delta_tau_star.col(i));
        for (std::size_t r = 0; r < m; ++r) inst.D(r, i) -= w[r];
    }
    return inst;
}

/// Computes the regularity constants of an instance directly from their
/// definitions. Q_i denotes the orthonormal column basis of J_i (thin QR).
///   μ  = max(√m·||u||_∞, √n·||v||_∞)
///   ν  = max_{j,i} ||Q_jᵀe_i|| · √(m/d)
///   κ  = max_i ||Q_iᵀu|| · √(m/d)
///   δ  = max_i (1/(n−1)) Σ_{j≠i} ||Q_jᵀQ_i||₂          (0 when n = 1)
///   γ  = max_i ||R_iΔτ*_i|| · √(nd) / σ
///   α₁ = max_j nnz(S*e_j)/m,   α₂ = max_i nnz(e_iᵀS*)/n
inline AssumptionConstants assumption_constants(const SynthInstance& inst) {
    const std::size_t m = inst.S_star.rows(), n = inst.S_star.cols();
    const std::size_t d = inst.delta_tau_star.rows();
    AssumptionConstants c;

    double umax = 0.0, vmax = 0.0;
    for (double x : inst.L_star.u) umax = std::max(umax, std::abs(x));
    for (double x : inst.L_star.v) vmax = std::max(vmax, std::abs(x));
    c.mu = std::max(std::sqrt(static_cast<double>(m)) * umax,
                    std::sqrt(static_cast<double>(n)) * vmax);

    std::vector<Matrix> Q;
    std::vector<Matrix> R;
    Q.reserve(n);
    R.reserve(n);
    for (const Matrix& J : inst.jacobians) {
        QrResult qr = thin_qr(J);
        Q.push_back(std::move(qr.Q));
        R.push_back(std::move(qr.R));
    }
    const double md = std::sqrt(static_cast<double>(m) / static_cast<double>(d));

    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t i = 0; i < m; ++i) {
            const double* qi = Q[j].row(i);
            c.nu = std::max(c.nu, std::sqrt(dot_raw(qi, qi, d)) * md);
        }

    for (std::size_t i = 0; i < n; ++i)
        c.kappa = std::max(c.kappa, norm2(matTvec(Q[i], inst.L_star.u)) * md);

    if (n > 1) {
        for (std::size_t i = 0; i < n; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                if (j == i) continue;
                acc += spectral_norm(matmul(transpose(Q[j]), Q[i]));
            }
            c.delta = std::max(c.delta, acc / static_cast<double>(n - 1));
        }
    }

    if (inst.L_star.sigma > 0.0) {
        const double nd = std::sqrt(static_cast<double>(n * d));
        for (std::size_t i = 0; i < n; ++i) {
            const std::vector<double> ri = matvec(R[i], inst.delta_tau_star.col(i));
            c.gamma = std::max(c.gamma, norm2(ri) * nd / inst.L_star.sigma);
        }
    }

    for (std::size_t j = 0; j < n; ++j) {
        std::size_t cnt = 0;
        for (std::size_t i = 0; i < m; ++i)
            if (inst.S_star(i, j) != 0.0) ++cnt;
        c.alpha1 = std::max(c.alpha1, static_cast<double>(cnt) / static_cast<double>(m));
    }
    for (std::size_t i = 0; i < m; ++i) {
        std::size_t cnt = 0;
        for (std::size_t j = 0; j < n; ++j)
            if (inst.S_star(i, j) != 0.0) ++cnt;
        c.alpha2 = std::max(c.alpha2, static_cast<double>(cnt) / static_cast<double>(n));
    }
    return c;
}

/// Returns D plus Gaussian noise with entries N(0, σ²/(mn)), so the expected
/// Frobenius norm of the added matrix is σ. σ = 0 returns D unchanged
/// without consuming randomness.
inline Matrix add_noise(const Matrix& D, double sigma, std::uint64_t seed) {
    if (sigma < 0.0) throw std::invalid_argument("add_noise: negative sigma");
    Matrix out = D;
    if (sigma == 0.0) return out;
    Rng rng(seed);
    const double s = sigma / std::sqrt(static_cast<double>(D.size()));
    for (std::size_t k = 0; k < out.size(); ++k) out.data()[k] += rng.normal() * s;
    return out;
}

/// A pair of same-size square views of one smooth random texture, related by
/// a horizontal translation, with optional synthetic occlusion on the second
/// view. tau_true is the relative pull-map of img2 with respect to img1
/// (warping img2 by it reproduces img1's content where both views overlap),
/// expressed in the normalization frame of the (size × size) domain.
struct AlignmentScene {
    Image img1;
    Image img2;
    HomographyParams tau_true;
    double translation_px = 0.0;
};

/// Generates an alignment test scene. The base texture is a sum of 12 random
/// sinusoids with at most 3 cycles across the frame, rescaled to [0, 255];
/// both views are windows into it, offset horizontally by translation_px
/// (fractional offsets are sampled bilinearly). Occlusion zeroes
/// round(occlusion_frac·size²) uniformly chosen pixels of img2. Deterministic
/// per seed.
inline AlignmentScene gen_alignment_scene(std::size_t size, double translation_px,
                                          double occlusion_frac, std::uint64_t seed) {
    if (size < 2) throw std::invalid_argument("gen_alignment_scene: size must be at least 2");
    if (!(occlusion_frac >= 0.0 && occlusion_frac < 1.0))
        throw std::invalid_argument("gen_alignment_scene: occlusion_frac must lie in [0, 1)");
    if (!std::isfinite(translation_px))
        throw std::invalid_argument("gen_alignment_scene: non-finite translation");

    Rng rng(seed);
    const int isize = static_cast<int>(size);

    // Band-limited texture: frequencies within ±3 cycles per frame keep the
    // shortest wavelength above size/3 pixels, so bilinear resampling and
    // coarse pyramid levels stay faithful.
    std::array<double, 12> amp, fx, fy, ph;
    for (std::size_t k = 0; k < 12; ++k) {
        amp[k] = 0.5 + 0.5 * rng.uniform();
        fx[k] = rng.uniform() * 6.0 - 3.0;
        fy[k] = rng.uniform() * 6.0 - 3.0;
        ph[k] = rng.uniform() * 6.283185307179586476925286766559;
    }

    // The base is wide enough that both windows sample its interior for
    // either sign of the translation.
    const int pad = static_cast<int>(std::ceil(std::abs(translation_px))) + 2;
    const int offset = translation_px < 0.0 ? pad : 0;
    Image base(static_cast<int>(size) + pad + 2, isize);
    const double tau_circle = 6.283185307179586476925286766559;
    for (int y = 0; y < base.h; ++y)
        for (int x = 0; x < base.w; ++x) {
            double s = 0.0;
            for (std::size_t k = 0; k < 12; ++k)
                s += amp[k] * std::sin(tau_circle * (fx[k] * x + fy[k] * y) /
                                           static_cast<double>(size) +
                                       ph[k]);
            base.at(x, y) = s;
        }
    double lo = base.px[0], hi = base.px[0];
    for (double p : base.px) {
        lo = std::min(lo, p);
        hi = std::max(hi, p);
    }
    const double span = hi > lo ? 255.0 / (hi - lo) : 0.0;
    for (double& p : base.px)
        p = span > 0.0 ? std::clamp((p - lo) * span, 0.0, 255.0) : 127.5;

    AlignmentScene scene;
    scene.translation_px = translation_px;
    scene.img1 = Image(isize, isize);
    scene.img2 = Image(isize, isize);
    for (int y = 0; y < isize; ++y)
        for (int x = 0; x < isize; ++x) {
            scene.img1.at(x, y) = base.at(x + offset, y);
            scene.img2.at(x, y) = bilinear(base, x + offset + translation_px, y);
        }

    const std::size_t occluded =
        static_cast<std::size_t>(std::llround(occlusion_frac * static_cast<double>(size * size)));
    if (occluded > 0) {
        std::vector<std::size_t> idx(size * size);
        for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = k;
        for (std::size_t t = 0; t < occluded; ++t) {
            const std::size_t j = t + static_cast<std::size_t>(rng.below(idx.size() - t));
            std::swap(idx[t], idx[j]);
            scene.img2.px[idx[t]] = 0.0;
        }
    }

    // img2(q) samples the base at q + translation, so pulling img1's content
    // out of img2 shifts the other way.
    const NormalizationTransform frame =
        normalization_for(static_cast<int>(size), static_cast<int>(size));
    scene.tau_true = HomographyParams::translation(-translation_px * frame.scale, 0.0);
    return scene;
}

/// Result of the convex nuclear-norm baseline.
struct AlmResult {
    Matrix L;
    Matrix S;
    Matrix delta_tau;  // d×n
};

namespace detail {

/// Right singular structure of X via the symmetric eigendecomposition of
/// XᵀX; singular values descending. Intended for tall thin X.
struct GramSvd {
    std::vector<double> sigma;
    Matrix V;  // columns are right singular vectors, same order as sigma
};

inline GramSvd gram_svd(const Matrix& X) {
    const SymEig eig = sym_eig(matmul(transpose(X), X));
    const std::size_t n = X.cols();
    GramSvd out;
    out.sigma.resize(n);
    out.V = Matrix(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        const std::size_t src = n - 1 - j;  // eigenvalues come back ascending
        out.sigma[j] = std::sqrt(std::max(eig.values[src], 0.0));
        for (std::size_t i = 0; i < n; ++i) out.V(i, j) = eig.vectors(i, src);
    }
    return out;
}

/// D with each column i advanced along its Jacobian: B = D + Σ_i J_iΔτ_i e_iᵀ.
inline Matrix linearized_observation(const Matrix& D, const std::vector<Matrix>& jacobians,
                                     const Matrix& delta_tau) {
    Matrix B = D;
    for (std::size_t i = 0; i < jacobians.size(); ++i) {
        const std::vector<double> w = matvec(jacobians[i], delta_tau.col(i));
        for (std::size_t r = 0; r < B.rows(); ++r) B(r, i) += w[r];
    }
    return B;
}

}  // namespace detail

/// Sum of singular values.
inline double nuclear_norm(const Matrix& X) {
    double s = 0.0;
    for (double x : detail::gram_svd(X).sigma) s += x;
    return s;
}

/// State of the augmented-Lagrangian baseline for
///   min ||L||_* + λ||S||₁  s.t.  D + Σ_i J_iΔτ_i e_iᵀ = L + S.
/// Each of the three primal updates exactly minimizes the augmented
/// Lagrangian in its own block, so the objective is non-increasing across
/// them; they are exposed separately so tests can check that.
struct AlmState {
    Matrix D;
    std::vector<Matrix> jacobians;
    double lambda = 0.0;
    Matrix L;
    Matrix S;
    Matrix delta_tau;  // d×n
    Matrix Y;          // scaled dual variable
    double mu = 0.0;
    double mu_max = 0.0;
    double mu_growth = 1.25;
};

inline AlmState alm_init(const Matrix& D, const std::vector<Matrix>& jacobians, double weight) {
    if (jacobians.size() != D.cols())
        throw std::invalid_argument("alm_init: need one Jacobian per column");
    if (!(weight > 0.0)) throw std::invalid_argument("alm_init: weight must be positive");
    const std::size_t d = jacobians.empty() ? 0 : jacobians[0].cols();
    for (const Matrix& J : jacobians)
        if (J.rows() != D.rows() || J.cols() != d)
            throw std::invalid_argument("alm_init: Jacobian shape mismatch");

    AlmState st;
    st.D = D;
    st.jacobians = jacobians;
    st.lambda = weight;
    st.L = Matrix(D.rows(), D.cols());
    st.S = Matrix(D.rows(), D.cols());
    st.delta_tau = Matrix(d, D.cols());

    // Standard scaling for the initial dual and penalty parameters.
    const double d2 = spectral_norm(D);
    const double dual_scale = std::max(d2, max_abs(D) / weight);
    st.Y = D;
    if (dual_scale > 0.0) st.Y *= 1.0 / dual_scale;
    st.mu = d2 > 0.0 ? 1.25 / d2 : 1.25;
    st.mu_max = st.mu * 1e7;
    return st;
}

/// L ← argmin over L of the augmented Lagrangian: singular-value shrinkage of
/// B − S + Y/μ by 1/μ.
inline void alm_update_L(AlmState& st) {
    Matrix X = detail::linearized_observation(st.D, st.jacobians, st.delta_tau);
    X -= st.S;
    X += (1.0 / st.mu) * st.Y;
    const detail::GramSvd svd = detail::gram_svd(X);
    const std::size_t n = X.cols();
    // L = X · V diag(c) Vᵀ with c_j = max(σ_j − 1/μ, 0)/σ_j.
    Matrix C(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        const double shrunk = svd.sigma[j] - 1.0 / st.mu;
        if (shrunk <= 0.0) continue;
        const double cj = shrunk / svd.sigma[j];
        for (std::size_t a = 0; a < n; ++a)
            for (std::size_t b = 0; b < n; ++b) C(a, b) += svd.V(a, j) * cj * svd.V(b, j);
    }
    st.L = matmul(X, C);
}

/// S ← argmin over S: entrywise shrinkage of B − L + Y/μ by λ/μ.
inline void alm_update_S(AlmState& st) {
    Matrix X = detail::linearized_observation(st.D, st.jacobians, st.delta_tau);
    X -= st.L;
    X += (1.0 / st.mu) * st.Y;
    st.S = soft_threshold(X, st.lambda / st.mu);
}

/// Δτ ← argmin over Δτ: independent least squares per column,
/// Δτ_i = J_i†((L + S − D − Y/μ)e_i).
inline void alm_update_delta_tau(AlmState& st) {
    for (std::size_t i = 0; i < st.jacobians.size(); ++i) {
        std::vector<double> r(st.D.rows());
        for (std::size_t k = 0; k < r.size(); ++k)
            r[k] = st.L(k, i) + st.S(k, i) - st.D(k, i) - st.Y(k, i) / st.mu;
        st.delta_tau.set_col(i, least_squares_apply(st.jacobians[i], r));
    }
}

/// Dual ascent and penalty growth: Y += μ·(B − L − S), μ ← min(ρμ, μ_max).
inline void alm_update_duals(AlmState& st) {
    Matrix H = detail::linearized_observation(st.D, st.jacobians, st.delta_tau);
    H -= st.L;
    H -= st.S;
    H *= st.mu;
    st.Y += H;
    st.mu = std::min(st.mu * st.mu_growth, st.mu_max);
}

/// Runs the augmented-Lagrangian baseline for a fixed number of iterations
/// (each iteration: L, S, Δτ updates, then the dual step).
inline AlmResult alm_baseline(const Matrix& D, const std::vector<Matrix>& jacobians,
                              double weight, std::size_t iterations = 100) {
    AlmState st = alm_init(D, jacobians, weight);
    for (std::size_t it = 0; it < iterations; ++it) {
        alm_update_L(st);
        alm_update_S(st);
        alm_update_delta_tau(st);
        alm_update_duals(st);
    }
    return AlmResult{std::move(st.L), std::move(st.S), std::move(st.delta_tau)};
}

}  // namespace r1a
