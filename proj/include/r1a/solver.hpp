#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <iostream>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "r1a/homography.hpp"
#include "r1a/image.hpp"
#include "r1a/kernels.hpp"
#include "r1a/matrix.hpp"
#include "r1a/metrics.hpp"
#include "r1a/regions.hpp"
#include "r1a/warp.hpp"

namespace r1a {

/// Knobs of the alternating solvers and the outer linearization loop.
///   beta0, beta1, q   — threshold schedule: the sparse-part threshold starts
///                       at beta0·||D||₂/√(mn) and follows beta1·qᵏ·||Lᵏ||₂/√(mn);
///   epsilon_inner     — target decay level fixing the inner iteration count;
///   epsilon_outer     — stop re-linearizing once consecutive transforms move
///                       every pixel by less than this (normalized units);
///   lambda            — cell-smoothness weight in units of pixels-per-cell;
///   sigma_smooth      — width (normalized units) of the edge-proximity weight
///                       in the cell-smoothness term;
///   pyramid_levels    — coarse-to-fine levels used by pyramid_align.
struct SolverConfig {
    double beta0 = 1.0;
    double beta1 = 1.0;
    double q = 0.7;
    double epsilon_inner = 1e-5;
    double epsilon_outer = 1e-3;
    int max_outer = 40;
    double lambda = 10.0;
    double sigma_smooth = 0.2;
    int pyramid_levels = 3;

    void validate() const {
        if (!(beta0 > 0.0)) throw std::invalid_argument("SolverConfig: beta0 must be positive");
        if (!(beta1 > 0.0)) throw std::invalid_argument("SolverConfig: beta1 must be positive");
        if (!(q > 0.0 && q < 1.0))
            throw std::invalid_argument("SolverConfig: q must lie strictly between 0 and 1");
        if (!(epsilon_inner > 0.0))
            throw std::invalid_argument("SolverConfig: epsilon_inner must be positive");
        if (!(epsilon_outer > 0.0))
            throw std::invalid_argument("SolverConfig: epsilon_outer must be positive");
        if (max_outer < 1) throw std::invalid_argument("SolverConfig: max_outer must be >= 1");
        if (!(lambda >= 0.0))
            throw std::invalid_argument("SolverConfig: lambda must be nonnegative");
        if (!(sigma_smooth > 0.0))
            throw std::invalid_argument("SolverConfig: sigma_smooth must be positive");
        if (pyramid_levels < 1)
            throw std::invalid_argument("SolverConfig: pyramid_levels must be >= 1");
    }
};

/// Per-region diagnostic emitted once per inner iteration. `sigma` is the
/// spectral norm driving the threshold: ||Lᵏ||₂ for k ≥ 1 and ||D||₂ at the
/// initialization record k = 0.
struct InnerIterationRecord {
    int k = 0;
    int region = 0;
    double zeta = 0.0;
    double sigma = 0.0;
    std::size_t sparse_count = 0;
    double residual = 0.0;
};

/// Optional callbacks invoked by the inner solvers: `on_region` once per
/// region per iteration, `on_sparse` with the region's sparse iterate right
/// after its record, `on_increment` with the per-image parameter increments
/// after each iteration (iteration 0 reports the zero start).
struct SolverObserver {
    std::function<void(const InnerIterationRecord&)> on_region;
    std::function<void(int k, int region, const Matrix& S)> on_sparse;
    std::function<void(int k, const std::vector<std::vector<double>>& delta_tau)> on_increment;
};

namespace detail {

inline std::string json_number(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace detail

/// Observer that appends one line-delimited JSON record per region per inner
/// iteration to `os` (which must outlive the returned observer).
inline SolverObserver json_log_observer(std::ostream& os) {
    SolverObserver obs;
    obs.on_region = [&os](const InnerIterationRecord& rec) {
        os << "{\"k\":" << rec.k << ",\"region\":" << rec.region
           << ",\"zeta\":" << detail::json_number(rec.zeta) << ",\"nnz\":" << rec.sparse_count
           << ",\"residual\":" << detail::json_number(rec.residual) << "}\n";
    };
    return obs;
}

/// Number of inner iterations needed to decay the threshold schedule from
/// beta0·d_norm to epsilon at rate q: ceil(log(eps/(beta0·d_norm))/log(q)),
/// floored at 1. Ratios that hit an integer power of q exactly (up to
/// floating-point noise) snap to that integer instead of rounding up.
inline int iteration_budget(double epsilon, double beta0, double d_norm, double q) {
    if (!(epsilon > 0.0) || !(beta0 > 0.0) || !(d_norm >= 0.0))
        throw std::invalid_argument(
            "iteration_budget: epsilon and beta0 must be positive, d_norm nonnegative");
    if (!(q > 0.0 && q < 1.0))
        throw std::invalid_argument("iteration_budget: q must lie strictly between 0 and 1");
    const double start = beta0 * d_norm;
    if (epsilon >= start) return 1;
    const double x = std::log(epsilon / start) / std::log(q);
    const long nearest = std::lround(x);
    const long k = std::abs(x - double(nearest)) < 1e-9 ? nearest : long(std::ceil(x));
    return int(std::max(1L, k));
}

/// Jacobian of one region column with respect to one image's parameters,
/// stored as one dense row per region pixel plus the index of the parameter
/// block (grid cell) each pixel belongs to. An empty `cell` vector means all
/// pixels use block 0 (the single-transform case). The full operator is
/// m_r × (width·cells) but is never densified.
struct RegionBlockJacobian {
    Matrix rows;                      // one length-`width` row per region pixel
    std::vector<std::uint32_t> cell;  // per-pixel block index; empty -> all 0
    std::size_t cells = 1;

    std::size_t width() const { return rows.cols(); }
    std::size_t param_count() const { return width() * cells; }

    static RegionBlockJacobian dense(Matrix j) {
        RegionBlockJacobian b;
        b.rows = std::move(j);
        return b;
    }

    /// target(p, col) += rows(p,·) · x[block(p)]
    void apply_add(const std::vector<double>& x, Matrix& target, std::size_t col) const {
        const std::size_t w = width();
        for (std::size_t p = 0; p < rows.rows(); ++p) {
            const std::size_t off = cell.empty() ? 0 : std::size_t(cell[p]) * w;
            target(p, col) += dot_raw(rows.row(p), x.data() + off, w);
        }
    }

    /// out[block(p)·w + a] += scale · rows(p,a) · weight[p]
    void accumulate_transposed(const double* weight, double scale,
                               std::vector<double>& out) const {
        const std::size_t w = width();
        for (std::size_t p = 0; p < rows.rows(); ++p) {
            const std::size_t off = cell.empty() ? 0 : std::size_t(cell[p]) * w;
            const double* rp = rows.row(p);
            const double s = scale * weight[p];
            for (std::size_t a = 0; a < w; ++a) out[off + a] += s * rp[a];
        }
    }

    /// G[block(p)·w + a, block(p)·w + b] += scale · rows(p,a) · rows(p,b)
    void accumulate_gram(double scale, Matrix& G) const {
        const std::size_t w = width();
        for (std::size_t p = 0; p < rows.rows(); ++p) {
            const std::size_t off = cell.empty() ? 0 : std::size_t(cell[p]) * w;
            const double* rp = rows.row(p);
            for (std::size_t a = 0; a < w; ++a) {
                const double sa = scale * rp[a];
                double* grow = G.row(off + a) + off;
                for (std::size_t b = 0; b < w; ++b) grow[b] += sa * rp[b];
            }
        }
    }
};

/// One overlap region's data: the stacked intensity matrix (one column per
/// covering image), the per-column Jacobians, and the covering image ids in
/// column order.
struct RegionProblem {
    Matrix D;
    std::vector<RegionBlockJacobian> J;
    std::vector<int> images;
};

/// Raw output of the shared alternating core: per-region factors and sparse
/// parts plus per-image increments (empty vector for images no region covers).
struct InnerResult {
    std::vector<Rank1Factors> L;
    std::vector<Matrix> S;
    std::vector<std::vector<double>> delta_tau;
};

namespace detail {

/// Minimum-norm solution of the symmetric PSD system A x = b via the spectral
/// decomposition; eigenvalues at or below 1e-12·λ_max are treated as zero and
/// flag the system as rank-deficient.
inline std::vector<double> min_norm_solve(const Matrix& A, const std::vector<double>& b,
                                          bool& rank_deficient) {
    const std::size_t n = A.rows();
    const SymEig eig = sym_eig(A);
    double lmax = 0.0;
    for (double v : eig.values) lmax = std::max(lmax, std::abs(v));
    const double cutoff = 1e-12 * lmax;
    std::vector<double> x(n, 0.0);
    rank_deficient = false;
    for (std::size_t j = 0; j < n; ++j) {
        const double lam = eig.values[j];
        if (lam <= cutoff) {
            rank_deficient = true;
            continue;
        }
        double c = 0.0;
        for (std::size_t i = 0; i < n; ++i) c += eig.vectors(i, j) * b[i];
        c /= lam;
        for (std::size_t i = 0; i < n; ++i) x[i] += c * eig.vectors(i, j);
    }
    return x;
}

/// Shared alternating-minimization core over a set of overlap regions.
///
/// Per iteration k = 1..K (K from the slowest region's budget):
///   1. per region, at the previous increment's linearization point
///      B = D + Σ_c J_c Δτ^{k−1}: rank-1 projection Lᵏ = T₁(B − S^{k−1}),
///      threshold ζᵏ = beta1·qᵏ·||Lᵏ||₂/√(m n), then Sᵏ = soft(B − Lᵏ, ζᵏ);
///   2. per image, solve the ζ-weighted normal system aggregated over the
///      regions covering it (plus the λ-weighted smoothness system when
///      given) for the new increment, replacing the previous one.
/// Initialization (k = 0): Δτ = 0 and S⁰ = soft(D, beta0·||D||₂/√(m n)).
inline InnerResult solve_regions_core(const std::vector<RegionProblem>& problems,
                                      std::size_t n_images, double lambda,
                                      const std::vector<SmoothnessSystem>* smooth,
                                      const SolverConfig& cfg, const SolverObserver& obs) {
    cfg.validate();
    if (problems.empty()) throw std::invalid_argument("solve: no regions given");
    if (n_images == 0) throw std::invalid_argument("solve: n_images must be positive");
    const std::size_t R = problems.size();

    std::vector<std::size_t> dim(n_images, 0);
    std::vector<std::vector<std::pair<std::size_t, std::size_t>>> covering(n_images);
    for (std::size_t r = 0; r < R; ++r) {
        const RegionProblem& P = problems[r];
        const std::string tag = "solve: region " + std::to_string(r);
        if (P.D.rows() == 0 || P.D.cols() == 0)
            throw std::invalid_argument(tag + " has an empty data matrix");
        if (P.J.size() != P.D.cols() || P.images.size() != P.D.cols())
            throw std::invalid_argument(tag + ": column, jacobian, and image counts disagree");
        for (std::size_t c = 0; c < P.J.size(); ++c) {
            const RegionBlockJacobian& B = P.J[c];
            if (B.rows.rows() != P.D.rows() || B.width() == 0 || B.cells == 0)
                throw std::invalid_argument(tag + ": jacobian shape mismatch in column " +
                                            std::to_string(c));
            if (!B.cell.empty() && B.cell.size() != P.D.rows())
                throw std::invalid_argument(tag + ": cell index count mismatch in column " +
                                            std::to_string(c));
            for (std::uint32_t u : B.cell)
                if (u >= B.cells)
                    throw std::invalid_argument(tag + ": cell index out of range in column " +
                                                std::to_string(c));
            const int im = P.images[c];
            if (im < 0 || std::size_t(im) >= n_images)
                throw std::invalid_argument(tag + ": image id out of range in column " +
                                            std::to_string(c));
            const std::size_t d = B.param_count();
            if (dim[im] == 0)
                dim[im] = d;
            else if (dim[im] != d)
                throw std::invalid_argument("solve: image " + std::to_string(im) +
                                            " has inconsistent parameter widths across regions");
            covering[im].emplace_back(r, c);
        }
    }
    if (smooth) {
        if (smooth->size() != n_images)
            throw std::invalid_argument("solve: smoothness system count != image count");
        for (std::size_t i = 0; i < n_images; ++i)
            if (dim[i] != 0 && ((*smooth)[i].gamma.rows() != dim[i] ||
                                (*smooth)[i].gamma.cols() != dim[i] ||
                                (*smooth)[i].t_vec.size() != dim[i]))
                throw std::invalid_argument("solve: smoothness system shape mismatch for image " +
                                            std::to_string(i));
    }

    // Scan inputs before any spectral computation: power iteration on
    // non-finite data would fail with an unrelated message.
    for (std::size_t r = 0; r < R; ++r) {
        for (std::size_t k = 0; k < problems[r].D.size(); ++k)
            if (!std::isfinite(problems[r].D.data()[k]))
                throw NumericalError("solve: non-finite input data in region " + std::to_string(r),
                                     0);
        for (const RegionBlockJacobian& B : problems[r].J)
            for (std::size_t k = 0; k < B.rows.size(); ++k)
                if (!std::isfinite(B.rows.data()[k]))
                    throw NumericalError(
                        "solve: non-finite jacobian entry in region " + std::to_string(r), 0);
    }

    std::vector<double> d_norm(R);
    int K = 1;
    for (std::size_t r = 0; r < R; ++r) {
        d_norm[r] = spectral_norm(problems[r].D);
        if (!std::isfinite(d_norm[r]))
            throw NumericalError("solve: non-finite input data in region " + std::to_string(r), 0);
        K = std::max(K, iteration_budget(cfg.epsilon_inner, cfg.beta0, d_norm[r], cfg.q));
    }

    InnerResult out;
    out.L.resize(R);
    out.S.resize(R);
    out.delta_tau.resize(n_images);
    for (std::size_t i = 0; i < n_images; ++i)
        if (dim[i] != 0) out.delta_tau[i].assign(dim[i], 0.0);

    std::vector<double> zeta(R);
    std::vector<Matrix> Lmat(R);
    std::vector<Matrix> X(R);  // per-region workspace
    std::vector<std::size_t> nnz(R, 0);

    // Initialization: zero increment, sparse part from thresholding the data.
    for (std::size_t r = 0; r < R; ++r) {
        const Matrix& D = problems[r].D;
        const double root_mn = std::sqrt(double(D.rows()) * double(D.cols()));
        zeta[r] = cfg.beta0 * d_norm[r] / root_mn;
        out.S[r] = Matrix(D.rows(), D.cols());
        nnz[r] = soft_threshold_into(D, zeta[r], out.S[r]);
        const double residual = frobenius_norm(D - out.S[r]);
        if (!std::isfinite(zeta[r]) || !std::isfinite(residual))
            throw NumericalError("solve: non-finite intermediate", 0);
        if (obs.on_region)
            obs.on_region({0, int(r), zeta[r], d_norm[r], nnz[r], residual});
        if (obs.on_sparse) obs.on_sparse(0, int(r), out.S[r]);
        Lmat[r] = Matrix(D.rows(), D.cols());
    }
    if (obs.on_increment) obs.on_increment(0, out.delta_tau);

    bool warned_singular = false;
    for (int k = 1; k <= K; ++k) {
        const double decay = std::pow(cfg.q, k);

        // Low-rank and sparse updates, linearized at the previous increment.
        for (std::size_t r = 0; r < R; ++r) {
            const RegionProblem& P = problems[r];
            Matrix& Xr = X[r];
            Xr = P.D;
            for (std::size_t c = 0; c < P.J.size(); ++c)
                P.J[c].apply_add(out.delta_tau[P.images[c]], Xr, c);
            Xr -= out.S[r];
            out.L[r] = rank1_project(Xr);
            Lmat[r] = out.L[r].reconstruct();
            const double root_mn = std::sqrt(double(P.D.rows()) * double(P.D.cols()));
            zeta[r] = cfg.beta1 * decay * out.L[r].sigma / root_mn;
            if (!std::isfinite(zeta[r]))
                throw NumericalError("solve: non-finite threshold in region " + std::to_string(r),
                                     k);
            Xr += out.S[r];
            Xr -= Lmat[r];  // = D + J Δτ^{k−1} − Lᵏ
            nnz[r] = soft_threshold_into(Xr, zeta[r], out.S[r]);
        }

        // Increment update: per image, ζ-weighted normal equations aggregated
        // over its covering regions, optionally ridge-augmented by the
        // smoothness system.
        std::vector<double> w;
        for (std::size_t i = 0; i < n_images; ++i) {
            if (covering[i].empty()) continue;
            Matrix A(dim[i], dim[i]);
            std::vector<double> b(dim[i], 0.0);
            for (const auto& [r, c] : covering[i]) {
                const RegionProblem& P = problems[r];
                const double scale = 1.0 / zeta[r];
                const RegionBlockJacobian& B = P.J[c];
                B.accumulate_gram(scale, A);
                w.resize(P.D.rows());
                for (std::size_t p = 0; p < P.D.rows(); ++p)
                    w[p] = Lmat[r](p, c) + out.S[r](p, c) - P.D(p, c);
                B.accumulate_transposed(w.data(), scale, b);
            }
            if (lambda > 0.0 && smooth) {
                const SmoothnessSystem& sys = (*smooth)[i];
                for (std::size_t a = 0; a < dim[i]; ++a) {
                    const double* grow = sys.gamma.row(a);
                    double* arow = A.row(a);
                    for (std::size_t bcol = 0; bcol < dim[i]; ++bcol)
                        arow[bcol] += lambda * grow[bcol];
                    b[a] += lambda * sys.t_vec[a];
                }
            }
            bool deficient = false;
            out.delta_tau[i] = min_norm_solve(A, b, deficient);
            if (deficient && !warned_singular) {
                std::cerr << "solve: singular normal system for image " << i
                          << "; using the minimum-norm solution\n";
                warned_singular = true;
            }
        }

        // Residuals at the new increment, diagnostics, finiteness gate.
        for (std::size_t r = 0; r < R; ++r) {
            const RegionProblem& P = problems[r];
            Matrix& Xr = X[r];
            Xr = P.D;
            for (std::size_t c = 0; c < P.J.size(); ++c)
                P.J[c].apply_add(out.delta_tau[P.images[c]], Xr, c);
            Xr -= Lmat[r];
            Xr -= out.S[r];
            const double residual = frobenius_norm(Xr);
            if (!std::isfinite(residual))
                throw NumericalError("solve: non-finite residual in region " + std::to_string(r),
                                     k);
            if (obs.on_region)
                obs.on_region({k, int(r), zeta[r], out.L[r].sigma, nnz[r], residual});
            if (obs.on_sparse) obs.on_sparse(k, int(r), out.S[r]);
        }
        if (obs.on_increment) obs.on_increment(k, out.delta_tau);
    }
    return out;
}

}  // namespace detail

/// Decomposition of a single fully-overlapping stack: D ≈ L + S − Σᵢ JᵢΔτᵢeᵢᵀ
/// with L exactly rank-1 and S sparse.
struct SingleResult {
    Rank1Factors L;
    Matrix S;
    Matrix delta_tau;  // one column per image
};

/// Alternating minimization on one stacked matrix: runs exactly
/// iteration_budget(ε_inner, β₀, ||D||₂, q) iterations of rank-1 projection,
/// scheduled soft-thresholding, and a least-squares increment update.
inline SingleResult solve_single(const Matrix& D, const std::vector<Matrix>& jacobians,
                                 const SolverConfig& cfg, const SolverObserver& obs = {}) {
    if (jacobians.size() != D.cols())
        throw std::invalid_argument("solve_single: need one jacobian per column");
    std::vector<RegionProblem> problems(1);
    RegionProblem& P = problems[0];
    P.D = D;
    P.images.resize(D.cols());
    for (std::size_t c = 0; c < D.cols(); ++c) {
        if (c > 0 && jacobians[c].cols() != jacobians[0].cols())
            throw std::invalid_argument("solve_single: jacobian widths disagree");
        P.images[c] = int(c);
        P.J.push_back(RegionBlockJacobian::dense(jacobians[c]));
    }
    InnerResult res = detail::solve_regions_core(problems, D.cols(), 0.0, nullptr, cfg, obs);
    SingleResult out;
    out.L = std::move(res.L[0]);
    out.S = std::move(res.S[0]);
    out.delta_tau = Matrix(jacobians.empty() ? 0 : jacobians[0].cols(), D.cols());
    for (std::size_t c = 0; c < D.cols(); ++c) out.delta_tau.set_col(c, res.delta_tau[c]);
    return out;
}

/// Decomposition of several overlap regions sharing per-image increments.
struct MultiResult {
    std::vector<Rank1Factors> L;
    std::vector<Matrix> S;
    Matrix delta_tau;  // one column per image; zero for images in no region
};

/// Multi-region alternating minimization: per-region rank-1 and sparse
/// updates with per-region threshold schedules, and per-image increments
/// solved from the ζ-weighted aggregation over covering regions. With a
/// single region this reproduces solve_single exactly (same code path).
inline MultiResult solve_multi(const std::vector<RegionProblem>& problems,
                               const RegionDecomposition& decomp, const SolverConfig& cfg,
                               const SolverObserver& obs = {}) {
    if (problems.size() != decomp.regions.size())
        throw std::invalid_argument("solve_multi: problem count != region count");
    const std::size_t n_images = decomp.regions_of.size();
    std::size_t width = 0;
    for (std::size_t r = 0; r < problems.size(); ++r) {
        if (problems[r].images != decomp.regions[r].images)
            throw std::invalid_argument("solve_multi: region " + std::to_string(r) +
                                        " images disagree with the decomposition");
        for (const RegionBlockJacobian& B : problems[r].J) {
            if (B.cells != 1)
                throw std::invalid_argument(
                    "solve_multi: expects single-block jacobians (use solve_multicell)");
            if (width == 0)
                width = B.width();
            else if (B.width() != width)
                throw std::invalid_argument("solve_multi: jacobian widths disagree");
        }
    }
    InnerResult res = detail::solve_regions_core(problems, n_images, 0.0, nullptr, cfg, obs);
    MultiResult out;
    out.L = std::move(res.L);
    out.S = std::move(res.S);
    out.delta_tau = Matrix(width, n_images);
    for (std::size_t i = 0; i < n_images; ++i)
        if (!res.delta_tau[i].empty()) out.delta_tau.set_col(i, res.delta_tau[i]);
    return out;
}

/// Multi-region decomposition with per-cell transforms per image.
struct MulticellResult {
    std::vector<Rank1Factors> L;
    std::vector<Matrix> S;
    std::vector<std::vector<double>> delta_tau;  // per image, 8·cells entries
};

/// solve_multi with per-cell parameter blocks and an optional smoothness term:
/// each image's increment solves the ζ-weighted normal system plus
/// lambda·(Γᵢ Δτ = tᵢ) built from its cell grid. `lambda` is the absolute
/// weight here (callers converting from pixels-per-cell units multiply first);
/// lambda = 0 skips the smoothness assembly entirely and reduces to
/// solve_multi.
inline MulticellResult solve_multicell(const std::vector<RegionProblem>& problems,
                                       const std::vector<CellGrid>& grids, double lambda,
                                       double sigma, const NormalizationTransform& norm,
                                       const SolverConfig& cfg, const SolverObserver& obs = {}) {
    if (!(lambda >= 0.0)) throw std::invalid_argument("solve_multicell: lambda must be >= 0");
    const std::size_t n_images = grids.size();
    std::vector<std::uint8_t> covered(n_images, 0);
    for (std::size_t r = 0; r < problems.size(); ++r) {
        const RegionProblem& P = problems[r];
        for (std::size_t c = 0; c < P.images.size(); ++c) {
            const int im = P.images[c];
            if (im < 0 || std::size_t(im) >= n_images)
                throw std::invalid_argument("solve_multicell: image id out of range");
            covered[im] = 1;
            if (c < P.J.size()) {
                const RegionBlockJacobian& B = P.J[c];
                if (B.width() != 8 || B.cells != std::size_t(grids[im].cells()))
                    throw std::invalid_argument(
                        "solve_multicell: jacobian blocks disagree with the image's cell grid");
            }
        }
    }
    std::vector<SmoothnessSystem> smooth;
    const std::vector<SmoothnessSystem>* smooth_ptr = nullptr;
    if (lambda > 0.0) {
        smooth.resize(n_images);
        for (std::size_t i = 0; i < n_images; ++i)
            if (covered[i]) smooth[i] = smoothness_system(grids[i], sigma, norm);
        smooth_ptr = &smooth;
    }
    InnerResult res = detail::solve_regions_core(problems, n_images, lambda, smooth_ptr, cfg, obs);
    MulticellResult out;
    out.L = std::move(res.L);
    out.S = std::move(res.S);
    out.delta_tau.resize(n_images);
    for (std::size_t i = 0; i < n_images; ++i)
        out.delta_tau[i] = res.delta_tau[i].empty()
                               ? std::vector<double>(8 * std::size_t(grids[i].cells()), 0.0)
                               : std::move(res.delta_tau[i]);
    return out;
}

/// Outcome summary of an outer linearization loop.
struct ConvergenceReport {
    int outer_iterations = 0;
    bool converged = false;
    // Mean squared per-pixel displacement (pixel² units) between the last two
    // transform iterates, maximized over images (and cells).
    double final_distance = std::numeric_limits<double>::quiet_NaN();
    // Aggregate truncated-l2 photometric residual measured before each
    // linearization step.
    std::vector<double> residual_history;
};

struct AlignResult {
    std::vector<HomographyParams> tau;  // parameters expressed in frame.norm
    WarpFrame frame;
    ConvergenceReport report;
};

struct CellAlignResult {
    std::vector<CellGrid> grids;  // cell parameters expressed in frame.norm
    WarpFrame frame;
    ConvergenceReport report;
};

/// The photometric residual increased by more than 10% on three consecutive
/// linearization steps; `best` carries the lowest-residual iterate seen.
template <class Result>
struct AlignDivergence : std::runtime_error {
    Result best;

    AlignDivergence(const std::string& what, Result best_)
        : std::runtime_error(what), best(std::move(best_)) {}
};

using DivergenceError = AlignDivergence<AlignResult>;
using CellDivergenceError = AlignDivergence<CellAlignResult>;

namespace detail {

inline std::vector<CanvasPixel> region_canvas_pixels(const Region& region, int canvas_w) {
    std::vector<CanvasPixel> px(region.pixels.size());
    for (std::size_t p = 0; p < region.pixels.size(); ++p)
        px[p] = {int(region.pixels[p] % std::size_t(canvas_w)),
                 int(region.pixels[p] / std::size_t(canvas_w))};
    return px;
}

inline std::vector<RegionProblem> build_region_problems(const std::vector<Image>& smoothed,
                                                        const std::vector<HomographyParams>& tau,
                                                        const std::vector<WarpedImage>& warped,
                                                        const RegionDecomposition& decomp,
                                                        const WarpFrame& frame) {
    std::vector<RegionProblem> out(decomp.regions.size());
    for (std::size_t r = 0; r < decomp.regions.size(); ++r) {
        const Region& reg = decomp.regions[r];
        RegionProblem& P = out[r];
        P.D = extract_region_matrix(warped, reg);
        P.images = reg.images;
        const auto px = region_canvas_pixels(reg, frame.canvas.w);
        for (int im : reg.images)
            P.J.push_back(RegionBlockJacobian::dense(
                intensity_jacobian_presmoothed(smoothed[im], tau[im], px, frame)));
    }
    return out;
}

inline std::vector<RegionProblem> build_region_problems(const std::vector<Image>& smoothed,
                                                        const std::vector<CellGrid>& grids,
                                                        const std::vector<WarpedImage>& warped,
                                                        const RegionDecomposition& decomp,
                                                        const WarpFrame& frame) {
    std::vector<RegionProblem> out(decomp.regions.size());
    for (std::size_t r = 0; r < decomp.regions.size(); ++r) {
        const Region& reg = decomp.regions[r];
        RegionProblem& P = out[r];
        P.D = extract_region_matrix(warped, reg);
        P.images = reg.images;
        const auto px = region_canvas_pixels(reg, frame.canvas.w);
        for (int im : reg.images) {
            const CellGrid& g = grids[im];
            RegionBlockJacobian B;
            B.cells = std::size_t(g.cells());
            B.cell.resize(px.size());
            B.rows = Matrix(px.size(), 8);
            std::vector<std::vector<std::size_t>> by_cell(B.cells);
            for (std::size_t p = 0; p < px.size(); ++p) {
                const double cx = double(frame.canvas.x0 + px[p].i);
                const double cy = double(frame.canvas.y0 + px[p].j);
                const std::uint32_t u = std::uint32_t(g.cell_at(cx, cy));
                B.cell[p] = u;
                by_cell[u].push_back(p);
            }
            std::vector<CanvasPixel> subset;
            for (std::size_t u = 0; u < by_cell.size(); ++u) {
                if (by_cell[u].empty()) continue;
                subset.clear();
                for (std::size_t p : by_cell[u]) subset.push_back(px[p]);
                const Matrix rows =
                    intensity_jacobian_presmoothed(smoothed[im], g.params[u], subset, frame);
                for (std::size_t s = 0; s < by_cell[u].size(); ++s)
                    for (int a = 0; a < 8; ++a) B.rows(by_cell[u][s], a) = rows(s, a);
            }
            P.J.push_back(std::move(B));
        }
    }
    return out;
}

/// Integer pixel rectangle inside a cell's half-open bounds; w or h may come
/// out nonpositive for slivers thinner than one pixel.
inline Rect cell_pixel_rect(const CellGrid& g, int u) {
    const auto b = g.cell_bounds(u);
    Rect r;
    r.x0 = long(std::ceil(b[0]));
    r.y0 = long(std::ceil(b[2]));
    r.w = int(long(std::ceil(b[1])) - r.x0);
    r.h = int(long(std::ceil(b[3])) - r.y0);
    return r;
}

}  // namespace detail

/// Successive linearization with one transform per image: warp onto a fixed
/// canvas, rebuild overlap regions and Jacobians, run the multi-region solver,
/// and apply the increments, until consecutive transforms move every pixel by
/// less than epsilon_outer (normalized units) or max_outer is reached. The
/// canvas and its normalization frame are fixed from the initial transforms;
/// returned parameters are expressed in that frame.
inline AlignResult outer_align(const std::vector<Image>& images, std::vector<HomographyParams> tau,
                               const NormalizationTransform& tau_frame, const SolverConfig& cfg,
                               const SolverObserver& obs = {}) {
    cfg.validate();
    if (images.size() < 2 || images.size() != tau.size())
        throw std::invalid_argument("outer_align: need >= 2 images, one transform each");

    std::vector<std::array<Vec2, 4>> quads;
    for (std::size_t i = 0; i < images.size(); ++i)
        quads.push_back(source_footprint(tau[i], tau_frame, images[i].w, images[i].h));
    const WarpFrame frame = frame_for(compute_canvas(quads));
    for (HomographyParams& t : tau) t = change_frame(t, tau_frame, frame.norm);

    std::vector<Image> smoothed;
    smoothed.reserve(images.size());
    for (const Image& img : images) smoothed.push_back(gaussian_smooth(img, 0.8));

    ConvergenceReport report;
    std::vector<HomographyParams> best_tau = tau;
    double best_residual = std::numeric_limits<double>::infinity();
    double prev_residual = std::numeric_limits<double>::infinity();
    int rising = 0;
    const double thr_px = cfg.epsilon_outer / frame.norm.scale;

    for (int it = 1; it <= cfg.max_outer; ++it) {
        std::vector<WarpedImage> warped;
        warped.reserve(images.size());
        for (std::size_t i = 0; i < images.size(); ++i)
            warped.push_back(warp_image(images[i], tau[i], frame));
        const RegionDecomposition decomp = drop_undersized(discover_regions(warped));
        if (decomp.regions.empty())
            throw std::runtime_error(
                "outer_align: no usable overlap region under the current transforms");

        const double residual = aggregate_truncated_l2(warped);
        report.residual_history.push_back(residual);
        if (residual < best_residual) {
            best_residual = residual;
            best_tau = tau;
        }
        // Rises below 0.01 saturated-intensity units are interpolation noise
        // around a good fit, not divergence.
        if (residual > 1.1 * prev_residual && residual > 0.01) {
            if (++rising >= 3) {
                report.outer_iterations = it;
                throw DivergenceError(
                    "outer_align: photometric residual rose by more than 10% on three "
                    "consecutive iterations",
                    AlignResult{std::move(best_tau), frame, std::move(report)});
            }
        } else {
            rising = 0;
        }
        prev_residual = residual;

        const auto problems = detail::build_region_problems(smoothed, tau, warped, decomp, frame);
        const MultiResult inner = solve_multi(problems, decomp, cfg, obs);

        std::vector<HomographyParams> next(tau.size());
        for (std::size_t i = 0; i < tau.size(); ++i) {
            next[i] = tau[i];
            std::array<double, 8> d;
            for (int a = 0; a < 8; ++a) d[a] = inner.delta_tau(a, i);
            next[i] += d;
        }
        // The data constrains only relative geometry: a warp applied to every
        // image at once leaves all overlaps unchanged, and the inner solver
        // may drift along that direction. Re-anchor on image 0 so the applied
        // increments are purely relative and the stopping distance measures
        // real motion.
        const Mat3 gauge = pixel_matrix(tau[0], frame.norm) *
                           pixel_matrix(next[0], frame.norm).inverse();
        double dist = 0.0;
        for (std::size_t i = 0; i < tau.size(); ++i) {
            next[i] = params_from_pixel_matrix(gauge * pixel_matrix(next[i], frame.norm),
                                               frame.norm);
            dist = std::max(dist, transform_distance(tau[i], next[i], frame.canvas, frame.norm));
            tau[i] = next[i];
        }
        report.outer_iterations = it;
        report.final_distance = dist;
        if (dist < thr_px * thr_px) {
            report.converged = true;
            break;
        }
    }
    return AlignResult{std::move(tau), frame, std::move(report)};
}

/// Cell-grid variant of the outer loop: per-cell transforms with the
/// smoothness term, weight cfg.lambda in units of pixels-per-cell (converted
/// here using the mean cell pixel count across images). Grid domains are kept
/// fixed; only the cell parameters move.
inline CellAlignResult outer_align(const std::vector<Image>& images, std::vector<CellGrid> grids,
                                   const NormalizationTransform& tau_frame,
                                   const SolverConfig& cfg, const SolverObserver& obs = {}) {
    cfg.validate();
    if (images.size() < 2 || images.size() != grids.size())
        throw std::invalid_argument("outer_align: need >= 2 images, one cell grid each");
    for (const CellGrid& g : grids) {
        if (g.c1 < 1 || g.c2 < 1 || g.params.size() != std::size_t(g.cells()))
            throw std::invalid_argument("outer_align: malformed cell grid");
        if (g.domain.w <= 0 || g.domain.h <= 0)
            throw std::invalid_argument("outer_align: cell grid has an empty domain");
    }

    std::vector<std::array<Vec2, 4>> quads;
    for (std::size_t i = 0; i < images.size(); ++i)
        for (const HomographyParams& t : grids[i].params)
            quads.push_back(source_footprint(t, tau_frame, images[i].w, images[i].h));
    const WarpFrame frame = frame_for(compute_canvas(quads));
    for (CellGrid& g : grids)
        for (HomographyParams& t : g.params) t = change_frame(t, tau_frame, frame.norm);

    double np_mean = 0.0;
    for (const CellGrid& g : grids)
        np_mean += double(g.domain.w) * double(g.domain.h) / double(g.cells());
    np_mean /= double(grids.size());
    const double lambda_abs = cfg.lambda * np_mean;

    std::vector<Image> smoothed;
    smoothed.reserve(images.size());
    for (const Image& img : images) smoothed.push_back(gaussian_smooth(img, 0.8));

    ConvergenceReport report;
    std::vector<CellGrid> best_grids = grids;
    double best_residual = std::numeric_limits<double>::infinity();
    double prev_residual = std::numeric_limits<double>::infinity();
    int rising = 0;
    const double thr_px = cfg.epsilon_outer / frame.norm.scale;

    for (int it = 1; it <= cfg.max_outer; ++it) {
        std::vector<WarpedImage> warped;
        warped.reserve(images.size());
        for (std::size_t i = 0; i < images.size(); ++i)
            warped.push_back(warp_image(images[i], grids[i], frame));
        const RegionDecomposition decomp = drop_undersized(discover_regions(warped));
        if (decomp.regions.empty())
            throw std::runtime_error(
                "outer_align: no usable overlap region under the current transforms");

        const double residual = aggregate_truncated_l2(warped);
        report.residual_history.push_back(residual);
        if (residual < best_residual) {
            best_residual = residual;
            best_grids = grids;
        }
        // Rises below 0.01 saturated-intensity units are interpolation noise
        // around a good fit, not divergence.
        if (residual > 1.1 * prev_residual && residual > 0.01) {
            if (++rising >= 3) {
                report.outer_iterations = it;
                throw CellDivergenceError(
                    "outer_align: photometric residual rose by more than 10% on three "
                    "consecutive iterations",
                    CellAlignResult{std::move(best_grids), frame, std::move(report)});
            }
        } else {
            rising = 0;
        }
        prev_residual = residual;

        const auto problems = detail::build_region_problems(smoothed, grids, warped, decomp, frame);
        const MulticellResult inner =
            solve_multicell(problems, grids, lambda_abs, cfg.sigma_smooth, frame.norm, cfg, obs);

        std::vector<std::vector<HomographyParams>> next(grids.size());
        for (std::size_t i = 0; i < grids.size(); ++i) {
            next[i].resize(grids[i].params.size());
            for (int u = 0; u < grids[i].cells(); ++u) {
                HomographyParams t = grids[i].params[std::size_t(u)];
                std::array<double, 8> d;
                for (int a = 0; a < 8; ++a) d[a] = inner.delta_tau[i][8 * std::size_t(u) + a];
                t += d;
                next[i][std::size_t(u)] = t;
            }
        }
        // Same gauge ambiguity as the single-transform loop: remove the drift
        // common to every cell by anchoring on the first cell of image 0.
        const Mat3 gauge = pixel_matrix(grids[0].params[0], frame.norm) *
                           pixel_matrix(next[0][0], frame.norm).inverse();
        double dist = 0.0;
        for (std::size_t i = 0; i < grids.size(); ++i) {
            CellGrid& g = grids[i];
            for (int u = 0; u < g.cells(); ++u) {
                const HomographyParams corrected = params_from_pixel_matrix(
                    gauge * pixel_matrix(next[i][std::size_t(u)], frame.norm), frame.norm);
                const Rect cr = detail::cell_pixel_rect(g, u);
                if (cr.w > 0 && cr.h > 0)
                    dist = std::max(dist,
                                    transform_distance(g.params[u], corrected, cr, frame.norm));
                g.params[std::size_t(u)] = corrected;
            }
        }
        report.outer_iterations = it;
        report.final_distance = dist;
        if (dist < thr_px * thr_px) {
            report.converged = true;
            break;
        }
    }
    return CellAlignResult{std::move(grids), frame, std::move(report)};
}

namespace detail {

inline int effective_levels(const std::vector<Image>& images, int levels, const char* who) {
    int min_dim = std::numeric_limits<int>::max();
    for (const Image& img : images) min_dim = std::min({min_dim, img.w, img.h});
    int lv = levels;
    while (lv > 1 && (min_dim >> (lv - 1)) < 32) --lv;
    if (lv != levels)
        std::cerr << who << ": reduced pyramid levels from " << levels << " to " << lv
                  << " so the coarsest level keeps every image at least 32 px\n";
    return lv;
}

inline Mat3 axis_scale(double s) {
    Mat3 M = Mat3::identity();
    M(0, 0) = s;
    M(1, 1) = s;
    return M;
}

}  // namespace detail

/// Coarse-to-fine alignment: run outer_align on each Gaussian pyramid level
/// from coarsest to finest, carrying the transforms between levels through
/// their pixel-frame matrices (level-l pixel p corresponds to level-0 pixel
/// 2^l·p). A single level is exactly outer_align. Divergence at a coarse
/// level falls back to that level's best iterate and continues; divergence at
/// the finest level propagates.
inline AlignResult pyramid_align(const std::vector<Image>& images,
                                 const std::vector<HomographyParams>& tau0,
                                 const NormalizationTransform& tau_frame, const SolverConfig& cfg,
                                 const SolverObserver& obs = {}) {
    cfg.validate();
    if (images.size() < 2 || images.size() != tau0.size())
        throw std::invalid_argument("pyramid_align: need >= 2 images, one transform each");
    const int levels = detail::effective_levels(images, cfg.pyramid_levels, "pyramid_align");
    if (levels == 1) return outer_align(images, tau0, tau_frame, cfg, obs);

    std::vector<std::vector<Image>> pyr;
    pyr.reserve(images.size());
    for (const Image& img : images) pyr.push_back(gaussian_pyramid(img, levels));

    std::vector<Mat3> M;  // level-0 pixel maps
    M.reserve(tau0.size());
    for (std::size_t i = 0; i < tau0.size(); ++i)
        M.push_back(pixel_matrix(tau0[i], tau_frame));

    AlignResult res;
    for (int lev = levels - 1; lev >= 0; --lev) {
        const double s = double(1 << lev);
        const Mat3 up = detail::axis_scale(s);      // level-lev pixels -> level-0
        const Mat3 down = detail::axis_scale(1.0 / s);
        const NormalizationTransform n_l = normalization_for(pyr[0][lev].w, pyr[0][lev].h);
        std::vector<Image> level_images;
        std::vector<HomographyParams> level_tau;
        for (std::size_t i = 0; i < images.size(); ++i) {
            level_images.push_back(pyr[i][lev]);
            level_tau.push_back(params_from_pixel_matrix(down * M[i] * up, n_l));
        }
        try {
            res = outer_align(level_images, level_tau, n_l, cfg, obs);
        } catch (const DivergenceError& e) {
            if (lev == 0) throw;
            res = e.best;
            std::cerr << "pyramid_align: level " << lev
                      << " diverged; continuing from its best iterate\n";
        }
        for (std::size_t i = 0; i < images.size(); ++i)
            M[i] = up * pixel_matrix(res.tau[i], res.frame.norm) * down;
    }
    return res;
}

/// Coarse-to-fine alignment with per-cell transforms: the cell grid starts at
/// (c1, c2) halved per coarser level (floored at 1); when refining, each fine
/// cell inherits the parameters of the coarse cell containing its center.
inline CellAlignResult pyramid_align_cells(const std::vector<Image>& images,
                                           const std::vector<HomographyParams>& tau0,
                                           const NormalizationTransform& tau_frame, int c1, int c2,
                                           const SolverConfig& cfg,
                                           const SolverObserver& obs = {}) {
    cfg.validate();
    if (images.size() < 2 || images.size() != tau0.size())
        throw std::invalid_argument("pyramid_align_cells: need >= 2 images, one transform each");
    if (c1 < 1 || c2 < 1)
        throw std::invalid_argument("pyramid_align_cells: cell counts must be >= 1");
    const int levels = detail::effective_levels(images, cfg.pyramid_levels, "pyramid_align_cells");

    std::vector<std::vector<Image>> pyr;
    pyr.reserve(images.size());
    for (const Image& img : images) pyr.push_back(gaussian_pyramid(img, levels));

    // Coarsest-level grids: the initial transform replicated over the cells,
    // the domain from its footprint.
    int lev = levels - 1;
    std::vector<CellGrid> grids(images.size());
    {
        const Mat3 up = detail::axis_scale(double(1 << lev));
        const Mat3 down = detail::axis_scale(1.0 / double(1 << lev));
        const NormalizationTransform n_l = normalization_for(pyr[0][lev].w, pyr[0][lev].h);
        for (std::size_t i = 0; i < images.size(); ++i) {
            const HomographyParams t_l =
                params_from_pixel_matrix(down * pixel_matrix(tau0[i], tau_frame) * up, n_l);
            CellGrid g;
            g.c1 = std::max(1, c1 >> lev);
            g.c2 = std::max(1, c2 >> lev);
            g.domain =
                compute_canvas({source_footprint(t_l, n_l, pyr[i][lev].w, pyr[i][lev].h)});
            g.params.assign(std::size_t(g.cells()), t_l);
            grids[i] = g;
        }
    }

    CellAlignResult res;
    for (; lev >= 0; --lev) {
        const NormalizationTransform n_l = normalization_for(pyr[0][lev].w, pyr[0][lev].h);
        std::vector<Image> level_images;
        for (std::size_t i = 0; i < images.size(); ++i) level_images.push_back(pyr[i][lev]);
        try {
            res = outer_align(level_images, grids, n_l, cfg, obs);
        } catch (const CellDivergenceError& e) {
            if (lev == 0) throw;
            res = e.best;
            std::cerr << "pyramid_align_cells: level " << lev
                      << " diverged; continuing from its best iterate\n";
        }
        if (lev == 0) break;

        const int fl = lev - 1;
        const NormalizationTransform n_f = normalization_for(pyr[0][fl].w, pyr[0][fl].h);
        const Mat3 up2 = detail::axis_scale(2.0);
        const Mat3 down2 = detail::axis_scale(0.5);
        std::vector<CellGrid> fine(images.size());
        for (std::size_t i = 0; i < images.size(); ++i) {
            const CellGrid& pg = res.grids[i];
            CellGrid g;
            g.c1 = std::max(1, c1 >> fl);
            g.c2 = std::max(1, c2 >> fl);
            g.domain = Rect{pg.domain.x0 * 2, pg.domain.y0 * 2, pg.domain.w * 2, pg.domain.h * 2};
            g.params.resize(std::size_t(g.cells()));
            for (int u = 0; u < g.cells(); ++u) {
                const auto b = g.cell_bounds(u);
                const double cx = 0.5 * (b[0] + b[1]), cy = 0.5 * (b[2] + b[3]);
                const HomographyParams& src = pg.params[pg.cell_at(cx / 2.0, cy / 2.0)];
                g.params[u] =
                    params_from_pixel_matrix(up2 * pixel_matrix(src, res.frame.norm) * down2, n_f);
            }
            fine[i] = std::move(g);
        }
        grids = std::move(fine);
    }
    return res;
}

}  // namespace r1a
