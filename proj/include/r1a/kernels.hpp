#pragma once

#include <algorithm>
#include <stdexcept>
#include <string>

#include "r1a/matrix.hpp"

namespace r1a {

/// Thrown when an iterative kernel fails to meet its tolerance; carries the
/// last iterate so callers can inspect how far it got.
struct Rank1Factors;
struct ConvergenceError;

struct Rank1Factors {
    double sigma = 0.0;
    std::vector<double> u;  // unit, first nonzero entry positive
    std::vector<double> v;  // unit

    Matrix reconstruct() const {
        Matrix R(u.size(), v.size());
        for (std::size_t i = 0; i < u.size(); ++i)
            for (std::size_t j = 0; j < v.size(); ++j) R(i, j) = sigma * u[i] * v[j];
        return R;
    }
};

struct ConvergenceError : std::runtime_error {
    ConvergenceError(const std::string& msg, Rank1Factors last)
        : std::runtime_error(msg), last_iterate(std::move(last)) {}
    Rank1Factors last_iterate;
};

/// A non-finite value appeared while iterating; `iteration` is the iteration
/// index (0 = initialization) at which it was detected.
struct NumericalError : std::runtime_error {
    int iteration;

    NumericalError(const std::string& what, int iteration_)
        : std::runtime_error(what + " (iteration " + std::to_string(iteration_) + ")"),
          iteration(iteration_) {}
};

/// Elementwise shrinkage: signum(x)·max(|x|−zeta, 0). Standard signum
/// (−1/0/+1) so negative deviations survive with their sign.
inline Matrix soft_threshold(const Matrix& X, double zeta) {
    if (zeta < 0.0) throw std::invalid_argument("soft_threshold: negative threshold");
    Matrix Y(X.rows(), X.cols());
    for (std::size_t k = 0; k < X.size(); ++k) {
        const double x = X.data()[k];
        const double mag = std::abs(x) - zeta;
        Y.data()[k] = mag > 0.0 ? (x > 0.0 ? mag : -mag) : 0.0;
    }
    return Y;
}

/// Soft-threshold X in place and report the number of surviving nonzeros.
inline std::size_t soft_threshold_into(const Matrix& X, double zeta, Matrix& Y) {
    if (zeta < 0.0) throw std::invalid_argument("soft_threshold: negative threshold");
    std::size_t nnz = 0;
    for (std::size_t k = 0; k < X.size(); ++k) {
        const double x = X.data()[k];
        const double mag = std::abs(x) - zeta;
        if (mag > 0.0) {
            Y.data()[k] = x > 0.0 ? mag : -mag;
            ++nnz;
        } else {
            Y.data()[k] = 0.0;
        }
    }
    return nnz;
}

namespace detail {

/// Flip signs so the first nonzero entry of u is positive.
inline void canonical_sign(Rank1Factors& f) {
    for (double ui : f.u) {
        if (ui == 0.0) continue;
        if (ui < 0.0) {
            for (double& x : f.u) x = -x;
            for (double& x : f.v) x = -x;
        }
        break;
    }
}

}  // namespace detail

/// Best rank-1 approximation by power iteration on XᵀX (O(mn) per sweep).
/// Start vector is the indicator of the column with the largest norm
/// (deterministic; ties take the smallest index). Stops when successive
/// Rayleigh quotients change by < 1e-10 relative, erroring out after 200
/// sweeps. A zero matrix yields sigma = 0 with fixed unit vectors e1.
inline Rank1Factors rank1_project(const Matrix& X) {
    const std::size_t m = X.rows(), n = X.cols();
    Rank1Factors f;
    f.u.assign(m, 0.0);
    f.v.assign(n, 0.0);

    std::size_t jmax = 0;
    double cmax = -1.0;
    for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < m; ++i) s += X(i, j) * X(i, j);
        if (s > cmax) {
            cmax = s;
            jmax = j;
        }
    }
    if (cmax <= 0.0) {  // zero matrix: documented arbitrary fixed directions
        f.u[0] = 1.0;
        f.v[0] = 1.0;
        return f;
    }

    std::vector<double> v(n, 0.0), w(m), z(n);
    v[jmax] = 1.0;
    double rho_prev = -1.0;
    bool converged = false;
    for (int sweep = 0; sweep < 200; ++sweep) {
        matvec(X, v.data(), w.data());
        const double rho = dot_raw(w.data(), w.data(), m);
        matTvec(X, w.data(), z.data());
        const double zn = std::sqrt(dot_raw(z.data(), z.data(), n));
        for (std::size_t j = 0; j < n; ++j) v[j] = z[j] / zn;
        if (rho_prev >= 0.0 && std::abs(rho - rho_prev) <= 1e-10 * rho) {
            converged = true;
            break;
        }
        rho_prev = rho;
    }

    matvec(X, v.data(), w.data());
    const double sigma = std::sqrt(dot_raw(w.data(), w.data(), m));
    f.sigma = sigma;
    f.v = v;
    for (std::size_t i = 0; i < m; ++i) f.u[i] = w[i] / sigma;
    detail::canonical_sign(f);
    if (!converged)
        throw ConvergenceError("rank1_project: power iteration exceeded 200 sweeps", f);
    return f;
}

namespace detail {

/// Largest eigenvalue of a symmetric matrix by cyclic Jacobi rotations.
/// Destroys A. Intended for small matrices (Gram matrices of the thin side).
inline double jacobi_max_eigenvalue(Matrix& A) {
    const std::size_t n = A.rows();
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p + 1 < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off = std::max(off, std::abs(A(p, q)));
        if (off <= 1e-14 * (1.0 + std::abs(A(0, 0)))) break;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = A(p, q);
                if (apq == 0.0) continue;
                const double theta = (A(q, q) - A(p, p)) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                for (std::size_t i = 0; i < n; ++i) {
                    const double aip = A(i, p), aiq = A(i, q);
                    A(i, p) = c * aip - s * aiq;
                    A(i, q) = s * aip + c * aiq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double api = A(p, i), aqi = A(q, i);
                    A(p, i) = c * api - s * aqi;
                    A(q, i) = s * api + c * aqi;
                }
            }
        }
    }
    double lmax = A(0, 0);
    for (std::size_t i = 1; i < n; ++i) lmax = std::max(lmax, A(i, i));
    return lmax;
}

}  // namespace detail

/// ||X||₂ via the Gram matrix of the thin side and a full symmetric
/// eigensolve: exact regardless of the spectral gap, unlike power iteration,
/// which stalls when the top singular values cluster. The Gram build is
/// O(mn·min(m,n)); with the thin side at most a few dozen (columns are
/// images), that is a once-per-solve cost.
inline double spectral_norm(const Matrix& X) {
    const std::size_t m = X.rows(), n = X.cols();
    if (m == 0 || n == 0) return 0.0;
    const std::size_t k = std::min(m, n);
    Matrix G(k, k);
    if (n <= m) {
        for (std::size_t a = 0; a < n; ++a)
            for (std::size_t b = a; b < n; ++b) {
                double s = 0.0;
                for (std::size_t i = 0; i < m; ++i) s += X(i, a) * X(i, b);
                G(a, b) = s;
                G(b, a) = s;
            }
    } else {
        for (std::size_t a = 0; a < m; ++a)
            for (std::size_t b = a; b < m; ++b) {
                const double s = dot_raw(X.row(a), X.row(b), n);
                G(a, b) = s;
                G(b, a) = s;
            }
    }
    const double lmax = detail::jacobi_max_eigenvalue(G);
    return lmax > 0.0 ? std::sqrt(lmax) : 0.0;
}

struct QrResult {
    Matrix Q;  // m×d, orthonormal columns
    Matrix R;  // d×d upper-triangular, nonnegative diagonal
    std::vector<std::size_t> deficient_cols;  // columns with |R_jj| < 1e-12
};

/// Thin Householder QR with the diagonal of R made nonnegative.
inline QrResult thin_qr(const Matrix& J) {
    const std::size_t m = J.rows(), d = J.cols();
    if (m < d) throw std::invalid_argument("thin_qr: need rows >= cols");
    Matrix A = J;                        // becomes R in its upper triangle
    std::vector<std::vector<double>> vs;  // Householder vectors
    vs.reserve(d);
    for (std::size_t k = 0; k < d; ++k) {
        std::vector<double> v(m - k);
        double norm = 0.0;
        for (std::size_t i = k; i < m; ++i) {
            v[i - k] = A(i, k);
            norm += A(i, k) * A(i, k);
        }
        norm = std::sqrt(norm);
        double beta = 0.0;
        if (norm > 0.0) {
            const double alpha = v[0] >= 0.0 ? -norm : norm;
            v[0] -= alpha;
            double vnorm2 = 0.0;
            for (double x : v) vnorm2 += x * x;
            if (vnorm2 > 0.0) {
                beta = 2.0 / vnorm2;
                // apply reflector to remaining columns
                for (std::size_t j = k; j < d; ++j) {
                    double s = 0.0;
                    for (std::size_t i = k; i < m; ++i) s += v[i - k] * A(i, j);
                    s *= beta;
                    for (std::size_t i = k; i < m; ++i) A(i, j) -= s * v[i - k];
                }
            }
        }
        // store scaled vector; beta folded in via normalization below
        if (beta > 0.0) {
            const double sb = std::sqrt(beta);
            for (double& x : v) x *= sb;  // reflector is I − ṽṽᵀ
        } else {
            std::fill(v.begin(), v.end(), 0.0);
        }
        vs.push_back(std::move(v));
    }

    QrResult out;
    out.R = Matrix(d, d);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = i; j < d; ++j) out.R(i, j) = A(i, j);

    // Q = H_0 H_1 ... H_{d-1} applied to the first d columns of I
    out.Q = Matrix(m, d);
    for (std::size_t j = 0; j < d; ++j) {
        std::vector<double> e(m, 0.0);
        e[j] = 1.0;
        for (std::size_t k = d; k-- > 0;) {
            const auto& v = vs[k];
            double s = 0.0;
            for (std::size_t i = k; i < m; ++i) s += v[i - k] * e[i];
            for (std::size_t i = k; i < m; ++i) e[i] -= s * v[i - k];
        }
        for (std::size_t i = 0; i < m; ++i) out.Q(i, j) = e[i];
    }

    for (std::size_t j = 0; j < d; ++j) {
        if (out.R(j, j) < 0.0) {
            for (std::size_t k = j; k < d; ++k) out.R(j, k) = -out.R(j, k);
            for (std::size_t i = 0; i < m; ++i) out.Q(i, j) = -out.Q(i, j);
        }
        if (std::abs(out.R(j, j)) < 1e-12) out.deficient_cols.push_back(j);
    }
    return out;
}

/// Back-substitution for an upper-triangular system R x = b. Throws when a
/// pivot is negligible relative to the largest diagonal entry.
inline std::vector<double> solve_upper_triangular(const Matrix& R, const std::vector<double>& b) {
    const std::size_t d = R.rows();
    if (R.cols() != d || b.size() != d)
        throw std::invalid_argument("solve_upper_triangular: shape mismatch");
    double dmax = 0.0;
    for (std::size_t j = 0; j < d; ++j) dmax = std::max(dmax, std::abs(R(j, j)));
    std::vector<double> x(d, 0.0);
    for (std::size_t j = d; j-- > 0;) {
        double s = b[j];
        for (std::size_t k = j + 1; k < d; ++k) s -= R(j, k) * x[k];
        if (std::abs(R(j, j)) <= 1e-14 * dmax || R(j, j) == 0.0)
            throw std::invalid_argument("solve_upper_triangular: negligible pivot");
        x[j] = s / R(j, j);
    }
    return x;
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations. A must be
/// symmetric; returns eigenvalues (ascending) and an orthonormal eigenvector
/// matrix V with A = V diag(λ) Vᵀ.
struct SymEig {
    std::vector<double> values;
    Matrix vectors;  // columns are eigenvectors
};

inline SymEig sym_eig(const Matrix& A0) {
    const std::size_t n = A0.rows();
    Matrix A = A0;
    Matrix V = Matrix::identity(n);
    const double fro = frobenius_norm(A0);
    const double tol = fro > 0.0 ? 1e-14 * fro : 0.0;

    for (int sweep = 0; sweep < 64; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p + 1 < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += A(p, q) * A(p, q);
        if (std::sqrt(2.0 * off) <= tol) break;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = A(p, q);
                if (apq == 0.0) continue;
                const double app = A(p, p), aqq = A(q, q);
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = A(k, p), akq = A(k, q);
                    A(k, p) = c * akp - s * akq;
                    A(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = A(p, k), aqk = A(q, k);
                    A(p, k) = c * apk - s * aqk;
                    A(q, k) = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = V(k, p), vkq = V(k, q);
                    V(k, p) = c * vkp - s * vkq;
                    V(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }

    SymEig out;
    out.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) out.values[i] = A(i, i);
    // sort ascending, permuting eigenvectors alongside
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return out.values[a] < out.values[b]; });
    SymEig sorted;
    sorted.values.resize(n);
    sorted.vectors = Matrix(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        sorted.values[j] = out.values[idx[j]];
        for (std::size_t i = 0; i < n; ++i) sorted.vectors(i, j) = V(i, idx[j]);
    }
    return sorted;
}

/// Minimum-norm pseudo-inverse of a symmetric PSD matrix, eigenvalue cutoff
/// relative to the largest one.
inline Matrix psd_pinverse(const Matrix& A) {
    const SymEig eig = sym_eig(A);
    const std::size_t n = A.rows();
    double lmax = 0.0;
    for (double l : eig.values) lmax = std::max(lmax, std::abs(l));
    const double cutoff = lmax * 1e-12;
    Matrix P(n, n);
    for (std::size_t k = 0; k < n; ++k) {
        const double l = eig.values[k];
        if (std::abs(l) <= cutoff || l == 0.0) continue;
        const double inv = 1.0 / l;
        for (std::size_t i = 0; i < n; ++i) {
            const double vik = eig.vectors(i, k) * inv;
            if (vik == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) P(i, j) += vik * eig.vectors(j, k);
        }
    }
    return P;
}

/// Minimum-norm least-squares solution of ||Jx − r||₂ via the normal
/// equations and a PSD pseudo-inverse: x = (JᵀJ)† Jᵀ r. Rank deficiency is
/// absorbed by the pseudo-inverse (min-norm convention).
inline std::vector<double> least_squares_apply(const Matrix& J, const std::vector<double>& r) {
    const Matrix G = matmul(transpose(J), J);
    const Matrix P = psd_pinverse(G);
    return matvec(P, matTvec(J, r));
}

}  // namespace r1a
