#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <vector>

namespace r1a {

/// Dense row-major double matrix. Deliberately small: every solver step in
/// this library works on plain dense blocks, so one boring container beats a
/// general linear-algebra dependency.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    Matrix(std::initializer_list<std::initializer_list<double>> rows) {
        rows_ = rows.size();
        cols_ = rows.begin()->size();
        data_.reserve(rows_ * cols_);
        for (const auto& r : rows) {
            assert(r.size() == cols_);
            data_.insert(data_.end(), r.begin(), r.end());
        }
    }

    static Matrix identity(std::size_t n) {
        Matrix I(n, n);
        for (std::size_t i = 0; i < n; ++i) I(i, i) = 1.0;
        return I;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t i, std::size_t j) {
        assert(i < rows_ && j < cols_);
        return data_[i * cols_ + j];
    }
    double operator()(std::size_t i, std::size_t j) const {
        assert(i < rows_ && j < cols_);
        return data_[i * cols_ + j];
    }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double* row(std::size_t i) { return data_.data() + i * cols_; }
    const double* row(std::size_t i) const { return data_.data() + i * cols_; }

    Matrix& operator+=(const Matrix& o) {
        assert(same_shape(o));
        for (std::size_t k = 0; k < data_.size(); ++k) data_[k] += o.data_[k];
        return *this;
    }
    Matrix& operator-=(const Matrix& o) {
        assert(same_shape(o));
        for (std::size_t k = 0; k < data_.size(); ++k) data_[k] -= o.data_[k];
        return *this;
    }
    Matrix& operator*=(double s) {
        for (double& x : data_) x *= s;
        return *this;
    }

    friend Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
    friend Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
    friend Matrix operator*(Matrix a, double s) { return a *= s; }
    friend Matrix operator*(double s, Matrix a) { return a *= s; }

    bool same_shape(const Matrix& o) const {
        return rows_ == o.rows_ && cols_ == o.cols_;
    }

    std::vector<double> col(std::size_t j) const {
        std::vector<double> c(rows_);
        for (std::size_t i = 0; i < rows_; ++i) c[i] = (*this)(i, j);
        return c;
    }
    void set_col(std::size_t j, const std::vector<double>& c) {
        assert(c.size() == rows_);
        for (std::size_t i = 0; i < rows_; ++i) (*this)(i, j) = c[i];
    }

private:
    std::size_t rows_ = 0, cols_ = 0;
    std::vector<double> data_;
};

inline Matrix transpose(const Matrix& A) {
    Matrix T(A.cols(), A.rows());
    for (std::size_t i = 0; i < A.rows(); ++i)
        for (std::size_t j = 0; j < A.cols(); ++j) T(j, i) = A(i, j);
    return T;
}

inline Matrix matmul(const Matrix& A, const Matrix& B) {
    assert(A.cols() == B.rows());
    Matrix C(A.rows(), B.cols());
    for (std::size_t i = 0; i < A.rows(); ++i) {
        for (std::size_t k = 0; k < A.cols(); ++k) {
            const double a = A(i, k);
            if (a == 0.0) continue;
            const double* brow = B.row(k);
            double* crow = C.row(i);
            for (std::size_t j = 0; j < B.cols(); ++j) crow[j] += a * brow[j];
        }
    }
    return C;
}

/// y = A x
inline void matvec(const Matrix& A, const double* x, double* y) {
    for (std::size_t i = 0; i < A.rows(); ++i) {
        const double* arow = A.row(i);
        double acc = 0.0;
        for (std::size_t j = 0; j < A.cols(); ++j) acc += arow[j] * x[j];
        y[i] = acc;
    }
}

/// y = Aᵀ x
inline void matTvec(const Matrix& A, const double* x, double* y) {
    for (std::size_t j = 0; j < A.cols(); ++j) y[j] = 0.0;
    for (std::size_t i = 0; i < A.rows(); ++i) {
        const double* arow = A.row(i);
        const double xi = x[i];
        if (xi == 0.0) continue;
        for (std::size_t j = 0; j < A.cols(); ++j) y[j] += arow[j] * xi;
    }
}

inline std::vector<double> matvec(const Matrix& A, const std::vector<double>& x) {
    assert(x.size() == A.cols());
    std::vector<double> y(A.rows());
    matvec(A, x.data(), y.data());
    return y;
}

inline std::vector<double> matTvec(const Matrix& A, const std::vector<double>& x) {
    assert(x.size() == A.rows());
    std::vector<double> y(A.cols());
    matTvec(A, x.data(), y.data());
    return y;
}

inline double dot_raw(const double* a, const double* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    assert(a.size() == b.size());
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

inline double frobenius_norm(const Matrix& A) {
    double s = 0.0;
    for (std::size_t k = 0; k < A.size(); ++k) s += A.data()[k] * A.data()[k];
    return std::sqrt(s);
}

inline double l1_norm(const Matrix& A) {
    double s = 0.0;
    for (std::size_t k = 0; k < A.size(); ++k) s += std::abs(A.data()[k]);
    return s;
}

inline double max_abs(const Matrix& A) {
    double s = 0.0;
    for (std::size_t k = 0; k < A.size(); ++k) s = std::max(s, std::abs(A.data()[k]));
    return s;
}

inline std::size_t count_nonzeros(const Matrix& A) {
    std::size_t c = 0;
    for (std::size_t k = 0; k < A.size(); ++k) c += A.data()[k] != 0.0;
    return c;
}

}  // namespace r1a
