#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "aptq/errors.hpp"
#include "aptq/rng.hpp"

// Shape conventions used throughout the project:
//   - matrices are dense, row-major, double precision
//   - activations are token-major: a sequence of n tokens is an n x d_model matrix
//   - projection weights multiply from the right (y = x * w), so a weight's
//     input features index its ROWS
//   - Hessians and their factors are square over a weight's input features
//   - the quantizer operates on transposed weights (rows = output features,
//     columns = input features) so the compensation loop walks input features
//     left to right

namespace aptq {

class matrix {
public:
    matrix() = default;

    matrix(std::size_t rows, std::size_t cols)
        : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

    matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_)
            throw shape_error("matrix: data length " + std::to_string(data_.size()) +
                              " does not match " + std::to_string(rows_) + "x" +
                              std::to_string(cols_));
    }

    static matrix identity(std::size_t n) {
        matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    static matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
        matrix m(rows.size(), rows.size() ? rows.begin()->size() : 0);
        std::size_t i = 0;
        for (const auto& row : rows) {
            if (row.size() != m.cols_) throw shape_error("from_rows: ragged rows");
            std::size_t j = 0;
            for (double v : row) m(i, j++) = v;
            ++i;
        }
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    const std::vector<double>& values() const { return data_; }

    bool is_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    bool same_shape(const matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline void ensure_finite(const matrix& m, const char* what) {
    if (!m.is_finite()) throw numeric_error(std::string(what) + ": non-finite entries");
}

inline matrix matmul(const matrix& a, const matrix& b) {
    if (a.cols() != b.rows())
        throw shape_error("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                          " times " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
    matrix c(a.rows(), b.cols());
    // Naive i-j-k loop, kept as-is: tests compare against a reference with the
    // same accumulation order.
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
            c(i, j) = s;
        }
    }
    return c;
}

inline matrix transpose(const matrix& a) {
    matrix t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

inline matrix add(const matrix& a, const matrix& b) {
    if (!a.same_shape(b)) throw shape_error("add: shape mismatch");
    matrix c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] += b.data()[i];
    return c;
}

inline matrix sub(const matrix& a, const matrix& b) {
    if (!a.same_shape(b)) throw shape_error("sub: shape mismatch");
    matrix c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] -= b.data()[i];
    return c;
}

inline matrix scale(const matrix& a, double s) {
    matrix c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] *= s;
    return c;
}

inline double frobenius_norm(const matrix& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i] * a.data()[i];
    return std::sqrt(s);
}

/// Elementwise (Frobenius) inner product <a, b>.
inline double frobenius_inner(const matrix& a, const matrix& b) {
    if (!a.same_shape(b)) throw shape_error("frobenius_inner: shape mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i] * b.data()[i];
    return s;
}

inline double max_abs(const matrix& a) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i]));
    return m;
}

/// Columns [c0, c1) as a new matrix.
inline matrix col_slice(const matrix& a, std::size_t c0, std::size_t c1) {
    if (c0 > c1 || c1 > a.cols()) throw shape_error("col_slice: range out of bounds");
    matrix s(a.rows(), c1 - c0);
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = c0; j < c1; ++j) s(i, j - c0) = a(i, j);
    return s;
}

/// Rows [r0, r1) as a new matrix.
inline matrix row_slice(const matrix& a, std::size_t r0, std::size_t r1) {
    if (r0 > r1 || r1 > a.rows()) throw shape_error("row_slice: range out of bounds");
    matrix s(r1 - r0, a.cols());
    for (std::size_t i = r0; i < r1; ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) s(i - r0, j) = a(i, j);
    return s;
}

inline void set_col_slice(matrix& a, std::size_t c0, const matrix& block) {
    if (c0 + block.cols() > a.cols() || block.rows() != a.rows())
        throw shape_error("set_col_slice: block does not fit");
    for (std::size_t i = 0; i < block.rows(); ++i)
        for (std::size_t j = 0; j < block.cols(); ++j) a(i, c0 + j) = block(i, j);
}

inline matrix random_gaussian(std::size_t rows, std::size_t cols, rng& r, double stddev = 1.0) {
    matrix m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = stddev * r.gaussian();
    return m;
}

/// Cholesky factor with packed lower-triangular storage. Diagonal entries are
/// strictly positive by construction.
class lower_triangular {
public:
    explicit lower_triangular(std::size_t dim) : dim_(dim), data_(dim * (dim + 1) / 2, 0.0) {}

    std::size_t dim() const { return dim_; }

    double& at(std::size_t i, std::size_t j) { return data_[i * (i + 1) / 2 + j]; }
    double at(std::size_t i, std::size_t j) const { return data_[i * (i + 1) / 2 + j]; }

    matrix to_dense() const {
        matrix m(dim_, dim_);
        for (std::size_t i = 0; i < dim_; ++i)
            for (std::size_t j = 0; j <= i; ++j) m(i, j) = at(i, j);
        return m;
    }

    /// L * L^T, for reconstruction checks.
    matrix reconstruct() const {
        matrix m(dim_, dim_);
        for (std::size_t i = 0; i < dim_; ++i)
            for (std::size_t j = 0; j < dim_; ++j) {
                double s = 0.0;
                std::size_t k_max = std::min(i, j);
                for (std::size_t k = 0; k <= k_max; ++k) s += at(i, k) * at(j, k);
                m(i, j) = s;
            }
        return m;
    }

private:
    std::size_t dim_;
    std::vector<double> data_;
};

namespace detail {

inline void require_symmetric(const matrix& a, double rel_tol) {
    if (a.rows() != a.cols()) throw shape_error("cholesky: matrix not square");
    double scale = std::max(max_abs(a), 1e-300);
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = i + 1; j < a.cols(); ++j)
            if (std::abs(a(i, j) - a(j, i)) > rel_tol * scale)
                throw value_error("cholesky: matrix not symmetric at (" + std::to_string(i) +
                                  "," + std::to_string(j) + ")");
}

} // namespace detail

/// Cholesky factorization A = L L^T. The input is checked for symmetry to
/// 1e-9 relative and symmetrized as (A + A^T)/2 before factoring, since
/// accumulation order makes exact symmetry unattainable.
inline lower_triangular cholesky(const matrix& a) {
    detail::require_symmetric(a, 1e-9);
    const std::size_t n = a.rows();
    lower_triangular l(n);
    for (std::size_t j = 0; j < n; ++j) {
        double d = 0.5 * (a(j, j) + a(j, j)); // diagonal is its own symmetrization
        for (std::size_t k = 0; k < j; ++k) d -= l.at(j, k) * l.at(j, k);
        if (!(d > 0.0))
            throw definiteness_error("cholesky: non-positive pivot at index " + std::to_string(j), j);
        l.at(j, j) = std::sqrt(d);
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = 0.5 * (a(i, j) + a(j, i));
            for (std::size_t k = 0; k < j; ++k) s -= l.at(i, k) * l.at(j, k);
            l.at(i, j) = s / l.at(j, j);
        }
    }
    return l;
}

namespace detail {

/// Inverse of a lower-triangular factor by forward substitution.
inline matrix invert_lower(const lower_triangular& l) {
    const std::size_t n = l.dim();
    matrix inv(n, n);
    for (std::size_t col = 0; col < n; ++col) {
        inv(col, col) = 1.0 / l.at(col, col);
        for (std::size_t i = col + 1; i < n; ++i) {
            double s = 0.0;
            for (std::size_t k = col; k < i; ++k) s += l.at(i, k) * inv(k, col);
            inv(i, col) = -s / l.at(i, i);
        }
    }
    return inv;
}

} // namespace detail

/// Inverse of a symmetric positive definite matrix via Cholesky:
/// A^{-1} = L^{-T} L^{-1}.
inline matrix invert_spd(const matrix& a) {
    lower_triangular l = cholesky(a);
    matrix linv = detail::invert_lower(l);
    return matmul(transpose(linv), linv);
}

/// Row-wise softmax with max subtraction. Entries of -inf are allowed and map
/// to exactly zero probability (used by the causal mask).
inline matrix softmax_rows(const matrix& m) {
    matrix p(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        double row_max = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < m.cols(); ++j) row_max = std::max(row_max, m(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < m.cols(); ++j) {
            double e = std::exp(m(i, j) - row_max);
            p(i, j) = e;
            sum += e;
        }
        if (!(sum > 0.0) || !std::isfinite(sum))
            throw numeric_error("softmax_rows: degenerate row " + std::to_string(i));
        for (std::size_t j = 0; j < m.cols(); ++j) p(i, j) /= sum;
    }
    return p;
}

} // namespace aptq
