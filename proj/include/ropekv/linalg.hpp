#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ropekv/error.hpp"

namespace ropekv {

// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw ShapeError("matrix data length " + std::to_string(data_.size()) + " != " +
                             std::to_string(rows_) + "x" + std::to_string(cols_));
        }
        for (double v : data_) {
            if (!std::isfinite(v)) throw InputError("matrix entry is not finite");
        }
    }

    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r ? rows.begin()->size() : 0;
        std::vector<double> data;
        data.reserve(r * c);
        for (const auto& row : rows) {
            if (row.size() != c) throw ShapeError("ragged row list");
            data.insert(data.end(), row.begin(), row.end());
        }
        return Matrix(r, c, std::move(data));
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
    std::span<const double> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }

    const std::vector<double>& values() const noexcept { return data_; }
    std::span<double> data() noexcept { return data_; }

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                         " * " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
    }
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto out = c.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            auto brow = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) out[j] += aik * brow[j];
        }
    }
    return c;
}

// Row vector times matrix: x · W.
inline std::vector<double> vecmat(std::span<const double> x, const Matrix& w) {
    if (x.size() != w.rows()) throw ShapeError("vecmat: length " + std::to_string(x.size()) +
                                               " vs rows " + std::to_string(w.rows()));
    std::vector<double> out(w.cols(), 0.0);
    for (std::size_t k = 0; k < x.size(); ++k) {
        const double xk = x[k];
        auto wrow = w.row(k);
        for (std::size_t j = 0; j < out.size(); ++j) out[j] += xk * wrow[j];
    }
    return out;
}

inline Matrix transpose(const Matrix& m) {
    Matrix t(m.cols(), m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
    return t;
}

inline double frobenius_norm(const Matrix& m) { return norm2(m.values()); }

inline Matrix subtract(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("subtract: shape mismatch");
    Matrix c(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.values().size(); ++i) c.data()[i] = a.values()[i] - b.values()[i];
    return c;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.values().size(); ++i)
        m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
    return m;
}

inline Matrix hconcat(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) throw ShapeError("hconcat: row mismatch");
    Matrix c(a.rows(), a.cols() + b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        std::copy(a.row(i).begin(), a.row(i).end(), c.row(i).begin());
        std::copy(b.row(i).begin(), b.row(i).end(), c.row(i).begin() + static_cast<std::ptrdiff_t>(a.cols()));
    }
    return c;
}

inline Matrix select_columns(const Matrix& m, std::span<const std::size_t> cols) {
    Matrix out(m.rows(), cols.size());
    for (std::size_t j = 0; j < cols.size(); ++j) {
        if (cols[j] >= m.cols()) throw ShapeError("select_columns: index out of range");
    }
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < cols.size(); ++j) out(i, j) = m(i, cols[j]);
    return out;
}

inline Matrix column_block(const Matrix& m, std::size_t begin, std::size_t count) {
    if (begin + count > m.cols()) throw ShapeError("column_block: out of range");
    Matrix out(m.rows(), count);
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < count; ++j) out(i, j) = m(i, begin + j);
    return out;
}

inline Matrix row_block(const Matrix& m, std::size_t begin, std::size_t count) {
    if (begin + count > m.rows()) throw ShapeError("row_block: out of range");
    Matrix out(count, m.cols());
    for (std::size_t i = 0; i < count; ++i)
        std::copy(m.row(begin + i).begin(), m.row(begin + i).end(), out.row(i).begin());
    return out;
}

struct SvdResult {
    Matrix u;                   // m x m
    std::vector<double> sigma;  // min(m, n), descending
    Matrix vt;                  // n x n
};

namespace detail {

inline constexpr int svd_max_sweeps = 100;
inline constexpr double svd_offdiag_threshold = 1e-12;

using Columns = std::vector<std::vector<double>>;

inline void rotate_columns(std::vector<double>& x, std::vector<double>& y, double c, double s) {
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double xi = x[i];
        const double yi = y[i];
        x[i] = c * xi - s * yi;
        y[i] = s * xi + c * yi;
    }
}

// Extends an orthonormal set of length-m columns to a full basis using the
// standard basis vector with the largest residual at each step.
inline void complete_basis(Columns& basis, std::size_t m) {
    while (basis.size() < m) {
        std::vector<double> best;
        double best_norm = -1.0;
        for (std::size_t e = 0; e < m; ++e) {
            std::vector<double> v(m, 0.0);
            v[e] = 1.0;
            for (int pass = 0; pass < 2; ++pass) {
                for (const auto& b : basis) {
                    const double p = dot(b, v);
                    for (std::size_t i = 0; i < m; ++i) v[i] -= p * b[i];
                }
            }
            const double n = norm2(v);
            if (n > best_norm) {
                best_norm = n;
                best = std::move(v);
            }
        }
        for (double& x : best) x /= best_norm;
        basis.push_back(std::move(best));
    }
}

// Hestenes one-sided Jacobi on a tall matrix (rows >= cols). Columns of the
// working copy converge to U·Σ while the same rotations accumulate V.
inline void jacobi_tall(const Matrix& m, Columns& u, std::vector<double>& sigma, Columns& v) {
    const std::size_t rows = m.rows();
    const std::size_t cols = m.cols();
    Columns w(cols, std::vector<double>(rows));
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) w[j][i] = m(i, j);
    v.assign(cols, std::vector<double>(cols, 0.0));
    for (std::size_t j = 0; j < cols; ++j) v[j][j] = 1.0;

    const double fro = frobenius_norm(m);
    const double abs_floor = (svd_offdiag_threshold * fro) * (svd_offdiag_threshold * fro);
    const double rel_tol = static_cast<double>(rows) * std::numeric_limits<double>::epsilon();

    bool converged = cols < 2;
    double worst = 0.0;
    for (int sweep = 0; sweep < svd_max_sweeps && !converged; ++sweep) {
        bool rotated = false;
        worst = 0.0;
        for (std::size_t p = 0; p + 1 < cols; ++p) {
            for (std::size_t q = p + 1; q < cols; ++q) {
                const double alpha = dot(w[p], w[p]);
                const double beta = dot(w[q], w[q]);
                const double gamma = dot(w[p], w[q]);
                const double scale = std::sqrt(alpha * beta);
                if (scale > 0.0) worst = std::max(worst, std::abs(gamma) / scale);
                if (std::abs(gamma) <= std::max(rel_tol * scale, abs_floor)) continue;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                rotate_columns(w[p], w[q], c, s);
                rotate_columns(v[p], v[q], c, s);
                rotated = true;
            }
        }
        converged = !rotated;
    }
    if (!converged) throw NumericError("svd: one-sided Jacobi did not converge in 100 sweeps", worst);

    std::vector<double> norms(cols);
    for (std::size_t j = 0; j < cols; ++j) norms[j] = norm2(w[j]);
    std::vector<std::size_t> order(cols);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return norms[a] > norms[b]; });

    sigma.resize(cols);
    Columns sorted_v(cols);
    u.clear();
    const double zero_tol = svd_offdiag_threshold * fro;
    std::size_t nonzero = 0;
    for (std::size_t k = 0; k < cols; ++k) {
        sigma[k] = norms[order[k]];
        sorted_v[k] = v[order[k]];
        if (sigma[k] > zero_tol) ++nonzero;
    }
    for (std::size_t k = 0; k < nonzero; ++k) {
        std::vector<double> col = w[order[k]];
        for (double& x : col) x /= sigma[k];
        u.push_back(std::move(col));
    }
    complete_basis(u, rows);
    v = std::move(sorted_v);
}

} // namespace detail

// Full SVD, m = U · diag(sigma) · Vᵀ. Each left singular vector (columns of U
// paired with a singular value) has its largest-magnitude entry positive.
inline SvdResult svd(const Matrix& m) {
    if (m.rows() == 0 || m.cols() == 0) throw ShapeError("svd: empty matrix");
    const bool tall = m.rows() >= m.cols();
    detail::Columns left, right;
    std::vector<double> sigma;
    if (tall) {
        detail::jacobi_tall(m, left, sigma, right);
    } else {
        detail::jacobi_tall(transpose(m), right, sigma, left);
    }
    // left: m.rows() columns of length m.rows(); right: m.cols() columns of length m.cols().
    const std::size_t k = sigma.size();
    for (std::size_t j = 0; j < left.size(); ++j) {
        auto& col = left[j];
        std::size_t arg = 0;
        for (std::size_t i = 1; i < col.size(); ++i)
            if (std::abs(col[i]) > std::abs(col[arg])) arg = i;
        if (col[arg] < 0.0) {
            for (double& x : col) x = -x;
            if (j < k) for (double& x : right[j]) x = -x;
        }
    }

    SvdResult out{Matrix(m.rows(), m.rows()), std::move(sigma), Matrix(m.cols(), m.cols())};
    for (std::size_t j = 0; j < m.rows(); ++j)
        for (std::size_t i = 0; i < m.rows(); ++i) out.u(i, j) = left[j][i];
    for (std::size_t j = 0; j < m.cols(); ++j)
        for (std::size_t i = 0; i < m.cols(); ++i) out.vt(j, i) = right[j][i];
    return out;
}

struct LowRankPair {
    Matrix a;  // rows x r
    Matrix b;  // r x cols
};

// Best rank-r factors: a = U[:, :r], b = (Σ Vᵀ)[:r, :].
inline LowRankPair truncated_factors(const SvdResult& s, std::size_t r) {
    const std::size_t rows = s.u.rows();
    const std::size_t cols = s.vt.rows();
    if (r < 1 || r > s.sigma.size())
        throw RankError("rank " + std::to_string(r) + " outside [1, " + std::to_string(s.sigma.size()) + "]");
    LowRankPair f{Matrix(rows, r), Matrix(r, cols)};
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < r; ++j) f.a(i, j) = s.u(i, j);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < cols; ++j) f.b(i, j) = s.sigma[i] * s.vt(i, j);
    return f;
}

inline LowRankPair truncated_factors(const Matrix& m, std::size_t r) {
    if (m.rows() == 0 || m.cols() == 0 || r < 1 || r > std::min(m.rows(), m.cols()))
        throw RankError("rank " + std::to_string(r) + " outside [1, min(" + std::to_string(m.rows()) + ", " +
                        std::to_string(m.cols()) + ")]");
    return truncated_factors(svd(m), r);
}

} // namespace ropekv
