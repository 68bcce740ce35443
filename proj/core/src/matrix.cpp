#include "kvshrink/matrix.hpp"

#include <cmath>
#include <stdexcept>

namespace kvshrink {

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) throw std::invalid_argument("matmul: inner dimensions differ");
    Matrix c(a.rows, b.cols);
    // i-k-j order keeps the inner loop streaming over contiguous rows of b.
    for (std::size_t i = 0; i < a.rows; ++i) {
        double* crow = c.data.data() + i * c.cols;
        const double* arow = a.data.data() + i * a.cols;
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = arow[k];
            if (aik == 0.0) continue;
            const double* brow = b.data.data() + k * b.cols;
            for (std::size_t j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
        }
    }
    return c;
}

Matrix matmul_abt(const Matrix& a, const Matrix& b) {
    if (a.cols != b.cols) throw std::invalid_argument("matmul_abt: inner dimensions differ");
    Matrix c(a.rows, b.rows);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* arow = a.data.data() + i * a.cols;
        for (std::size_t j = 0; j < b.rows; ++j) {
            const double* brow = b.data.data() + j * b.cols;
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols; ++k) s += arow[k] * brow[k];
            c.at(i, j) = s;
        }
    }
    return c;
}

Matrix matmul_atb(const Matrix& a, const Matrix& b) {
    if (a.rows != b.rows) throw std::invalid_argument("matmul_atb: inner dimensions differ");
    Matrix c(a.cols, b.cols);
    for (std::size_t k = 0; k < a.rows; ++k) {
        const double* arow = a.data.data() + k * a.cols;
        const double* brow = b.data.data() + k * b.cols;
        for (std::size_t i = 0; i < a.cols; ++i) {
            const double aki = arow[i];
            if (aki == 0.0) continue;
            double* crow = c.data.data() + i * c.cols;
            for (std::size_t j = 0; j < b.cols; ++j) crow[j] += aki * brow[j];
        }
    }
    return c;
}

Matrix transpose(const Matrix& a) {
    Matrix t(a.cols, a.rows);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < a.cols; ++j) t.at(j, i) = a.at(i, j);
    return t;
}

void row_times_matrix(std::span<const double> x, const Matrix& a, std::span<double> out) {
    if (x.size() != a.rows || out.size() != a.cols)
        throw std::invalid_argument("row_times_matrix: dimension mismatch");
    for (std::size_t j = 0; j < a.cols; ++j) out[j] = 0.0;
    for (std::size_t k = 0; k < a.rows; ++k) {
        const double xk = x[k];
        if (xk == 0.0) continue;
        const double* arow = a.data.data() + k * a.cols;
        for (std::size_t j = 0; j < a.cols; ++j) out[j] += xk * arow[j];
    }
}

void row_times_matrix_t(std::span<const double> x, const Matrix& a, std::span<double> out) {
    if (x.size() != a.cols || out.size() != a.rows)
        throw std::invalid_argument("row_times_matrix_t: dimension mismatch");
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* arow = a.data.data() + i * a.cols;
        double s = 0.0;
        for (std::size_t k = 0; k < a.cols; ++k) s += x[k] * arow[k];
        out[i] = s;
    }
}

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double frobenius_norm(const Matrix& a) {
    double s = 0.0;
    for (double v : a.data) s += v * v;
    return std::sqrt(s);
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        m = std::max(m, std::fabs(a.data[i] - b.data[i]));
    return m;
}

double trace(const Matrix& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < std::min(a.rows, a.cols); ++i) s += a.at(i, i);
    return s;
}

Matrix slice_cols(const Matrix& a, std::size_t c0, std::size_t c1) {
    if (c0 > c1 || c1 > a.cols) throw std::invalid_argument("slice_cols: bad range");
    Matrix s(a.rows, c1 - c0);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = c0; j < c1; ++j) s.at(i, j - c0) = a.at(i, j);
    return s;
}

Matrix slice_rows(const Matrix& a, std::size_t r0, std::size_t r1) {
    if (r0 > r1 || r1 > a.rows) throw std::invalid_argument("slice_rows: bad range");
    Matrix s(r1 - r0, a.cols);
    for (std::size_t i = r0; i < r1; ++i)
        for (std::size_t j = 0; j < a.cols; ++j) s.at(i - r0, j) = a.at(i, j);
    return s;
}

bool all_finite(std::span<const double> v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

bool all_finite(const Matrix& a) { return all_finite(std::span<const double>(a.data)); }

void f32_round_inplace(Matrix& a) {
    for (double& v : a.data) v = f32_round(v);
}

void f32_round_inplace(std::vector<double>& v) {
    for (double& x : v) x = f32_round(x);
}

Matrix random_orthonormal(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
    if (rows > cols) {
        throw std::invalid_argument("random_orthonormal: rows must be <= cols");
    }
    std::normal_distribution<double> gauss(0.0, 1.0);
    Matrix q(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
        auto row = q.row(r);
        for (double& x : row) {
            x = gauss(rng);
        }
        // Two orthogonalization passes keep the basis clean near machine
        // precision even for nearly dependent draws.
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t p = 0; p < r; ++p) {
                double proj = dot(row, q.row(p));
                auto prev = q.row(p);
                for (std::size_t c = 0; c < cols; ++c) {
                    row[c] -= proj * prev[c];
                }
            }
        }
        double norm = std::sqrt(dot(row, row));
        if (norm < 1e-12) {
            throw std::invalid_argument("random_orthonormal: degenerate draw");
        }
        for (double& x : row) {
            x /= norm;
        }
    }
    return q;
}

} // namespace kvshrink
