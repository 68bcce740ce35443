#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <vector>

namespace kvshrink {

/// Dense row-major matrix of doubles. The storage type everything else
/// builds on; weights are kept float32-representable (see f32_round) but
/// all arithmetic runs in double.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data; // row-major, rows*cols entries

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

    static Matrix zeros(std::size_t r, std::size_t c) { return Matrix(r, c); }
    static Matrix identity(std::size_t n);
};

/// C = A * B
Matrix matmul(const Matrix& a, const Matrix& b);
/// C = A * B^T
Matrix matmul_abt(const Matrix& a, const Matrix& b);
/// C = A^T * B
Matrix matmul_atb(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);

/// y = x * A  (x is a row vector of length A.rows)
void row_times_matrix(std::span<const double> x, const Matrix& a, std::span<double> out);
/// y = x * A^T (x is a row vector of length A.cols)
void row_times_matrix_t(std::span<const double> x, const Matrix& a, std::span<double> out);

double dot(std::span<const double> a, std::span<const double> b);
double frobenius_norm(const Matrix& a);
double max_abs_diff(const Matrix& a, const Matrix& b);
double trace(const Matrix& a);

/// Columns [c0, c1) of a, as a rows x (c1-c0) matrix.
Matrix slice_cols(const Matrix& a, std::size_t c0, std::size_t c1);
/// Rows [r0, r1) of a.
Matrix slice_rows(const Matrix& a, std::size_t r0, std::size_t r1);

bool all_finite(const Matrix& a);
bool all_finite(std::span<const double> v);

/// Round to the nearest float32 value (weights are stored single precision).
inline double f32_round(double x) { return static_cast<double>(static_cast<float>(x)); }
void f32_round_inplace(Matrix& a);
void f32_round_inplace(std::vector<double>& v);

/// Gaussian rows orthonormalized by modified Gram-Schmidt. Requires
/// rows <= cols. Deterministic for a given rng state.
Matrix random_orthonormal(std::size_t rows, std::size_t cols, std::mt19937_64& rng);

} // namespace kvshrink
