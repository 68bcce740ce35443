#include "kvshrink/eig.hpp"

#include "kvshrink/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace kvshrink {

namespace {

double off_diagonal_norm(const Matrix& a) {
    double sum = 0.0;
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t j = 0; j < a.cols; ++j) {
            if (i != j) {
                sum += a.at(i, j) * a.at(i, j);
            }
        }
    }
    return std::sqrt(sum);
}

void check_symmetric(const Matrix& s) {
    if (s.rows != s.cols) {
        throw std::invalid_argument("sym_eig: matrix must be square");
    }
    if (!all_finite(s)) {
        throw std::invalid_argument("sym_eig: matrix has non-finite entries");
    }
    double norm = frobenius_norm(s);
    double asym = 0.0;
    for (std::size_t i = 0; i < s.rows; ++i) {
        for (std::size_t j = i + 1; j < s.cols; ++j) {
            double d = s.at(i, j) - s.at(j, i);
            asym += 2.0 * d * d;
        }
    }
    asym = std::sqrt(asym);
    if (asym > 1e-9 * norm) {
        std::ostringstream msg;
        msg << "sym_eig: matrix is not symmetric (||S-S^T||_F = " << asym
            << ", ||S||_F = " << norm << ")";
        throw std::invalid_argument(msg.str());
    }
}

// Applies one Jacobi rotation zeroing a(p,q); v accumulates the rotations
// so its columns converge to the eigenvectors.
void jacobi_rotate(Matrix& a, Matrix& v, std::size_t p, std::size_t q) {
    double apq = a.at(p, q);
    if (apq == 0.0) {
        return;
    }
    double tau = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
    double t;
    if (tau >= 0.0) {
        t = 1.0 / (tau + std::sqrt(1.0 + tau * tau));
    } else {
        t = 1.0 / (tau - std::sqrt(1.0 + tau * tau));
    }
    double c = 1.0 / std::sqrt(1.0 + t * t);
    double s = t * c;

    double app = a.at(p, p);
    double aqq = a.at(q, q);
    a.at(p, p) = app - t * apq;
    a.at(q, q) = aqq + t * apq;
    a.at(p, q) = 0.0;
    a.at(q, p) = 0.0;

    std::size_t n = a.rows;
    for (std::size_t i = 0; i < n; ++i) {
        if (i == p || i == q) {
            continue;
        }
        double aip = a.at(i, p);
        double aiq = a.at(i, q);
        a.at(i, p) = c * aip - s * aiq;
        a.at(p, i) = a.at(i, p);
        a.at(i, q) = s * aip + c * aiq;
        a.at(q, i) = a.at(i, q);
    }
    for (std::size_t i = 0; i < n; ++i) {
        double vip = v.at(i, p);
        double viq = v.at(i, q);
        v.at(i, p) = c * vip - s * viq;
        v.at(i, q) = s * vip + c * viq;
    }
}

void fix_sign(Matrix& vectors, std::size_t row) {
    for (std::size_t j = 0; j < vectors.cols; ++j) {
        double e = vectors.at(row, j);
        if (std::abs(e) > 1e-12) {
            if (e < 0.0) {
                for (std::size_t k = 0; k < vectors.cols; ++k) {
                    vectors.at(row, k) = -vectors.at(row, k);
                }
            }
            return;
        }
    }
}

} // namespace

EigenDecomposition sym_eig(const Matrix& s) {
    check_symmetric(s);
    std::size_t n = s.rows;

    Matrix a = s;
    // Exact symmetry keeps the rotation updates consistent.
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            double m = 0.5 * (a.at(i, j) + a.at(j, i));
            a.at(i, j) = m;
            a.at(j, i) = m;
        }
    }
    Matrix v = Matrix::identity(n);

    double norm = frobenius_norm(s);
    double threshold = 1e-12 * norm;
    const int max_sweeps = 100;

    double off = off_diagonal_norm(a);
    int sweep = 0;
    while (off > threshold && sweep < max_sweeps) {
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                jacobi_rotate(a, v, p, q);
            }
        }
        off = off_diagonal_norm(a);
        ++sweep;
    }
    if (off > threshold) {
        std::ostringstream msg;
        msg << "sym_eig: Jacobi iteration did not converge in " << max_sweeps
            << " sweeps (off-diagonal norm " << off << ", threshold "
            << threshold << ")";
        throw NumericalError(msg.str());
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&a](std::size_t lhs, std::size_t rhs) {
                         return a.at(lhs, lhs) > a.at(rhs, rhs);
                     });

    EigenDecomposition out;
    out.eigenvalues.resize(n);
    out.eigenvectors = Matrix::zeros(n, n);
    for (std::size_t r = 0; r < n; ++r) {
        std::size_t src = order[r];
        out.eigenvalues[r] = a.at(src, src);
        for (std::size_t j = 0; j < n; ++j) {
            out.eigenvectors.at(r, j) = v.at(j, src);
        }
        fix_sign(out.eigenvectors, r);
    }
    return out;
}

Projection rank_k_projection(const EigenDecomposition& eig, std::size_t k) {
    if (k == 0 || k > eig.dim()) {
        throw std::invalid_argument("rank_k_projection: k out of range");
    }
    Projection p;
    p.k = k;
    p.basis = slice_rows(eig.eigenvectors, 0, k);
    return p;
}

double energy_ratio(std::span<const double> eigenvalues, std::size_t k) {
    if (k == 0 || k > eigenvalues.size()) {
        throw std::invalid_argument("energy_ratio: k out of range");
    }
    double total = 0.0;
    double top = 0.0;
    for (std::size_t i = 0; i < eigenvalues.size(); ++i) {
        double e = std::max(eigenvalues[i], 0.0);
        total += e;
        if (i < k) {
            top += e;
        }
    }
    if (total == 0.0) {
        return 1.0;
    }
    return top / total;
}

double projection_error(const Matrix& x, const Projection& p) {
    if (x.cols != p.basis.cols) {
        throw std::invalid_argument(
            "projection_error: column count does not match projection dim");
    }
    Matrix coeffs = matmul_abt(x, p.basis); // n x k
    Matrix recon = matmul(coeffs, p.basis); // n x dim
    double sum = 0.0;
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        double d = x.data[i] - recon.data[i];
        sum += d * d;
    }
    return std::sqrt(sum);
}

} // namespace kvshrink
