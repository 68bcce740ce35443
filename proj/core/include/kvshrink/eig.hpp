#pragma once

#include "kvshrink/matrix.hpp"

#include <cstddef>
#include <span>
#include <vector>

namespace kvshrink {

/// Result of a symmetric eigendecomposition. Row j of `eigenvectors` is the
/// unit eigenvector for `eigenvalues[j]`; eigenvalues are sorted descending.
/// Sign convention: the first entry of each eigenvector with magnitude
/// above 1e-12 is positive, so results are reproducible across runs.
struct EigenDecomposition {
    std::vector<double> eigenvalues;
    Matrix eigenvectors; // dim x dim, rows are eigenvectors

    std::size_t dim() const { return eigenvalues.size(); }
};

/// Orthonormal rank-k projection: basis rows are the retained directions,
/// basis * basis^T = I_k.
struct Projection {
    std::size_t k = 0;
    Matrix basis; // k x dim

    std::size_t dim() const { return basis.cols; }
};

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Convergence: off-diagonal Frobenius norm below 1e-12 * ||S||_F within
/// 100 sweeps, else a NumericalError reporting the residual.
/// Throws std::invalid_argument for non-square or asymmetric input
/// (asymmetry above 1e-9 relative).
EigenDecomposition sym_eig(const Matrix& s);

/// Top-k eigenvector rows as a Projection. Requires 1 <= k <= dim.
Projection rank_k_projection(const EigenDecomposition& eig, std::size_t k);

/// Fraction of spectrum mass in the top k eigenvalues. Negative values
/// (round-off from PSD inputs) are clamped to zero first; an all-zero
/// spectrum yields 1 (empty-cache convention). Requires 1 <= k <= size.
double energy_ratio(std::span<const double> eigenvalues, std::size_t k);

/// || X - X P^T P ||_F, the residual of projecting X's rows onto the
/// subspace spanned by P's basis rows.
double projection_error(const Matrix& x, const Projection& p);

} // namespace kvshrink
