#pragma once

#include "kvshrink/checkpoint.hpp"
#include "kvshrink/compress.hpp"
#include "kvshrink/matrix.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

// Test-side reference implementations. Everything here is written
// independently of the library's numerics (plain loops, classical
// algorithms) so agreement is evidence, not tautology.
namespace testutil {

using kvshrink::Checkpoint;
using kvshrink::Matrix;
using kvshrink::ModelConfig;

Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng,
                     double scale = 1.0);

/// Random symmetric matrix with entries ~ N(0, scale^2).
Matrix random_symmetric(std::size_t dim, std::mt19937_64& rng,
                        double scale = 1.0);

/// X^T X by the definition, triple loop.
Matrix naive_gram(const Matrix& x);

/// Plain triple-loop product, independent of the library kernels.
Matrix naive_matmul(const Matrix& a, const Matrix& b);

double frob(const Matrix& a);

/// Orthonormal rows via classical Gram-Schmidt on Gaussian vectors.
Matrix gs_orthonormal(std::size_t rows, std::size_t cols,
                      std::mt19937_64& rng);

/// Dominant eigenpair of a symmetric matrix by power iteration on
/// S + shift*I (shift makes the dominant eigenvalue of the shifted
/// matrix the algebraically largest of S). Returns (eigenvalue, vector).
std::pair<double, std::vector<double>> power_top_eig(const Matrix& s,
                                                     std::size_t iters = 20000);

/// Top-k eigenvalues of a symmetric matrix by power iteration with
/// deflation. Works reliably for matrices with separated eigenvalues.
std::vector<double> power_eigs(const Matrix& s, std::size_t k,
                               std::size_t iters = 20000);

/// The three eigenvalues of a symmetric 3x3 matrix via the trigonometric
/// solution of the characteristic cubic, sorted descending.
std::vector<double> sym3_eigenvalues(const Matrix& s);

/// All mutable parameter tensors of a checkpoint, for finite differences.
struct ParamRef {
    std::string name;
    double* data;
    std::size_t size;
};
std::vector<ParamRef> param_refs(Checkpoint& ckpt, bool include_key_proj);

struct FdResult {
    double max_rel_err = 0.0;
    std::string worst_param;
    std::size_t checked = 0;
};

/// Central-difference check of loss_and_grads over up to
/// `samples_per_tensor` strided entries of every parameter tensor.
/// rel err = |analytic - fd| / (|analytic| + |fd| + floor).
FdResult fd_gradient_check(const Checkpoint& ckpt,
                           const std::vector<std::vector<int>>& batch,
                           double eps = 1e-4,
                           std::size_t samples_per_tensor = 24,
                           double floor = 1e-8);

/// Small configs used across suites.
ModelConfig tiny_config(kvshrink::PosEncoding pe, std::size_t layers = 2,
                        std::size_t d = 16, std::size_t heads = 4,
                        std::size_t max_seq = 128);
/// The acceptance-scale toy: 4 layers, d=64, h=8, d_h=8, byte vocab.
ModelConfig toy_config(kvshrink::PosEncoding pe, std::size_t max_seq = 320);

/// Explicit-projection oracle: the ORIGINAL-geometry checkpoint whose
/// per-group key/value weights are right-multiplied by Psi^T Psi (resp.
/// Omega^T Omega), so running the ordinary MHA forward reproduces
/// "caches replaced by K Psi^T Psi". Built with test-side slicing.
Checkpoint explicit_projection_oracle(const Checkpoint& ckpt,
                                      const kvshrink::ProjectionSet& ps);

/// Unique scratch directory under the system temp root; removed on
/// destruction.
class TempDir {
public:
    TempDir();
    ~TempDir();
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::string& path() const { return path_; }
    std::string file(const std::string& name) const;

private:
    std::string path_;
};

struct CliResult {
    int code = 0;
    std::string out;
    std::string err;
};
CliResult run_cli(const std::vector<std::string>& args);

std::vector<int> random_tokens(std::size_t n, std::mt19937_64& rng,
                               int vocab = 259);

} // namespace testutil
