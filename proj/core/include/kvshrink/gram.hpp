#pragma once

#include "kvshrink/matrix.hpp"

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace kvshrink {

/// Streaming accumulator for X^T X over row batches. Only the upper
/// triangle is stored (packed row-major), so the expanded matrix is
/// symmetric by construction. Two accumulators over disjoint row sets
/// merge by adding sums and counts.
class GramAccumulator {
public:
    GramAccumulator() = default;
    explicit GramAccumulator(std::size_t dim);

    /// sum += X^T X, token_count += X.rows. X.cols must equal dim().
    void accumulate(const Matrix& x);
    /// Single-row update: sum += row^T row, token_count += 1.
    void accumulate_row(std::span<const double> row);

    void merge(const GramAccumulator& other);

    std::size_t dim() const { return dim_; }
    std::uint64_t token_count() const { return token_count_; }

    /// Expand the packed upper triangle into a full symmetric matrix.
    Matrix to_matrix() const;

    double trace() const;

    /// Packed upper triangle, row-major: (0,0)..(0,n-1),(1,1)..,(n-1,n-1).
    std::span<const double> packed() const { return packed_; }

    static GramAccumulator from_packed(std::size_t dim, std::vector<double> packed,
                                       std::uint64_t token_count);

private:
    std::size_t dim_ = 0;
    std::vector<double> packed_;
    std::uint64_t token_count_ = 0;
};

} // namespace kvshrink
