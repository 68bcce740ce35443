#include "kvshrink/gram.hpp"

#include <stdexcept>

namespace kvshrink {

namespace {
inline std::size_t packed_size(std::size_t dim) { return dim * (dim + 1) / 2; }
// Offset of packed entry (i, j), requires i <= j.
inline std::size_t packed_index(std::size_t dim, std::size_t i, std::size_t j) {
    return i * dim - i * (i - 1) / 2 + (j - i);
}
} // namespace

GramAccumulator::GramAccumulator(std::size_t dim)
    : dim_(dim), packed_(packed_size(dim), 0.0) {
    if (dim == 0) throw std::invalid_argument("GramAccumulator: dim must be positive");
}

void GramAccumulator::accumulate(const Matrix& x) {
    if (x.cols != dim_)
        throw std::invalid_argument("GramAccumulator::accumulate: X has " +
                                    std::to_string(x.cols) + " cols, accumulator dim is " +
                                    std::to_string(dim_));
    if (!all_finite(x))
        throw std::invalid_argument("GramAccumulator::accumulate: non-finite entry in X");
    for (std::size_t r = 0; r < x.rows; ++r) accumulate_row(x.row(r));
}

void GramAccumulator::accumulate_row(std::span<const double> row) {
    if (row.size() != dim_)
        throw std::invalid_argument("GramAccumulator::accumulate_row: width mismatch");
    std::size_t idx = 0;
    for (std::size_t i = 0; i < dim_; ++i) {
        const double ri = row[i];
        for (std::size_t j = i; j < dim_; ++j) packed_[idx++] += ri * row[j];
    }
    ++token_count_;
}

void GramAccumulator::merge(const GramAccumulator& other) {
    if (other.dim_ != dim_)
        throw std::invalid_argument("GramAccumulator::merge: dimension mismatch");
    for (std::size_t i = 0; i < packed_.size(); ++i) packed_[i] += other.packed_[i];
    token_count_ += other.token_count_;
}

Matrix GramAccumulator::to_matrix() const {
    Matrix m(dim_, dim_);
    for (std::size_t i = 0; i < dim_; ++i) {
        for (std::size_t j = i; j < dim_; ++j) {
            const double v = packed_[packed_index(dim_, i, j)];
            m.at(i, j) = v;
            m.at(j, i) = v;
        }
    }
    return m;
}

double GramAccumulator::trace() const {
    double t = 0.0;
    for (std::size_t i = 0; i < dim_; ++i) t += packed_[packed_index(dim_, i, i)];
    return t;
}

GramAccumulator GramAccumulator::from_packed(std::size_t dim, std::vector<double> packed,
                                             std::uint64_t token_count) {
    if (packed.size() != packed_size(dim))
        throw std::invalid_argument("GramAccumulator::from_packed: bad payload size");
    GramAccumulator g(dim);
    g.packed_ = std::move(packed);
    g.token_count_ = token_count;
    return g;
}

} // namespace kvshrink
