#pragma once

#include "kvshrink/config.hpp"
#include "kvshrink/matrix.hpp"

#include <cstddef>
#include <span>
#include <vector>

namespace kvshrink {

/// Per-layer K/V history for one generation stream. Rows are stored as
/// float32 (the cache is the object whose memory footprint is being
/// compressed), so bytes() is exact: 2 * n_layers * width * len * 4.
/// In projected_key mode the K rows hold projected keys of width g*d_h.
class KVCache {
public:
    KVCache() = default;
    explicit KVCache(const ModelConfig& cfg);

    std::size_t n_layers() const { return k_.size(); }
    std::size_t width() const { return width_; }
    std::size_t max_len() const { return max_len_; }
    std::size_t current_len() const { return len_; }

    /// True when appending one more token would exceed max_seq_len.
    bool full() const { return len_ >= max_len_; }

    /// Stores one K and one V row for `layer`, rounded to float32. All
    /// layers must be appended exactly once per token, layer 0 first;
    /// the length advances when the last layer's row arrives.
    /// Throws CapacityError when the cache is full and
    /// std::invalid_argument on width or ordering violations.
    void append(std::size_t layer, std::span<const double> k_row,
                std::span<const double> v_row);

    /// Row `t` of layer's K (or V) as stored, float32 values.
    std::span<const float> key_row(std::size_t layer, std::size_t t) const;
    std::span<const float> value_row(std::size_t layer, std::size_t t) const;

    /// Full K (or V) history widened back to double, len x width.
    Matrix keys(std::size_t layer) const;
    Matrix values(std::size_t layer) const;

    /// Logical payload size in bytes across all layers, K and V.
    std::size_t bytes() const;

private:
    std::vector<std::vector<float>> k_;
    std::vector<std::vector<float>> v_;
    std::size_t width_ = 0;
    std::size_t max_len_ = 0;
    std::size_t len_ = 0;
    std::size_t next_layer_ = 0;
};

} // namespace kvshrink
