#include "kvshrink/kvcache.hpp"

#include "kvshrink/errors.hpp"

#include <sstream>
#include <stdexcept>

namespace kvshrink {

KVCache::KVCache(const ModelConfig& cfg)
    : k_(cfg.n_layers), v_(cfg.n_layers), width_(cfg.kv_width()),
      max_len_(cfg.max_seq_len) {}

void KVCache::append(std::size_t layer, std::span<const double> k_row,
                     std::span<const double> v_row) {
    if (layer >= k_.size()) {
        throw std::invalid_argument("KVCache::append: layer out of range");
    }
    if (k_row.size() != width_ || v_row.size() != width_) {
        std::ostringstream msg;
        msg << "KVCache::append: row width " << k_row.size() << "/"
            << v_row.size() << ", expected " << width_;
        throw std::invalid_argument(msg.str());
    }
    if (layer != next_layer_) {
        throw std::invalid_argument(
            "KVCache::append: layers must be appended in order, once per token");
    }
    if (len_ >= max_len_) {
        std::ostringstream msg;
        msg << "KV cache full: max_seq_len " << max_len_ << " reached";
        throw CapacityError(msg.str());
    }
    for (double x : k_row) {
        k_[layer].push_back(static_cast<float>(x));
    }
    for (double x : v_row) {
        v_[layer].push_back(static_cast<float>(x));
    }
    if (layer + 1 == k_.size()) {
        ++len_;
        next_layer_ = 0;
    } else {
        next_layer_ = layer + 1;
    }
}

std::span<const float> KVCache::key_row(std::size_t layer, std::size_t t) const {
    return {k_[layer].data() + t * width_, width_};
}

std::span<const float> KVCache::value_row(std::size_t layer, std::size_t t) const {
    return {v_[layer].data() + t * width_, width_};
}

Matrix KVCache::keys(std::size_t layer) const {
    std::size_t rows = k_[layer].size() / width_;
    Matrix m(rows, width_);
    for (std::size_t i = 0; i < k_[layer].size(); ++i) {
        m.data[i] = static_cast<double>(k_[layer][i]);
    }
    return m;
}

Matrix KVCache::values(std::size_t layer) const {
    std::size_t rows = v_[layer].size() / width_;
    Matrix m(rows, width_);
    for (std::size_t i = 0; i < v_[layer].size(); ++i) {
        m.data[i] = static_cast<double>(v_[layer][i]);
    }
    return m;
}

std::size_t KVCache::bytes() const {
    std::size_t total = 0;
    for (const auto& layer : k_) {
        total += layer.size() * sizeof(float);
    }
    for (const auto& layer : v_) {
        total += layer.size() * sizeof(float);
    }
    return total;
}

} // namespace kvshrink
