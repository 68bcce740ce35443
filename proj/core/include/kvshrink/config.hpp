#pragma once

#include <cstddef>
#include <string>

namespace kvshrink {

enum class PosEncoding { none, alibi, rope };
enum class AttentionKind { standard, projected_key };

std::string to_string(PosEncoding p);
std::string to_string(AttentionKind a);
PosEncoding pos_encoding_from_string(const std::string& s);
AttentionKind attention_kind_from_string(const std::string& s);

struct ModelConfig {
    std::size_t vocab_size = 259;
    std::size_t d_model = 64;
    std::size_t n_heads = 8;
    std::size_t n_kv_heads = 8;
    std::size_t head_dim = 8;
    std::size_t n_layers = 4;
    std::size_t d_ff = 256;
    std::size_t max_seq_len = 512;
    PosEncoding pos_encoding = PosEncoding::alibi;
    double rope_theta = 10000.0;
    AttentionKind attention_kind = AttentionKind::standard;

    /// Query heads per KV group: t = h / g.
    std::size_t group_size() const { return n_heads / n_kv_heads; }
    /// Width of one layer's cached K/V row: g * d_h.
    std::size_t kv_width() const { return n_kv_heads * head_dim; }
    /// Width of keys before projection; equals d_model for projected_key,
    /// kv_width() otherwise.
    std::size_t key_width() const {
        return attention_kind == AttentionKind::projected_key
                   ? n_heads * head_dim
                   : kv_width();
    }

    /// Throws std::invalid_argument on any violated structural invariant.
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

/// JSON round-trip; parse validates the result.
std::string config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const std::string& json_text);

} // namespace kvshrink
