#pragma once

#include "kvshrink/config.hpp"
#include "kvshrink/matrix.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace kvshrink {

/// One decoder layer. Attention projections are stored whole; per-head
/// views are column slices of width head_dim (rows for w_o). key_proj is
/// present only for projected_key attention; its rows are orthonormal and
/// it maps full-width post-RoPE keys into the compressed cache basis.
struct LayerWeights {
    Matrix w_q;      // d x (h*d_h)
    Matrix w_k;      // d x key_width (h*d_h for projected_key, g*d_h otherwise)
    Matrix w_v;      // d x (g*d_h)
    Matrix w_o;      // (h*d_h) x d, row block j belongs to query head j
    Matrix key_proj; // (g*d_h) x (h*d_h); empty unless projected_key
    std::vector<double> attn_norm; // d
    Matrix mlp_w1;   // d x d_ff
    Matrix mlp_w2;   // d_ff x d
    std::vector<double> mlp_norm;  // d
};

/// Immutable model state. The embedding doubles as the output head
/// (tied weights). All entries are float32-representable doubles, which
/// makes file round-trips bit-exact.
struct Checkpoint {
    ModelConfig config;
    Matrix embedding; // vocab x d
    std::vector<LayerWeights> layers;
    std::vector<double> final_norm; // d

    /// Shape consistency with config, finiteness, and (when present)
    /// key_proj row orthonormality within 1e-6.
    void validate() const;
};

/// Fresh Gaussian-initialized checkpoint (std 0.02, unit norm gains),
/// rounded to float32 values. projected_key configs get a random
/// row-orthonormal key_proj. Deterministic for a given seed.
Checkpoint init_checkpoint(const ModelConfig& cfg, std::uint64_t seed);

/// Binary little-endian container: magic "KVHC", u32 version, u32 header
/// length, JSON header (config + tensor directory), then raw row-major
/// float32 payloads in directory order.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);

/// Throws FormatError for bad magic, unsupported version, truncation or
/// shape mismatches; std::invalid_argument for unreadable paths.
Checkpoint load_checkpoint(const std::string& path);

/// FNV-1a over the config JSON and all float32 payload bytes. Ties
/// calibration artifacts to the exact checkpoint that produced them.
std::uint64_t checkpoint_hash(const Checkpoint& ckpt);

} // namespace kvshrink
