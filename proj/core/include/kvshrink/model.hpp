#pragma once

#include "kvshrink/checkpoint.hpp"
#include "kvshrink/config.hpp"
#include "kvshrink/kvcache.hpp"
#include "kvshrink/matrix.hpp"

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace kvshrink {

/// Observer for per-layer attention inputs during a full forward pass.
/// Receives keys before and after position rotation (identical when the
/// model has no RoPE) and values, one row per sequence position. Used to
/// stream calibration statistics without a second model implementation.
using ActivationTap = std::function<void(
    std::size_t layer, const Matrix& keys_pre_rope,
    const Matrix& keys_post_rope, const Matrix& values)>;

struct ForwardResult {
    Matrix logits; // seq x vocab
    KVCache cache; // populated with all K/V states, float32 rows
};

/// Batch prefill: causal attention over the whole sequence at once.
/// Token ids must be < vocab_size and 1 <= len <= max_seq_len.
ForwardResult forward(const Checkpoint& ckpt, const std::vector<int>& tokens,
                      const ActivationTap& tap = nullptr);

/// Incremental step: consumes one token, appends one row per layer to the
/// cache, returns logits for the new position. Reads cached history as
/// float32, so it is a genuinely different code path from forward();
/// equivalence between the two is a checked property, not a tautology.
/// Throws CapacityError when the cache is full.
std::vector<double> decode_step(const Checkpoint& ckpt, KVCache& cache,
                                int token);

/// Greedy continuation: runs the prompt through forward(), then decodes
/// n_new tokens by argmax. Returns prompt + generated ids.
std::vector<int> greedy_generate(const Checkpoint& ckpt,
                                 const std::vector<int>& prompt,
                                 std::size_t n_new);

/// Rotates consecutive pairs (v[2j], v[2j+1]) by position * theta^(-2j/w).
/// Width must be even; norm is preserved.
std::vector<double> apply_rope(std::span<const double> v, std::size_t position,
                               double theta);
void apply_rope_inplace(std::span<double> v, std::size_t position, double theta);

/// Geometric ALiBi slope for `head` of n_heads: 2^(-8*(head+1)/n_heads).
double alibi_slope(std::size_t head, std::size_t n_heads);

/// -slope(head) * (query_pos - key_pos). Requires key_pos <= query_pos.
double alibi_bias(std::size_t head, std::size_t n_heads,
                  std::size_t query_pos, std::size_t key_pos);

/// Unnormalized attention logits for one query head over cached key rows,
/// before any position bias. `keys` is the cache content, len x kv_width.
/// standard: dot against the head's KV-group column slice, scaled 1/sqrt(d_h).
/// projected_key: the query is mapped once by the head's key_proj column
/// block, then dotted against full projected rows; algebraically equal to
/// q Psi^T Psi k^T / sqrt(d_h) with the query embedded in its head slot.
std::vector<double> attention_scores(std::span<const double> q_head,
                                     const Matrix& keys,
                                     const ModelConfig& cfg,
                                     const Matrix& key_proj, std::size_t head);

/// Numerically stable in-place softmax; output sums to 1.
void softmax_inplace(std::span<double> row);

/// y = x / rms(x) * gain, rms = sqrt(mean(x^2) + 1e-6).
void rmsnorm(std::span<const double> x, std::span<const double> gain,
             std::span<double> out);

/// Exact GELU: 0.5 x (1 + erf(x / sqrt(2))).
double gelu(double x);

} // namespace kvshrink
