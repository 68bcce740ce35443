#pragma once

#include "kvshrink/checkpoint.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace kvshrink {

/// exp(mean next-token negative log-likelihood) over non-overlapping
/// BOS-prefixed windows of seq_len tokens. Padding positions carry no
/// loss. Windows may be evaluated in parallel; the reduction is ordered,
/// so the result is independent of the thread count.
double perplexity(const Checkpoint& ckpt,
                  const std::vector<std::uint8_t>& corpus, std::size_t seq_len,
                  std::size_t threads = 1);

struct BenchResult {
    std::size_t context_len = 0;
    std::size_t gen_tokens = 0;
    double prefill_s = 0.0;
    /// Absent when gen_tokens == 0 (no decode phase to time).
    std::optional<double> decode_tokens_per_s;
    /// Live cache footprint after prefill + decode, in bytes.
    std::uint64_t kv_bytes = 0;
    /// Greedy continuation produced during the benchmark; identical for
    /// every repeat since timing never feeds back into token choice.
    std::vector<int> generated;
};

/// Prefills `context_len` synthetic tokens once (timed), then runs
/// `repeats` greedy decode passes of `gen_tokens` steps each on a fresh
/// copy of the prefill cache; the first extra pass is a discarded warmup
/// and the reported rate is the median over repeats.
/// Throws std::invalid_argument when context_len + gen_tokens exceeds
/// max_seq_len, or when context_len or repeats is zero.
BenchResult throughput_bench(const Checkpoint& ckpt, std::size_t context_len,
                             std::size_t gen_tokens, std::size_t repeats);

/// 2 * n_layers * n_kv_heads * head_dim * seq_len * bytes_per_element.
/// The cache width already reflects compression (n_kv_heads = g after
/// conversion; projected keys store g*d_h wide rows), so this is exact
/// for every model kind.
std::uint64_t kv_memory_bytes(const ModelConfig& cfg, std::size_t seq_len,
                              std::size_t bytes_per_element = 4);

/// One benchmark/evaluation line for machine consumption.
struct EvalRecord {
    std::string checkpoint;
    std::size_t context_len = 0;
    std::optional<double> decode_tokens_per_s;
    double prefill_s = 0.0;
    std::uint64_t kv_bytes = 0;
    std::optional<double> ppl;
};

/// JSON object with fields in the order: checkpoint, context_len,
/// decode_tokens_per_s (omitted when absent), prefill_s, kv_bytes,
/// ppl (omitted when absent).
std::string eval_record_json(const EvalRecord& rec);

} // namespace kvshrink
