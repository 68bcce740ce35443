#pragma once

#include "kvshrink/checkpoint.hpp"
#include "kvshrink/gram.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace kvshrink {

/// Which key stream feeds the key Gram matrices. Keys before rotation
/// support weight fusion; keys after rotation are what a rotary model
/// actually caches. `both` collects the two streams side by side.
enum class RopeVariant { pre_rope, post_rope, both };

std::string to_string(RopeVariant v);
RopeVariant rope_variant_from_string(const std::string& s);

/// Per-layer second-moment statistics of the KV cache, grouped as the
/// compressor will group heads: group i covers heads i*t .. i*t+t-1 and
/// its accumulator has dim t*d_h. Rotary models additionally carry one
/// ungrouped post-rotation key Gram of dim h*d_h for whole-layer key
/// projections.
struct LayerGrams {
    std::vector<GramAccumulator> key_pre;  // empty when variant = post_rope
    std::vector<GramAccumulator> key_post; // empty when variant = pre_rope
    std::vector<GramAccumulator> value;
    std::optional<GramAccumulator> whole_key;
};

struct GramSet {
    std::uint64_t config_hash = 0;
    std::size_t groups = 0;
    std::string corpus_id;
    RopeVariant variant = RopeVariant::pre_rope;
    std::uint64_t token_count = 0;
    std::vector<LayerGrams> layers;

    /// Adds another set collected from a disjoint corpus slice. Throws
    /// ConsistencyError on config-hash mismatch, std::invalid_argument
    /// on layout mismatch.
    void merge(const GramSet& other);

    /// Throws ConsistencyError naming both hashes when this set was not
    /// collected from `ckpt`.
    void require_matches(const Checkpoint& ckpt) const;
};

/// Streams the calibration corpus through the model and accumulates all
/// Gram matrices in one pass. The corpus is cut into BOS-prefixed windows
/// of `seq_len` tokens (trailing padding dropped); every accumulator ends
/// with the same token_count. Requires an uncompressed (standard
/// attention) checkpoint and `groups` dividing its KV-head count.
/// Sequences may be processed in parallel; workers own private sets that
/// merge in order.
GramSet collect_grams(const Checkpoint& ckpt,
                      const std::vector<std::uint8_t>& corpus,
                      std::size_t groups, RopeVariant variant,
                      std::size_t seq_len = 256, std::size_t threads = 1,
                      const std::string& corpus_id = "");

/// Binary container: magic "KVGR", u32 version, u32 header length, JSON
/// header (config hash, groups, dims, token count, variant, kind list),
/// then each Gram's packed upper triangle as float64 little-endian in
/// layer-major, kind-major, group-minor order. Round-trip is bit-exact.
void save_grams(const GramSet& gs, const std::string& path);
GramSet load_grams(const std::string& path);

} // namespace kvshrink
