#pragma once

#include "kvshrink/calibration.hpp"
#include "kvshrink/checkpoint.hpp"
#include "kvshrink/eig.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace kvshrink {

enum class Strategy { mean_pool, svd_w, svd_a };
/// How rotary keys are handled: `fused` folds key projections into the
/// weights (illegal for SVD strategies under RoPE, where the rotation
/// sits between W_K and W_Q); `projected_key` keeps full-width keys and
/// projects the cache instead.
enum class RopeMode { fused, projected_key };
/// Source of the key projection in projected_key mode: one whole-layer
/// basis from the ungrouped post-rotation Gram, or per-group bases
/// assembled block-diagonally.
enum class KeyGramScope { whole, grouped };

std::string to_string(Strategy s);
std::string to_string(RopeMode m);
std::string to_string(KeyGramScope s);
Strategy strategy_from_string(const std::string& s);     // mean-pool|svd-w|svd-a
RopeMode rope_mode_from_string(const std::string& s);    // fused|projected-key
KeyGramScope key_gram_scope_from_string(const std::string& s); // whole|grouped

struct CompressionPlan {
    Strategy strategy = Strategy::svd_a;
    std::size_t groups = 0;
    RopeMode rope_mode = RopeMode::fused;
    KeyGramScope key_scope = KeyGramScope::whole;

    /// Structural checks against the source model: groups divides heads,
    /// source is uncompressed MHA, and the RoPE/fusion compatibility
    /// rules hold. Throws std::invalid_argument.
    void validate(const ModelConfig& src) const;
};

/// 1 - g/h. Throws std::invalid_argument unless g divides h.
double compression_ratio(std::size_t h, std::size_t g);

/// One retained basis with the eigenvalue spectrum it was cut from
/// (weight-Gram spectrum for svd_w, activation-Gram spectrum for svd_a).
struct GroupProjection {
    Projection proj;
    std::vector<double> spectrum;
};

struct LayerProjections {
    std::vector<GroupProjection> key;   // g entries, or 1 when key_whole
    std::vector<GroupProjection> value; // g entries
};

/// The orthonormal bases a compression run retains, before any fusion.
/// key_whole marks a single whole-layer key basis; key_post_rope records
/// which key stream the bases apply to.
struct ProjectionSet {
    std::uint64_t config_hash = 0;
    std::size_t groups = 0;
    bool key_whole = false;
    bool key_post_rope = false;
    std::vector<LayerProjections> layers;
};

/// Activation-aware bases: eigenvectors of the calibration Grams. Checks
/// the gram/checkpoint hash (ConsistencyError) and Gram positive
/// semi-definiteness within -1e-8 * trace (NumericalError).
ProjectionSet build_projections(const Checkpoint& ckpt, const GramSet& grams,
                                const CompressionPlan& plan);

/// Weight-SVD bases: right singular vectors of each group's concatenated
/// head weights, obtained as eigenvectors of W^T W.
ProjectionSet build_weight_projections(const Checkpoint& ckpt,
                                       const CompressionPlan& plan);

/// Plain head averaging within each group; queries, outputs and all other
/// tensors are untouched. Output is a standard GQA checkpoint.
Checkpoint mean_pool_compress(const Checkpoint& ckpt, std::size_t g);

/// Weight-SVD compression. Under RoPE the key side switches to
/// projected_key mode; values always fuse.
Checkpoint svd_w_compress(const Checkpoint& ckpt, std::size_t g,
                          KeyGramScope scope = KeyGramScope::whole);

/// Activation-aware compression from calibration Grams, the strategy the
/// projections in `plan` describe. Fused mode rewrites W_K/W_V and folds
/// the per-head projection blocks into W_Q/W_O; projected_key mode keeps
/// W_K/W_Q full width and installs key_proj.
Checkpoint svd_a_compress(const Checkpoint& ckpt, const GramSet& grams,
                          const CompressionPlan& plan);

/// Dispatch on plan.strategy; grams may be null except for svd_a.
Checkpoint compress_checkpoint(const Checkpoint& ckpt,
                               const CompressionPlan& plan,
                               const GramSet* grams = nullptr);

} // namespace kvshrink
