#include "kvshrink/compress.hpp"

#include "kvshrink/errors.hpp"

#include <sstream>
#include <stdexcept>

namespace kvshrink {

namespace {

void require_mha(const ModelConfig& cfg) {
    if (cfg.attention_kind != AttentionKind::standard ||
        cfg.n_kv_heads != cfg.n_heads) {
        throw std::invalid_argument(
            "compression source must be an uncompressed MHA checkpoint");
    }
}

void require_divides(std::size_t g, std::size_t h) {
    if (g == 0 || g > h || h % g != 0) {
        std::ostringstream msg;
        msg << "groups must divide heads: " << g << " does not divide " << h;
        throw std::invalid_argument(msg.str());
    }
}

// Eigen-basis of a Gram matrix with a PSD sanity check.
GroupProjection gram_basis(const Matrix& gram, std::size_t rank,
                           const char* what) {
    EigenDecomposition eig = sym_eig(gram);
    double tr = trace(gram);
    if (!eig.eigenvalues.empty() &&
        eig.eigenvalues.back() < -1e-8 * std::max(tr, 0.0)) {
        std::ostringstream msg;
        msg << what << " Gram is not positive semi-definite: min eigenvalue "
            << eig.eigenvalues.back() << ", trace " << tr;
        throw NumericalError(msg.str());
    }
    GroupProjection gp;
    gp.proj = rank_k_projection(eig, rank);
    gp.spectrum = std::move(eig.eigenvalues);
    return gp;
}

// Fuses per-group value bases: w_v shrinks to g heads, each query head's
// w_o row block is premultiplied by its d_h x d_h slice of the group basis.
void fuse_values(const ModelConfig& cfg, const LayerProjections& lp,
                 LayerWeights& lw) {
    const std::size_t dh = cfg.head_dim;
    const std::size_t t = cfg.n_heads / lp.value.size();
    const std::size_t g = lp.value.size();

    Matrix new_wv(cfg.d_model, g * dh);
    for (std::size_t i = 0; i < g; ++i) {
        Matrix group = slice_cols(lw.w_v, i * t * dh, (i + 1) * t * dh);
        Matrix fused = matmul_abt(group, lp.value[i].proj.basis); // d x dh
        for (std::size_t r = 0; r < fused.rows; ++r) {
            for (std::size_t c = 0; c < dh; ++c) {
                new_wv.at(r, i * dh + c) = fused.at(r, c);
            }
        }
    }
    lw.w_v = std::move(new_wv);

    Matrix new_wo(lw.w_o.rows, lw.w_o.cols);
    for (std::size_t j = 0; j < cfg.n_heads; ++j) {
        std::size_t p = j / t;
        std::size_t q = j - t * p;
        Matrix block =
            slice_cols(lp.value[p].proj.basis, q * dh, (q + 1) * dh); // dh x dh
        Matrix head = slice_rows(lw.w_o, j * dh, (j + 1) * dh);      // dh x d
        Matrix fused = matmul(block, head);
        for (std::size_t r = 0; r < dh; ++r) {
            for (std::size_t c = 0; c < fused.cols; ++c) {
                new_wo.at(j * dh + r, c) = fused.at(r, c);
            }
        }
    }
    lw.w_o = std::move(new_wo);
}

// Fuses per-group key bases into w_k and w_q (legal only without RoPE).
void fuse_keys(const ModelConfig& cfg, const LayerProjections& lp,
               LayerWeights& lw) {
    const std::size_t dh = cfg.head_dim;
    const std::size_t g = lp.key.size();
    const std::size_t t = cfg.n_heads / g;

    Matrix new_wk(cfg.d_model, g * dh);
    for (std::size_t i = 0; i < g; ++i) {
        Matrix group = slice_cols(lw.w_k, i * t * dh, (i + 1) * t * dh);
        Matrix fused = matmul_abt(group, lp.key[i].proj.basis);
        for (std::size_t r = 0; r < fused.rows; ++r) {
            for (std::size_t c = 0; c < dh; ++c) {
                new_wk.at(r, i * dh + c) = fused.at(r, c);
            }
        }
    }
    lw.w_k = std::move(new_wk);

    Matrix new_wq(lw.w_q.rows, lw.w_q.cols);
    for (std::size_t j = 0; j < cfg.n_heads; ++j) {
        std::size_t p = j / t;
        std::size_t q = j - t * p;
        Matrix block = slice_cols(lp.key[p].proj.basis, q * dh, (q + 1) * dh);
        Matrix head = slice_cols(lw.w_q, j * dh, (j + 1) * dh); // d x dh
        Matrix fused = matmul_abt(head, block);                 // d x dh
        for (std::size_t r = 0; r < fused.rows; ++r) {
            for (std::size_t c = 0; c < dh; ++c) {
                new_wq.at(r, j * dh + c) = fused.at(r, c);
            }
        }
    }
    lw.w_q = std::move(new_wq);
}

// key_proj for projected_key mode: the whole-layer basis directly, or
// per-group bases placed block-diagonally.
Matrix assemble_key_proj(const ModelConfig& cfg, const LayerProjections& lp,
                         bool whole, std::size_t g) {
    const std::size_t dh = cfg.head_dim;
    const std::size_t full = cfg.n_heads * dh;
    if (whole) {
        return lp.key[0].proj.basis; // (g*dh) x full
    }
    const std::size_t t = cfg.n_heads / g;
    Matrix kp = Matrix::zeros(g * dh, full);
    for (std::size_t i = 0; i < g; ++i) {
        const Matrix& basis = lp.key[i].proj.basis; // dh x t*dh
        for (std::size_t r = 0; r < dh; ++r) {
            for (std::size_t c = 0; c < t * dh; ++c) {
                kp.at(i * dh + r, i * t * dh + c) = basis.at(r, c);
            }
        }
    }
    return kp;
}

void round_checkpoint(Checkpoint& ckpt) {
    f32_round_inplace(ckpt.embedding);
    f32_round_inplace(ckpt.final_norm);
    for (LayerWeights& lw : ckpt.layers) {
        f32_round_inplace(lw.w_q);
        f32_round_inplace(lw.w_k);
        f32_round_inplace(lw.w_v);
        f32_round_inplace(lw.w_o);
        if (lw.key_proj.data.size() != 0) {
            f32_round_inplace(lw.key_proj);
        }
        f32_round_inplace(lw.attn_norm);
        f32_round_inplace(lw.mlp_w1);
        f32_round_inplace(lw.mlp_w2);
        f32_round_inplace(lw.mlp_norm);
    }
}

Checkpoint apply_projections(const Checkpoint& src, const ProjectionSet& ps,
                             const CompressionPlan& plan) {
    Checkpoint out = src;
    const ModelConfig& cfg = src.config;
    for (std::size_t l = 0; l < out.layers.size(); ++l) {
        const LayerProjections& lp = ps.layers[l];
        LayerWeights& lw = out.layers[l];
        fuse_values(cfg, lp, lw);
        if (plan.rope_mode == RopeMode::projected_key) {
            lw.key_proj = assemble_key_proj(cfg, lp, ps.key_whole, plan.groups);
        } else {
            fuse_keys(cfg, lp, lw);
        }
    }
    out.config.n_kv_heads = plan.groups;
    out.config.attention_kind = plan.rope_mode == RopeMode::projected_key
                                    ? AttentionKind::projected_key
                                    : AttentionKind::standard;
    round_checkpoint(out);
    out.validate();
    return out;
}

} // namespace

std::string to_string(Strategy s) {
    switch (s) {
    case Strategy::mean_pool: return "mean-pool";
    case Strategy::svd_w: return "svd-w";
    case Strategy::svd_a: return "svd-a";
    }
    throw std::invalid_argument("unknown strategy value");
}

std::string to_string(RopeMode m) {
    switch (m) {
    case RopeMode::fused: return "fused";
    case RopeMode::projected_key: return "projected-key";
    }
    throw std::invalid_argument("unknown rope mode value");
}

std::string to_string(KeyGramScope s) {
    switch (s) {
    case KeyGramScope::whole: return "whole";
    case KeyGramScope::grouped: return "grouped";
    }
    throw std::invalid_argument("unknown key gram scope value");
}

Strategy strategy_from_string(const std::string& s) {
    if (s == "mean-pool") return Strategy::mean_pool;
    if (s == "svd-w") return Strategy::svd_w;
    if (s == "svd-a") return Strategy::svd_a;
    throw std::invalid_argument(
        "strategy must be mean-pool, svd-w or svd-a, got: " + s);
}

RopeMode rope_mode_from_string(const std::string& s) {
    if (s == "fused") return RopeMode::fused;
    if (s == "projected-key") return RopeMode::projected_key;
    throw std::invalid_argument(
        "rope mode must be fused or projected-key, got: " + s);
}

KeyGramScope key_gram_scope_from_string(const std::string& s) {
    if (s == "whole") return KeyGramScope::whole;
    if (s == "grouped") return KeyGramScope::grouped;
    throw std::invalid_argument(
        "key gram scope must be whole or grouped, got: " + s);
}

void CompressionPlan::validate(const ModelConfig& src) const {
    require_mha(src);
    require_divides(groups, src.n_heads);
    const bool rope = src.pos_encoding == PosEncoding::rope;
    if (rope_mode == RopeMode::projected_key) {
        if (!rope) {
            throw std::invalid_argument(
                "projected-key mode requires a rotary model");
        }
        if (strategy == Strategy::mean_pool) {
            throw std::invalid_argument(
                "mean-pool averages weights directly and has no projected-key form");
        }
    } else if (rope && strategy != Strategy::mean_pool) {
        throw std::invalid_argument(
            "fused key compression is invalid under RoPE (the rotation sits "
            "between W_K and W_Q); use --rope-mode projected-key");
    }
}

double compression_ratio(std::size_t h, std::size_t g) {
    require_divides(g, h);
    return 1.0 - static_cast<double>(g) / static_cast<double>(h);
}

ProjectionSet build_projections(const Checkpoint& ckpt, const GramSet& grams,
                                const CompressionPlan& plan) {
    const ModelConfig& cfg = ckpt.config;
    plan.validate(cfg);
    grams.require_matches(ckpt);
    if (grams.groups != plan.groups) {
        std::ostringstream msg;
        msg << "gram set was collected for " << grams.groups
            << " groups, plan wants " << plan.groups;
        throw std::invalid_argument(msg.str());
    }
    const std::size_t dh = cfg.head_dim;
    const bool projected = plan.rope_mode == RopeMode::projected_key;

    ProjectionSet ps;
    ps.config_hash = grams.config_hash;
    ps.groups = plan.groups;
    ps.key_whole = projected && plan.key_scope == KeyGramScope::whole;
    ps.key_post_rope = projected;
    ps.layers.resize(grams.layers.size());
    for (std::size_t l = 0; l < grams.layers.size(); ++l) {
        const LayerGrams& lg = grams.layers[l];
        LayerProjections& lp = ps.layers[l];
        if (ps.key_whole) {
            if (!lg.whole_key.has_value()) {
                throw std::invalid_argument(
                    "gram set lacks the whole-layer key Gram needed for "
                    "whole-scope projected keys");
            }
            lp.key.push_back(gram_basis(lg.whole_key->to_matrix(),
                                        plan.groups * dh, "whole key"));
        } else if (projected) {
            if (lg.key_post.empty()) {
                throw std::invalid_argument(
                    "gram set lacks post-rotation key Grams needed for "
                    "grouped projected keys");
            }
            for (const GramAccumulator& acc : lg.key_post) {
                lp.key.push_back(gram_basis(acc.to_matrix(), dh, "key"));
            }
        } else {
            if (lg.key_pre.empty()) {
                throw std::invalid_argument(
                    "gram set lacks pre-rotation key Grams needed for fusion");
            }
            for (const GramAccumulator& acc : lg.key_pre) {
                lp.key.push_back(gram_basis(acc.to_matrix(), dh, "key"));
            }
        }
        for (const GramAccumulator& acc : lg.value) {
            lp.value.push_back(gram_basis(acc.to_matrix(), dh, "value"));
        }
    }
    return ps;
}

ProjectionSet build_weight_projections(const Checkpoint& ckpt,
                                       const CompressionPlan& plan) {
    const ModelConfig& cfg = ckpt.config;
    plan.validate(cfg);
    const std::size_t dh = cfg.head_dim;
    const std::size_t g = plan.groups;
    const std::size_t t = cfg.n_heads / g;
    const bool projected = plan.rope_mode == RopeMode::projected_key;

    ProjectionSet ps;
    ps.config_hash = checkpoint_hash(ckpt);
    ps.groups = g;
    ps.key_whole = projected && plan.key_scope == KeyGramScope::whole;
    // Weight SVD sees keys before any rotation.
    ps.key_post_rope = false;
    ps.layers.resize(ckpt.layers.size());
    for (std::size_t l = 0; l < ckpt.layers.size(); ++l) {
        const LayerWeights& lw = ckpt.layers[l];
        LayerProjections& lp = ps.layers[l];
        if (ps.key_whole) {
            Matrix gram = matmul_atb(lw.w_k, lw.w_k);
            lp.key.push_back(gram_basis(gram, g * dh, "whole key weight"));
        } else {
            for (std::size_t i = 0; i < g; ++i) {
                Matrix group = slice_cols(lw.w_k, i * t * dh, (i + 1) * t * dh);
                Matrix gram = matmul_atb(group, group);
                lp.key.push_back(gram_basis(gram, dh, "key weight"));
            }
        }
        for (std::size_t i = 0; i < g; ++i) {
            Matrix group = slice_cols(lw.w_v, i * t * dh, (i + 1) * t * dh);
            Matrix gram = matmul_atb(group, group);
            lp.value.push_back(gram_basis(gram, dh, "value weight"));
        }
    }
    return ps;
}

Checkpoint mean_pool_compress(const Checkpoint& ckpt, std::size_t g) {
    const ModelConfig& cfg = ckpt.config;
    require_mha(cfg);
    require_divides(g, cfg.n_heads);
    const std::size_t dh = cfg.head_dim;
    const std::size_t t = cfg.n_heads / g;

    Checkpoint out = ckpt;
    for (LayerWeights& lw : out.layers) {
        Matrix new_wk(cfg.d_model, g * dh);
        Matrix new_wv(cfg.d_model, g * dh);
        for (std::size_t i = 0; i < g; ++i) {
            for (std::size_t r = 0; r < cfg.d_model; ++r) {
                for (std::size_t c = 0; c < dh; ++c) {
                    double sk = 0.0;
                    double sv = 0.0;
                    for (std::size_t m = 0; m < t; ++m) {
                        sk += lw.w_k.at(r, (i * t + m) * dh + c);
                        sv += lw.w_v.at(r, (i * t + m) * dh + c);
                    }
                    new_wk.at(r, i * dh + c) = sk / static_cast<double>(t);
                    new_wv.at(r, i * dh + c) = sv / static_cast<double>(t);
                }
            }
        }
        lw.w_k = std::move(new_wk);
        lw.w_v = std::move(new_wv);
    }
    out.config.n_kv_heads = g;
    round_checkpoint(out);
    out.validate();
    return out;
}

Checkpoint svd_w_compress(const Checkpoint& ckpt, std::size_t g,
                          KeyGramScope scope) {
    CompressionPlan plan;
    plan.strategy = Strategy::svd_w;
    plan.groups = g;
    plan.rope_mode = ckpt.config.pos_encoding == PosEncoding::rope
                         ? RopeMode::projected_key
                         : RopeMode::fused;
    plan.key_scope = scope;
    ProjectionSet ps = build_weight_projections(ckpt, plan);
    return apply_projections(ckpt, ps, plan);
}

Checkpoint svd_a_compress(const Checkpoint& ckpt, const GramSet& grams,
                          const CompressionPlan& plan) {
    ProjectionSet ps = build_projections(ckpt, grams, plan);
    return apply_projections(ckpt, ps, plan);
}

Checkpoint compress_checkpoint(const Checkpoint& ckpt,
                               const CompressionPlan& plan,
                               const GramSet* grams) {
    plan.validate(ckpt.config);
    switch (plan.strategy) {
    case Strategy::mean_pool:
        return mean_pool_compress(ckpt, plan.groups);
    case Strategy::svd_w:
        return svd_w_compress(ckpt, plan.groups, plan.key_scope);
    case Strategy::svd_a:
        if (grams == nullptr) {
            throw std::invalid_argument(
                "svd-a compression needs calibration grams (--grams)");
        }
        return svd_a_compress(ckpt, *grams, plan);
    }
    throw std::invalid_argument("unknown strategy value");
}

} // namespace kvshrink
