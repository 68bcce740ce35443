#include "kvshrink/model.hpp"

#include "kvshrink/errors.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace kvshrink {

namespace {

constexpr double kNormEps = 1e-6;

void check_tokens(const ModelConfig& cfg, const std::vector<int>& tokens) {
    if (tokens.empty()) {
        throw std::invalid_argument("forward: empty token sequence");
    }
    if (tokens.size() > cfg.max_seq_len) {
        std::ostringstream msg;
        msg << "forward: sequence length " << tokens.size()
            << " exceeds max_seq_len " << cfg.max_seq_len;
        throw std::invalid_argument(msg.str());
    }
    for (int t : tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size) {
            std::ostringstream msg;
            msg << "invalid token id " << t << " for vocab_size "
                << cfg.vocab_size;
            throw std::invalid_argument(msg.str());
        }
    }
}

void check_token(const ModelConfig& cfg, int token) {
    if (token < 0 || static_cast<std::size_t>(token) >= cfg.vocab_size) {
        std::ostringstream msg;
        msg << "invalid token id " << token << " for vocab_size "
            << cfg.vocab_size;
        throw std::invalid_argument(msg.str());
    }
}

// Rotates every head_dim-wide block of each row by that row's position.
void rope_rows(Matrix& m, std::size_t head_dim, double theta,
               std::size_t first_position) {
    for (std::size_t i = 0; i < m.rows; ++i) {
        auto row = m.row(i);
        for (std::size_t off = 0; off + head_dim <= m.cols; off += head_dim) {
            apply_rope_inplace(row.subspan(off, head_dim), first_position + i,
                               theta);
        }
    }
}

} // namespace

void rmsnorm(std::span<const double> x, std::span<const double> gain,
             std::span<double> out) {
    double ms = 0.0;
    for (double v : x) {
        ms += v * v;
    }
    ms = ms / static_cast<double>(x.size()) + kNormEps;
    double inv = 1.0 / std::sqrt(ms);
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = x[i] * inv * gain[i];
    }
}

double gelu(double x) {
    return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
}

void softmax_inplace(std::span<double> row) {
    double m = row[0];
    for (double v : row) {
        m = std::max(m, v);
    }
    double sum = 0.0;
    for (double& v : row) {
        v = std::exp(v - m);
        sum += v;
    }
    for (double& v : row) {
        v /= sum;
    }
}

std::vector<double> apply_rope(std::span<const double> v, std::size_t position,
                               double theta) {
    std::vector<double> out(v.begin(), v.end());
    apply_rope_inplace(out, position, theta);
    return out;
}

void apply_rope_inplace(std::span<double> v, std::size_t position,
                        double theta) {
    if (v.size() % 2 != 0) {
        throw std::invalid_argument("apply_rope: width must be even");
    }
    double w = static_cast<double>(v.size());
    for (std::size_t j = 0; 2 * j < v.size(); ++j) {
        double freq = std::pow(theta, -2.0 * static_cast<double>(j) / w);
        double angle = static_cast<double>(position) * freq;
        double c = std::cos(angle);
        double s = std::sin(angle);
        double a = v[2 * j];
        double b = v[2 * j + 1];
        v[2 * j] = a * c - b * s;
        v[2 * j + 1] = a * s + b * c;
    }
}

double alibi_slope(std::size_t head, std::size_t n_heads) {
    return std::pow(2.0, -8.0 * static_cast<double>(head + 1) /
                             static_cast<double>(n_heads));
}

double alibi_bias(std::size_t head, std::size_t n_heads,
                  std::size_t query_pos, std::size_t key_pos) {
    return -alibi_slope(head, n_heads) *
           (static_cast<double>(query_pos) - static_cast<double>(key_pos));
}

std::vector<double> attention_scores(std::span<const double> q_head,
                                     const Matrix& keys,
                                     const ModelConfig& cfg,
                                     const Matrix& key_proj,
                                     std::size_t head) {
    const std::size_t dh = cfg.head_dim;
    if (head >= cfg.n_heads) {
        throw std::invalid_argument("attention_scores: head out of range");
    }
    if (q_head.size() != dh) {
        throw std::invalid_argument("attention_scores: query width != head_dim");
    }
    if (keys.cols != cfg.kv_width()) {
        throw std::invalid_argument(
            "attention_scores: key rows must have width n_kv_heads * head_dim");
    }
    double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<double> scores(keys.rows);

    if (cfg.attention_kind == AttentionKind::standard) {
        std::size_t group = head / cfg.group_size();
        std::size_t off = group * dh;
        for (std::size_t t = 0; t < keys.rows; ++t) {
            scores[t] = dot(q_head, keys.row(t).subspan(off, dh)) * scale;
        }
        return scores;
    }

    // projected_key: lift the query through the head's column block of
    // key_proj, equivalent to embedding q in its head slot of the full
    // key width and applying the whole projection.
    if (key_proj.rows != cfg.kv_width() ||
        key_proj.cols != cfg.n_heads * cfg.head_dim) {
        throw std::invalid_argument("attention_scores: key_proj shape mismatch");
    }
    std::vector<double> lifted(key_proj.rows);
    for (std::size_t r = 0; r < key_proj.rows; ++r) {
        lifted[r] = dot(q_head, key_proj.row(r).subspan(head * dh, dh));
    }
    for (std::size_t t = 0; t < keys.rows; ++t) {
        scores[t] = dot(lifted, keys.row(t)) * scale;
    }
    return scores;
}

ForwardResult forward(const Checkpoint& ckpt, const std::vector<int>& tokens,
                      const ActivationTap& tap) {
    const ModelConfig& cfg = ckpt.config;
    check_tokens(cfg, tokens);
    const std::size_t S = tokens.size();
    const std::size_t d = cfg.d_model;
    const std::size_t dh = cfg.head_dim;
    const std::size_t h = cfg.n_heads;
    const std::size_t t_group = cfg.group_size();
    const bool rope = cfg.pos_encoding == PosEncoding::rope;
    const bool alibi = cfg.pos_encoding == PosEncoding::alibi;
    const bool projected = cfg.attention_kind == AttentionKind::projected_key;

    Matrix x(S, d);
    for (std::size_t i = 0; i < S; ++i) {
        auto src = ckpt.embedding.row(static_cast<std::size_t>(tokens[i]));
        std::copy(src.begin(), src.end(), x.row(i).begin());
    }

    KVCache cache(cfg);
    // The cache wants rows token-major (all layers of token t before
    // token t+1); this pass runs layer-major, so rows are staged here
    // and appended once every layer has produced them.
    std::vector<Matrix> k_staged(cfg.n_layers);
    std::vector<Matrix> v_staged(cfg.n_layers);
    Matrix normed(S, d);

    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& lw = ckpt.layers[l];
        for (std::size_t i = 0; i < S; ++i) {
            rmsnorm(x.row(i), lw.attn_norm, normed.row(i));
        }
        Matrix q = matmul(normed, lw.w_q);      // S x h*dh
        Matrix k_pre = matmul(normed, lw.w_k);  // S x key_width
        Matrix v = matmul(normed, lw.w_v);      // S x g*dh

        Matrix k_post = k_pre;
        if (rope) {
            rope_rows(q, dh, cfg.rope_theta, 0);
            rope_rows(k_post, dh, cfg.rope_theta, 0);
        }
        if (tap) {
            tap(l, k_pre, k_post, v);
        }

        // Cache rows exactly as decode would store them.
        Matrix k_cache_stored = projected ? matmul_abt(k_post, lw.key_proj)
                                          : k_post;
        k_staged[l] = k_cache_stored;
        v_staged[l] = v;

        // Attention per query head over the double-precision activations.
        Matrix attn(S, h * dh);
        std::vector<double> scores(S);
        std::vector<double> lifted(projected ? cfg.kv_width() : 0);
        for (std::size_t j = 0; j < h; ++j) {
            std::size_t group = j / t_group;
            std::size_t k_off = group * dh;
            double scale = 1.0 / std::sqrt(static_cast<double>(dh));
            for (std::size_t i = 0; i < S; ++i) {
                auto q_j = q.row(i).subspan(j * dh, dh);
                if (projected) {
                    for (std::size_t r = 0; r < lifted.size(); ++r) {
                        lifted[r] =
                            dot(q_j, lw.key_proj.row(r).subspan(j * dh, dh));
                    }
                    for (std::size_t p = 0; p <= i; ++p) {
                        scores[p] = dot(lifted, k_cache_stored.row(p)) * scale;
                    }
                } else {
                    for (std::size_t p = 0; p <= i; ++p) {
                        scores[p] =
                            dot(q_j, k_post.row(p).subspan(k_off, dh)) * scale;
                    }
                }
                if (alibi) {
                    for (std::size_t p = 0; p <= i; ++p) {
                        scores[p] += alibi_bias(j, h, i, p);
                    }
                }
                std::span<double> active(scores.data(), i + 1);
                softmax_inplace(active);
                auto out_j = attn.row(i).subspan(j * dh, dh);
                std::fill(out_j.begin(), out_j.end(), 0.0);
                for (std::size_t p = 0; p <= i; ++p) {
                    auto v_p = v.row(p).subspan(k_off, dh);
                    for (std::size_t c = 0; c < dh; ++c) {
                        out_j[c] += active[p] * v_p[c];
                    }
                }
            }
        }
        Matrix attn_out = matmul(attn, lw.w_o); // S x d
        for (std::size_t i = 0; i < x.data.size(); ++i) {
            x.data[i] += attn_out.data[i];
        }

        for (std::size_t i = 0; i < S; ++i) {
            rmsnorm(x.row(i), lw.mlp_norm, normed.row(i));
        }
        Matrix h1 = matmul(normed, lw.mlp_w1); // S x d_ff
        for (double& val : h1.data) {
            val = gelu(val);
        }
        Matrix h2 = matmul(h1, lw.mlp_w2); // S x d
        for (std::size_t i = 0; i < x.data.size(); ++i) {
            x.data[i] += h2.data[i];
        }
    }

    for (std::size_t i = 0; i < S; ++i) {
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            cache.append(l, k_staged[l].row(i), v_staged[l].row(i));
        }
    }

    Matrix final(S, d);
    for (std::size_t i = 0; i < S; ++i) {
        rmsnorm(x.row(i), ckpt.final_norm, final.row(i));
    }
    ForwardResult result;
    result.logits = matmul_abt(final, ckpt.embedding); // S x vocab
    result.cache = std::move(cache);
    return result;
}

std::vector<double> decode_step(const Checkpoint& ckpt, KVCache& cache,
                                int token) {
    const ModelConfig& cfg = ckpt.config;
    check_token(cfg, token);
    const std::size_t d = cfg.d_model;
    const std::size_t dh = cfg.head_dim;
    const std::size_t h = cfg.n_heads;
    const std::size_t t_group = cfg.group_size();
    const bool rope = cfg.pos_encoding == PosEncoding::rope;
    const bool alibi = cfg.pos_encoding == PosEncoding::alibi;
    const bool projected = cfg.attention_kind == AttentionKind::projected_key;
    const std::size_t pos = cache.current_len();
    if (cache.full()) {
        std::ostringstream msg;
        msg << "KV cache full: max_seq_len " << cache.max_len() << " reached";
        throw CapacityError(msg.str());
    }

    std::vector<double> x(d);
    {
        auto src = ckpt.embedding.row(static_cast<std::size_t>(token));
        std::copy(src.begin(), src.end(), x.begin());
    }

    std::vector<double> normed(d);
    std::vector<double> q(h * dh);
    std::vector<double> attn(h * dh);
    std::vector<double> attn_out(d);

    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& lw = ckpt.layers[l];
        rmsnorm(x, lw.attn_norm, normed);
        row_times_matrix(normed, lw.w_q, q);
        std::vector<double> k(lw.w_k.cols);
        std::vector<double> v(lw.w_v.cols);
        row_times_matrix(normed, lw.w_k, k);
        row_times_matrix(normed, lw.w_v, v);
        if (rope) {
            for (std::size_t off = 0; off + dh <= q.size(); off += dh) {
                apply_rope_inplace(std::span<double>(q).subspan(off, dh), pos,
                                   cfg.rope_theta);
            }
            for (std::size_t off = 0; off + dh <= k.size(); off += dh) {
                apply_rope_inplace(std::span<double>(k).subspan(off, dh), pos,
                                   cfg.rope_theta);
            }
        }
        if (projected) {
            std::vector<double> k_proj(cfg.kv_width());
            row_times_matrix_t(k, lw.key_proj, k_proj);
            cache.append(l, k_proj, v);
        } else {
            cache.append(l, k, v);
        }

        // Score against the cache as stored (float32 history).
        Matrix keys = cache.keys(l);
        Matrix values = cache.values(l);
        for (std::size_t j = 0; j < h; ++j) {
            auto q_j = std::span<const double>(q).subspan(j * dh, dh);
            std::vector<double> scores =
                attention_scores(q_j, keys, cfg, lw.key_proj, j);
            if (alibi) {
                for (std::size_t p = 0; p < scores.size(); ++p) {
                    scores[p] += alibi_bias(j, h, pos, p);
                }
            }
            softmax_inplace(scores);
            std::size_t group = j / t_group;
            auto out_j = std::span<double>(attn).subspan(j * dh, dh);
            std::fill(out_j.begin(), out_j.end(), 0.0);
            for (std::size_t p = 0; p < scores.size(); ++p) {
                auto v_p = values.row(p).subspan(group * dh, dh);
                for (std::size_t c = 0; c < dh; ++c) {
                    out_j[c] += scores[p] * v_p[c];
                }
            }
        }
        row_times_matrix(attn, lw.w_o, attn_out);
        for (std::size_t i = 0; i < d; ++i) {
            x[i] += attn_out[i];
        }

        rmsnorm(x, lw.mlp_norm, normed);
        std::vector<double> h1(cfg.d_ff);
        row_times_matrix(normed, lw.mlp_w1, h1);
        for (double& val : h1) {
            val = gelu(val);
        }
        std::vector<double> h2(d);
        row_times_matrix(h1, lw.mlp_w2, h2);
        for (std::size_t i = 0; i < d; ++i) {
            x[i] += h2[i];
        }
    }

    std::vector<double> final(d);
    rmsnorm(x, ckpt.final_norm, final);
    std::vector<double> logits(cfg.vocab_size);
    row_times_matrix_t(final, ckpt.embedding, logits);
    return logits;
}

std::vector<int> greedy_generate(const Checkpoint& ckpt,
                                 const std::vector<int>& prompt,
                                 std::size_t n_new) {
    ForwardResult pre = forward(ckpt, prompt);
    std::vector<int> out = prompt;
    KVCache cache = std::move(pre.cache);
    std::span<const double> last =
        std::span<const double>(pre.logits.data)
            .subspan((pre.logits.rows - 1) * pre.logits.cols,
                     pre.logits.cols);
    std::vector<double> logits(last.begin(), last.end());
    for (std::size_t n = 0; n < n_new; ++n) {
        int next = static_cast<int>(std::distance(
            logits.begin(), std::max_element(logits.begin(), logits.end())));
        out.push_back(next);
        if (n + 1 == n_new) {
            break;
        }
        logits = decode_step(ckpt, cache, next);
    }
    return out;
}

} // namespace kvshrink
