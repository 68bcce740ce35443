#include "kvshrink/train.hpp"

#include "kvshrink/errors.hpp"
#include "kvshrink/threading.hpp"
#include "kvshrink/tokenizer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

namespace kvshrink {

namespace {

constexpr double kNormEps = 1e-6; // must match the inference implementation

double gelu_fwd(double x) {
    return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
}

double gelu_prime(double x) {
    double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
    double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
}

void rope_rows_fwd(Matrix& m, std::size_t head_dim, double theta) {
    for (std::size_t i = 0; i < m.rows; ++i) {
        auto row = m.row(i);
        double w = static_cast<double>(head_dim);
        for (std::size_t off = 0; off + head_dim <= m.cols; off += head_dim) {
            for (std::size_t j = 0; 2 * j < head_dim; ++j) {
                double freq =
                    std::pow(theta, -2.0 * static_cast<double>(j) / w);
                double angle = static_cast<double>(i) * freq;
                double c = std::cos(angle);
                double s = std::sin(angle);
                double a = row[off + 2 * j];
                double b = row[off + 2 * j + 1];
                row[off + 2 * j] = a * c - b * s;
                row[off + 2 * j + 1] = a * s + b * c;
            }
        }
    }
}

// Gradient of a rotation is the inverse rotation.
void rope_rows_bwd(Matrix& m, std::size_t head_dim, double theta) {
    for (std::size_t i = 0; i < m.rows; ++i) {
        auto row = m.row(i);
        double w = static_cast<double>(head_dim);
        for (std::size_t off = 0; off + head_dim <= m.cols; off += head_dim) {
            for (std::size_t j = 0; 2 * j < head_dim; ++j) {
                double freq =
                    std::pow(theta, -2.0 * static_cast<double>(j) / w);
                double angle = static_cast<double>(i) * freq;
                double c = std::cos(angle);
                double s = std::sin(angle);
                double a = row[off + 2 * j];
                double b = row[off + 2 * j + 1];
                row[off + 2 * j] = a * c + b * s;
                row[off + 2 * j + 1] = -a * s + b * c;
            }
        }
    }
}

void rmsnorm_rows(const Matrix& x, const std::vector<double>& gain, Matrix& out,
                  std::vector<double>& inv) {
    inv.resize(x.rows);
    for (std::size_t i = 0; i < x.rows; ++i) {
        auto xr = x.row(i);
        double ms = 0.0;
        for (double v : xr) {
            ms += v * v;
        }
        ms = ms / static_cast<double>(x.cols) + kNormEps;
        inv[i] = 1.0 / std::sqrt(ms);
        auto or_ = out.row(i);
        for (std::size_t j = 0; j < x.cols; ++j) {
            or_[j] = xr[j] * inv[i] * gain[j];
        }
    }
}

// dx = dn/r - x (dn.x) / (d r^3) with dn = dy * gain; accumulates dgain.
void rmsnorm_rows_bwd(const Matrix& x, const std::vector<double>& inv,
                      const std::vector<double>& gain, const Matrix& dy,
                      Matrix& dx, std::vector<double>& dgain) {
    const std::size_t d = x.cols;
    for (std::size_t i = 0; i < x.rows; ++i) {
        auto xr = x.row(i);
        auto dyr = dy.row(i);
        auto dxr = dx.row(i);
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            double dn = dyr[j] * gain[j];
            s += dn * xr[j];
            dgain[j] += dyr[j] * xr[j] * inv[i];
        }
        double inv3 = inv[i] * inv[i] * inv[i];
        double coeff = s * inv3 / static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
            double dn = dyr[j] * gain[j];
            dxr[j] = dn * inv[i] - xr[j] * coeff;
        }
    }
}

double alibi_slope_local(std::size_t head, std::size_t n_heads) {
    return std::pow(2.0, -8.0 * static_cast<double>(head + 1) /
                             static_cast<double>(n_heads));
}

struct LayerTape {
    Matrix a_in, n1;
    std::vector<double> inv1;
    Matrix q, k, v;           // post-rotation
    Matrix kc;                // projected keys in the cache basis
    std::vector<Matrix> attw; // per head, S x S lower-triangular weights
    std::vector<Matrix> qt;   // per head, S x kv_width lifted queries
    Matrix concat, m_in, n2;
    std::vector<double> inv2;
    Matrix u, gu;
};

// Forward with saved intermediates, then reverse-mode gradients for one
// window. Returns (sum of cross-entropies, count of unmasked targets);
// gradients are accumulated unnormalized (caller divides by the batch
// total so the result is the gradient of the mean).
std::pair<double, std::size_t> sequence_grads(const Checkpoint& ckpt,
                                              const std::vector<int>& window,
                                              Gradients& grads) {
    const ModelConfig& cfg = ckpt.config;
    if (window.size() < 2) {
        throw std::invalid_argument("training window needs >= 2 tokens");
    }
    const std::size_t S = window.size() - 1;
    if (S > cfg.max_seq_len) {
        throw std::invalid_argument("training window exceeds max_seq_len");
    }
    for (int t : window) {
        if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size) {
            throw std::invalid_argument("training window has invalid token id");
        }
    }
    const std::size_t d = cfg.d_model;
    const std::size_t dh = cfg.head_dim;
    const std::size_t h = cfg.n_heads;
    const std::size_t t_group = cfg.group_size();
    const bool rope = cfg.pos_encoding == PosEncoding::rope;
    const bool alibi = cfg.pos_encoding == PosEncoding::alibi;
    const bool projected = cfg.attention_kind == AttentionKind::projected_key;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    // ---- forward ----
    Matrix x(S, d);
    for (std::size_t i = 0; i < S; ++i) {
        auto src = ckpt.embedding.row(static_cast<std::size_t>(window[i]));
        std::copy(src.begin(), src.end(), x.row(i).begin());
    }

    std::vector<LayerTape> tape(cfg.n_layers);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& lw = ckpt.layers[l];
        LayerTape& tp = tape[l];
        tp.a_in = x;
        tp.n1 = Matrix(S, d);
        rmsnorm_rows(tp.a_in, lw.attn_norm, tp.n1, tp.inv1);
        tp.q = matmul(tp.n1, lw.w_q);
        tp.k = matmul(tp.n1, lw.w_k);
        tp.v = matmul(tp.n1, lw.w_v);
        if (rope) {
            rope_rows_fwd(tp.q, dh, cfg.rope_theta);
            rope_rows_fwd(tp.k, dh, cfg.rope_theta);
        }
        if (projected) {
            tp.kc = matmul_abt(tp.k, lw.key_proj); // S x kv_width
        }
        tp.attw.assign(h, Matrix());
        if (projected) {
            tp.qt.assign(h, Matrix());
        }
        tp.concat = Matrix(S, h * dh);
        std::vector<double> scores(S);
        for (std::size_t j = 0; j < h; ++j) {
            std::size_t group = j / t_group;
            std::size_t off = group * dh;
            tp.attw[j] = Matrix::zeros(S, S);
            if (projected) {
                // lifted query per row: q_j B_j^T
                tp.qt[j] = Matrix(S, cfg.kv_width());
                for (std::size_t i = 0; i < S; ++i) {
                    auto q_j = tp.q.row(i).subspan(j * dh, dh);
                    auto out = tp.qt[j].row(i);
                    for (std::size_t r = 0; r < cfg.kv_width(); ++r) {
                        out[r] =
                            dot(q_j, lw.key_proj.row(r).subspan(j * dh, dh));
                    }
                }
            }
            for (std::size_t i = 0; i < S; ++i) {
                if (projected) {
                    auto qt = tp.qt[j].row(i);
                    for (std::size_t p = 0; p <= i; ++p) {
                        scores[p] = dot(qt, tp.kc.row(p)) * scale;
                    }
                } else {
                    auto q_j = tp.q.row(i).subspan(j * dh, dh);
                    for (std::size_t p = 0; p <= i; ++p) {
                        scores[p] =
                            dot(q_j, tp.k.row(p).subspan(off, dh)) * scale;
                    }
                }
                if (alibi) {
                    double slope = alibi_slope_local(j, h);
                    for (std::size_t p = 0; p <= i; ++p) {
                        scores[p] -= slope * static_cast<double>(i - p);
                    }
                }
                double m = scores[0];
                for (std::size_t p = 1; p <= i; ++p) {
                    m = std::max(m, scores[p]);
                }
                double sum = 0.0;
                for (std::size_t p = 0; p <= i; ++p) {
                    scores[p] = std::exp(scores[p] - m);
                    sum += scores[p];
                }
                auto wrow = tp.attw[j].row(i);
                for (std::size_t p = 0; p <= i; ++p) {
                    wrow[p] = scores[p] / sum;
                }
                auto out_j = tp.concat.row(i).subspan(j * dh, dh);
                std::fill(out_j.begin(), out_j.end(), 0.0);
                for (std::size_t p = 0; p <= i; ++p) {
                    auto v_p = tp.v.row(p).subspan(off, dh);
                    for (std::size_t c = 0; c < dh; ++c) {
                        out_j[c] += wrow[p] * v_p[c];
                    }
                }
            }
        }
        Matrix attn_out = matmul(tp.concat, lw.w_o);
        for (std::size_t i = 0; i < x.data.size(); ++i) {
            x.data[i] += attn_out.data[i];
        }
        tp.m_in = x;
        tp.n2 = Matrix(S, d);
        rmsnorm_rows(tp.m_in, lw.mlp_norm, tp.n2, tp.inv2);
        tp.u = matmul(tp.n2, lw.mlp_w1);
        tp.gu = tp.u;
        for (double& val : tp.gu.data) {
            val = gelu_fwd(val);
        }
        Matrix h2 = matmul(tp.gu, lw.mlp_w2);
        for (std::size_t i = 0; i < x.data.size(); ++i) {
            x.data[i] += h2.data[i];
        }
    }

    Matrix final_in = x;
    Matrix nf(S, d);
    std::vector<double> invf;
    rmsnorm_rows(final_in, ckpt.final_norm, nf, invf);
    Matrix logits = matmul_abt(nf, ckpt.embedding); // S x vocab

    // Cross-entropy via log-sum-exp; probs saved for the backward pass.
    Matrix dlogits = Matrix::zeros(S, cfg.vocab_size);
    double ce_sum = 0.0;
    std::size_t n_valid = 0;
    for (std::size_t i = 0; i < S; ++i) {
        int target = window[i + 1];
        if (target == kPadToken) {
            continue;
        }
        auto lr = logits.row(i);
        double m = lr[0];
        for (double v : lr) {
            m = std::max(m, v);
        }
        double sum = 0.0;
        for (double v : lr) {
            sum += std::exp(v - m);
        }
        double lse = m + std::log(sum);
        ce_sum += lse - lr[static_cast<std::size_t>(target)];
        ++n_valid;
        auto dr = dlogits.row(i);
        for (std::size_t j = 0; j < cfg.vocab_size; ++j) {
            dr[j] = std::exp(lr[j] - lse);
        }
        dr[static_cast<std::size_t>(target)] -= 1.0;
    }

    // ---- backward ----
    Matrix demb_out = matmul_atb(dlogits, nf); // vocab x d
    for (std::size_t i = 0; i < demb_out.data.size(); ++i) {
        grads.embedding.data[i] += demb_out.data[i];
    }
    Matrix dnf = matmul(dlogits, ckpt.embedding); // S x d
    Matrix dx(S, d);
    rmsnorm_rows_bwd(final_in, invf, ckpt.final_norm, dnf, dx,
                     grads.final_norm);

    for (std::size_t li = cfg.n_layers; li-- > 0;) {
        const LayerWeights& lw = ckpt.layers[li];
        LayerTape& tp = tape[li];
        LayerGrads& lg = grads.layers[li];

        // MLP block: x_out = m_in + gelu(n2 W1) W2
        Matrix dgu = matmul_abt(dx, lw.mlp_w2); // S x d_ff
        {
            Matrix dw2 = matmul_atb(tp.gu, dx);
            for (std::size_t i = 0; i < dw2.data.size(); ++i) {
                lg.mlp_w2.data[i] += dw2.data[i];
            }
        }
        Matrix du = dgu;
        for (std::size_t i = 0; i < du.data.size(); ++i) {
            du.data[i] *= gelu_prime(tp.u.data[i]);
        }
        {
            Matrix dw1 = matmul_atb(tp.n2, du);
            for (std::size_t i = 0; i < dw1.data.size(); ++i) {
                lg.mlp_w1.data[i] += dw1.data[i];
            }
        }
        Matrix dn2 = matmul_abt(du, lw.mlp_w1); // S x d
        Matrix dm(S, d);
        rmsnorm_rows_bwd(tp.m_in, tp.inv2, lw.mlp_norm, dn2, dm, lg.mlp_norm);
        for (std::size_t i = 0; i < dx.data.size(); ++i) {
            dx.data[i] += dm.data[i];
        }

        // Attention block: m_in = a_in + concat W_O
        Matrix dconcat = matmul_abt(dx, lw.w_o); // S x h*dh
        {
            Matrix dwo = matmul_atb(tp.concat, dx);
            for (std::size_t i = 0; i < dwo.data.size(); ++i) {
                lg.w_o.data[i] += dwo.data[i];
            }
        }
        Matrix dq = Matrix::zeros(S, h * dh);
        Matrix dk = Matrix::zeros(S, lw.w_k.cols);
        Matrix dv = Matrix::zeros(S, lw.w_v.cols);
        Matrix dkc = projected ? Matrix::zeros(S, cfg.kv_width()) : Matrix();
        std::vector<double> dw(S);
        std::vector<double> ds(S);
        for (std::size_t j = 0; j < h; ++j) {
            std::size_t group = j / t_group;
            std::size_t off = group * dh;
            for (std::size_t i = 0; i < S; ++i) {
                auto do_j = dconcat.row(i).subspan(j * dh, dh);
                auto wrow = tp.attw[j].row(i);
                // o = sum_p w_p v_p
                for (std::size_t p = 0; p <= i; ++p) {
                    auto v_p = tp.v.row(p).subspan(off, dh);
                    dw[p] = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) {
                        dw[p] += do_j[c] * v_p[c];
                    }
                    auto dv_p = dv.row(p).subspan(off, dh);
                    for (std::size_t c = 0; c < dh; ++c) {
                        dv_p[c] += wrow[p] * do_j[c];
                    }
                }
                // softmax: ds_p = w_p (dw_p - sum_q w_q dw_q)
                double mix = 0.0;
                for (std::size_t p = 0; p <= i; ++p) {
                    mix += wrow[p] * dw[p];
                }
                for (std::size_t p = 0; p <= i; ++p) {
                    ds[p] = wrow[p] * (dw[p] - mix);
                }
                if (projected) {
                    auto qt = tp.qt[j].row(i);
                    std::vector<double> dqt(cfg.kv_width(), 0.0);
                    for (std::size_t p = 0; p <= i; ++p) {
                        auto kc_p = tp.kc.row(p);
                        auto dkc_p = dkc.row(p);
                        double dsp = ds[p] * scale;
                        for (std::size_t r = 0; r < cfg.kv_width(); ++r) {
                            dqt[r] += dsp * kc_p[r];
                            dkc_p[r] += dsp * qt[r];
                        }
                    }
                    // qt = q_j B_j^T with B_j the head's column block
                    auto dq_j = dq.row(i).subspan(j * dh, dh);
                    for (std::size_t r = 0; r < cfg.kv_width(); ++r) {
                        auto b_r = lw.key_proj.row(r).subspan(j * dh, dh);
                        for (std::size_t c = 0; c < dh; ++c) {
                            dq_j[c] += dqt[r] * b_r[c];
                        }
                    }
                } else {
                    auto q_j = tp.q.row(i).subspan(j * dh, dh);
                    auto dq_j = dq.row(i).subspan(j * dh, dh);
                    for (std::size_t p = 0; p <= i; ++p) {
                        auto k_p = tp.k.row(p).subspan(off, dh);
                        auto dk_p = dk.row(p).subspan(off, dh);
                        double dsp = ds[p] * scale;
                        for (std::size_t c = 0; c < dh; ++c) {
                            dq_j[c] += dsp * k_p[c];
                            dk_p[c] += dsp * q_j[c];
                        }
                    }
                }
            }
        }
        if (projected) {
            // kc = k key_proj^T, so dk = dkc key_proj
            Matrix dk_full = matmul(dkc, lw.key_proj); // S x (h*dh)
            for (std::size_t i = 0; i < dk.data.size(); ++i) {
                dk.data[i] += dk_full.data[i];
            }
        }
        if (rope) {
            rope_rows_bwd(dq, dh, cfg.rope_theta);
            rope_rows_bwd(dk, dh, cfg.rope_theta);
        }
        {
            Matrix dwq = matmul_atb(tp.n1, dq);
            Matrix dwk = matmul_atb(tp.n1, dk);
            Matrix dwv = matmul_atb(tp.n1, dv);
            for (std::size_t i = 0; i < dwq.data.size(); ++i) {
                lg.w_q.data[i] += dwq.data[i];
            }
            for (std::size_t i = 0; i < dwk.data.size(); ++i) {
                lg.w_k.data[i] += dwk.data[i];
            }
            for (std::size_t i = 0; i < dwv.data.size(); ++i) {
                lg.w_v.data[i] += dwv.data[i];
            }
        }
        Matrix dn1 = matmul_abt(dq, lw.w_q);
        {
            Matrix dn1k = matmul_abt(dk, lw.w_k);
            Matrix dn1v = matmul_abt(dv, lw.w_v);
            for (std::size_t i = 0; i < dn1.data.size(); ++i) {
                dn1.data[i] += dn1k.data[i] + dn1v.data[i];
            }
        }
        Matrix da(S, d);
        rmsnorm_rows_bwd(tp.a_in, tp.inv1, lw.attn_norm, dn1, da,
                         lg.attn_norm);
        for (std::size_t i = 0; i < dx.data.size(); ++i) {
            dx.data[i] += da.data[i];
        }
    }

    for (std::size_t i = 0; i < S; ++i) {
        auto dst = std::span<double>(grads.embedding.data)
                       .subspan(static_cast<std::size_t>(window[i]) * d, d);
        auto src = dx.row(i);
        for (std::size_t c = 0; c < d; ++c) {
            dst[c] += src[c];
        }
    }
    return {ce_sum, n_valid};
}

} // namespace

void TrainConfig::validate() const {
    if (learning_rate <= 0.0 || batch_size == 0 || seq_len == 0) {
        throw std::invalid_argument(
            "learning_rate, batch_size and seq_len must be positive");
    }
    if (beta1 <= 0.0 || beta1 >= 1.0 || beta2 <= 0.0 || beta2 >= 1.0) {
        throw std::invalid_argument("adam betas must lie in (0, 1)");
    }
    if (adam_eps <= 0.0 || clip_norm <= 0.0) {
        throw std::invalid_argument("adam_eps and clip_norm must be positive");
    }
    if (weight_decay < 0.0) {
        throw std::invalid_argument("weight_decay must be non-negative");
    }
    if (threads == 0) {
        throw std::invalid_argument("threads must be >= 1");
    }
}

Gradients Gradients::zeros_like(const Checkpoint& ckpt) {
    Gradients g;
    g.embedding = Matrix::zeros(ckpt.embedding.rows, ckpt.embedding.cols);
    g.final_norm.assign(ckpt.final_norm.size(), 0.0);
    g.layers.resize(ckpt.layers.size());
    for (std::size_t l = 0; l < ckpt.layers.size(); ++l) {
        const LayerWeights& lw = ckpt.layers[l];
        LayerGrads& lg = g.layers[l];
        lg.w_q = Matrix::zeros(lw.w_q.rows, lw.w_q.cols);
        lg.w_k = Matrix::zeros(lw.w_k.rows, lw.w_k.cols);
        lg.w_v = Matrix::zeros(lw.w_v.rows, lw.w_v.cols);
        lg.w_o = Matrix::zeros(lw.w_o.rows, lw.w_o.cols);
        lg.attn_norm.assign(lw.attn_norm.size(), 0.0);
        lg.mlp_w1 = Matrix::zeros(lw.mlp_w1.rows, lw.mlp_w1.cols);
        lg.mlp_w2 = Matrix::zeros(lw.mlp_w2.rows, lw.mlp_w2.cols);
        lg.mlp_norm.assign(lw.mlp_norm.size(), 0.0);
    }
    return g;
}

namespace {

template <typename F>
void for_each_buffer(Gradients& g, F&& f) {
    f(g.embedding.data);
    for (LayerGrads& lg : g.layers) {
        f(lg.w_q.data);
        f(lg.w_k.data);
        f(lg.w_v.data);
        f(lg.w_o.data);
        f(lg.attn_norm);
        f(lg.mlp_w1.data);
        f(lg.mlp_w2.data);
        f(lg.mlp_norm);
    }
    f(g.final_norm);
}

template <typename F>
void for_each_buffer_pair(Gradients& a, const Gradients& b, F&& f) {
    f(a.embedding.data, b.embedding.data);
    for (std::size_t l = 0; l < a.layers.size(); ++l) {
        f(a.layers[l].w_q.data, b.layers[l].w_q.data);
        f(a.layers[l].w_k.data, b.layers[l].w_k.data);
        f(a.layers[l].w_v.data, b.layers[l].w_v.data);
        f(a.layers[l].w_o.data, b.layers[l].w_o.data);
        f(a.layers[l].attn_norm, b.layers[l].attn_norm);
        f(a.layers[l].mlp_w1.data, b.layers[l].mlp_w1.data);
        f(a.layers[l].mlp_w2.data, b.layers[l].mlp_w2.data);
        f(a.layers[l].mlp_norm, b.layers[l].mlp_norm);
    }
    f(a.final_norm, b.final_norm);
}

} // namespace

void Gradients::add(const Gradients& other) {
    for_each_buffer_pair(*this, other,
                         [](std::vector<double>& a, const std::vector<double>& b) {
                             for (std::size_t i = 0; i < a.size(); ++i) {
                                 a[i] += b[i];
                             }
                         });
}

void Gradients::scale(double factor) {
    for_each_buffer(*this, [factor](std::vector<double>& a) {
        for (double& v : a) {
            v *= factor;
        }
    });
}

double Gradients::global_norm() const {
    double sum = 0.0;
    for_each_buffer(const_cast<Gradients&>(*this),
                    [&sum](std::vector<double>& a) {
                        for (double v : a) {
                            sum += v * v;
                        }
                    });
    return std::sqrt(sum);
}

LossAndGrads loss_and_grads(const Checkpoint& ckpt,
                            const std::vector<std::vector<int>>& batch,
                            std::size_t threads) {
    if (batch.empty()) {
        throw std::invalid_argument("loss_and_grads: empty batch");
    }
    std::vector<Gradients> slots(batch.size());
    std::vector<double> ce(batch.size(), 0.0);
    std::vector<std::size_t> valid(batch.size(), 0);
    parallel_for(batch.size(), threads, [&](std::size_t i) {
        slots[i] = Gradients::zeros_like(ckpt);
        auto [c, n] = sequence_grads(ckpt, batch[i], slots[i]);
        ce[i] = c;
        valid[i] = n;
    });
    LossAndGrads out;
    out.grads = std::move(slots[0]);
    double ce_sum = ce[0];
    std::size_t n_total = valid[0];
    for (std::size_t i = 1; i < batch.size(); ++i) {
        out.grads.add(slots[i]);
        ce_sum += ce[i];
        n_total += valid[i];
    }
    if (n_total == 0) {
        throw std::invalid_argument(
            "loss_and_grads: every target position is PAD");
    }
    out.loss = ce_sum / static_cast<double>(n_total);
    out.grads.scale(1.0 / static_cast<double>(n_total));
    return out;
}

namespace {

struct TensorBinding {
    std::vector<double>* w;
    const std::vector<double>* g;
    std::vector<double>* m;
    std::vector<double>* v;
    bool decay;
};

std::vector<TensorBinding> bind_tensors(Checkpoint& ckpt, const Gradients& g,
                                        Gradients& m, Gradients& v) {
    std::vector<TensorBinding> out;
    out.push_back({&ckpt.embedding.data, &g.embedding.data, &m.embedding.data,
                   &v.embedding.data, true});
    for (std::size_t l = 0; l < ckpt.layers.size(); ++l) {
        LayerWeights& lw = ckpt.layers[l];
        const LayerGrads& lg = g.layers[l];
        LayerGrads& lm = m.layers[l];
        LayerGrads& lv = v.layers[l];
        out.push_back({&lw.w_q.data, &lg.w_q.data, &lm.w_q.data, &lv.w_q.data, true});
        out.push_back({&lw.w_k.data, &lg.w_k.data, &lm.w_k.data, &lv.w_k.data, true});
        out.push_back({&lw.w_v.data, &lg.w_v.data, &lm.w_v.data, &lv.w_v.data, true});
        out.push_back({&lw.w_o.data, &lg.w_o.data, &lm.w_o.data, &lv.w_o.data, true});
        out.push_back({&lw.attn_norm, &lg.attn_norm, &lm.attn_norm, &lv.attn_norm, false});
        out.push_back({&lw.mlp_w1.data, &lg.mlp_w1.data, &lm.mlp_w1.data, &lv.mlp_w1.data, true});
        out.push_back({&lw.mlp_w2.data, &lg.mlp_w2.data, &lm.mlp_w2.data, &lv.mlp_w2.data, true});
        out.push_back({&lw.mlp_norm, &lg.mlp_norm, &lm.mlp_norm, &lv.mlp_norm, false});
    }
    out.push_back({&ckpt.final_norm, &g.final_norm, &m.final_norm,
                   &v.final_norm, false});
    return out;
}

Checkpoint train_impl(const Checkpoint& start,
                      const std::vector<std::uint8_t>& corpus,
                      const TrainConfig& cfg) {
    cfg.validate();
    if (corpus.empty()) {
        throw std::invalid_argument("train: empty corpus");
    }
    Checkpoint ckpt = start;
    if (cfg.steps == 0) {
        return ckpt;
    }
    std::vector<std::vector<int>> windows =
        bos_windows(encode_bytes(corpus), cfg.seq_len);

    std::ofstream log;
    if (!cfg.log_path.empty()) {
        log.open(cfg.log_path, std::ios::trunc);
        if (!log) {
            throw std::invalid_argument("cannot open training log: " +
                                        cfg.log_path);
        }
        log << "step,loss,grad_norm\n";
    }

    std::mt19937_64 rng(cfg.seed);
    std::uniform_int_distribution<std::size_t> pick(0, windows.size() - 1);
    Gradients m = Gradients::zeros_like(ckpt);
    Gradients v = Gradients::zeros_like(ckpt);

    for (std::size_t step = 1; step <= cfg.steps; ++step) {
        std::vector<std::vector<int>> batch;
        batch.reserve(cfg.batch_size);
        for (std::size_t b = 0; b < cfg.batch_size; ++b) {
            batch.push_back(windows[pick(rng)]);
        }
        LossAndGrads lg = loss_and_grads(ckpt, batch, cfg.threads);
        if (!std::isfinite(lg.loss)) {
            std::ostringstream msg;
            msg << "non-finite loss at step " << step;
            throw NumericalError(msg.str());
        }
        double gnorm = lg.grads.global_norm();
        if (gnorm > cfg.clip_norm) {
            lg.grads.scale(cfg.clip_norm / gnorm);
        }

        double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
        double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
        for (TensorBinding& tb : bind_tensors(ckpt, lg.grads, m, v)) {
            for (std::size_t i = 0; i < tb.w->size(); ++i) {
                double gi = (*tb.g)[i];
                (*tb.m)[i] = cfg.beta1 * (*tb.m)[i] + (1.0 - cfg.beta1) * gi;
                (*tb.v)[i] = cfg.beta2 * (*tb.v)[i] + (1.0 - cfg.beta2) * gi * gi;
                double mh = (*tb.m)[i] / bc1;
                double vh = (*tb.v)[i] / bc2;
                double upd = mh / (std::sqrt(vh) + cfg.adam_eps);
                if (tb.decay) {
                    upd += cfg.weight_decay * (*tb.w)[i];
                }
                (*tb.w)[i] = f32_round((*tb.w)[i] - cfg.learning_rate * upd);
            }
        }

        if (log.is_open()) {
            char line[96];
            std::snprintf(line, sizeof(line), "%zu,%.9g,%.9g\n", step, lg.loss,
                          gnorm);
            log << line;
        }
    }
    return ckpt;
}

} // namespace

Checkpoint train(const Checkpoint& ckpt, const std::vector<std::uint8_t>& corpus,
                 const TrainConfig& cfg) {
    return train_impl(ckpt, corpus, cfg);
}

Checkpoint finetune(const Checkpoint& ckpt,
                    const std::vector<std::uint8_t>& corpus,
                    const TrainConfig& cfg) {
    return train_impl(ckpt, corpus, cfg);
}

} // namespace kvshrink
