#include "helpers.hpp"

#include "cli.hpp"
#include "kvshrink/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace testutil {

using kvshrink::Gradients;

Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng,
                     double scale) {
    std::normal_distribution<double> dist(0.0, scale);
    Matrix m(rows, cols);
    for (double& v : m.data) {
        v = dist(rng);
    }
    return m;
}

Matrix random_symmetric(std::size_t dim, std::mt19937_64& rng, double scale) {
    std::normal_distribution<double> dist(0.0, scale);
    Matrix m(dim, dim);
    for (std::size_t i = 0; i < dim; ++i) {
        for (std::size_t j = i; j < dim; ++j) {
            double v = dist(rng);
            m.at(i, j) = v;
            m.at(j, i) = v;
        }
    }
    return m;
}

Matrix naive_gram(const Matrix& x) {
    Matrix g(x.cols, x.cols);
    for (std::size_t a = 0; a < x.cols; ++a) {
        for (std::size_t b = 0; b < x.cols; ++b) {
            double s = 0.0;
            for (std::size_t r = 0; r < x.rows; ++r) {
                s += x.at(r, a) * x.at(r, b);
            }
            g.at(a, b) = s;
        }
    }
    return g;
}

Matrix naive_matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) {
        throw std::invalid_argument("naive_matmul: inner dims differ");
    }
    Matrix c(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t j = 0; j < b.cols; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols; ++k) {
                s += a.at(i, k) * b.at(k, j);
            }
            c.at(i, j) = s;
        }
    }
    return c;
}

double frob(const Matrix& a) {
    double s = 0.0;
    for (double v : a.data) {
        s += v * v;
    }
    return std::sqrt(s);
}

Matrix gs_orthonormal(std::size_t rows, std::size_t cols,
                      std::mt19937_64& rng) {
    if (rows > cols) {
        throw std::invalid_argument("gs_orthonormal: rows > cols");
    }
    std::normal_distribution<double> dist(0.0, 1.0);
    Matrix q(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
        while (true) {
            for (std::size_t c = 0; c < cols; ++c) {
                q.at(r, c) = dist(rng);
            }
            for (std::size_t p = 0; p < r; ++p) {
                double d = 0.0;
                for (std::size_t c = 0; c < cols; ++c) {
                    d += q.at(r, c) * q.at(p, c);
                }
                for (std::size_t c = 0; c < cols; ++c) {
                    q.at(r, c) -= d * q.at(p, c);
                }
            }
            double n = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
                n += q.at(r, c) * q.at(r, c);
            }
            n = std::sqrt(n);
            if (n > 1e-8) {
                for (std::size_t c = 0; c < cols; ++c) {
                    q.at(r, c) /= n;
                }
                break;
            }
        }
    }
    return q;
}

std::pair<double, std::vector<double>> power_top_eig(const Matrix& s,
                                                     std::size_t iters) {
    const std::size_t n = s.rows;
    double shift = frob(s) + 1.0;
    std::mt19937_64 rng(12345);
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<double> v(n);
    for (double& x : v) {
        x = dist(rng);
    }
    std::vector<double> w(n);
    for (std::size_t it = 0; it < iters; ++it) {
        for (std::size_t i = 0; i < n; ++i) {
            double acc = shift * v[i];
            for (std::size_t j = 0; j < n; ++j) {
                acc += s.at(i, j) * v[j];
            }
            w[i] = acc;
        }
        double norm = 0.0;
        for (double x : w) {
            norm += x * x;
        }
        norm = std::sqrt(norm);
        double delta = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            w[i] /= norm;
            delta = std::max(delta, std::abs(w[i] - v[i]));
        }
        std::swap(v, w);
        if (delta < 1e-14) {
            break;
        }
    }
    double lambda = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            acc += s.at(i, j) * v[j];
        }
        lambda += v[i] * acc;
    }
    return {lambda, v};
}

std::vector<double> power_eigs(const Matrix& s, std::size_t k,
                               std::size_t iters) {
    Matrix work = s;
    std::vector<double> out;
    for (std::size_t i = 0; i < k; ++i) {
        auto [lambda, v] = power_top_eig(work, iters);
        out.push_back(lambda);
        for (std::size_t r = 0; r < work.rows; ++r) {
            for (std::size_t c = 0; c < work.cols; ++c) {
                work.at(r, c) -= lambda * v[r] * v[c];
            }
        }
    }
    return out;
}

namespace {

double det3(const Matrix& b) {
    return b.at(0, 0) * (b.at(1, 1) * b.at(2, 2) - b.at(1, 2) * b.at(2, 1)) -
           b.at(0, 1) * (b.at(1, 0) * b.at(2, 2) - b.at(1, 2) * b.at(2, 0)) +
           b.at(0, 2) * (b.at(1, 0) * b.at(2, 1) - b.at(1, 1) * b.at(2, 0));
}

} // namespace

std::vector<double> sym3_eigenvalues(const Matrix& s) {
    if (s.rows != 3 || s.cols != 3) {
        throw std::invalid_argument("sym3_eigenvalues: need a 3x3 matrix");
    }
    double p1 = s.at(0, 1) * s.at(0, 1) + s.at(0, 2) * s.at(0, 2) +
                s.at(1, 2) * s.at(1, 2);
    std::vector<double> eig(3);
    if (p1 == 0.0) {
        eig = {s.at(0, 0), s.at(1, 1), s.at(2, 2)};
        std::sort(eig.rbegin(), eig.rend());
        return eig;
    }
    double q = (s.at(0, 0) + s.at(1, 1) + s.at(2, 2)) / 3.0;
    double p2 = (s.at(0, 0) - q) * (s.at(0, 0) - q) +
                (s.at(1, 1) - q) * (s.at(1, 1) - q) +
                (s.at(2, 2) - q) * (s.at(2, 2) - q) + 2.0 * p1;
    double p = std::sqrt(p2 / 6.0);
    Matrix b(3, 3);
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 3; ++j) {
            b.at(i, j) = (s.at(i, j) - (i == j ? q : 0.0)) / p;
        }
    }
    double r = std::clamp(det3(b) / 2.0, -1.0, 1.0);
    double phi = std::acos(r) / 3.0;
    double e1 = q + 2.0 * p * std::cos(phi);
    double e3 = q + 2.0 * p * std::cos(phi + 2.0 * std::numbers::pi / 3.0);
    double e2 = 3.0 * q - e1 - e3;
    eig = {e1, e2, e3};
    std::sort(eig.rbegin(), eig.rend());
    return eig;
}

std::vector<ParamRef> param_refs(Checkpoint& ckpt, bool include_key_proj) {
    std::vector<ParamRef> refs;
    auto add_m = [&](const std::string& name, Matrix& m) {
        refs.push_back({name, m.data.data(), m.data.size()});
    };
    auto add_v = [&](const std::string& name, std::vector<double>& v) {
        refs.push_back({name, v.data(), v.size()});
    };
    add_m("embedding", ckpt.embedding);
    for (std::size_t i = 0; i < ckpt.layers.size(); ++i) {
        auto& lw = ckpt.layers[i];
        std::string p = "layer" + std::to_string(i) + ".";
        add_m(p + "w_q", lw.w_q);
        add_m(p + "w_k", lw.w_k);
        add_m(p + "w_v", lw.w_v);
        add_m(p + "w_o", lw.w_o);
        if (include_key_proj && lw.key_proj.data.size() != 0) {
            add_m(p + "key_proj", lw.key_proj);
        }
        add_v(p + "attn_norm", lw.attn_norm);
        add_m(p + "mlp_w1", lw.mlp_w1);
        add_m(p + "mlp_w2", lw.mlp_w2);
        add_v(p + "mlp_norm", lw.mlp_norm);
    }
    add_v("final_norm", ckpt.final_norm);
    return refs;
}

namespace {

// Gradient tensors in the exact order param_refs(include_key_proj=false)
// produces, so entries correspond one-to-one.
std::vector<ParamRef> grad_refs(Gradients& g) {
    std::vector<ParamRef> refs;
    auto add_m = [&](const std::string& name, Matrix& m) {
        refs.push_back({name, m.data.data(), m.data.size()});
    };
    auto add_v = [&](const std::string& name, std::vector<double>& v) {
        refs.push_back({name, v.data(), v.size()});
    };
    add_m("embedding", g.embedding);
    for (std::size_t i = 0; i < g.layers.size(); ++i) {
        auto& lw = g.layers[i];
        std::string p = "layer" + std::to_string(i) + ".";
        add_m(p + "w_q", lw.w_q);
        add_m(p + "w_k", lw.w_k);
        add_m(p + "w_v", lw.w_v);
        add_m(p + "w_o", lw.w_o);
        add_v(p + "attn_norm", lw.attn_norm);
        add_m(p + "mlp_w1", lw.mlp_w1);
        add_m(p + "mlp_w2", lw.mlp_w2);
        add_v(p + "mlp_norm", lw.mlp_norm);
    }
    add_v("final_norm", g.final_norm);
    return refs;
}

} // namespace

FdResult fd_gradient_check(const Checkpoint& ckpt,
                           const std::vector<std::vector<int>>& batch,
                           double eps, std::size_t samples_per_tensor,
                           double floor) {
    kvshrink::LossAndGrads analytic = kvshrink::loss_and_grads(ckpt, batch);
    Checkpoint work = ckpt;
    std::vector<ParamRef> params = param_refs(work, /*include_key_proj=*/false);
    std::vector<ParamRef> grads = grad_refs(analytic.grads);
    if (params.size() != grads.size()) {
        throw std::logic_error("param/grad tensor lists out of sync");
    }

    FdResult res;
    for (std::size_t t = 0; t < params.size(); ++t) {
        if (params[t].size != grads[t].size) {
            throw std::logic_error("tensor size mismatch: " + params[t].name);
        }
        std::size_t stride =
            std::max<std::size_t>(1, params[t].size / samples_per_tensor);
        for (std::size_t i = 0; i < params[t].size; i += stride) {
            double saved = params[t].data[i];
            params[t].data[i] = saved + eps;
            double up = kvshrink::loss_and_grads(work, batch).loss;
            params[t].data[i] = saved - eps;
            double down = kvshrink::loss_and_grads(work, batch).loss;
            params[t].data[i] = saved;
            double fd = (up - down) / (2.0 * eps);
            double a = grads[t].data[i];
            double rel = std::abs(a - fd) / (std::abs(a) + std::abs(fd) + floor);
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst_param = params[t].name;
            }
            res.checked += 1;
        }
    }
    return res;
}

ModelConfig tiny_config(kvshrink::PosEncoding pe, std::size_t layers,
                        std::size_t d, std::size_t heads,
                        std::size_t max_seq) {
    ModelConfig cfg;
    cfg.d_model = d;
    cfg.n_heads = heads;
    cfg.n_kv_heads = heads;
    cfg.head_dim = d / heads;
    cfg.n_layers = layers;
    cfg.d_ff = 2 * d;
    cfg.max_seq_len = max_seq;
    cfg.pos_encoding = pe;
    cfg.validate();
    return cfg;
}

ModelConfig toy_config(kvshrink::PosEncoding pe, std::size_t max_seq) {
    ModelConfig cfg;
    cfg.d_model = 64;
    cfg.n_heads = 8;
    cfg.n_kv_heads = 8;
    cfg.head_dim = 8;
    cfg.n_layers = 4;
    cfg.d_ff = 256;
    cfg.max_seq_len = max_seq;
    cfg.pos_encoding = pe;
    cfg.validate();
    return cfg;
}

Checkpoint explicit_projection_oracle(const Checkpoint& ckpt,
                                      const kvshrink::ProjectionSet& ps) {
    Checkpoint oracle = ckpt;
    const std::size_t dh = ckpt.config.head_dim;
    const std::size_t g = ps.groups;
    const std::size_t t = ckpt.config.n_heads / g;
    for (std::size_t l = 0; l < oracle.layers.size(); ++l) {
        auto& lw = oracle.layers[l];
        for (std::size_t i = 0; i < g; ++i) {
            const Matrix& psi = ps.layers[l].key[i].proj.basis;   // dh x t*dh
            const Matrix& omega = ps.layers[l].value[i].proj.basis;
            // P^T P, built by definition.
            auto ptp = [](const Matrix& p) {
                Matrix out(p.cols, p.cols);
                for (std::size_t a = 0; a < p.cols; ++a) {
                    for (std::size_t b = 0; b < p.cols; ++b) {
                        double s = 0.0;
                        for (std::size_t r = 0; r < p.rows; ++r) {
                            s += p.at(r, a) * p.at(r, b);
                        }
                        out.at(a, b) = s;
                    }
                }
                return out;
            };
            Matrix kp = ptp(psi);
            Matrix vp = ptp(omega);
            for (std::size_t r = 0; r < lw.w_k.rows; ++r) {
                std::vector<double> krow(t * dh), vrow(t * dh);
                for (std::size_t c = 0; c < t * dh; ++c) {
                    krow[c] = lw.w_k.at(r, i * t * dh + c);
                    vrow[c] = lw.w_v.at(r, i * t * dh + c);
                }
                for (std::size_t c = 0; c < t * dh; ++c) {
                    double sk = 0.0, sv = 0.0;
                    for (std::size_t m = 0; m < t * dh; ++m) {
                        sk += krow[m] * kp.at(m, c);
                        sv += vrow[m] * vp.at(m, c);
                    }
                    lw.w_k.at(r, i * t * dh + c) = sk;
                    lw.w_v.at(r, i * t * dh + c) = sv;
                }
            }
        }
    }
    return oracle;
}

TempDir::TempDir() {
    std::string tmpl =
        (std::filesystem::temp_directory_path() / "kvshrink_test_XXXXXX")
            .string();
    std::vector<char> buf(tmpl.begin(), tmpl.end());
    buf.push_back('\0');
    if (mkdtemp(buf.data()) == nullptr) {
        throw std::runtime_error("mkdtemp failed");
    }
    path_ = buf.data();
}

TempDir::~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
}

std::string TempDir::file(const std::string& name) const {
    return path_ + "/" + name;
}

CliResult run_cli(const std::vector<std::string>& args) {
    std::ostringstream out;
    std::ostringstream err;
    CliResult r;
    r.code = kvshrink::cli_run(args, out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

std::vector<int> random_tokens(std::size_t n, std::mt19937_64& rng,
                               int vocab) {
    std::uniform_int_distribution<int> dist(0, vocab - 1);
    std::vector<int> out(n);
    for (int& t : out) {
        t = dist(rng);
    }
    return out;
}

} // namespace testutil
