#include "kvshrink/analysis.hpp"

#include "kvshrink/eig.hpp"
#include "kvshrink/errors.hpp"
#include "kvshrink/model.hpp"
#include "kvshrink/threading.hpp"
#include "kvshrink/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace kvshrink {

namespace {

std::string fmt9(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

// Spectrum rows for one list of per-group accumulators of a single kind.
void append_kind(std::vector<SpectrumRow>& rows, std::size_t layer,
                 const char* kind, const std::vector<GramAccumulator>& accs,
                 const std::vector<double>& fractions) {
    for (std::size_t g = 0; g < accs.size(); ++g) {
        EigenDecomposition eig = sym_eig(accs[g].to_matrix());
        for (double f : fractions) {
            std::size_t k = fraction_rank(f, accs[g].dim());
            rows.push_back({layer, kind, g, f, energy_ratio(eig.eigenvalues, k)});
        }
    }
}

struct CellAcc {
    double err_sq = 0.0;
    double tot_sq = 0.0;
};

} // namespace

std::size_t fraction_rank(double fraction, std::size_t dim) {
    if (!(fraction > 0.0) || fraction > 1.0) {
        throw std::invalid_argument("fractions must lie in (0, 1]");
    }
    if (dim == 0) {
        throw std::invalid_argument("fraction_rank: dim must be >= 1");
    }
    double raw = std::ceil(fraction * static_cast<double>(dim) - 1e-12);
    auto k = static_cast<std::size_t>(std::max(raw, 1.0));
    return std::min(k, dim);
}

std::vector<SpectrumRow> spectrum_report(const GramSet& grams,
                                         const std::vector<double>& fractions) {
    if (fractions.empty()) {
        throw std::invalid_argument("spectrum_report: no fractions given");
    }
    for (double f : fractions) {
        if (!(f > 0.0) || f > 1.0) {
            throw std::invalid_argument("fractions must lie in (0, 1]");
        }
    }
    if (grams.layers.empty()) {
        throw std::invalid_argument("spectrum_report: empty gram set");
    }
    std::vector<SpectrumRow> rows;
    for (std::size_t l = 0; l < grams.layers.size(); ++l) {
        const LayerGrams& lg = grams.layers[l];
        append_kind(rows, l, "K_pre_rope", lg.key_pre, fractions);
        append_kind(rows, l, "K_post_rope", lg.key_post, fractions);
        append_kind(rows, l, "V", lg.value, fractions);
    }
    return rows;
}

std::vector<ReconRow> cache_reconstruction_report(
    const Checkpoint& ckpt, const ProjectionSet& ps,
    const std::vector<std::uint8_t>& heldout, std::size_t seq_len,
    std::size_t threads) {
    const ModelConfig& cfg = ckpt.config;
    if (cfg.attention_kind != AttentionKind::standard ||
        cfg.n_kv_heads != cfg.n_heads) {
        throw std::invalid_argument(
            "reconstruction report needs the uncompressed checkpoint the "
            "projections were built from");
    }
    std::uint64_t have = checkpoint_hash(ckpt);
    if (ps.config_hash != have) {
        std::ostringstream msg;
        msg << "projection set does not match checkpoint: projections 0x"
            << std::hex << ps.config_hash << ", checkpoint 0x" << have;
        throw ConsistencyError(msg.str());
    }
    if (ps.layers.size() != ckpt.layers.size()) {
        throw std::invalid_argument(
            "projection set layer count does not match checkpoint");
    }
    if (heldout.empty()) {
        throw std::invalid_argument("reconstruction report: empty corpus");
    }
    if (seq_len == 0) {
        throw std::invalid_argument("reconstruction report: seq_len must be >= 1");
    }
    seq_len = std::min(seq_len, cfg.max_seq_len - 1);

    std::vector<std::vector<int>> windows =
        bos_windows(encode_bytes(heldout), seq_len);
    for (auto& w : windows) {
        while (!w.empty() && w.back() == kPadToken) {
            w.pop_back();
        }
    }

    const std::size_t L = ckpt.layers.size();
    const std::size_t g = ps.groups;
    const std::size_t dh = cfg.head_dim;
    const std::size_t t = cfg.n_heads / g;
    const std::size_t key_cells = ps.key_whole ? 1 : g;
    const std::size_t cells_per_layer = key_cells + g;

    std::vector<std::vector<CellAcc>> slots(
        windows.size(), std::vector<CellAcc>(L * cells_per_layer));
    parallel_for(windows.size(), threads, [&](std::size_t i) {
        std::vector<CellAcc>& acc = slots[i];
        ActivationTap tap = [&](std::size_t layer, const Matrix& k_pre,
                                const Matrix& k_post, const Matrix& v) {
            const Matrix& keys = ps.key_post_rope ? k_post : k_pre;
            const LayerProjections& lp = ps.layers[layer];
            CellAcc* base = acc.data() + layer * cells_per_layer;
            if (ps.key_whole) {
                double err = projection_error(keys, lp.key[0].proj);
                double tot = frobenius_norm(keys);
                base[0].err_sq += err * err;
                base[0].tot_sq += tot * tot;
            } else {
                for (std::size_t gi = 0; gi < g; ++gi) {
                    Matrix x = slice_cols(keys, gi * t * dh, (gi + 1) * t * dh);
                    double err = projection_error(x, lp.key[gi].proj);
                    double tot = frobenius_norm(x);
                    base[gi].err_sq += err * err;
                    base[gi].tot_sq += tot * tot;
                }
            }
            for (std::size_t gi = 0; gi < g; ++gi) {
                Matrix x = slice_cols(v, gi * t * dh, (gi + 1) * t * dh);
                double err = projection_error(x, lp.value[gi].proj);
                double tot = frobenius_norm(x);
                base[key_cells + gi].err_sq += err * err;
                base[key_cells + gi].tot_sq += tot * tot;
            }
        };
        forward(ckpt, windows[i], tap);
    });

    std::vector<CellAcc> total(L * cells_per_layer);
    for (const auto& slot : slots) {
        for (std::size_t c = 0; c < total.size(); ++c) {
            total[c].err_sq += slot[c].err_sq;
            total[c].tot_sq += slot[c].tot_sq;
        }
    }

    const char* key_kind = ps.key_post_rope ? "K_post_rope" : "K_pre_rope";
    std::vector<ReconRow> rows;
    for (std::size_t l = 0; l < L; ++l) {
        const CellAcc* base = total.data() + l * cells_per_layer;
        for (std::size_t c = 0; c < key_cells; ++c) {
            double rel = base[c].tot_sq > 0.0
                             ? std::sqrt(base[c].err_sq / base[c].tot_sq)
                             : 0.0;
            rows.push_back({l, key_kind, c, rel});
        }
        for (std::size_t gi = 0; gi < g; ++gi) {
            const CellAcc& cell = base[key_cells + gi];
            double rel = cell.tot_sq > 0.0
                             ? std::sqrt(cell.err_sq / cell.tot_sq)
                             : 0.0;
            rows.push_back({l, "V", gi, rel});
        }
    }
    return rows;
}

void write_spectrum_csv(const std::vector<SpectrumRow>& rows,
                        std::ostream& out) {
    out << "layer,kind,group,fraction,energy_ratio\n";
    for (const SpectrumRow& r : rows) {
        out << r.layer << ',' << r.kind << ',' << r.group << ','
            << fmt9(r.fraction) << ',' << fmt9(r.energy_ratio) << '\n';
    }
}

void write_spectrum_csv(const std::vector<SpectrumRow>& rows,
                        const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw std::invalid_argument("cannot open for writing: " + path);
    }
    write_spectrum_csv(rows, out);
}

void write_recon_csv(const std::vector<ReconRow>& rows, std::ostream& out) {
    out << "layer,kind,group,rel_frob_error\n";
    for (const ReconRow& r : rows) {
        out << r.layer << ',' << r.kind << ',' << r.group << ','
            << fmt9(r.rel_frob_error) << '\n';
    }
}

void write_recon_csv(const std::vector<ReconRow>& rows,
                     const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw std::invalid_argument("cannot open for writing: " + path);
    }
    write_recon_csv(rows, out);
}

} // namespace kvshrink
