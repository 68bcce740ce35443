#pragma once

#include "kvshrink/calibration.hpp"
#include "kvshrink/checkpoint.hpp"
#include "kvshrink/compress.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace kvshrink {

/// How much cache energy the top ceil(fraction * dim) eigendirections of
/// one Gram matrix retain. Kind is K_pre_rope, K_post_rope or V.
struct SpectrumRow {
    std::size_t layer = 0;
    std::string kind;
    std::size_t group = 0;
    double fraction = 0.0;
    double energy_ratio = 0.0;
};

/// Rank used for a fraction: ceil(fraction * dim), clamped to [1, dim].
std::size_t fraction_rank(double fraction, std::size_t dim);

/// One row per (layer, kind, group, fraction), layer-major, kinds in the
/// order K_pre_rope, K_post_rope, V (skipping streams the set lacks),
/// groups ascending, fractions in the given order. Fractions must be in
/// (0, 1] and non-empty.
std::vector<SpectrumRow> spectrum_report(const GramSet& grams,
                                         const std::vector<double>& fractions);

/// Relative Frobenius reconstruction error of projecting actual cache
/// rows onto a projection basis, accumulated over a held-out corpus.
struct ReconRow {
    std::size_t layer = 0;
    std::string kind;
    std::size_t group = 0;
    double rel_frob_error = 0.0;
};

/// Streams `heldout` through the uncompressed model and measures, per
/// (layer, group), ||X - X B^T B||_F / ||X||_F with X the rows the cache
/// would hold. Errors are computed literally row by row, not via Gram
/// traces, so they can cross-check spectrum energies. The projection set
/// must match the checkpoint (ConsistencyError otherwise).
std::vector<ReconRow> cache_reconstruction_report(
    const Checkpoint& ckpt, const ProjectionSet& ps,
    const std::vector<std::uint8_t>& heldout, std::size_t seq_len,
    std::size_t threads = 1);

/// CSV with mandatory header `layer,kind,group,fraction,energy_ratio`,
/// one row per entry, numbers formatted %.9g.
void write_spectrum_csv(const std::vector<SpectrumRow>& rows,
                        std::ostream& out);
void write_spectrum_csv(const std::vector<SpectrumRow>& rows,
                        const std::string& path);

/// CSV with mandatory header `layer,kind,group,rel_frob_error`.
void write_recon_csv(const std::vector<ReconRow>& rows, std::ostream& out);
void write_recon_csv(const std::vector<ReconRow>& rows,
                     const std::string& path);

} // namespace kvshrink
