#include "kvshrink/calibration.hpp"

#include "kvshrink/errors.hpp"
#include "kvshrink/model.hpp"
#include "kvshrink/threading.hpp"
#include "kvshrink/tokenizer.hpp"

#include <json.hpp>

#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace kvshrink {

namespace {

constexpr char kMagic[4] = {'K', 'V', 'G', 'R'};
constexpr std::uint32_t kVersion = 1;

std::vector<std::string> kind_order(const GramSet& gs) {
    std::vector<std::string> kinds;
    if (gs.variant != RopeVariant::post_rope) {
        kinds.push_back("key_pre_rope");
    }
    if (gs.variant != RopeVariant::pre_rope) {
        kinds.push_back("key_post_rope");
    }
    kinds.push_back("value");
    if (!gs.layers.empty() && gs.layers.front().whole_key.has_value()) {
        kinds.push_back("whole_key");
    }
    return kinds;
}

// Accumulators of one layer in serialization order for `kind`.
std::vector<const GramAccumulator*> kind_accumulators(const LayerGrams& lg,
                                                      const std::string& kind) {
    std::vector<const GramAccumulator*> out;
    if (kind == "key_pre_rope") {
        for (const auto& a : lg.key_pre) out.push_back(&a);
    } else if (kind == "key_post_rope") {
        for (const auto& a : lg.key_post) out.push_back(&a);
    } else if (kind == "value") {
        for (const auto& a : lg.value) out.push_back(&a);
    } else if (kind == "whole_key") {
        out.push_back(&lg.whole_key.value());
    }
    return out;
}

GramSet empty_like(const Checkpoint& ckpt, std::size_t groups,
                   RopeVariant variant, const std::string& corpus_id) {
    const ModelConfig& cfg = ckpt.config;
    const std::size_t t = cfg.n_kv_heads / groups;
    const std::size_t group_dim = t * cfg.head_dim;
    const bool rope = cfg.pos_encoding == PosEncoding::rope;

    GramSet gs;
    gs.config_hash = checkpoint_hash(ckpt);
    gs.groups = groups;
    gs.corpus_id = corpus_id;
    gs.variant = variant;
    gs.layers.resize(cfg.n_layers);
    for (LayerGrams& lg : gs.layers) {
        if (variant != RopeVariant::post_rope) {
            lg.key_pre.assign(groups, GramAccumulator(group_dim));
        }
        if (variant != RopeVariant::pre_rope) {
            lg.key_post.assign(groups, GramAccumulator(group_dim));
        }
        lg.value.assign(groups, GramAccumulator(group_dim));
        if (rope) {
            lg.whole_key = GramAccumulator(cfg.n_kv_heads * cfg.head_dim);
        }
    }
    return gs;
}

void accumulate_grouped(std::vector<GramAccumulator>& accs, const Matrix& rows,
                        std::size_t group_dim) {
    for (std::size_t g = 0; g < accs.size(); ++g) {
        for (std::size_t i = 0; i < rows.rows; ++i) {
            accs[g].accumulate_row(rows.row(i).subspan(g * group_dim, group_dim));
        }
    }
}

} // namespace

std::string to_string(RopeVariant v) {
    switch (v) {
    case RopeVariant::pre_rope: return "pre_rope";
    case RopeVariant::post_rope: return "post_rope";
    case RopeVariant::both: return "both";
    }
    throw std::invalid_argument("unknown rope variant");
}

RopeVariant rope_variant_from_string(const std::string& s) {
    if (s == "pre_rope") return RopeVariant::pre_rope;
    if (s == "post_rope") return RopeVariant::post_rope;
    if (s == "both") return RopeVariant::both;
    throw std::invalid_argument(
        "rope variant must be pre_rope, post_rope or both, got: " + s);
}

void GramSet::merge(const GramSet& other) {
    if (config_hash != other.config_hash) {
        std::ostringstream msg;
        msg << "cannot merge gram sets from different checkpoints: 0x"
            << std::hex << config_hash << " vs 0x" << other.config_hash;
        throw ConsistencyError(msg.str());
    }
    if (groups != other.groups || variant != other.variant ||
        layers.size() != other.layers.size()) {
        throw std::invalid_argument("gram set layouts differ, cannot merge");
    }
    for (std::size_t l = 0; l < layers.size(); ++l) {
        LayerGrams& a = layers[l];
        const LayerGrams& b = other.layers[l];
        if (a.key_pre.size() != b.key_pre.size() ||
            a.key_post.size() != b.key_post.size() ||
            a.value.size() != b.value.size() ||
            a.whole_key.has_value() != b.whole_key.has_value()) {
            throw std::invalid_argument("gram set layouts differ, cannot merge");
        }
        for (std::size_t g = 0; g < a.key_pre.size(); ++g) {
            a.key_pre[g].merge(b.key_pre[g]);
        }
        for (std::size_t g = 0; g < a.key_post.size(); ++g) {
            a.key_post[g].merge(b.key_post[g]);
        }
        for (std::size_t g = 0; g < a.value.size(); ++g) {
            a.value[g].merge(b.value[g]);
        }
        if (a.whole_key.has_value()) {
            a.whole_key->merge(*b.whole_key);
        }
    }
    token_count += other.token_count;
}

void GramSet::require_matches(const Checkpoint& ckpt) const {
    std::uint64_t ckpt_hash = checkpoint_hash(ckpt);
    if (ckpt_hash != config_hash) {
        std::ostringstream msg;
        msg << "gram set was collected from a different checkpoint: grams 0x"
            << std::hex << config_hash << ", checkpoint 0x" << ckpt_hash;
        throw ConsistencyError(msg.str());
    }
}

GramSet collect_grams(const Checkpoint& ckpt,
                      const std::vector<std::uint8_t>& corpus,
                      std::size_t groups, RopeVariant variant,
                      std::size_t seq_len, std::size_t threads,
                      const std::string& corpus_id) {
    const ModelConfig& cfg = ckpt.config;
    if (corpus.empty()) {
        throw std::invalid_argument("collect_grams: empty corpus");
    }
    if (cfg.attention_kind != AttentionKind::standard) {
        throw std::invalid_argument(
            "collect_grams: calibration needs a standard-attention checkpoint");
    }
    if (groups == 0 || cfg.n_kv_heads % groups != 0) {
        std::ostringstream msg;
        msg << "groups must divide heads: " << groups << " does not divide "
            << cfg.n_kv_heads;
        throw std::invalid_argument(msg.str());
    }
    if (seq_len == 0) {
        throw std::invalid_argument("collect_grams: seq_len must be >= 1");
    }
    seq_len = std::min(seq_len, cfg.max_seq_len - 1);

    std::vector<std::vector<int>> windows =
        bos_windows(encode_bytes(corpus), seq_len);
    // Trailing PAD carries no signal; trim it so token_count is honest.
    for (auto& w : windows) {
        while (!w.empty() && w.back() == kPadToken) {
            w.pop_back();
        }
    }

    const std::size_t group_dim = (cfg.n_kv_heads / groups) * cfg.head_dim;
    std::vector<GramSet> slots(windows.size());
    parallel_for(windows.size(), threads, [&](std::size_t i) {
        GramSet local = empty_like(ckpt, groups, variant, corpus_id);
        ActivationTap tap = [&](std::size_t layer, const Matrix& k_pre,
                                const Matrix& k_post, const Matrix& v) {
            LayerGrams& lg = local.layers[layer];
            if (!lg.key_pre.empty()) {
                accumulate_grouped(lg.key_pre, k_pre, group_dim);
            }
            if (!lg.key_post.empty()) {
                accumulate_grouped(lg.key_post, k_post, group_dim);
            }
            accumulate_grouped(lg.value, v, group_dim);
            if (lg.whole_key.has_value()) {
                lg.whole_key->accumulate(k_post);
            }
        };
        forward(ckpt, windows[i], tap);
        local.token_count = windows[i].size();
        slots[i] = std::move(local);
    });

    GramSet out = std::move(slots[0]);
    for (std::size_t i = 1; i < slots.size(); ++i) {
        out.merge(slots[i]);
    }
    return out;
}

void save_grams(const GramSet& gs, const std::string& path) {
    if (gs.layers.empty()) {
        throw std::invalid_argument("save_grams: empty gram set");
    }
    std::vector<std::string> kinds = kind_order(gs);

    nlohmann::json header;
    header["config_hash"] = gs.config_hash;
    header["groups"] = gs.groups;
    header["n_layers"] = gs.layers.size();
    header["corpus_id"] = gs.corpus_id;
    header["variant"] = to_string(gs.variant);
    header["token_count"] = gs.token_count;
    header["kinds"] = kinds;
    nlohmann::json dims;
    for (const std::string& kind : kinds) {
        dims[kind] = kind_accumulators(gs.layers.front(), kind).front()->dim();
    }
    header["dims"] = dims;
    std::string header_text = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::invalid_argument("cannot open gram file for writing: " + path);
    }
    out.write(kMagic, 4);
    std::uint32_t version = kVersion;
    std::uint32_t header_len = static_cast<std::uint32_t>(header_text.size());
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    out.write(header_text.data(),
              static_cast<std::streamsize>(header_text.size()));
    for (const LayerGrams& lg : gs.layers) {
        for (const std::string& kind : kinds) {
            for (const GramAccumulator* acc : kind_accumulators(lg, kind)) {
                auto packed = acc->packed();
                out.write(reinterpret_cast<const char*>(packed.data()),
                          static_cast<std::streamsize>(packed.size() *
                                                       sizeof(double)));
            }
        }
    }
    if (!out) {
        throw std::invalid_argument("write failed for gram file: " + path);
    }
}

GramSet load_grams(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::invalid_argument("cannot open gram file: " + path);
    }
    std::vector<char> raw((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
    if (raw.size() < 12) {
        std::ostringstream msg;
        msg << "gram file too small: expected at least 12 header bytes, found "
            << raw.size();
        throw FormatError(msg.str());
    }
    if (std::memcmp(raw.data(), kMagic, 4) != 0) {
        std::ostringstream msg;
        msg << "bad gram file magic: expected \"KVGR\", found \""
            << std::string(raw.data(), 4) << "\"";
        throw FormatError(msg.str());
    }
    std::uint32_t version = 0;
    std::uint32_t header_len = 0;
    std::memcpy(&version, raw.data() + 4, sizeof(version));
    std::memcpy(&header_len, raw.data() + 8, sizeof(header_len));
    if (version != kVersion) {
        std::ostringstream msg;
        msg << "unsupported gram file version " << version << ", expected "
            << kVersion;
        throw FormatError(msg.str());
    }
    if (raw.size() < 12 + static_cast<std::size_t>(header_len)) {
        std::ostringstream msg;
        msg << "gram file truncated in header: expected "
            << 12 + static_cast<std::size_t>(header_len) << " bytes, found "
            << raw.size();
        throw FormatError(msg.str());
    }

    GramSet gs;
    std::vector<std::string> kinds;
    std::size_t n_layers = 0;
    nlohmann::json dims;
    try {
        nlohmann::json header = nlohmann::json::parse(
            std::string(raw.data() + 12, header_len));
        gs.config_hash = header.at("config_hash").get<std::uint64_t>();
        gs.groups = header.at("groups").get<std::size_t>();
        n_layers = header.at("n_layers").get<std::size_t>();
        gs.corpus_id = header.at("corpus_id").get<std::string>();
        gs.variant =
            rope_variant_from_string(header.at("variant").get<std::string>());
        gs.token_count = header.at("token_count").get<std::uint64_t>();
        kinds = header.at("kinds").get<std::vector<std::string>>();
        dims = header.at("dims");
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad gram file header: ") + e.what());
    }

    const char* payload = raw.data() + 12 + header_len;
    std::size_t payload_size = raw.size() - 12 - header_len;
    std::size_t cursor = 0;
    auto read_acc = [&](std::size_t dim) -> GramAccumulator {
        std::size_t count = dim * (dim + 1) / 2;
        std::size_t need = cursor + count * sizeof(double);
        if (need > payload_size) {
            std::ostringstream msg;
            msg << "gram file truncated: expected " << need
                << " payload bytes, found " << payload_size;
            throw FormatError(msg.str());
        }
        std::vector<double> packed(count);
        std::memcpy(packed.data(), payload + cursor, count * sizeof(double));
        cursor = need;
        return GramAccumulator::from_packed(dim, std::move(packed),
                                            gs.token_count);
    };

    gs.layers.resize(n_layers);
    for (LayerGrams& lg : gs.layers) {
        for (const std::string& kind : kinds) {
            std::size_t dim;
            try {
                dim = dims.at(kind).get<std::size_t>();
            } catch (const nlohmann::json::exception& e) {
                throw FormatError(std::string("bad gram dims entry: ") + e.what());
            }
            if (kind == "key_pre_rope") {
                for (std::size_t g = 0; g < gs.groups; ++g) {
                    lg.key_pre.push_back(read_acc(dim));
                }
            } else if (kind == "key_post_rope") {
                for (std::size_t g = 0; g < gs.groups; ++g) {
                    lg.key_post.push_back(read_acc(dim));
                }
            } else if (kind == "value") {
                for (std::size_t g = 0; g < gs.groups; ++g) {
                    lg.value.push_back(read_acc(dim));
                }
            } else if (kind == "whole_key") {
                lg.whole_key = read_acc(dim);
            } else {
                throw FormatError("unknown gram kind in header: " + kind);
            }
        }
    }
    if (cursor != payload_size) {
        std::ostringstream msg;
        msg << "gram file has " << payload_size - cursor
            << " trailing payload bytes";
        throw FormatError(msg.str());
    }
    return gs;
}

} // namespace kvshrink
