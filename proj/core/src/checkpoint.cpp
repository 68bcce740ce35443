#include "kvshrink/checkpoint.hpp"

#include "kvshrink/errors.hpp"

#include <json.hpp>

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace kvshrink {

namespace {

constexpr char kMagic[4] = {'K', 'V', 'H', 'C'};
constexpr std::uint32_t kVersion = 1;

struct TensorRef {
    std::string name;
    std::vector<std::size_t> shape;
    const double* data;
    std::size_t count;
};

std::vector<TensorRef> tensor_directory(const Checkpoint& ckpt) {
    std::vector<TensorRef> dir;
    auto add_matrix = [&dir](std::string name, const Matrix& m) {
        dir.push_back({std::move(name), {m.rows, m.cols}, m.data.data(), m.data.size()});
    };
    auto add_vector = [&dir](std::string name, const std::vector<double>& v) {
        dir.push_back({std::move(name), {v.size()}, v.data(), v.size()});
    };

    add_matrix("embedding", ckpt.embedding);
    for (std::size_t i = 0; i < ckpt.layers.size(); ++i) {
        const LayerWeights& lw = ckpt.layers[i];
        std::string p = "layer" + std::to_string(i) + ".";
        add_matrix(p + "w_q", lw.w_q);
        add_matrix(p + "w_k", lw.w_k);
        add_matrix(p + "w_v", lw.w_v);
        add_matrix(p + "w_o", lw.w_o);
        if (ckpt.config.attention_kind == AttentionKind::projected_key) {
            add_matrix(p + "key_proj", lw.key_proj);
        }
        add_vector(p + "attn_norm", lw.attn_norm);
        add_matrix(p + "mlp_w1", lw.mlp_w1);
        add_matrix(p + "mlp_w2", lw.mlp_w2);
        add_vector(p + "mlp_norm", lw.mlp_norm);
    }
    add_vector("final_norm", ckpt.final_norm);
    return dir;
}

void check_shape(const std::string& name, const Matrix& m,
                 std::size_t rows, std::size_t cols) {
    if (m.rows != rows || m.cols != cols) {
        std::ostringstream msg;
        msg << name << " has shape " << m.rows << "x" << m.cols
            << ", expected " << rows << "x" << cols;
        throw std::invalid_argument(msg.str());
    }
    if (!all_finite(m)) {
        throw std::invalid_argument(name + " has non-finite entries");
    }
}

void check_gain(const std::string& name, const std::vector<double>& v,
                std::size_t dim) {
    if (v.size() != dim) {
        std::ostringstream msg;
        msg << name << " has length " << v.size() << ", expected " << dim;
        throw std::invalid_argument(msg.str());
    }
    if (!all_finite(v)) {
        throw std::invalid_argument(name + " has non-finite entries");
    }
}

// Serializes payloads exactly as save_checkpoint writes them.
std::vector<unsigned char> payload_bytes(const std::vector<TensorRef>& dir) {
    std::size_t total = 0;
    for (const TensorRef& t : dir) {
        total += t.count * sizeof(float);
    }
    std::vector<unsigned char> bytes(total);
    std::size_t off = 0;
    for (const TensorRef& t : dir) {
        for (std::size_t i = 0; i < t.count; ++i) {
            float f = static_cast<float>(t.data[i]);
            std::memcpy(bytes.data() + off, &f, sizeof(float));
            off += sizeof(float);
        }
    }
    return bytes;
}

} // namespace

void Checkpoint::validate() const {
    config.validate();
    const std::size_t d = config.d_model;
    const std::size_t qw = config.n_heads * config.head_dim;
    const std::size_t kvw = config.kv_width();
    const std::size_t kw = config.key_width();

    check_shape("embedding", embedding, config.vocab_size, d);
    if (layers.size() != config.n_layers) {
        throw std::invalid_argument("layer count does not match config");
    }
    check_gain("final_norm", final_norm, d);
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const LayerWeights& lw = layers[i];
        std::string p = "layer" + std::to_string(i) + ".";
        check_shape(p + "w_q", lw.w_q, d, qw);
        check_shape(p + "w_k", lw.w_k, d, kw);
        check_shape(p + "w_v", lw.w_v, d, kvw);
        check_shape(p + "w_o", lw.w_o, qw, d);
        check_gain(p + "attn_norm", lw.attn_norm, d);
        check_gain(p + "mlp_norm", lw.mlp_norm, d);
        check_shape(p + "mlp_w1", lw.mlp_w1, d, config.d_ff);
        check_shape(p + "mlp_w2", lw.mlp_w2, config.d_ff, d);
        if (config.attention_kind == AttentionKind::projected_key) {
            check_shape(p + "key_proj", lw.key_proj, kvw, qw);
            // Rows must stay orthonormal: the projection defines the cache
            // geometry and training never updates it.
            for (std::size_t r = 0; r < lw.key_proj.rows; ++r) {
                for (std::size_t s = r; s < lw.key_proj.rows; ++s) {
                    double want = (r == s) ? 1.0 : 0.0;
                    double got = dot(lw.key_proj.row(r), lw.key_proj.row(s));
                    if (std::abs(got - want) > 1e-6) {
                        std::ostringstream msg;
                        msg << p << "key_proj rows " << r << "," << s
                            << " not orthonormal: inner product " << got;
                        throw std::invalid_argument(msg.str());
                    }
                }
            }
        } else if (lw.key_proj.data.size() != 0) {
            throw std::invalid_argument(
                p + "key_proj present but attention_kind is standard");
        }
    }
}

Checkpoint init_checkpoint(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 0.02);

    auto fill = [&](Matrix& m, std::size_t rows, std::size_t cols) {
        m = Matrix(rows, cols);
        for (double& v : m.data) {
            v = gauss(rng);
        }
    };

    Checkpoint ckpt;
    ckpt.config = cfg;
    const std::size_t d = cfg.d_model;
    const std::size_t qw = cfg.n_heads * cfg.head_dim;
    fill(ckpt.embedding, cfg.vocab_size, d);
    ckpt.final_norm.assign(d, 1.0);
    ckpt.layers.resize(cfg.n_layers);
    for (LayerWeights& lw : ckpt.layers) {
        fill(lw.w_q, d, qw);
        fill(lw.w_k, d, cfg.key_width());
        fill(lw.w_v, d, cfg.kv_width());
        fill(lw.w_o, qw, d);
        if (cfg.attention_kind == AttentionKind::projected_key) {
            lw.key_proj = random_orthonormal(cfg.kv_width(), qw, rng);
        }
        lw.attn_norm.assign(d, 1.0);
        fill(lw.mlp_w1, d, cfg.d_ff);
        fill(lw.mlp_w2, cfg.d_ff, d);
        lw.mlp_norm.assign(d, 1.0);
    }

    f32_round_inplace(ckpt.embedding);
    for (LayerWeights& lw : ckpt.layers) {
        f32_round_inplace(lw.w_q);
        f32_round_inplace(lw.w_k);
        f32_round_inplace(lw.w_v);
        f32_round_inplace(lw.w_o);
        if (lw.key_proj.data.size() != 0) {
            f32_round_inplace(lw.key_proj);
        }
        f32_round_inplace(lw.mlp_w1);
        f32_round_inplace(lw.mlp_w2);
    }
    ckpt.validate();
    return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    ckpt.validate();
    std::vector<TensorRef> dir = tensor_directory(ckpt);

    nlohmann::json header;
    header["config"] = nlohmann::json::parse(config_to_json(ckpt.config));
    nlohmann::json tensors = nlohmann::json::array();
    std::size_t offset = 0;
    for (const TensorRef& t : dir) {
        nlohmann::json e;
        e["name"] = t.name;
        e["shape"] = t.shape;
        e["dtype"] = "f32";
        e["offset"] = offset;
        tensors.push_back(e);
        offset += t.count * sizeof(float);
    }
    header["tensors"] = tensors;
    std::string header_text = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::invalid_argument("cannot open checkpoint for writing: " + path);
    }
    out.write(kMagic, 4);
    std::uint32_t version = kVersion;
    std::uint32_t header_len = static_cast<std::uint32_t>(header_text.size());
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    out.write(header_text.data(),
              static_cast<std::streamsize>(header_text.size()));
    std::vector<unsigned char> payload = payload_bytes(dir);
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size()));
    if (!out) {
        throw std::invalid_argument("write failed for checkpoint: " + path);
    }
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::invalid_argument("cannot open checkpoint: " + path);
    }
    std::vector<char> raw((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
    if (raw.size() < 12) {
        std::ostringstream msg;
        msg << "checkpoint too small: expected at least 12 header bytes, found "
            << raw.size();
        throw FormatError(msg.str());
    }
    if (std::memcmp(raw.data(), kMagic, 4) != 0) {
        std::ostringstream msg;
        msg << "bad checkpoint magic: expected \"KVHC\", found \""
            << std::string(raw.data(), 4) << "\"";
        throw FormatError(msg.str());
    }
    std::uint32_t version = 0;
    std::uint32_t header_len = 0;
    std::memcpy(&version, raw.data() + 4, sizeof(version));
    std::memcpy(&header_len, raw.data() + 8, sizeof(header_len));
    if (version != kVersion) {
        std::ostringstream msg;
        msg << "unsupported checkpoint version " << version << ", expected "
            << kVersion;
        throw FormatError(msg.str());
    }
    if (raw.size() < 12 + static_cast<std::size_t>(header_len)) {
        std::ostringstream msg;
        msg << "checkpoint truncated in header: expected "
            << 12 + static_cast<std::size_t>(header_len)
            << " bytes, found " << raw.size();
        throw FormatError(msg.str());
    }
    std::string header_text(raw.data() + 12, header_len);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_text);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("checkpoint header is not valid JSON: ") +
                          e.what());
    }

    Checkpoint ckpt;
    std::vector<std::string> names;
    std::vector<std::vector<std::size_t>> shapes;
    std::vector<std::size_t> offsets;
    try {
        ckpt.config = config_from_json(header.at("config").dump());
        for (const auto& e : header.at("tensors")) {
            names.push_back(e.at("name").get<std::string>());
            shapes.push_back(e.at("shape").get<std::vector<std::size_t>>());
            offsets.push_back(e.at("offset").get<std::size_t>());
            if (e.at("dtype").get<std::string>() != "f32") {
                throw FormatError("unsupported tensor dtype: " +
                                  e.at("dtype").get<std::string>());
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad checkpoint header field: ") + e.what());
    }

    const char* payload = raw.data() + 12 + header_len;
    std::size_t payload_size = raw.size() - 12 - header_len;

    std::size_t cursor = 0;
    auto read_tensor = [&](const std::string& name) -> std::vector<double> {
        if (cursor >= names.size() || names[cursor] != name) {
            std::string found = cursor < names.size() ? names[cursor] : "<end>";
            throw FormatError("tensor directory mismatch: expected \"" + name +
                              "\", found \"" + found + "\"");
        }
        std::size_t count = 1;
        for (std::size_t s : shapes[cursor]) {
            count *= s;
        }
        std::size_t need = offsets[cursor] + count * sizeof(float);
        if (need > payload_size) {
            std::ostringstream msg;
            msg << "checkpoint truncated in tensor \"" << name << "\": expected "
                << need << " payload bytes, found " << payload_size;
            throw FormatError(msg.str());
        }
        std::vector<double> values(count);
        const char* src = payload + offsets[cursor];
        for (std::size_t i = 0; i < count; ++i) {
            float f;
            std::memcpy(&f, src + i * sizeof(float), sizeof(float));
            values[i] = static_cast<double>(f);
        }
        ++cursor;
        return values;
    };
    auto read_matrix = [&](const std::string& name) -> Matrix {
        if (cursor >= names.size()) {
            throw FormatError("tensor directory mismatch: expected \"" + name +
                              "\", found \"<end>\"");
        }
        if (shapes[cursor].size() != 2) {
            throw FormatError("tensor \"" + name + "\" must be 2-D");
        }
        std::size_t rows = shapes[cursor][0];
        std::size_t cols = shapes[cursor][1];
        Matrix m(rows, cols);
        m.data = read_tensor(name);
        return m;
    };

    ckpt.embedding = read_matrix("embedding");
    ckpt.layers.resize(ckpt.config.n_layers);
    for (std::size_t i = 0; i < ckpt.layers.size(); ++i) {
        LayerWeights& lw = ckpt.layers[i];
        std::string p = "layer" + std::to_string(i) + ".";
        lw.w_q = read_matrix(p + "w_q");
        lw.w_k = read_matrix(p + "w_k");
        lw.w_v = read_matrix(p + "w_v");
        lw.w_o = read_matrix(p + "w_o");
        if (ckpt.config.attention_kind == AttentionKind::projected_key) {
            lw.key_proj = read_matrix(p + "key_proj");
        }
        lw.attn_norm = read_tensor(p + "attn_norm");
        lw.mlp_w1 = read_matrix(p + "mlp_w1");
        lw.mlp_w2 = read_matrix(p + "mlp_w2");
        lw.mlp_norm = read_tensor(p + "mlp_norm");
    }
    ckpt.final_norm = read_tensor("final_norm");
    if (cursor != names.size()) {
        throw FormatError("checkpoint has trailing tensors beyond the expected set");
    }

    try {
        ckpt.validate();
    } catch (const std::invalid_argument& e) {
        throw FormatError(std::string("checkpoint inconsistent with config: ") +
                          e.what());
    }
    return ckpt;
}

std::uint64_t checkpoint_hash(const Checkpoint& ckpt) {
    constexpr std::uint64_t kOffset = 14695981039346656037ULL;
    constexpr std::uint64_t kPrime = 1099511628211ULL;
    std::uint64_t h = kOffset;
    auto mix = [&h](const unsigned char* bytes, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) {
            h ^= bytes[i];
            h *= kPrime;
        }
    };
    std::string cfg = config_to_json(ckpt.config);
    mix(reinterpret_cast<const unsigned char*>(cfg.data()), cfg.size());
    std::vector<unsigned char> payload = payload_bytes(tensor_directory(ckpt));
    mix(payload.data(), payload.size());
    return h;
}

} // namespace kvshrink
