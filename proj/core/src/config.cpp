#include "kvshrink/config.hpp"

#include <json.hpp>

#include <stdexcept>

namespace kvshrink {

std::string to_string(PosEncoding p) {
    switch (p) {
    case PosEncoding::none: return "none";
    case PosEncoding::alibi: return "alibi";
    case PosEncoding::rope: return "rope";
    }
    throw std::invalid_argument("unknown pos_encoding value");
}

std::string to_string(AttentionKind a) {
    switch (a) {
    case AttentionKind::standard: return "standard";
    case AttentionKind::projected_key: return "projected_key";
    }
    throw std::invalid_argument("unknown attention_kind value");
}

PosEncoding pos_encoding_from_string(const std::string& s) {
    if (s == "none") return PosEncoding::none;
    if (s == "alibi") return PosEncoding::alibi;
    if (s == "rope") return PosEncoding::rope;
    throw std::invalid_argument("pos_encoding must be none, alibi or rope, got: " + s);
}

AttentionKind attention_kind_from_string(const std::string& s) {
    if (s == "standard") return AttentionKind::standard;
    if (s == "projected_key") return AttentionKind::projected_key;
    throw std::invalid_argument(
        "attention_kind must be standard or projected_key, got: " + s);
}

void ModelConfig::validate() const {
    if (vocab_size < 1) {
        throw std::invalid_argument("vocab_size must be >= 1");
    }
    if (d_model == 0 || n_heads == 0 || n_kv_heads == 0 || head_dim == 0 ||
        n_layers == 0 || d_ff == 0 || max_seq_len == 0) {
        throw std::invalid_argument("all model dimensions must be >= 1");
    }
    if (d_model != n_heads * head_dim) {
        throw std::invalid_argument("d_model must equal n_heads * head_dim");
    }
    if (n_heads % n_kv_heads != 0) {
        throw std::invalid_argument("n_heads must be divisible by n_kv_heads");
    }
    if (n_kv_heads > n_heads) {
        throw std::invalid_argument("n_kv_heads must not exceed n_heads");
    }
    if (pos_encoding == PosEncoding::rope && head_dim % 2 != 0) {
        throw std::invalid_argument("rope requires even head_dim");
    }
    if (rope_theta <= 0.0) {
        throw std::invalid_argument("rope_theta must be positive");
    }
}

std::string config_to_json(const ModelConfig& cfg) {
    nlohmann::json j;
    j["vocab_size"] = cfg.vocab_size;
    j["d_model"] = cfg.d_model;
    j["n_heads"] = cfg.n_heads;
    j["n_kv_heads"] = cfg.n_kv_heads;
    j["head_dim"] = cfg.head_dim;
    j["n_layers"] = cfg.n_layers;
    j["d_ff"] = cfg.d_ff;
    j["max_seq_len"] = cfg.max_seq_len;
    j["pos_encoding"] = to_string(cfg.pos_encoding);
    j["rope_theta"] = cfg.rope_theta;
    j["attention_kind"] = to_string(cfg.attention_kind);
    return j.dump();
}

ModelConfig config_from_json(const std::string& json_text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::parse_error& e) {
        throw std::invalid_argument(std::string("invalid config JSON: ") + e.what());
    }
    ModelConfig cfg;
    try {
        cfg.vocab_size = j.at("vocab_size").get<std::size_t>();
        cfg.d_model = j.at("d_model").get<std::size_t>();
        cfg.n_heads = j.at("n_heads").get<std::size_t>();
        cfg.n_kv_heads = j.at("n_kv_heads").get<std::size_t>();
        cfg.head_dim = j.at("head_dim").get<std::size_t>();
        cfg.n_layers = j.at("n_layers").get<std::size_t>();
        cfg.d_ff = j.at("d_ff").get<std::size_t>();
        cfg.max_seq_len = j.at("max_seq_len").get<std::size_t>();
        cfg.pos_encoding =
            pos_encoding_from_string(j.at("pos_encoding").get<std::string>());
        if (j.contains("rope_theta")) {
            cfg.rope_theta = j.at("rope_theta").get<double>();
        }
        cfg.attention_kind =
            attention_kind_from_string(j.at("attention_kind").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(std::string("bad config field: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

} // namespace kvshrink
