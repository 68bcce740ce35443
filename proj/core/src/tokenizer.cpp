#include "kvshrink/tokenizer.hpp"

#include <array>
#include <fstream>
#include <random>
#include <stdexcept>

namespace kvshrink {

std::vector<int> encode_bytes(const std::vector<std::uint8_t>& bytes) {
    std::vector<int> tokens;
    tokens.reserve(bytes.size());
    for (std::uint8_t b : bytes) {
        tokens.push_back(static_cast<int>(b));
    }
    return tokens;
}

std::vector<std::uint8_t> decode_bytes(const std::vector<int>& tokens) {
    std::vector<std::uint8_t> bytes;
    bytes.reserve(tokens.size());
    for (int t : tokens) {
        if (t >= 0 && t < 256) {
            bytes.push_back(static_cast<std::uint8_t>(t));
        }
    }
    return bytes;
}

std::vector<std::vector<int>> bos_windows(const std::vector<int>& tokens,
                                          std::size_t seq_len) {
    if (seq_len == 0) {
        throw std::invalid_argument("bos_windows: seq_len must be >= 1");
    }
    if (tokens.empty()) {
        throw std::invalid_argument("bos_windows: empty token stream");
    }
    std::vector<std::vector<int>> windows;
    for (std::size_t start = 0; start < tokens.size(); start += seq_len) {
        std::vector<int> w;
        w.reserve(seq_len + 1);
        w.push_back(kBosToken);
        std::size_t end = std::min(start + seq_len, tokens.size());
        for (std::size_t i = start; i < end; ++i) {
            w.push_back(tokens[i]);
        }
        while (w.size() < seq_len + 1) {
            w.push_back(kPadToken);
        }
        windows.push_back(std::move(w));
    }
    return windows;
}

std::vector<std::uint8_t> read_corpus(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::invalid_argument("cannot open corpus file: " + path);
    }
    std::vector<std::uint8_t> bytes(
        (std::istreambuf_iterator<char>(in)),
        std::istreambuf_iterator<char>());
    if (bytes.empty()) {
        throw std::invalid_argument("corpus file is empty: " + path);
    }
    return bytes;
}

std::vector<std::uint8_t> synthetic_corpus(std::size_t n_bytes,
                                           std::uint64_t seed) {
    constexpr int kAlphabet = 32;
    constexpr std::uint8_t kBase = 'a'; // symbols 'a'.. keep dumps readable

    std::mt19937_64 rng(seed);

    // Each state transitions to 4 successors with fixed seeded weights.
    std::array<std::array<int, 4>, kAlphabet> next{};
    std::array<std::array<double, 4>, kAlphabet> cdf{};
    std::uniform_int_distribution<int> pick(0, kAlphabet - 1);
    std::uniform_real_distribution<double> unit(0.05, 1.0);
    for (int s = 0; s < kAlphabet; ++s) {
        double total = 0.0;
        std::array<double, 4> w{};
        for (int j = 0; j < 4; ++j) {
            next[s][j] = pick(rng);
            w[j] = unit(rng);
            total += w[j];
        }
        double acc = 0.0;
        for (int j = 0; j < 4; ++j) {
            acc += w[j] / total;
            cdf[s][j] = acc;
        }
        cdf[s][3] = 1.0;
    }

    // Fixed motifs give the corpus long-range repetition beyond the chain.
    std::array<std::array<std::uint8_t, 12>, 6> motifs{};
    for (auto& m : motifs) {
        for (auto& b : m) {
            b = static_cast<std::uint8_t>(kBase + pick(rng));
        }
    }

    std::vector<std::uint8_t> out;
    out.reserve(n_bytes);
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    std::uniform_int_distribution<int> motif_pick(0, 5);
    std::uniform_int_distribution<int> gap(24, 72);

    int state = pick(rng);
    std::size_t until_motif = static_cast<std::size_t>(gap(rng));
    while (out.size() < n_bytes) {
        if (until_motif == 0) {
            const auto& m = motifs[static_cast<std::size_t>(motif_pick(rng))];
            for (std::uint8_t b : m) {
                if (out.size() < n_bytes) {
                    out.push_back(b);
                }
            }
            until_motif = static_cast<std::size_t>(gap(rng));
            continue;
        }
        double u = coin(rng);
        int j = 0;
        while (j < 3 && u > cdf[state][static_cast<std::size_t>(j)]) {
            ++j;
        }
        state = next[state][static_cast<std::size_t>(j)];
        out.push_back(static_cast<std::uint8_t>(kBase + state));
        --until_motif;
    }
    return out;
}

} // namespace kvshrink
