#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace kvshrink {

// Byte-level vocabulary: ids 0-255 are raw bytes, then three specials.
inline constexpr int kBosToken = 256;
inline constexpr int kEosToken = 257;
inline constexpr int kPadToken = 258;
inline constexpr int kVocabSize = 259;

/// Raw bytes to token ids, one id per byte. No specials are added.
std::vector<int> encode_bytes(const std::vector<std::uint8_t>& bytes);

/// Token ids back to bytes; special tokens are dropped.
std::vector<std::uint8_t> decode_bytes(const std::vector<int>& tokens);

/// Splits a token stream into non-overlapping windows of `seq_len` tokens,
/// each prefixed with BOS. The final short window is padded with PAD.
/// Every window has length seq_len + 1. Requires seq_len >= 1 and a
/// nonempty token stream.
std::vector<std::vector<int>> bos_windows(const std::vector<int>& tokens,
                                          std::size_t seq_len);

/// Reads a raw-byte corpus file. Throws std::invalid_argument if the file
/// cannot be opened or is empty.
std::vector<std::uint8_t> read_corpus(const std::string& path);

/// Seeded synthetic corpus: an order-1 Markov chain over a small byte
/// alphabet with fixed motifs spliced in at random intervals, so learned
/// key/value subspaces carry structure that compression must preserve.
std::vector<std::uint8_t> synthetic_corpus(std::size_t n_bytes,
                                           std::uint64_t seed);

} // namespace kvshrink
