#include "kvshrink/eval.hpp"

#include "kvshrink/kvcache.hpp"
#include "kvshrink/model.hpp"
#include "kvshrink/threading.hpp"
#include "kvshrink/tokenizer.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>

namespace kvshrink {

namespace {

double log_sum_exp(std::span<const double> row) {
    double m = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (double v : row) {
        s += std::exp(v - m);
    }
    return m + std::log(s);
}

int argmax_token(std::span<const double> row) {
    return static_cast<int>(std::max_element(row.begin(), row.end()) -
                            row.begin());
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
        .count();
}

} // namespace

double perplexity(const Checkpoint& ckpt,
                  const std::vector<std::uint8_t>& corpus, std::size_t seq_len,
                  std::size_t threads) {
    if (corpus.empty()) {
        throw std::invalid_argument("perplexity: empty corpus");
    }
    if (seq_len == 0) {
        throw std::invalid_argument("perplexity: seq_len must be >= 1");
    }
    seq_len = std::min(seq_len, ckpt.config.max_seq_len - 1);

    std::vector<std::vector<int>> windows =
        bos_windows(encode_bytes(corpus), seq_len);

    struct WindowLoss {
        double ce_sum = 0.0;
        std::size_t count = 0;
    };
    std::vector<WindowLoss> slots(windows.size());
    parallel_for(windows.size(), threads, [&](std::size_t i) {
        std::vector<int> w = windows[i];
        while (!w.empty() && w.back() == kPadToken) {
            w.pop_back();
        }
        if (w.size() < 2) {
            return; // nothing to predict in this window
        }
        std::vector<int> inputs(w.begin(), w.end() - 1);
        ForwardResult fr = forward(ckpt, inputs);
        WindowLoss& slot = slots[i];
        for (std::size_t p = 0; p < inputs.size(); ++p) {
            int target = w[p + 1];
            std::span<const double> row(fr.logits.data.data() +
                                            p * fr.logits.cols,
                                        fr.logits.cols);
            slot.ce_sum += log_sum_exp(row) - row[target];
            slot.count += 1;
        }
    });

    double ce = 0.0;
    std::size_t n = 0;
    for (const WindowLoss& s : slots) {
        ce += s.ce_sum;
        n += s.count;
    }
    if (n == 0) {
        throw std::invalid_argument("perplexity: corpus has no scorable tokens");
    }
    return std::exp(ce / static_cast<double>(n));
}

BenchResult throughput_bench(const Checkpoint& ckpt, std::size_t context_len,
                             std::size_t gen_tokens, std::size_t repeats) {
    const ModelConfig& cfg = ckpt.config;
    if (context_len == 0) {
        throw std::invalid_argument("throughput_bench: context_len must be >= 1");
    }
    if (repeats == 0) {
        throw std::invalid_argument("throughput_bench: repeats must be >= 1");
    }
    if (context_len + gen_tokens > cfg.max_seq_len) {
        std::ostringstream msg;
        msg << "context_len + gen_tokens exceeds max_seq_len: " << context_len
            << " + " << gen_tokens << " > " << cfg.max_seq_len;
        throw std::invalid_argument(msg.str());
    }

    std::mt19937_64 rng(0x42);
    std::uniform_int_distribution<int> byte(0, 255);
    std::vector<int> prompt(context_len);
    prompt[0] = kBosToken;
    for (std::size_t i = 1; i < context_len; ++i) {
        prompt[i] = byte(rng);
    }

    BenchResult out;
    out.context_len = context_len;
    out.gen_tokens = gen_tokens;

    auto t0 = std::chrono::steady_clock::now();
    ForwardResult fr = forward(ckpt, prompt);
    out.prefill_s = seconds_since(t0);

    const std::span<const double> last_row(
        fr.logits.data.data() + (fr.logits.rows - 1) * fr.logits.cols,
        fr.logits.cols);
    const int first = argmax_token(last_row);

    auto decode_pass = [&](KVCache& cache) {
        std::vector<int> tokens;
        int next = first;
        for (std::size_t s = 0; s < gen_tokens; ++s) {
            tokens.push_back(next);
            std::vector<double> logits = decode_step(ckpt, cache, next);
            next = argmax_token(logits);
        }
        return tokens;
    };

    if (gen_tokens == 0) {
        out.kv_bytes = fr.cache.bytes();
        return out;
    }

    // Warmup pass, discarded from timing; also pins the expected tokens.
    KVCache warm = fr.cache;
    out.generated = decode_pass(warm);
    out.kv_bytes = warm.bytes();

    std::vector<double> elapsed(repeats);
    for (std::size_t r = 0; r < repeats; ++r) {
        KVCache cache = fr.cache;
        auto tr = std::chrono::steady_clock::now();
        decode_pass(cache);
        elapsed[r] = seconds_since(tr);
    }
    std::sort(elapsed.begin(), elapsed.end());
    double median = repeats % 2 == 1
                        ? elapsed[repeats / 2]
                        : 0.5 * (elapsed[repeats / 2 - 1] + elapsed[repeats / 2]);
    out.decode_tokens_per_s = static_cast<double>(gen_tokens) / median;
    return out;
}

std::uint64_t kv_memory_bytes(const ModelConfig& cfg, std::size_t seq_len,
                              std::size_t bytes_per_element) {
    return 2ULL * cfg.n_layers * cfg.n_kv_heads * cfg.head_dim * seq_len *
           bytes_per_element;
}

std::string eval_record_json(const EvalRecord& rec) {
    nlohmann::ordered_json j;
    j["checkpoint"] = rec.checkpoint;
    j["context_len"] = rec.context_len;
    if (rec.decode_tokens_per_s.has_value()) {
        j["decode_tokens_per_s"] = *rec.decode_tokens_per_s;
    }
    j["prefill_s"] = rec.prefill_s;
    j["kv_bytes"] = rec.kv_bytes;
    if (rec.ppl.has_value()) {
        j["ppl"] = *rec.ppl;
    }
    return j.dump();
}

} // namespace kvshrink
