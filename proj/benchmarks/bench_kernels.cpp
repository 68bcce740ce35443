#include <benchmark/benchmark.h>

#include "kvshrink/checkpoint.hpp"
#include "kvshrink/eig.hpp"
#include "kvshrink/gram.hpp"
#include "kvshrink/kvcache.hpp"
#include "kvshrink/matrix.hpp"
#include "kvshrink/model.hpp"

#include <random>

using namespace kvshrink;

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0);
    Matrix m(rows, cols);
    for (double& v : m.data) v = dist(rng);
    return m;
}

Matrix random_symmetric(std::size_t dim, std::uint64_t seed) {
    Matrix m = random_matrix(dim, dim, seed);
    for (std::size_t i = 0; i < dim; ++i) {
        for (std::size_t j = 0; j < i; ++j) {
            m.at(i, j) = m.at(j, i);
        }
    }
    return m;
}

ModelConfig bench_config(std::size_t max_seq) {
    ModelConfig cfg;
    cfg.vocab_size = 259;
    cfg.d_model = 64;
    cfg.n_heads = 8;
    cfg.n_kv_heads = 8;
    cfg.head_dim = 8;
    cfg.n_layers = 4;
    cfg.d_ff = 256;
    cfg.max_seq_len = max_seq;
    cfg.pos_encoding = PosEncoding::alibi;
    return cfg;
}

void BM_Matmul(benchmark::State& state) {
    const std::size_t n = static_cast<std::size_t>(state.range(0));
    Matrix a = random_matrix(n, n, 1);
    Matrix b = random_matrix(n, n, 2);
    for (auto _ : state) {
        Matrix c = matmul(a, b);
        benchmark::DoNotOptimize(c.data.data());
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) *
                            static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256);

void BM_GramAccumulate(benchmark::State& state) {
    const std::size_t dim = static_cast<std::size_t>(state.range(0));
    Matrix batch = random_matrix(64, dim, 3);
    GramAccumulator acc(dim);
    for (auto _ : state) {
        acc.accumulate(batch);
        benchmark::DoNotOptimize(acc.packed().data());
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) * 64);
}
BENCHMARK(BM_GramAccumulate)->Arg(16)->Arg(64);

void BM_JacobiEig(benchmark::State& state) {
    const std::size_t dim = static_cast<std::size_t>(state.range(0));
    Matrix s = random_symmetric(dim, 4);
    for (auto _ : state) {
        EigenDecomposition eig = sym_eig(s);
        benchmark::DoNotOptimize(eig.eigenvalues.data());
    }
}
BENCHMARK(BM_JacobiEig)->Arg(16)->Arg(64);

void BM_DecodeStep(benchmark::State& state) {
    const std::size_t context = static_cast<std::size_t>(state.range(0));
    const std::size_t burst = 8;
    Checkpoint ckpt = init_checkpoint(bench_config(context + burst + 1), 5);
    KVCache prefilled(ckpt.config);
    std::mt19937_64 rng(6);
    for (std::size_t t = 0; t < context; ++t) {
        decode_step(ckpt, prefilled, static_cast<int>(rng() % 256));
    }
    for (auto _ : state) {
        KVCache cache = prefilled; // fresh copy, flat float buffers
        for (std::size_t t = 0; t < burst; ++t) {
            std::vector<double> logits =
                decode_step(ckpt, cache, static_cast<int>(t % 256));
            benchmark::DoNotOptimize(logits.data());
        }
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) *
                            static_cast<std::int64_t>(burst));
}
BENCHMARK(BM_DecodeStep)->Arg(128)->Arg(1024);

} // namespace

BENCHMARK_MAIN();
