#pragma once

#include "kvshrink/checkpoint.hpp"
#include "kvshrink/matrix.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace kvshrink {

struct TrainConfig {
    double learning_rate = 4e-5;
    std::size_t batch_size = 8;
    std::size_t seq_len = 64;
    std::size_t steps = 100;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.05;
    double clip_norm = 1.0;
    std::uint64_t seed = 0;
    std::size_t threads = 1;
    std::string log_path; // per-step CSV "step,loss,grad_norm"; empty = off

    void validate() const;
};

/// Gradients for every trainable tensor. key_proj has no entry: it fixes
/// the cache geometry and is never updated; gradients flow through it.
struct LayerGrads {
    Matrix w_q, w_k, w_v, w_o;
    std::vector<double> attn_norm;
    Matrix mlp_w1, mlp_w2;
    std::vector<double> mlp_norm;
};

struct Gradients {
    Matrix embedding;
    std::vector<LayerGrads> layers;
    std::vector<double> final_norm;

    static Gradients zeros_like(const Checkpoint& ckpt);
    void add(const Gradients& other);
    void scale(double factor);
    double global_norm() const;
};

struct LossAndGrads {
    double loss = 0.0;
    Gradients grads;
};

/// Mean next-token cross-entropy over a batch of token windows plus
/// analytic gradients. Each window w trains position i to predict w[i+1];
/// PAD targets are excluded from the mean. Windows need length >= 2.
/// Per-sequence gradients merge in index order, so results do not depend
/// on the thread count.
LossAndGrads loss_and_grads(const Checkpoint& ckpt,
                            const std::vector<std::vector<int>>& batch,
                            std::size_t threads = 1);

/// AdamW with decoupled weight decay (norm gains are not decayed),
/// global-norm gradient clipping, constant learning rate. Batches are
/// drawn from BOS-prefixed windows of the corpus by a seeded RNG, so a
/// fixed seed reproduces the run exactly. Weights stay float32-rounded
/// after every step. Throws NumericalError naming the step if the loss
/// turns non-finite.
Checkpoint train(const Checkpoint& ckpt, const std::vector<std::uint8_t>& corpus,
                 const TrainConfig& cfg);

/// Post-compression fine-tuning: the same optimizer; key_proj stays
/// bitwise untouched by construction (it has no gradient entry).
Checkpoint finetune(const Checkpoint& ckpt,
                    const std::vector<std::uint8_t>& corpus,
                    const TrainConfig& cfg);

} // namespace kvshrink
