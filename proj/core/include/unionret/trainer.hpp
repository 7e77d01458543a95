#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "unionret/embedstore.hpp"
#include "unionret/gradcheck.hpp"
#include "unionret/model.hpp"
#include "unionret/rng.hpp"

namespace unionret::trainer {

struct TrainConfig {
    std::size_t epochs = 2;
    std::size_t repeats = 1; // shuffled passes over the data per epoch
    std::size_t batch_size = 32;
    double lr = 1e-4;
    double weight_decay = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;
    model::TargetMode mode = model::TargetMode::Union;

    void validate() const;
};

struct OptimizerState {
    std::vector<std::vector<double>> first_moment;
    std::vector<std::vector<double>> second_moment;
    std::uint64_t step = 0;
};

// One AdamW update over every tensor, reading each tensor's accumulated grad
// (missing grads count as zero). Decay is decoupled: p <- p * (1 - lr * wd),
// then p <- p - lr * m_hat / (sqrt(v_hat) + eps). Throws ValidationError naming
// the first parameter with a non-finite gradient; nothing is modified then.
void adamw_step(std::span<const nd::NamedTensor> params, OptimizerState& state, const TrainConfig& cfg);

struct BatchLog {
    std::size_t epoch = 0; // 1-based
    std::size_t batch = 0; // 1-based within the epoch
    double loss = 0.0;
};

struct TrainResult {
    model::ModelParams params;
    std::vector<BatchLog> log;
    std::size_t steps = 0;
    double first_batch_loss = 0.0;
    double final_epoch_mean_loss = 0.0;
};

// Embeddings for one batch of triplets as constant [B, D] tensors.
struct BatchInputs {
    nd::Tensor reference;
    nd::Tensor text;   // caption, or the null-text embedding when absent
    nd::Tensor target;
    nd::Tensor null_text;
};

BatchInputs gather_batch(std::span<const std::size_t> rows, const TripletSet& triplets, const EmbeddingStore& images,
                         const EmbeddingStore& texts, const NullTextEmbedding& null_text);

// Fused queries against mode-dependent targets under the BBC loss at config.tau.
nd::Tensor pipeline_loss(nd::Tape& tape, const model::ModelParams& params, const model::ModelConfig& config,
                         model::TargetMode mode, const BatchInputs& batch);

// Batches per epoch for `n` examples: full batches plus a trailing short batch
// when it has at least 2 examples.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, Rng& rng);

/// Trains from init_params(model_cfg). Each epoch makes train_cfg.repeats
/// passes, each shuffling the triplets with a generator seeded by train_cfg.seed, then for each batch computes fused
/// queries and target features under train_cfg.mode, the BBC loss, its
/// gradients, and one AdamW step. Single-threaded and fully deterministic.
/// Aborts on a non-finite loss, naming the batch's query ids.
TrainResult train(const TripletSet& triplets, const EmbeddingStore& images, const EmbeddingStore& texts,
                  const NullTextEmbedding& null_text, const model::ModelConfig& model_cfg,
                  const TrainConfig& train_cfg, const std::function<void(const BatchLog&)>& on_batch = {});

// One JSON object per batch ({"epoch","batch","loss"}) and a closing
// {"event":"done",...} line.
std::string format_log(const TrainResult& result, const TrainConfig& cfg);

} // namespace unionret::trainer
