#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "unionret/gradcheck.hpp"
#include "unionret/ndgrad.hpp"

namespace unionret::model {

enum class Pooling { Mean, First };

// Which representation of a candidate image is compared against fused queries.
enum class TargetMode {
    Original, // e_t
    Sum,      // e_t + e_null
    Union,    // learned per-dimension interpolation between e_t and e_null
};

std::string_view to_string(TargetMode mode);
TargetMode parse_target_mode(std::string_view name);
std::string_view to_string(Pooling pool);
Pooling parse_pooling(std::string_view name);

inline constexpr double kLayerNormEps = 1e-5;

struct ModelConfig {
    std::size_t dim = 512;
    std::size_t union_layers = 2;
    std::size_t union_heads = 8;
    std::size_t head_dim = 64;
    std::size_t fusion_layers = 2;
    std::size_t fusion_heads = 8;
    std::size_t ffn_mult = 4;
    Pooling pool = Pooling::Mean;
    double tau = 0.01;
    std::uint64_t seed = 0;

    // Throws ValidationError unless union_heads * head_dim == dim,
    // fusion_heads divides dim, tau > 0 and all sizes are positive.
    void validate() const;

    // Defaults for a backbone width: 64-wide heads when dim is a multiple of 64
    // (8 heads at 512, 12 at 768), otherwise two heads (one if dim is odd).
    // Fusion keeps 8 heads when they divide dim, else falls back the same way.
    static ModelConfig for_dim(std::size_t dim, std::uint64_t seed = 0);

    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct Linear {
    nd::Tensor weight; // [in, out]
    nd::Tensor bias;   // [out]
};

struct BlockParams {
    nd::Tensor ln1_gamma, ln1_beta;
    Linear q;
    nd::Tensor k_weight; // [D, D]; a key bias would be softmax-invariant, so there is none
    Linear v, o;
    nd::Tensor ln2_gamma, ln2_beta;
    Linear ffn_in, ffn_out;
};

/// All learnable weights. Tensors are shared handles, so copies alias; use
/// clone() for an independent copy.
struct ModelParams {
    std::vector<BlockParams> fusion;
    std::vector<BlockParams> union_blocks;
    nd::Tensor fusion_token_types; // [2, D]: image slot, text slot
    nd::Tensor union_token_types;  // [2, D]: image slot, null-text slot
    Linear gate_hidden;            // D -> D, GELU
    Linear gate_out;               // D -> D, sigmoid

    ModelParams() = default;
    ModelParams(ModelParams&&) = default;
    ModelParams& operator=(ModelParams&&) = default;
    ModelParams(const ModelParams&) = delete;
    ModelParams& operator=(const ModelParams&) = delete;

    // Fixed order: fusion layers, UNION layers, token-type tables, gate MLP.
    // Checkpoints, initialization and the optimizer all walk this order.
    std::vector<nd::NamedTensor> named() const;
    std::size_t parameter_count() const;
    ModelParams clone() const;
    void zero_grad() const;
};

ModelParams allocate_params(const ModelConfig& config);
std::size_t parameter_count(const ModelConfig& config);

// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), token tables ~ U(-1/sqrt(D), 1/sqrt(D)),
// linear biases and layer-norm shifts 0, layer-norm gains 1. Seeded by config.seed.
ModelParams init_params(const ModelConfig& config);

// Pre-norm block: h = x + MHA(LN1(x)); out = h + FFN(LN2(h)), FFN = W2 GELU(W1 .).
// When `attention` is non-null the per-head attention probabilities ([B,T,T]
// each) are appended to it.
nd::Tensor transformer_block(nd::Tape& tape, const nd::Tensor& x, const BlockParams& block, std::size_t heads,
                             std::vector<nd::Tensor>* attention = nullptr);

// e_ref, e_text: [B, D]. Returns the fused query [B, D]. Captionless queries
// pass the null-text embedding as e_text.
nd::Tensor fuse_query(nd::Tape& tape, const ModelParams& params, const ModelConfig& config, const nd::Tensor& e_ref,
                      const nd::Tensor& e_text);

struct UnionResult {
    nd::Tensor feature;      // [B, D]
    nd::Tensor target_gate;  // w_t, [B, D], strictly inside (0, 1)
    nd::Tensor transformed;  // transformer output before pooling, [B, 2, D]
    nd::Tensor pooled;       // [B, D]
};

// e_target, e_null: [B, D].
UnionResult union_forward(nd::Tape& tape, const ModelParams& params, const ModelConfig& config,
                          const nd::Tensor& e_target, const nd::Tensor& e_null);

nd::Tensor target_feature(nd::Tape& tape, TargetMode mode, const ModelParams& params, const ModelConfig& config,
                          const nd::Tensor& e_target, const nd::Tensor& e_null);

// Single-vector conveniences evaluated on a non-recording tape.
std::vector<double> fuse_query(const ModelParams& params, const ModelConfig& config, std::span<const double> e_ref,
                               std::span<const double> e_text);

struct UnionVectors {
    std::vector<double> feature;
    std::vector<double> target_gate;
};
UnionVectors union_forward(const ModelParams& params, const ModelConfig& config, std::span<const double> e_target,
                           std::span<const double> e_null);
std::vector<double> target_feature(TargetMode mode, const ModelParams& params, const ModelConfig& config,
                                   std::span<const double> e_target, std::span<const double> e_null);

// [rows.size(), D] constant tensor.
nd::Tensor stack_rows(std::span<const std::vector<double>> rows);
// [count, D] constant tensor with `row` repeated.
nd::Tensor repeat_row(std::span<const double> row, std::size_t count);

} // namespace unionret::model
