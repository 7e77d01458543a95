#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "unionret/ndgrad.hpp"

namespace unionret::objective {

struct LossConfig {
    double tau = 0.01; // fixed temperature

    void validate() const;
};

// a.b / (|a||b|), clamped to [-1, 1]. Throws on zero-norm or mismatched inputs.
double cosine_sim(std::span<const double> a, std::span<const double> b);

// [B,B] cosine similarities between rows of fused[B,D] and targets[B,D].
nd::Tensor similarity_matrix(nd::Tape& tape, const nd::Tensor& fused, const nd::Tensor& targets);

/// Batch-based classification loss: softmax cross-entropy over in-batch
/// targets with the matching row as the positive,
///
///   L = -(1/B) sum_i log( exp(s_ii / tau) / sum_j exp(s_ij / tau) ),
///
/// s_ij = cos(fused_i, targets_j). Passing UNION features as `targets` gives
/// the UNION objective. Evaluated with log-sum-exp; differentiable in both
/// arguments. Rejects zero-norm rows and non-finite values.
nd::Tensor bbc_loss(nd::Tape& tape, const nd::Tensor& fused, const nd::Tensor& targets, const LossConfig& cfg);

// Value-only form over row lists.
double bbc_loss(std::span<const std::vector<double>> fused, std::span<const std::vector<double>> targets,
                const LossConfig& cfg);

// Same loss taking the B×B similarity matrix (row-major) directly.
double bbc_loss_from_similarity(std::span<const double> similarity, std::size_t batch, const LossConfig& cfg);

} // namespace unionret::objective
