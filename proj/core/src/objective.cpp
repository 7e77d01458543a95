#include "unionret/objective.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "unionret/errors.hpp"

namespace unionret::objective {

void LossConfig::validate() const {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ValidationError("loss config: tau must be > 0");
}

double cosine_sim(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size() || a.empty()) throw ValidationError("cosine_sim: dimension mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (!(na > 0.0) || !(nb > 0.0)) throw ValidationError("cosine_sim: zero-norm input");
    return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

nd::Tensor similarity_matrix(nd::Tape& tape, const nd::Tensor& fused, const nd::Tensor& targets) {
    if (fused.rank() != 2 || fused.shape() != targets.shape()) {
        throw ValidationError("bbc_loss: fused and targets must both be [B,D] with equal shapes, got " +
                              nd::shape_string(fused.shape()) + " and " + nd::shape_string(targets.shape()));
    }
    for (const auto* t : {&fused, &targets}) {
        for (double v : t->data()) {
            if (!std::isfinite(v)) throw ValidationError("bbc_loss: non-finite input");
        }
    }
    nd::Tensor f = nd::l2_normalize_rows(tape, fused);
    nd::Tensor t = nd::l2_normalize_rows(tape, targets);
    return nd::matmul(tape, f, nd::transpose_last2(tape, t));
}

nd::Tensor bbc_loss(nd::Tape& tape, const nd::Tensor& fused, const nd::Tensor& targets, const LossConfig& cfg) {
    cfg.validate();
    nd::Tensor sim = similarity_matrix(tape, fused, targets);
    const std::size_t b = fused.dim(0);
    std::vector<std::size_t> labels(b);
    std::iota(labels.begin(), labels.end(), std::size_t{0});
    return nd::softmax_cross_entropy(tape, nd::scale(tape, sim, 1.0 / cfg.tau), labels);
}

double bbc_loss(std::span<const std::vector<double>> fused, std::span<const std::vector<double>> targets,
                const LossConfig& cfg) {
    if (fused.empty() || fused.size() != targets.size()) throw ValidationError("bbc_loss: batch sizes differ");
    auto to_tensor = [](std::span<const std::vector<double>> rows) {
        const std::size_t d = rows[0].size();
        std::vector<double> v;
        for (const auto& r : rows) {
            if (r.size() != d) throw ValidationError("bbc_loss: ragged rows");
            v.insert(v.end(), r.begin(), r.end());
        }
        return nd::Tensor::from({rows.size(), d}, std::move(v));
    };
    nd::Tape tape(false);
    return bbc_loss(tape, to_tensor(fused), to_tensor(targets), cfg).item();
}

double bbc_loss_from_similarity(std::span<const double> similarity, std::size_t batch, const LossConfig& cfg) {
    cfg.validate();
    if (batch == 0 || similarity.size() != batch * batch) {
        throw ValidationError("bbc_loss_from_similarity: expected a B×B matrix");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < batch; ++i) {
        const double* row = similarity.data() + i * batch;
        double mx = row[0] / cfg.tau;
        for (std::size_t j = 1; j < batch; ++j) mx = std::max(mx, row[j] / cfg.tau);
        double sum = 0.0;
        for (std::size_t j = 0; j < batch; ++j) sum += std::exp(row[j] / cfg.tau - mx);
        total += mx + std::log(sum) - row[i] / cfg.tau;
    }
    return total / static_cast<double>(batch);
}

} // namespace unionret::objective
