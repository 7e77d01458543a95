#include "unionret/trainer.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "unionret/errors.hpp"
#include "unionret/objective.hpp"
#include "unionret/rng.hpp"

namespace unionret::trainer {

using nd::Tensor;

void TrainConfig::validate() const {
    if (epochs == 0) throw ValidationError("train config: epochs must be >= 1");
    if (repeats == 0) throw ValidationError("train config: repeats must be >= 1");
    if (batch_size < 2) throw ValidationError("train config: batch_size must be >= 2");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ValidationError("train config: lr must be > 0");
    if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
        throw ValidationError("train config: weight_decay must be >= 0");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
        throw ValidationError("train config: betas must lie in [0, 1)");
    }
    if (!(adam_eps > 0.0)) throw ValidationError("train config: adam_eps must be > 0");
}

void adamw_step(std::span<const nd::NamedTensor> params, OptimizerState& state, const TrainConfig& cfg) {
    if (state.first_moment.empty()) {
        for (const auto& p : params) {
            state.first_moment.emplace_back(p.tensor.numel(), 0.0);
            state.second_moment.emplace_back(p.tensor.numel(), 0.0);
        }
    }
    if (state.first_moment.size() != params.size()) {
        throw ValidationError("adamw: optimizer state does not match parameter list");
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
        if (state.first_moment[k].size() != params[k].tensor.numel()) {
            throw ValidationError("adamw: state shape mismatch for '" + params[k].name + "'");
        }
        for (double g : params[k].tensor.grad()) {
            if (!std::isfinite(g)) throw ValidationError("adamw: non-finite gradient in '" + params[k].name + "'");
        }
    }

    ++state.step;
    const double t = static_cast<double>(state.step);
    const double bias1 = 1.0 - std::pow(cfg.beta1, t);
    const double bias2 = 1.0 - std::pow(cfg.beta2, t);
    const double decay = 1.0 - cfg.lr * cfg.weight_decay;

    for (std::size_t k = 0; k < params.size(); ++k) {
        nd::Tensor tensor = params[k].tensor;
        auto values = tensor.data();
        auto grad = params[k].tensor.grad();
        auto& m = state.first_moment[k];
        auto& v = state.second_moment[k];
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double g = grad.empty() ? 0.0 : grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            const double m_hat = m[i] / bias1;
            const double v_hat = v[i] / bias2;
            values[i] *= decay;
            values[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.adam_eps);
        }
    }
}

BatchInputs gather_batch(std::span<const std::size_t> rows, const TripletSet& triplets, const EmbeddingStore& images,
                         const EmbeddingStore& texts, const NullTextEmbedding& null_text) {
    const std::size_t dim = images.dim();
    if (texts.dim() != dim && !texts.empty()) throw ValidationError("image and text stores differ in dim");
    if (null_text.vector.size() != dim) throw ValidationError("null-text dim differs from image store dim");
    std::vector<double> ref, text, target;
    ref.reserve(rows.size() * dim);
    text.reserve(rows.size() * dim);
    target.reserve(rows.size() * dim);
    auto append = [](std::vector<double>& out, std::span<const float> r) { out.insert(out.end(), r.begin(), r.end()); };
    for (auto i : rows) {
        const auto& t = triplets.at(i);
        append(ref, images.row(images.index_of(t.query_image_id)));
        append(target, images.row(images.index_of(t.target_image_id)));
        if (t.caption_id) {
            append(text, texts.row(texts.index_of(*t.caption_id)));
        } else {
            text.insert(text.end(), null_text.vector.begin(), null_text.vector.end());
        }
    }
    const std::size_t b = rows.size();
    return {Tensor::from({b, dim}, std::move(ref)), Tensor::from({b, dim}, std::move(text)),
            Tensor::from({b, dim}, std::move(target)), model::repeat_row(null_text.vector, b)};
}

Tensor pipeline_loss(nd::Tape& tape, const model::ModelParams& params, const model::ModelConfig& config,
                     model::TargetMode mode, const BatchInputs& batch) {
    Tensor fused = model::fuse_query(tape, params, config, batch.reference, batch.text);
    Tensor targets = model::target_feature(tape, mode, params, config, batch.target, batch.null_text);
    return objective::bbc_loss(tape, fused, targets, objective::LossConfig{config.tau});
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, Rng& rng) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order.begin(), order.end());
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t end = std::min(n, start + batch_size);
        if (end - start < 2) break;
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return batches;
}

TrainResult train(const TripletSet& triplets, const EmbeddingStore& images, const EmbeddingStore& texts,
                  const NullTextEmbedding& null_text, const model::ModelConfig& model_cfg,
                  const TrainConfig& train_cfg, const std::function<void(const BatchLog&)>& on_batch) {
    model_cfg.validate();
    train_cfg.validate();
    if (triplets.size() < 2) throw ValidationError("train: need at least 2 triplets");
    if (images.dim() != model_cfg.dim) {
        throw ValidationError("train: image dim " + std::to_string(images.dim()) + " != model dim " +
                              std::to_string(model_cfg.dim));
    }
    validate_triplets(triplets, images, texts);

    TrainResult result;
    result.params = model::init_params(model_cfg);
    const auto named = result.params.named();
    OptimizerState state;
    Rng rng(train_cfg.seed);

    for (std::size_t epoch = 1; epoch <= train_cfg.epochs; ++epoch) {
        std::vector<std::vector<std::size_t>> batches;
        for (std::size_t pass = 0; pass < train_cfg.repeats; ++pass) {
            auto more = epoch_batches(triplets.size(), train_cfg.batch_size, rng);
            batches.insert(batches.end(), std::make_move_iterator(more.begin()), std::make_move_iterator(more.end()));
        }
        double epoch_sum = 0.0;
        for (std::size_t b = 0; b < batches.size(); ++b) {
            const BatchInputs inputs = gather_batch(batches[b], triplets, images, texts, null_text);
            result.params.zero_grad();
            nd::Tape tape;
            Tensor loss = pipeline_loss(tape, result.params, model_cfg, train_cfg.mode, inputs);
            const double value = loss.item();
            if (!std::isfinite(value)) {
                std::string ids;
                for (auto i : batches[b]) ids += (ids.empty() ? "" : ",") + triplets[i].query_key();
                throw ValidationError("train: non-finite loss at epoch " + std::to_string(epoch) + " batch " +
                                      std::to_string(b + 1) + " (queries: " + ids + ")");
            }
            tape.backward(loss);
            adamw_step(named, state, train_cfg);

            BatchLog entry{epoch, b + 1, value};
            if (result.steps == 0) result.first_batch_loss = value;
            result.log.push_back(entry);
            ++result.steps;
            epoch_sum += value;
            if (on_batch) on_batch(entry);
        }
        result.final_epoch_mean_loss = batches.empty() ? 0.0 : epoch_sum / static_cast<double>(batches.size());
    }
    return result;
}

std::string format_log(const TrainResult& result, const TrainConfig& cfg) {
    std::string out;
    for (const auto& e : result.log) {
        nlohmann::ordered_json j;
        j["epoch"] = e.epoch;
        j["batch"] = e.batch;
        j["loss"] = e.loss;
        out += j.dump() + "\n";
    }
    nlohmann::ordered_json done;
    done["event"] = "done";
    done["epochs"] = cfg.epochs;
    done["repeats"] = cfg.repeats;
    done["steps"] = result.steps;
    done["mode"] = std::string(model::to_string(cfg.mode));
    done["final_epoch_mean_loss"] = result.final_epoch_mean_loss;
    out += done.dump() + "\n";
    return out;
}

} // namespace unionret::trainer
