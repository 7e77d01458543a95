#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "unionret/checkpoint.hpp"
#include "unionret/errors.hpp"
#include "unionret/retrieval.hpp"
#include "unionret/trainer.hpp"

using namespace unionret;
using namespace unionret::trainer;
using nd::NamedTensor;
using nd::Tensor;

namespace {

SynthDataset overfit_data() { return synth_dataset({7, 32, 64, 16, 0.05}); }

TrainConfig overfit_config(model::TargetMode mode) {
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.repeats = 100;
    cfg.seed = 7;
    cfg.mode = mode;
    return cfg;
}

// Fraction (x100) of queries whose top-1 pool candidate is relevant.
double recall_at_1(const SynthDataset& data, const model::ModelParams& params, const model::ModelConfig& cfg,
                   model::TargetMode mode) {
    std::set<std::string, std::less<>> refs;
    for (const auto& t : data.triplets) refs.insert(t.query_image_id);
    const auto index = retrieval::build_index(data.images.without(refs), data.null_text, mode, params, cfg);
    const auto queries = retrieval::embed_queries(data.triplets, data.images, data.texts, data.null_text, params, cfg);
    const auto run = retrieval::batch_search(index, queries, 1);
    std::size_t hits = 0;
    for (const auto& list : run) hits += data.qrels.relevant(list.query_id).contains(list.hits.at(0).id);
    return 100.0 * static_cast<double>(hits) / static_cast<double>(run.size());
}

} // namespace

TEST(TrainConfig, Validation) {
    TrainConfig cfg;
    EXPECT_NO_THROW(cfg.validate());
    EXPECT_EQ(cfg.lr, 1e-4);
    EXPECT_EQ(cfg.weight_decay, 1e-2);
    EXPECT_EQ(cfg.epochs, 2u);
    EXPECT_EQ(cfg.batch_size, 32u);
    cfg.batch_size = 1;
    EXPECT_THROW(cfg.validate(), ValidationError);
    cfg = {};
    cfg.epochs = 0;
    EXPECT_THROW(cfg.validate(), ValidationError);
    cfg = {};
    cfg.lr = -1;
    EXPECT_THROW(cfg.validate(), ValidationError);
    cfg = {};
    cfg.beta2 = 1.0;
    EXPECT_THROW(cfg.validate(), ValidationError);
}

TEST(AdamW, ZeroGradientOnlyDecays) {
    auto t = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
    t.node().accumulate(std::vector<double>(3, 0.0));
    const std::vector<NamedTensor> params{{"w", t}};
    OptimizerState state;
    adamw_step(params, state, TrainConfig{});
    const double decay = 1.0 - 1e-6;
    EXPECT_EQ(t.data()[0], 1.0 * decay);
    EXPECT_EQ(t.data()[1], -2.0 * decay);
    EXPECT_EQ(t.data()[2], 0.5 * decay);
    EXPECT_EQ(state.step, 1u);
}

TEST(AdamW, MissingGradientCountsAsZero) {
    auto t = Tensor::from({1}, {4.0}, true);
    const std::vector<NamedTensor> params{{"w", t}};
    OptimizerState state;
    adamw_step(params, state, TrainConfig{});
    EXPECT_EQ(t.data()[0], 4.0 * (1.0 - 1e-6));
}

TEST(AdamW, FirstStepMovesByLearningRateAgainstGradient) {
    auto t = Tensor::from({3}, {0.0, 0.0, 0.0}, true);
    t.node().accumulate(std::vector<double>{3.0, -0.2, 50.0});
    const std::vector<NamedTensor> params{{"w", t}};
    OptimizerState state;
    TrainConfig cfg;
    cfg.weight_decay = 0.0;
    adamw_step(params, state, cfg);
    EXPECT_NEAR(t.data()[0], -1e-4, 1e-11);
    EXPECT_NEAR(t.data()[1], 1e-4, 1e-11);
    EXPECT_NEAR(t.data()[2], -1e-4, 1e-11);
}

TEST(AdamW, ConvexQuadraticDecreases) {
    const std::vector<double> centre{1.0, -2.0, 3.0, 0.5};
    auto x = Tensor::from({4}, std::vector<double>(4, 0.0), true);
    const std::vector<NamedTensor> params{{"x", x}};
    auto loss = [&] {
        double s = 0.0;
        for (std::size_t i = 0; i < 4; ++i) s += (x.data()[i] - centre[i]) * (x.data()[i] - centre[i]);
        return s;
    };
    TrainConfig cfg;
    cfg.lr = 0.05;
    cfg.weight_decay = 0.0;
    OptimizerState state;
    std::vector<double> history{loss()};
    for (int step = 0; step < 60; ++step) {
        x.zero_grad();
        std::vector<double> g(4);
        for (std::size_t i = 0; i < 4; ++i) g[i] = 2.0 * (x.data()[i] - centre[i]);
        x.node().accumulate(g);
        adamw_step(params, state, cfg);
        history.push_back(loss());
    }
    for (std::size_t i = 5; i < 40; ++i) EXPECT_LT(history[i + 1], history[i]) << "step " << i;
    EXPECT_LT(history.back(), 0.1 * history.front());
}

TEST(AdamW, NonFiniteGradientNamesParameterAndLeavesValues) {
    auto a = Tensor::from({2}, {1.0, 2.0}, true);
    auto b = Tensor::from({2}, {3.0, 4.0}, true);
    a.node().accumulate(std::vector<double>{0.1, 0.1});
    b.node().accumulate(std::vector<double>{std::numeric_limits<double>::quiet_NaN(), 0.0});
    const std::vector<NamedTensor> params{{"alpha", a}, {"beta.weight", b}};
    OptimizerState state;
    try {
        adamw_step(params, state, TrainConfig{});
        FAIL() << "expected ValidationError";
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("beta.weight"), std::string::npos) << e.what();
    }
    EXPECT_EQ(a.data()[0], 1.0);
    EXPECT_EQ(b.data()[1], 4.0);
    EXPECT_EQ(state.step, 0u);
}

TEST(EpochBatches, CoversEveryExampleOnceAndDropsSingletons) {
    Rng rng(1);
    const auto batches = epoch_batches(70, 32, rng);
    ASSERT_EQ(batches.size(), 3u);
    EXPECT_EQ(batches[2].size(), 6u);
    std::set<std::size_t> seen;
    for (const auto& b : batches) seen.insert(b.begin(), b.end());
    EXPECT_EQ(seen.size(), 70u);

    Rng rng2(1);
    const auto short_tail = epoch_batches(65, 32, rng2);
    EXPECT_EQ(short_tail.size(), 2u);
    Rng rng3(1);
    EXPECT_EQ(epoch_batches(70, 32, rng3), batches);
}

TEST(PipelineLoss, UnrelatedTargetsStartNearLogB) {
    // Random references, captions and targets at tau 1: all similarities are
    // near zero, so the initial loss sits close to ln B.
    Rng rng(5);
    const std::size_t b = 32, d = 16;
    std::vector<std::string> ids;
    std::vector<float> values;
    TripletSet triplets;
    for (std::size_t i = 0; i < 2 * b; ++i) {
        ids.push_back("i" + std::to_string(i));
        for (std::size_t k = 0; k < d; ++k) values.push_back(static_cast<float>(rng.normal()));
    }
    std::vector<std::string> text_ids;
    std::vector<float> text_values;
    for (std::size_t i = 0; i < b; ++i) {
        text_ids.push_back("c" + std::to_string(i));
        for (std::size_t k = 0; k < d; ++k) text_values.push_back(static_cast<float>(rng.normal()));
        triplets.push_back({"i" + std::to_string(i), "c" + std::to_string(i), "i" + std::to_string(b + i), {}});
    }
    EmbeddingStore images(d, ids, values), texts(d, text_ids, text_values);
    NullTextEmbedding null_text{std::vector<double>(d, 0.0), "null"};
    for (auto& x : null_text.vector) x = 0.5 * rng.normal();

    auto cfg = model::ModelConfig::for_dim(d, 2);
    cfg.tau = 1.0;
    const auto params = model::init_params(cfg);
    std::vector<std::size_t> rows(b);
    for (std::size_t i = 0; i < b; ++i) rows[i] = i;
    const auto batch = gather_batch(rows, triplets, images, texts, null_text);
    for (auto mode : {model::TargetMode::Original, model::TargetMode::Sum, model::TargetMode::Union}) {
        nd::Tape tape(false);
        const double loss = pipeline_loss(tape, params, cfg, mode, batch).item();
        EXPECT_NEAR(loss, std::log(static_cast<double>(b)), 0.5) << model::to_string(mode);
    }
}

TEST(Train, OverfitsSyntheticUnion) {
    const auto data = overfit_data();
    const auto cfg = model::ModelConfig::for_dim(16, 7);
    const auto result = train(data.triplets, data.images, data.texts, data.null_text, cfg,
                              overfit_config(model::TargetMode::Union));
    EXPECT_EQ(result.steps, 200u);
    EXPECT_LT(result.final_epoch_mean_loss, result.first_batch_loss);
    EXPECT_EQ(recall_at_1(data, result.params, cfg, model::TargetMode::Union), 100.0);
}

TEST(Train, OriginalModeLossFallsBelowLogB) {
    const auto data = overfit_data();
    const auto cfg = model::ModelConfig::for_dim(16, 7);
    const auto result = train(data.triplets, data.images, data.texts, data.null_text, cfg,
                              overfit_config(model::TargetMode::Original));
    EXPECT_LT(result.final_epoch_mean_loss, std::log(32.0));
    EXPECT_GE(recall_at_1(data, result.params, cfg, model::TargetMode::Original), 90.0);
}

TEST(Train, SameSeedGivesIdenticalCheckpoint) {
    const auto data = synth_dataset({1, 12, 20, 16, 0.05});
    const auto cfg = model::ModelConfig::for_dim(16, 4);
    TrainConfig tc;
    tc.batch_size = 5;
    tc.seed = 9;
    const auto a = train(data.triplets, data.images, data.texts, data.null_text, cfg, tc);
    const auto b = train(data.triplets, data.images, data.texts, data.null_text, cfg, tc);
    EXPECT_EQ(model::encode_checkpoint(a.params, cfg), model::encode_checkpoint(b.params, cfg));
    tc.seed = 10;
    const auto c = train(data.triplets, data.images, data.texts, data.null_text, cfg, tc);
    EXPECT_NE(model::encode_checkpoint(a.params, cfg), model::encode_checkpoint(c.params, cfg));
}

TEST(Train, BatchCountsAndLog) {
    const auto data = synth_dataset({1, 11, 20, 16, 0.05});
    const auto cfg = model::ModelConfig::for_dim(16, 4);
    TrainConfig tc;
    tc.batch_size = 5; // 11 = 5 + 5 + 1, the singleton is dropped
    tc.epochs = 3;
    std::size_t callbacks = 0;
    const auto result = train(data.triplets, data.images, data.texts, data.null_text, cfg, tc,
                              [&](const BatchLog&) { ++callbacks; });
    EXPECT_EQ(result.steps, 6u);
    EXPECT_EQ(callbacks, 6u);
    EXPECT_EQ(result.log.back().epoch, 3u);
    EXPECT_EQ(result.log.back().batch, 2u);

    const auto text = format_log(result, tc);
    std::vector<nlohmann::json> lines;
    std::size_t start = 0;
    while (start < text.size()) {
        const auto end = text.find('\n', start);
        lines.push_back(nlohmann::json::parse(text.substr(start, end - start)));
        start = end + 1;
    }
    ASSERT_EQ(lines.size(), 7u);
    EXPECT_EQ(lines[0]["epoch"], 1);
    EXPECT_EQ(lines[0]["batch"], 1);
    EXPECT_DOUBLE_EQ(lines[0]["loss"].get<double>(), result.first_batch_loss);
    EXPECT_EQ(lines[6]["event"], "done");
    EXPECT_EQ(lines[6]["steps"], 6);
    EXPECT_EQ(lines[6]["mode"], "union");
}

TEST(Train, RejectsMismatchedInputs) {
    const auto data = synth_dataset({1, 8, 10, 16, 0.05});
    EXPECT_THROW(train(data.triplets, data.images, data.texts, data.null_text, model::ModelConfig::for_dim(32), {}),
                 ValidationError);
    TripletSet bad = data.triplets;
    bad[3].target_image_id = "missing";
    EXPECT_THROW(train(bad, data.images, data.texts, data.null_text, model::ModelConfig::for_dim(16), {}),
                 ValidationError);
    EXPECT_THROW(train(TripletSet(data.triplets.begin(), data.triplets.begin() + 1), data.images, data.texts,
                       data.null_text, model::ModelConfig::for_dim(16), {}),
                 ValidationError);
}
