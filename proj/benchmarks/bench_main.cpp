#include <set>
#include <string>
#include <vector>

#include <benchmark/benchmark.h>

#include "unionret/embedstore.hpp"
#include "unionret/model.hpp"
#include "unionret/retrieval.hpp"
#include "unionret/rng.hpp"
#include "unionret/trainer.hpp"

using namespace unionret;

namespace {

retrieval::Index random_index(std::size_t n, std::size_t d) {
    Rng rng(1);
    retrieval::Index index;
    index.dim = d;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> row(d);
        for (auto& x : row) x = rng.normal();
        row = l2_normalize(row);
        index.ids.push_back("c" + std::to_string(i));
        index.features.insert(index.features.end(), row.begin(), row.end());
    }
    return index;
}

void BM_Search(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto index = random_index(n, 512);
    Rng rng(2);
    std::vector<double> q(512);
    for (auto& x : q) x = rng.normal();
    for (auto _ : state) benchmark::DoNotOptimize(retrieval::search(index, "q", q, 50));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_Search)->Arg(1000)->Arg(10000);

void BM_BatchSearch(benchmark::State& state) {
    const auto index = random_index(5000, 128);
    Rng rng(3);
    std::vector<retrieval::QueryFeature> queries;
    for (int i = 0; i < 64; ++i) {
        std::vector<double> q(128);
        for (auto& x : q) x = rng.normal();
        queries.push_back({"q" + std::to_string(i), q});
    }
    const auto threads = static_cast<std::size_t>(state.range(0));
    for (auto _ : state) benchmark::DoNotOptimize(retrieval::batch_search(index, queries, 10, threads));
}
BENCHMARK(BM_BatchSearch)->Arg(1)->Arg(4)->UseRealTime();

nd::Tensor random_rows(Rng& rng, std::size_t b, std::size_t d) {
    std::vector<double> v(b * d);
    for (auto& x : v) x = rng.normal();
    return nd::Tensor::from({b, d}, std::move(v));
}

void BM_UnionForwardBackward(benchmark::State& state) {
    const auto d = static_cast<std::size_t>(state.range(0));
    const auto cfg = model::ModelConfig::for_dim(d, 1);
    const auto params = model::init_params(cfg);
    Rng rng(4);
    const auto targets = random_rows(rng, 32, d);
    const auto nulls = random_rows(rng, 32, d);
    for (auto _ : state) {
        params.zero_grad();
        nd::Tape tape;
        auto out = model::union_forward(tape, params, cfg, targets, nulls);
        tape.backward(nd::reduce_sum(tape, out.feature));
    }
}
BENCHMARK(BM_UnionForwardBackward)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
    const auto data = synth_dataset({7, 32, 64, 16, 0.05});
    const auto cfg = model::ModelConfig::for_dim(16, 0);
    const auto params = model::init_params(cfg);
    std::vector<std::size_t> rows(32);
    for (std::size_t i = 0; i < 32; ++i) rows[i] = i;
    const auto batch = trainer::gather_batch(rows, data.triplets, data.images, data.texts, data.null_text);
    trainer::OptimizerState opt;
    const trainer::TrainConfig tc;
    const auto named = params.named();
    for (auto _ : state) {
        params.zero_grad();
        nd::Tape tape;
        auto loss = trainer::pipeline_loss(tape, params, cfg, model::TargetMode::Union, batch);
        tape.backward(loss);
        trainer::adamw_step(named, opt, tc);
    }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

} // namespace

BENCHMARK_MAIN();
