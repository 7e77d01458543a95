#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "unionret/errors.hpp"
#include "unionret/evalmetrics.hpp"

using namespace unionret;
using namespace unionret::eval;
using retrieval::RankedList;
using retrieval::RetrievalRun;

namespace {

RankedList ranked(const std::string& q, const std::vector<std::string>& ids) {
    RankedList list{q, {}};
    double s = 1.0;
    for (const auto& id : ids) list.hits.push_back({id, s -= 0.01});
    return list;
}

MetricReport simple_report(const std::string& backbone, const std::string& mode, double r1, double map) {
    MetricReport r;
    r.backbone_tag = backbone;
    r.mode = mode;
    r.num_queries = 4;
    r.metrics = {{"recall@1", r1}, {"map-gtn", map}};
    return r;
}

} // namespace

TEST(MetricNames, ParseCanonicalAndAliases) {
    EXPECT_EQ(parse_metric("recall@5"), (MetricSpec{MetricKind::Recall, 5}));
    EXPECT_EQ(parse_metric("R@10"), (MetricSpec{MetricKind::Recall, 10}));
    EXPECT_EQ(parse_metric("prec@3"), (MetricSpec{MetricKind::Precision, 3}));
    EXPECT_EQ(parse_metric("map@10").name(), "map@10");
    EXPECT_EQ(parse_metric("MdR"), (MetricSpec{MetricKind::Mdr, std::nullopt}));
    for (const char* alias : {"map-gtn", "map_gtn", "mAP/GTN"}) {
        EXPECT_EQ(parse_metric(alias), (MetricSpec{MetricKind::MapGtn, std::nullopt})) << alias;
    }
    for (const char* bad : {"recall", "recall@0", "recall@x", "ndcg@10", "mdr@3", ""}) {
        EXPECT_THROW(parse_metric(bad), ValidationError) << bad;
    }
    EXPECT_EQ(parse_metric_list("recall@1,mdr").size(), 2u);
    EXPECT_THROW(parse_metric_list("recall@1,r@1"), ValidationError);
}

TEST(PerQuery, WorkedExamples) {
    const std::vector<std::string> r{"n1", "g", "n2", "n3"};
    const RelevantSet rel{"g"};
    EXPECT_EQ(recall_at_k(r, rel, 1), 0.0);
    EXPECT_EQ(recall_at_k(r, rel, 2), 1.0);
    EXPECT_EQ(precision_at_k(r, rel, 4), 0.25);
    EXPECT_EQ(ap_at_k(r, rel, 3), 0.5);
    EXPECT_EQ(best_rank(r, rel), 2u);

    // [GT, non, GT] with k = 2: only the first relevant counts, normalized by min(2, 2).
    const std::vector<std::string> r2{"g1", "x", "g2"};
    const RelevantSet rel2{"g1", "g2"};
    EXPECT_EQ(ap_at_k(r2, rel2, 2), 0.5);
    EXPECT_NEAR(ap_at_k(r2, rel2, 3), (1.0 + 2.0 / 3.0) / 2.0, 1e-15);
}

TEST(PerQuery, RejectsBadArguments) {
    const std::vector<std::string> r{"a", "b"};
    EXPECT_THROW(recall_at_k(r, {"a"}, 0), ValidationError);
    EXPECT_THROW(recall_at_k(r, {"a"}, 3), ValidationError);
    EXPECT_THROW(ap_at_k(r, {}, 1), ValidationError);
    EXPECT_THROW(best_rank(r, {"z"}), ValidationError);
}

TEST(Median, OddAndEven) {
    EXPECT_EQ(median({1, 3, 5}), 3.0);
    EXPECT_EQ(median({4, 2}), 3.0);
    EXPECT_EQ(median({7}), 7.0);
    EXPECT_THROW(median({}), ValidationError);
}

TEST(RunMetrics, MedianRankExamples) {
    Qrels qrels;
    qrels.add("a", "g");
    qrels.add("b", "g");
    qrels.add("c", "g");
    RetrievalRun run{ranked("a", {"g", "x", "y", "z", "w"}), ranked("b", {"x", "y", "g", "z", "w"}),
                     ranked("c", {"x", "y", "z", "w", "g"})};
    EXPECT_EQ(median_rank(run, qrels), 3.0);
    RetrievalRun even{ranked("a", {"x", "g", "y", "z"}), ranked("b", {"x", "y", "z", "g"})};
    EXPECT_EQ(median_rank(even, qrels), 3.0);
}

TEST(RunMetrics, PercentagesAndMissingQueries) {
    Qrels qrels;
    qrels.add("a", "g");
    qrels.add("b", "h");
    RetrievalRun run{ranked("a", {"g", "x"}), ranked("b", {"x", "h"})};
    EXPECT_EQ(mean_recall_at_k(run, qrels, 1), 50.0);
    EXPECT_EQ(mean_recall_at_k(run, qrels, 2), 100.0);
    EXPECT_EQ(mean_precision_at_k(run, qrels, 2), 50.0);
    EXPECT_EQ(map_at_k(run, qrels, 2), 75.0);
    EXPECT_EQ(map_per_gtn(run, qrels), 50.0);
    RetrievalRun stray{ranked("zz", {"g", "x"})};
    EXPECT_THROW(mean_recall_at_k(stray, qrels, 1), ValidationError);
}

TEST(RunMetrics, MapPerGtnUsesRelevantCountAsCutoff) {
    Qrels qrels;
    qrels.add("q", "a");
    qrels.add("q", "b");
    qrels.add("q", "c");
    RetrievalRun run{ranked("q", {"a", "x", "b", "c"})};
    EXPECT_NEAR(map_per_gtn(run, qrels), 100.0 * (1.0 + 2.0 / 3.0) / 3.0, 1e-12);
    RetrievalRun short_run{ranked("q", {"a", "b"})};
    EXPECT_THROW(map_per_gtn(short_run, qrels), ValidationError);
}

TEST(RunMetrics, AgreeWithOraclesOnRandomInstances) {
    Rng rng(17);
    for (int trial = 0; trial < 300; ++trial) {
        Qrels qrels;
        RetrievalRun run;
        std::vector<oracle::RankingCase> cases;
        const std::size_t n_queries = 1 + rng.below(6);
        for (std::size_t q = 0; q < n_queries; ++q) {
            auto c = oracle::random_case(rng, 20, 5);
            const std::string qid = "q" + std::to_string(q);
            for (const auto& id : c.relevant) qrels.add(qid, id);
            run.push_back(ranked(qid, c.ranking));
            cases.push_back(std::move(c));
        }
        for (std::size_t k : {1u, 5u, 10u, 20u}) {
            std::vector<double> rec, prec, ap;
            for (const auto& c : cases) {
                rec.push_back(oracle::recall(c.ranking, c.relevant, k));
                prec.push_back(oracle::precision(c.ranking, c.relevant, k));
                ap.push_back(oracle::average_precision(c.ranking, c.relevant, k));
            }
            EXPECT_NEAR(mean_recall_at_k(run, qrels, k), 100.0 * oracle::mean(rec), 1e-9);
            EXPECT_NEAR(mean_precision_at_k(run, qrels, k), 100.0 * oracle::mean(prec), 1e-9);
            EXPECT_NEAR(map_at_k(run, qrels, k), 100.0 * oracle::mean(ap), 1e-9);
        }
        std::vector<double> ranks, gtn;
        for (const auto& c : cases) {
            ranks.push_back(static_cast<double>(oracle::best_rank(c.ranking, c.relevant)));
            gtn.push_back(oracle::average_precision(c.ranking, c.relevant, c.relevant.size()));
        }
        EXPECT_EQ(median_rank(run, qrels), oracle::median(ranks));
        EXPECT_NEAR(map_per_gtn(run, qrels), 100.0 * oracle::mean(gtn), 1e-9);
    }
}

TEST(Evaluate, ReportsExactlyRequestedMetricsInOrder) {
    Qrels qrels;
    qrels.add("a", "g");
    qrels.add("b", "h");
    RetrievalRun run{ranked("a", {"g", "x", "y"}), ranked("b", {"x", "h", "y"})};
    const auto specs = parse_metric_list("mdr,recall@1,map-gtn");
    const auto report = evaluate(run, qrels, specs);
    ASSERT_EQ(report.metrics.size(), 3u);
    EXPECT_EQ(report.metrics[0].name, "mdr");
    EXPECT_EQ(report.metrics[0].value, 1.5);
    EXPECT_EQ(report.metrics[1].name, "recall@1");
    EXPECT_EQ(report.metrics[1].value, 50.0);
    EXPECT_EQ(report.metrics[2].name, "map-gtn");
    EXPECT_EQ(report.num_queries, 2u);
    ASSERT_EQ(report.per_query.size(), 2u);
    EXPECT_EQ(report.per_query[1].values[0].value, 2.0);
    ASSERT_NE(report.find("recall@1"), nullptr);
    EXPECT_EQ(report.find("recall@5"), nullptr);

    auto tagged = report;
    tagged.backbone_tag = "vitb32";
    tagged.mode = "union";
    tagged.dataset = "cirr";
    const auto back = MetricReport::from_json(tagged.to_json());
    EXPECT_EQ(back.metrics, tagged.metrics);
    EXPECT_EQ(back.backbone_tag, "vitb32");
    EXPECT_EQ(back.dataset, "cirr");
    EXPECT_EQ(back.per_query.size(), 2u);
}

TEST(Reports, SixGroupsForThreeModesTimesTwoBackbones) {
    std::vector<MetricReport> reports;
    for (const char* bb : {"b32", "l14"})
        for (const char* mode : {"original", "sum", "union"}) reports.push_back(simple_report(bb, mode, 40.0, 60.0));
    const auto groups = group_reports(reports);
    ASSERT_EQ(groups.size(), 6u);
    EXPECT_EQ(groups[0].key, "b32/original");
    EXPECT_EQ(groups[5].key, "l14/union");
    for (const auto& g : groups) EXPECT_EQ(g.average, 50.0);

    const auto csv = format_report_csv(groups);
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "group,metric,value");
    std::getline(in, line);
    EXPECT_EQ(line, "b32/original,recall@1,40.000000");
    std::size_t averages = 0;
    while (std::getline(in, line)) averages += line.find(",average,") != std::string::npos;
    EXPECT_EQ(averages, 6u);

    const auto j = report_json(groups);
    EXPECT_EQ(j["groups"].size(), 6u);
    EXPECT_EQ(j["groups"][0]["metrics"]["map-gtn"], 60.0);
}

TEST(Reports, DatasetsConcatenateWithinGroup) {
    auto a = simple_report("b", "union", 10.0, 20.0);
    a.dataset = "cirr";
    auto b = simple_report("b", "union", 30.0, 40.0);
    b.dataset = "fiq";
    const std::vector<MetricReport> reports{a, b};
    const auto groups = group_reports(reports);
    ASSERT_EQ(groups.size(), 1u);
    ASSERT_EQ(groups[0].metrics.size(), 4u);
    EXPECT_EQ(groups[0].metrics[0].name, "cirr:recall@1");
    EXPECT_EQ(groups[0].metrics[3].name, "fiq:map-gtn");
    EXPECT_EQ(groups[0].average, 25.0);
}

TEST(Reports, EmptyTagsFallBackToDefault) {
    const std::vector<MetricReport> reports{simple_report("", "", 1.0, 2.0)};
    EXPECT_EQ(group_reports(reports)[0].key, "default/default");
}

TEST(Reports, InconsistentMetricSetsRejected) {
    auto a = simple_report("b", "original", 1, 2);
    auto b = simple_report("b", "union", 1, 2);
    b.metrics.pop_back();
    EXPECT_THROW(group_reports(std::vector<MetricReport>{a, b}), ValidationError);
    auto c = simple_report("b", "original", 1, 2);
    EXPECT_THROW(group_reports(std::vector<MetricReport>{a, c}), ValidationError);
}

TEST(Reports, EmitWritesCsvAndJsonMirror) {
    const auto dir = std::filesystem::temp_directory_path() / "unionret_report_test";
    std::filesystem::create_directories(dir);
    const std::vector<MetricReport> reports{simple_report("b", "union", 80, 90)};
    emit_report(reports, dir / "ablation.csv");
    EXPECT_TRUE(std::filesystem::exists(dir / "ablation.csv"));
    std::ifstream json(dir / "ablation.json");
    const auto j = nlohmann::json::parse(json);
    EXPECT_EQ(j["groups"][0]["average"], 85.0);
    EXPECT_THROW(emit_report(reports, dir / "ablation.json"), ValidationError);
    std::filesystem::remove_all(dir);
}
