#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "unionret/embedstore.hpp"
#include "unionret/retrieval.hpp"

namespace unionret::eval {

using RelevantSet = std::set<std::string, std::less<>>;

enum class MetricKind { Recall, Precision, Map, Mdr, MapGtn };

struct MetricSpec {
    MetricKind kind = MetricKind::Recall;
    std::optional<std::size_t> k; // required for recall, precision and map

    // Canonical name: "recall@K", "precision@K", "map@K", "mdr", "map-gtn".
    std::string name() const;
    friend bool operator==(const MetricSpec&, const MetricSpec&) = default;
};

// Accepts the canonical names plus "prec@K", "r@K", "map_gtn" and "mAP/GTN"
// (case-insensitive). Throws ValidationError otherwise.
MetricSpec parse_metric(std::string_view text);
// Comma-separated list; duplicates rejected.
std::vector<MetricSpec> parse_metric_list(std::string_view text);

// Per-query quantities over a ranked id list. All require 1 <= k <= |ranking|
// and a nonempty relevant set.
double recall_at_k(std::span<const std::string> ranking, const RelevantSet& relevant, std::size_t k);
double precision_at_k(std::span<const std::string> ranking, const RelevantSet& relevant, std::size_t k);
// (1 / min(|relevant|, k)) * sum_{i<=k} rel(i) * Precision@i
double ap_at_k(std::span<const std::string> ranking, const RelevantSet& relevant, std::size_t k);
// 1-based rank of the best-ranked relevant id; throws if none is present.
std::size_t best_rank(std::span<const std::string> ranking, const RelevantSet& relevant);

// Run-level aggregates. Every run query must appear in qrels. Percentages,
// except median_rank which is in rank units (even counts average the middle two).
double mean_recall_at_k(const retrieval::RetrievalRun& run, const Qrels& qrels, std::size_t k);
double mean_precision_at_k(const retrieval::RetrievalRun& run, const Qrels& qrels, std::size_t k);
double map_at_k(const retrieval::RetrievalRun& run, const Qrels& qrels, std::size_t k);
double median_rank(const retrieval::RetrievalRun& run, const Qrels& qrels);
double map_per_gtn(const retrieval::RetrievalRun& run, const Qrels& qrels);

double median(std::vector<double> values);

struct MetricValue {
    std::string name;
    double value = 0.0;
    friend bool operator==(const MetricValue&, const MetricValue&) = default;
};

struct QueryBreakdown {
    std::string query_id;
    std::vector<MetricValue> values; // per-query value in the same units as the aggregate
};

struct MetricReport {
    std::vector<MetricValue> metrics; // in requested order
    std::vector<QueryBreakdown> per_query;
    std::size_t num_queries = 0;
    std::string backbone_tag;
    std::string mode;
    std::string dataset;

    const MetricValue* find(std::string_view name) const;
    nlohmann::ordered_json to_json() const;
    static MetricReport from_json(const nlohmann::ordered_json& j);
};

MetricReport evaluate(const retrieval::RetrievalRun& run, const Qrels& qrels, std::span<const MetricSpec> metrics);

struct ReportGroup {
    std::string key;                  // "backbone/mode"
    std::vector<MetricValue> metrics; // dataset-prefixed when the report names one
    double average = 0.0;             // unweighted mean of `metrics`
};

// Groups reports by (backbone_tag, mode) in first-seen order. Within a group
// metrics from several reports are concatenated; metric names are prefixed with
// "dataset:" when the report carries a dataset tag. Every group must list the
// same metric names.
std::vector<ReportGroup> group_reports(std::span<const MetricReport> reports);

// CSV "group,metric,value" with an "average" row closing each group.
std::string format_report_csv(std::span<const ReportGroup> groups);
// {"groups":[{"key":…,"metrics":{…},"average":…}]}
nlohmann::ordered_json report_json(std::span<const ReportGroup> groups);

// Writes the CSV to `csv_path` and the JSON mirror next to it (extension .json).
void emit_report(std::span<const MetricReport> reports, const std::filesystem::path& csv_path);

} // namespace unionret::eval
