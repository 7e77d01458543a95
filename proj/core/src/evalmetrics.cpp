#include "unionret/evalmetrics.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdio>

#include "binary_io.hpp"
#include "unionret/errors.hpp"

namespace unionret::eval {

namespace {

std::string lower(std::string_view s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

void check_cutoff(std::span<const std::string> ranking, const RelevantSet& relevant, std::size_t k) {
    if (relevant.empty()) throw ValidationError("empty relevant set");
    if (k < 1 || k > ranking.size()) {
        throw ValidationError("cutoff k=" + std::to_string(k) + " outside [1, " + std::to_string(ranking.size()) +
                              "]");
    }
}

std::vector<std::string> ranked_ids(const retrieval::RankedList& list) {
    std::vector<std::string> ids;
    ids.reserve(list.hits.size());
    for (const auto& h : list.hits) ids.push_back(h.id);
    return ids;
}

const RelevantSet& judged(const Qrels& qrels, const std::string& query_id) {
    if (!qrels.contains(query_id)) throw ValidationError("query '" + query_id + "' missing from qrels");
    return qrels.relevant(query_id);
}

double per_query(const MetricSpec& spec, std::span<const std::string> ranking, const RelevantSet& relevant) {
    switch (spec.kind) {
    case MetricKind::Recall: return 100.0 * recall_at_k(ranking, relevant, *spec.k);
    case MetricKind::Precision: return 100.0 * precision_at_k(ranking, relevant, *spec.k);
    case MetricKind::Map: return 100.0 * ap_at_k(ranking, relevant, *spec.k);
    case MetricKind::Mdr: return static_cast<double>(best_rank(ranking, relevant));
    case MetricKind::MapGtn:
        if (ranking.size() < relevant.size()) {
            throw ValidationError("ranking of length " + std::to_string(ranking.size()) + " is shorter than its " +
                                  std::to_string(relevant.size()) + " ground truths");
        }
        return 100.0 * ap_at_k(ranking, relevant, relevant.size());
    }
    return 0.0;
}

// Per-query values for one metric, in run order.
std::vector<double> per_query_values(const retrieval::RetrievalRun& run, const Qrels& qrels, const MetricSpec& spec) {
    if (run.empty()) throw ValidationError("run has no queries");
    std::vector<double> values;
    values.reserve(run.size());
    for (const auto& list : run) {
        const auto ids = ranked_ids(list);
        try {
            values.push_back(per_query(spec, ids, judged(qrels, list.query_id)));
        } catch (const ValidationError& e) {
            throw ValidationError(spec.name() + " for query '" + list.query_id + "': " + e.what());
        }
    }
    return values;
}

double aggregate(const MetricSpec& spec, const std::vector<double>& values) {
    if (spec.kind == MetricKind::Mdr) return median(values);
    double sum = 0.0;
    for (double v : values) sum += v;
    return sum / static_cast<double>(values.size());
}

std::string format_value(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

} // namespace

std::string MetricSpec::name() const {
    switch (kind) {
    case MetricKind::Recall: return "recall@" + std::to_string(k.value_or(0));
    case MetricKind::Precision: return "precision@" + std::to_string(k.value_or(0));
    case MetricKind::Map: return "map@" + std::to_string(k.value_or(0));
    case MetricKind::Mdr: return "mdr";
    case MetricKind::MapGtn: return "map-gtn";
    }
    return {};
}

MetricSpec parse_metric(std::string_view text) {
    const std::string s = lower(text);
    if (s == "mdr") return {MetricKind::Mdr, std::nullopt};
    if (s == "map-gtn" || s == "map_gtn" || s == "map/gtn") return {MetricKind::MapGtn, std::nullopt};
    const auto at = s.find('@');
    if (at == std::string::npos) throw ValidationError("unknown metric '" + std::string(text) + "'");
    const std::string head = s.substr(0, at);
    const std::string tail = s.substr(at + 1);
    std::size_t k = 0;
    auto [p, ec] = std::from_chars(tail.data(), tail.data() + tail.size(), k);
    if (ec != std::errc{} || p != tail.data() + tail.size() || k < 1) {
        throw ValidationError("metric '" + std::string(text) + "': cutoff must be a positive integer");
    }
    if (head == "recall" || head == "r") return {MetricKind::Recall, k};
    if (head == "precision" || head == "prec") return {MetricKind::Precision, k};
    if (head == "map") return {MetricKind::Map, k};
    throw ValidationError("unknown metric '" + std::string(text) + "'");
}

std::vector<MetricSpec> parse_metric_list(std::string_view text) {
    std::vector<MetricSpec> out;
    std::size_t start = 0;
    while (start <= text.size()) {
        auto comma = text.find(',', start);
        if (comma == std::string_view::npos) comma = text.size();
        auto item = text.substr(start, comma - start);
        while (!item.empty() && std::isspace(static_cast<unsigned char>(item.front()))) item.remove_prefix(1);
        while (!item.empty() && std::isspace(static_cast<unsigned char>(item.back()))) item.remove_suffix(1);
        if (item.empty()) throw ValidationError("empty entry in metric list");
        auto spec = parse_metric(item);
        if (std::find(out.begin(), out.end(), spec) != out.end()) {
            throw ValidationError("metric '" + spec.name() + "' listed twice");
        }
        out.push_back(spec);
        start = comma + 1;
    }
    return out;
}

double recall_at_k(std::span<const std::string> ranking, const RelevantSet& relevant, std::size_t k) {
    check_cutoff(ranking, relevant, k);
    for (std::size_t i = 0; i < k; ++i) {
        if (relevant.contains(ranking[i])) return 1.0;
    }
    return 0.0;
}

double precision_at_k(std::span<const std::string> ranking, const RelevantSet& relevant, std::size_t k) {
    check_cutoff(ranking, relevant, k);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < k; ++i) hits += relevant.contains(ranking[i]) ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(k);
}

double ap_at_k(std::span<const std::string> ranking, const RelevantSet& relevant, std::size_t k) {
    check_cutoff(ranking, relevant, k);
    std::size_t hits = 0;
    double sum = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        if (relevant.contains(ranking[i])) {
            ++hits;
            sum += static_cast<double>(hits) / static_cast<double>(i + 1);
        }
    }
    return sum / static_cast<double>(std::min(relevant.size(), k));
}

std::size_t best_rank(std::span<const std::string> ranking, const RelevantSet& relevant) {
    if (relevant.empty()) throw ValidationError("empty relevant set");
    for (std::size_t i = 0; i < ranking.size(); ++i) {
        if (relevant.contains(ranking[i])) return i + 1;
    }
    throw ValidationError("no relevant id in ranking of length " + std::to_string(ranking.size()) +
                          " (truncated run?)");
}

double median(std::vector<double> values) {
    if (values.empty()) throw ValidationError("median of an empty list");
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    if (n % 2 == 1) return values[n / 2];
    return (values[n / 2 - 1] + values[n / 2]) / 2.0;
}

double mean_recall_at_k(const retrieval::RetrievalRun& run, const Qrels& qrels, std::size_t k) {
    MetricSpec spec{MetricKind::Recall, k};
    return aggregate(spec, per_query_values(run, qrels, spec));
}

double mean_precision_at_k(const retrieval::RetrievalRun& run, const Qrels& qrels, std::size_t k) {
    MetricSpec spec{MetricKind::Precision, k};
    return aggregate(spec, per_query_values(run, qrels, spec));
}

double map_at_k(const retrieval::RetrievalRun& run, const Qrels& qrels, std::size_t k) {
    MetricSpec spec{MetricKind::Map, k};
    return aggregate(spec, per_query_values(run, qrels, spec));
}

double median_rank(const retrieval::RetrievalRun& run, const Qrels& qrels) {
    MetricSpec spec{MetricKind::Mdr, std::nullopt};
    return aggregate(spec, per_query_values(run, qrels, spec));
}

double map_per_gtn(const retrieval::RetrievalRun& run, const Qrels& qrels) {
    MetricSpec spec{MetricKind::MapGtn, std::nullopt};
    return aggregate(spec, per_query_values(run, qrels, spec));
}

const MetricValue* MetricReport::find(std::string_view name) const {
    for (const auto& m : metrics) {
        if (m.name == name) return &m;
    }
    return nullptr;
}

nlohmann::ordered_json MetricReport::to_json() const {
    nlohmann::ordered_json j;
    if (!backbone_tag.empty()) j["backbone_tag"] = backbone_tag;
    if (!mode.empty()) j["mode"] = mode;
    if (!dataset.empty()) j["dataset"] = dataset;
    j["num_queries"] = num_queries;
    j["metrics"] = nlohmann::ordered_json::object();
    for (const auto& m : metrics) j["metrics"][m.name] = m.value;
    j["per_query"] = nlohmann::ordered_json::array();
    for (const auto& q : per_query) {
        nlohmann::ordered_json row;
        row["query_id"] = q.query_id;
        for (const auto& v : q.values) row[v.name] = v.value;
        j["per_query"].push_back(std::move(row));
    }
    return j;
}

MetricReport MetricReport::from_json(const nlohmann::ordered_json& j) {
    MetricReport r;
    try {
        if (!j.is_object() || !j.contains("metrics") || !j.at("metrics").is_object()) {
            throw FormatError("report JSON lacks a \"metrics\" object");
        }
        for (const auto& [name, value] : j.at("metrics").items()) {
            if (!value.is_number()) throw FormatError("report metric '" + name + "' is not a number");
            r.metrics.push_back({name, value.get<double>()});
        }
        r.num_queries = j.value("num_queries", std::size_t{0});
        r.backbone_tag = j.value("backbone_tag", std::string{});
        r.mode = j.value("mode", std::string{});
        r.dataset = j.value("dataset", std::string{});
        if (j.contains("per_query")) {
            for (const auto& row : j.at("per_query")) {
                QueryBreakdown q;
                q.query_id = row.at("query_id").get<std::string>();
                for (const auto& [name, value] : row.items()) {
                    if (name != "query_id") q.values.push_back({name, value.get<double>()});
                }
                r.per_query.push_back(std::move(q));
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed report JSON: ") + e.what());
    }
    return r;
}

MetricReport evaluate(const retrieval::RetrievalRun& run, const Qrels& qrels, std::span<const MetricSpec> metrics) {
    if (metrics.empty()) throw ValidationError("no metrics requested");
    MetricReport report;
    report.num_queries = run.size();
    report.per_query.resize(run.size());
    for (std::size_t q = 0; q < run.size(); ++q) report.per_query[q].query_id = run[q].query_id;
    for (const auto& spec : metrics) {
        if ((spec.kind == MetricKind::Recall || spec.kind == MetricKind::Precision || spec.kind == MetricKind::Map) &&
            (!spec.k || *spec.k < 1)) {
            throw ValidationError("metric " + spec.name() + " needs a cutoff k >= 1");
        }
        const auto values = per_query_values(run, qrels, spec);
        report.metrics.push_back({spec.name(), aggregate(spec, values)});
        for (std::size_t q = 0; q < values.size(); ++q) report.per_query[q].values.push_back({spec.name(), values[q]});
    }
    return report;
}

std::vector<ReportGroup> group_reports(std::span<const MetricReport> reports) {
    if (reports.empty()) throw ValidationError("no reports to emit");
    std::vector<ReportGroup> groups;
    for (const auto& r : reports) {
        const std::string key = (r.backbone_tag.empty() ? "default" : r.backbone_tag) + "/" +
                                (r.mode.empty() ? "default" : r.mode);
        auto it = std::find_if(groups.begin(), groups.end(), [&](const ReportGroup& g) { return g.key == key; });
        if (it == groups.end()) {
            groups.push_back({key, {}, 0.0});
            it = groups.end() - 1;
        }
        for (const auto& m : r.metrics) {
            const std::string name = r.dataset.empty() ? m.name : r.dataset + ":" + m.name;
            for (const auto& existing : it->metrics) {
                if (existing.name == name) throw ValidationError("group " + key + " lists metric " + name + " twice");
            }
            it->metrics.push_back({name, m.value});
        }
    }
    for (auto& g : groups) {
        if (g.metrics.empty()) throw ValidationError("group " + g.key + " has no metrics");
        double sum = 0.0;
        for (const auto& m : g.metrics) sum += m.value;
        g.average = sum / static_cast<double>(g.metrics.size());
    }
    auto names = [](const ReportGroup& g) {
        std::vector<std::string> out;
        for (const auto& m : g.metrics) out.push_back(m.name);
        std::sort(out.begin(), out.end());
        return out;
    };
    const auto reference = names(groups.front());
    for (const auto& g : groups) {
        if (names(g) != reference) {
            throw ValidationError("inconsistent metric sets: group " + g.key + " differs from " + groups.front().key);
        }
    }
    return groups;
}

std::string format_report_csv(std::span<const ReportGroup> groups) {
    std::string out = "group,metric,value\n";
    for (const auto& g : groups) {
        for (const auto& m : g.metrics) out += g.key + "," + m.name + "," + format_value(m.value) + "\n";
        out += g.key + ",average," + format_value(g.average) + "\n";
    }
    return out;
}

nlohmann::ordered_json report_json(std::span<const ReportGroup> groups) {
    nlohmann::ordered_json j;
    j["groups"] = nlohmann::ordered_json::array();
    for (const auto& g : groups) {
        nlohmann::ordered_json entry;
        entry["key"] = g.key;
        entry["metrics"] = nlohmann::ordered_json::object();
        for (const auto& m : g.metrics) entry["metrics"][m.name] = m.value;
        entry["average"] = g.average;
        j["groups"].push_back(std::move(entry));
    }
    return j;
}

void emit_report(std::span<const MetricReport> reports, const std::filesystem::path& csv_path) {
    if (csv_path.extension() == ".json") throw ValidationError("report path must not end in .json");
    const auto groups = group_reports(reports);
    auto json_path = csv_path;
    json_path.replace_extension(".json");
    detail::write_file(csv_path, format_report_csv(groups));
    detail::write_file(json_path, report_json(groups).dump(2) + "\n");
}

} // namespace unionret::eval
