#pragma once

// Reference implementations written directly from the metric and ranking
// definitions. They share no code with the library beyond plain data types.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <iterator>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "unionret/rng.hpp"

namespace oracle {

using Ranking = std::vector<std::string>;
using Relevant = std::set<std::string, std::less<>>;

inline std::vector<std::string> top(const Ranking& ranking, std::size_t k) {
    return {ranking.begin(), ranking.begin() + static_cast<std::ptrdiff_t>(k)};
}

inline double recall(const Ranking& ranking, const Relevant& rel, std::size_t k) {
    auto head = top(ranking, k);
    std::sort(head.begin(), head.end());
    std::vector<std::string> common;
    std::set_intersection(head.begin(), head.end(), rel.begin(), rel.end(), std::back_inserter(common));
    return common.empty() ? 0.0 : 1.0;
}

inline double precision(const Ranking& ranking, const Relevant& rel, std::size_t k) {
    double count = 0.0;
    for (const auto& id : top(ranking, k)) count += static_cast<double>(rel.count(id));
    return count / static_cast<double>(k);
}

// Sum over relevant positions of Precision@i, each recomputed from scratch.
inline double average_precision(const Ranking& ranking, const Relevant& rel, std::size_t k) {
    double sum = 0.0;
    for (std::size_t i = 1; i <= k; ++i) {
        if (rel.count(ranking[i - 1]) != 0) sum += precision(ranking, rel, i);
    }
    return sum / static_cast<double>(std::min(rel.size(), k));
}

inline std::size_t best_rank(const Ranking& ranking, const Relevant& rel) {
    std::size_t best = ranking.size() + 1;
    for (const auto& r : rel) {
        auto it = std::find(ranking.begin(), ranking.end(), r);
        if (it != ranking.end()) best = std::min(best, static_cast<std::size_t>(it - ranking.begin()) + 1);
    }
    return best;
}

inline double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

// Scores every candidate, sorts the whole list (score descending, id
// ascending) and keeps the first k.
inline std::vector<std::pair<std::string, double>> sort_all(const std::vector<std::string>& ids,
                                                            const std::vector<std::vector<double>>& unit_rows,
                                                            const std::vector<double>& query, std::size_t k) {
    double norm = 0.0;
    for (double x : query) norm += x * x;
    norm = std::sqrt(norm);
    std::vector<std::pair<std::string, double>> all;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        double dot = 0.0;
        for (std::size_t d = 0; d < query.size(); ++d) dot += (query[d] / norm) * unit_rows[i][d];
        all.emplace_back(ids[i], std::clamp(dot, -1.0, 1.0));
    }
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    all.resize(k);
    return all;
}

// Random ranking over a pool of `pool` ids with a random nonempty relevant set.
struct RankingCase {
    Ranking ranking;
    Relevant relevant;
};

inline RankingCase random_case(unionret::Rng& rng, std::size_t pool, std::size_t max_relevant) {
    RankingCase c;
    for (std::size_t i = 0; i < pool; ++i) c.ranking.push_back("d" + std::to_string(i));
    rng.shuffle(c.ranking.begin(), c.ranking.end());
    const std::size_t n_rel = 1 + rng.below(max_relevant);
    while (c.relevant.size() < n_rel) c.relevant.insert("d" + std::to_string(rng.below(pool)));
    return c;
}

} // namespace oracle
