#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "unionret/embedstore.hpp"
#include "unionret/model.hpp"

namespace unionret::retrieval {

/// Candidate features after the mode transform and L2 normalization.
/// Immutable once built; searches may run concurrently.
struct Index {
    model::TargetMode mode = model::TargetMode::Original;
    std::size_t dim = 0;
    std::vector<std::string> ids;
    std::vector<double> features; // ids.size() x dim, unit rows
    std::string checkpoint_hash;  // empty when built without a checkpoint file
    std::string null_text_tag;

    std::size_t size() const noexcept { return ids.size(); }
    std::span<const double> row(std::size_t i) const { return {features.data() + i * dim, dim}; }

    friend bool operator==(const Index&, const Index&) = default;
};

struct Hit {
    std::string id;
    double score = 0.0;

    friend bool operator==(const Hit&, const Hit&) = default;
};

struct RankedList {
    std::string query_id;
    std::vector<Hit> hits; // score non-increasing, ties by ascending id

    friend bool operator==(const RankedList&, const RankedList&) = default;
};

using RetrievalRun = std::vector<RankedList>;

struct QueryFeature {
    std::string id;
    std::vector<double> feature;
};

// Candidates are transformed in fixed-size chunks; the chunking does not depend
// on `threads`, so the result is identical for every thread count.
Index build_index(const EmbeddingStore& images, const NullTextEmbedding& null_text, model::TargetMode mode,
                  const model::ModelParams& params, const model::ModelConfig& config, std::size_t threads = 1);

// Exact top-k by cosine score. Scores are clamped to [-1, 1].
RankedList search(const Index& index, std::string query_id, std::span<const double> query, std::size_t k);

// Query order is preserved; results do not depend on `threads`.
RetrievalRun batch_search(const Index& index, std::span<const QueryFeature> queries, std::size_t k,
                          std::size_t threads = 1);

// Fused query feature per triplet, keyed by TripletRecord::query_key().
// Duplicate keys are rejected. Captionless queries use the null-text embedding.
std::vector<QueryFeature> embed_queries(const TripletSet& triplets, const EmbeddingStore& images,
                                        const EmbeddingStore& texts, const NullTextEmbedding& null_text,
                                        const model::ModelParams& params, const model::ModelConfig& config,
                                        std::size_t threads = 1);

// Run files: header "query_id\trank\tcandidate_id\tscore", then one row per hit,
// rank from 1, score printed with 6 decimals.
inline constexpr std::string_view kRunHeader = "query_id\trank\tcandidate_id\tscore";

std::string format_run(const RetrievalRun& run);
// Header optional. Rows of a query must be contiguous with ranks 1, 2, ...
RetrievalRun parse_run(std::string_view text);
void write_run(const RetrievalRun& run, const std::filesystem::path& path);
RetrievalRun read_run(const std::filesystem::path& path);

// Index files: "UIDX" · u32 version=1 · u8 mode · 3 zero bytes · u32 dim ·
// u64 count · count*dim f64 · count × (u16 length + id) · checkpoint hash and
// null-text tag, each as u16 length + bytes.
std::string encode_index(const Index& index);
Index decode_index(std::string_view bytes, const std::string& origin = "index");
void save_index(const Index& index, const std::filesystem::path& path);
Index load_index(const std::filesystem::path& path);

} // namespace unionret::retrieval
