#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace unionret {

// Id under which exporters and synth write the single null-text row.
inline constexpr std::string_view kNullTextId = "<null>";

// Fixed caption paired with every sketch query at training time.
inline constexpr std::string_view kSketchPrompt = "a real image of sketch";

inline constexpr std::size_t kMaxStoreDim = 65535;
inline constexpr std::uint64_t kMaxStoreCount = std::uint64_t{1} << 48;

/// Immutable id-addressable matrix of f32 embeddings (one row per id).
///
/// Construction validates every invariant: dim >= 1, unique ids, one row per id,
/// and finite values. Vectors are kept exactly as given; normalization happens
/// inside similarity computations.
class EmbeddingStore {
public:
    EmbeddingStore() = default;
    EmbeddingStore(std::size_t dim, std::vector<std::string> ids, std::vector<float> values);

    std::size_t dim() const noexcept { return dim_; }
    std::size_t size() const noexcept { return ids_.size(); }
    bool empty() const noexcept { return ids_.empty(); }

    const std::vector<std::string>& ids() const noexcept { return ids_; }
    std::span<const float> values() const noexcept { return values_; }
    std::span<const float> row(std::size_t i) const;
    std::vector<double> row_f64(std::size_t i) const;

    std::optional<std::size_t> find(std::string_view id) const;
    // Like find, but throws ValidationError naming the id.
    std::size_t index_of(std::string_view id) const;

    // Copy of this store without the given ids (order of the rest preserved).
    EmbeddingStore without(const std::set<std::string, std::less<>>& excluded) const;

    friend bool operator==(const EmbeddingStore& a, const EmbeddingStore& b);

private:
    std::size_t dim_ = 0;
    std::vector<std::string> ids_;
    std::vector<float> values_;
    std::unordered_map<std::string, std::size_t> index_;
};

struct NullTextEmbedding {
    std::vector<double> vector;
    std::string source_tag;

    // Takes the single row of a null-text store. The row id is not checked
    // against kNullTextId so hand-built stores stay usable.
    static NullTextEmbedding from_store(const EmbeddingStore& store, std::string source_tag);
};

struct TripletRecord {
    std::string query_image_id;
    std::optional<std::string> caption_id; // absent: null-text path
    std::string target_image_id;
    std::optional<std::string> query_id;   // optional "id" key; defaults to query_image_id

    const std::string& query_key() const noexcept { return query_id ? *query_id : query_image_id; }
    friend bool operator==(const TripletRecord&, const TripletRecord&) = default;
};

using TripletSet = std::vector<TripletRecord>;

/// Per-query sets of relevant target ids. Every stored query has at least one id.
class Qrels {
public:
    void add(const std::string& query_id, const std::string& target_id);

    bool contains(std::string_view query_id) const;
    // Throws ValidationError when the query has no judgments.
    const std::set<std::string, std::less<>>& relevant(std::string_view query_id) const;

    std::size_t size() const noexcept { return map_.size(); }
    const std::map<std::string, std::set<std::string, std::less<>>, std::less<>>& entries() const noexcept {
        return map_;
    }

    friend bool operator==(const Qrels&, const Qrels&) = default;

private:
    std::map<std::string, std::set<std::string, std::less<>>, std::less<>> map_;
};

// .ueb files: "UEBS", u32 version=1, u32 dim, u64 count, u8 dtype=1 (f32),
// 7 zero bytes, count*dim f32 row-major, then count × (u16 length + UTF-8 id).
void write_store(std::span<const std::string> ids, std::span<const float> values, std::size_t dim,
                 const std::filesystem::path& path);
void write_store(const EmbeddingStore& store, const std::filesystem::path& path);
EmbeddingStore read_store(const std::filesystem::path& path);

// In-memory codec used by the file functions; exposed for tests.
std::string encode_store(std::span<const std::string> ids, std::span<const float> values, std::size_t dim);
EmbeddingStore decode_store(std::string_view bytes, const std::string& origin = "store");

// Whole-file I/O; failures raise FormatError.
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view contents);

std::vector<double> l2_normalize(std::span<const double> v);

// Checks that every id in the set resolves; throws ValidationError on the first
// unresolved one.
void validate_triplets(const TripletSet& triplets, const EmbeddingStore& images, const EmbeddingStore& texts);

// JSON Lines with keys "query_image", "caption" (string or null), "target_image"
// and an optional "id". Blank lines are skipped. Nothing is returned unless every
// record parses and resolves.
TripletSet load_triplets(const std::filesystem::path& path, const EmbeddingStore& images,
                         const EmbeddingStore& texts);
TripletSet parse_triplets(std::string_view text);
void write_triplets(const TripletSet& triplets, const std::filesystem::path& path);

// TSV "query_id<TAB>target_id" per row.
Qrels load_qrels(const std::filesystem::path& path);
Qrels parse_qrels(std::string_view text);
void write_qrels(const Qrels& qrels, const std::filesystem::path& path);

struct SynthDataset {
    EmbeddingStore images;   // candidate pool "t…" followed by reference images "q…"
    EmbeddingStore texts;    // one caption "c…" per query
    NullTextEmbedding null_text;
    TripletSet triplets;     // query i: (q_i, c_i) -> t_i
    Qrels qrels;             // q_i -> {t_i}
};

struct SynthParams {
    std::uint64_t seed = 0;
    std::size_t n_queries = 32;
    std::size_t pool_size = 64;
    std::size_t dim = 16;
    double noise = 0.05;
};

// Angle by which each reference is rotated toward its caption to make its target.
inline constexpr double kSynthRotation = 0.7853981633974483; // pi/4
// Scale of the synthetic null-text vector relative to unit-variance features.
inline constexpr double kSynthNullScale = 0.5;

// Deterministic desk-scale dataset. Targets are the reference rotated by
// kSynthRotation toward the caption's component orthogonal to the reference,
// rescaled to the reference norm, plus N(0, noise^2) per coordinate. All
// construction math runs on the already-f32-rounded reference/caption values.
SynthDataset synth_dataset(const SynthParams& params);

// Noiseless target for one (reference, caption) pair in f64.
std::vector<double> synth_compose(std::span<const float> reference, std::span<const float> caption);

std::string synth_id(char prefix, std::size_t i);

} // namespace unionret
