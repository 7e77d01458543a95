#include "unionret/retrieval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <limits>
#include <set>
#include <unordered_set>

#include "binary_io.hpp"
#include "parallel.hpp"
#include "unionret/errors.hpp"

namespace unionret::retrieval {

namespace {

constexpr std::string_view kIndexMagic = "UIDX";
constexpr std::uint32_t kIndexVersion = 1;
constexpr std::size_t kChunk = 64;

std::uint8_t mode_code(model::TargetMode mode) {
    switch (mode) {
    case model::TargetMode::Original: return 0;
    case model::TargetMode::Sum: return 1;
    case model::TargetMode::Union: return 2;
    }
    return 0;
}

std::vector<double> normalized_or_throw(std::span<const double> v, const std::string& what) {
    double sq = 0.0;
    for (double x : v) sq += x * x;
    const double norm = std::sqrt(sq);
    if (!(norm > 0.0) || !std::isfinite(norm)) throw ValidationError(what + " has zero or non-finite norm");
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / norm;
    return out;
}

nd::Tensor rows_tensor(const EmbeddingStore& store, std::span<const std::size_t> rows) {
    std::vector<double> values;
    values.reserve(rows.size() * store.dim());
    for (auto r : rows) {
        auto row = store.row(r);
        values.insert(values.end(), row.begin(), row.end());
    }
    return nd::Tensor::from({rows.size(), store.dim()}, std::move(values));
}

void check_dims(std::size_t store_dim, const NullTextEmbedding& null_text, const model::ModelConfig& config) {
    if (store_dim != config.dim) {
        throw ValidationError("store dim " + std::to_string(store_dim) + " != checkpoint dim " +
                              std::to_string(config.dim));
    }
    if (null_text.vector.size() != config.dim) {
        throw ValidationError("null-text dim " + std::to_string(null_text.vector.size()) + " != checkpoint dim " +
                              std::to_string(config.dim));
    }
}

bool ranks_before(double sa, const std::string& ia, double sb, const std::string& ib) {
    if (sa != sb) return sa > sb;
    return ia < ib;
}

} // namespace

Index build_index(const EmbeddingStore& images, const NullTextEmbedding& null_text, model::TargetMode mode,
                  const model::ModelParams& params, const model::ModelConfig& config, std::size_t threads) {
    if (images.empty()) throw ValidationError("build_index: candidate store is empty");
    check_dims(images.dim(), null_text, config);

    const std::size_t n = images.size();
    const std::size_t dim = images.dim();
    Index index;
    index.mode = mode;
    index.dim = dim;
    index.ids = images.ids();
    index.features.resize(n * dim);
    index.null_text_tag = null_text.source_tag;

    const std::size_t chunks = (n + kChunk - 1) / kChunk;
    detail::parallel_for(chunks, threads, [&](std::size_t c) {
        const std::size_t begin = c * kChunk;
        const std::size_t end = std::min(n, begin + kChunk);
        std::vector<std::size_t> rows(end - begin);
        for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = begin + i;
        nd::Tape tape(false);
        auto targets = rows_tensor(images, rows);
        auto nulls = model::repeat_row(null_text.vector, rows.size());
        auto features = model::target_feature(tape, mode, params, config, targets, nulls);
        auto data = features.data();
        for (std::size_t i = 0; i < rows.size(); ++i) {
            auto unit = normalized_or_throw(data.subspan(i * dim, dim),
                                            "transformed feature of candidate '" + images.ids()[rows[i]] + "'");
            std::copy(unit.begin(), unit.end(), index.features.begin() + static_cast<std::ptrdiff_t>(rows[i] * dim));
        }
    });
    return index;
}

RankedList search(const Index& index, std::string query_id, std::span<const double> query, std::size_t k) {
    if (query.size() != index.dim) {
        throw ValidationError("search: query dim " + std::to_string(query.size()) + " != index dim " +
                              std::to_string(index.dim));
    }
    if (k < 1 || k > index.size()) {
        throw ValidationError("search: k=" + std::to_string(k) + " outside [1, " + std::to_string(index.size()) + "]");
    }
    const auto q = normalized_or_throw(query, "query '" + query_id + "'");

    const std::size_t n = index.size();
    std::vector<double> scores(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto row = index.row(i);
        double dot = 0.0;
        for (std::size_t d = 0; d < index.dim; ++d) dot += q[d] * row[d];
        scores[i] = std::clamp(dot, -1.0, 1.0);
    }
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) {
                          return ranks_before(scores[a], index.ids[a], scores[b], index.ids[b]);
                      });
    RankedList out;
    out.query_id = std::move(query_id);
    out.hits.reserve(k);
    for (std::size_t r = 0; r < k; ++r) out.hits.push_back({index.ids[order[r]], scores[order[r]]});
    return out;
}

RetrievalRun batch_search(const Index& index, std::span<const QueryFeature> queries, std::size_t k,
                          std::size_t threads) {
    RetrievalRun run(queries.size());
    detail::parallel_for(queries.size(), threads,
                         [&](std::size_t i) { run[i] = search(index, queries[i].id, queries[i].feature, k); });
    return run;
}

std::vector<QueryFeature> embed_queries(const TripletSet& triplets, const EmbeddingStore& images,
                                        const EmbeddingStore& texts, const NullTextEmbedding& null_text,
                                        const model::ModelParams& params, const model::ModelConfig& config,
                                        std::size_t threads) {
    check_dims(images.dim(), null_text, config);
    if (!texts.empty() && texts.dim() != config.dim) {
        throw ValidationError("text store dim " + std::to_string(texts.dim()) + " != checkpoint dim " +
                              std::to_string(config.dim));
    }
    validate_triplets(triplets, images, texts);
    {
        std::unordered_set<std::string> seen;
        for (const auto& t : triplets) {
            if (!seen.insert(t.query_key()).second) {
                throw ValidationError("duplicate query id '" + t.query_key() + "'");
            }
        }
    }

    const std::size_t n = triplets.size();
    const std::size_t dim = config.dim;
    std::vector<QueryFeature> out(n);
    const std::size_t chunks = (n + kChunk - 1) / kChunk;
    detail::parallel_for(chunks, threads, [&](std::size_t c) {
        const std::size_t begin = c * kChunk;
        const std::size_t end = std::min(n, begin + kChunk);
        std::vector<double> ref, text;
        for (std::size_t i = begin; i < end; ++i) {
            const auto& t = triplets[i];
            auto r = images.row(images.index_of(t.query_image_id));
            ref.insert(ref.end(), r.begin(), r.end());
            if (t.caption_id) {
                auto c_row = texts.row(texts.index_of(*t.caption_id));
                text.insert(text.end(), c_row.begin(), c_row.end());
            } else {
                text.insert(text.end(), null_text.vector.begin(), null_text.vector.end());
            }
        }
        const std::size_t b = end - begin;
        nd::Tape tape(false);
        auto fused = model::fuse_query(tape, params, config, nd::Tensor::from({b, dim}, std::move(ref)),
                                       nd::Tensor::from({b, dim}, std::move(text)));
        auto data = fused.data();
        for (std::size_t i = 0; i < b; ++i) {
            out[begin + i].id = triplets[begin + i].query_key();
            out[begin + i].feature.assign(data.begin() + static_cast<std::ptrdiff_t>(i * dim),
                                          data.begin() + static_cast<std::ptrdiff_t>((i + 1) * dim));
        }
    });
    return out;
}

std::string format_run(const RetrievalRun& run) {
    std::string out(kRunHeader);
    out += '\n';
    char buf[64];
    for (const auto& list : run) {
        for (std::size_t r = 0; r < list.hits.size(); ++r) {
            // Avoid printing "-0.000000" for tiny negative scores.
            double s = list.hits[r].score;
            if (s > -5e-7 && s < 0.0) s = 0.0;
            std::snprintf(buf, sizeof buf, "%.6f", s);
            out += list.query_id;
            out += '\t';
            out += std::to_string(r + 1);
            out += '\t';
            out += list.hits[r].id;
            out += '\t';
            out += buf;
            out += '\n';
        }
    }
    return out;
}

RetrievalRun parse_run(std::string_view text) {
    RetrievalRun run;
    std::set<std::string, std::less<>> finished;
    std::unordered_set<std::string> current_ids;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
        auto nl = text.find('\n', pos);
        if (nl == std::string_view::npos) nl = text.size();
        std::string_view line = text.substr(pos, nl - pos);
        pos = nl + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (line.empty()) continue;
        if (line_no == 1 && line == kRunHeader) continue;

        std::vector<std::string_view> fields;
        for (std::size_t start = 0;;) {
            const auto tab = line.find('\t', start);
            fields.push_back(line.substr(start, tab == std::string_view::npos ? std::string_view::npos : tab - start));
            if (tab == std::string_view::npos) break;
            start = tab + 1;
        }
        const std::string where = "run line " + std::to_string(line_no);
        if (fields.size() != 4) throw FormatError(where + ": expected 4 tab-separated fields");
        if (fields[0].empty() || fields[2].empty()) throw FormatError(where + ": empty id");

        std::size_t rank = 0;
        auto [rp, rec] = std::from_chars(fields[1].data(), fields[1].data() + fields[1].size(), rank);
        if (rec != std::errc{} || rp != fields[1].data() + fields[1].size()) {
            throw FormatError(where + ": bad rank '" + std::string(fields[1]) + "'");
        }
        double score = 0.0;
        auto [sp, sec] = std::from_chars(fields[3].data(), fields[3].data() + fields[3].size(), score);
        if (sec != std::errc{} || sp != fields[3].data() + fields[3].size() || !std::isfinite(score)) {
            throw FormatError(where + ": bad score '" + std::string(fields[3]) + "'");
        }

        if (run.empty() || run.back().query_id != fields[0]) {
            if (!run.empty()) finished.insert(run.back().query_id);
            if (finished.contains(fields[0])) {
                throw FormatError(where + ": rows for query '" + std::string(fields[0]) + "' are not contiguous");
            }
            run.push_back({std::string(fields[0]), {}});
            current_ids.clear();
        }
        auto& list = run.back();
        if (rank != list.hits.size() + 1) {
            throw FormatError(where + ": expected rank " + std::to_string(list.hits.size() + 1) + ", got " +
                              std::to_string(rank));
        }
        if (!current_ids.insert(std::string(fields[2])).second) {
            throw FormatError(where + ": duplicate candidate '" + std::string(fields[2]) + "'");
        }
        list.hits.push_back({std::string(fields[2]), score});
    }
    return run;
}

void write_run(const RetrievalRun& run, const std::filesystem::path& path) {
    detail::write_file(path, format_run(run));
}

RetrievalRun read_run(const std::filesystem::path& path) {
    return parse_run(detail::read_file(path));
}

std::string encode_index(const Index& index) {
    if (index.features.size() != index.ids.size() * index.dim) {
        throw ValidationError("encode_index: feature matrix does not match ids");
    }
    detail::ByteWriter w;
    w.bytes(kIndexMagic);
    w.u32(kIndexVersion);
    w.u8(mode_code(index.mode));
    w.zeros(3);
    w.u32(static_cast<std::uint32_t>(index.dim));
    w.u64(index.ids.size());
    for (double v : index.features) w.f64(v);
    auto put_string = [&](const std::string& s) {
        if (s.size() > std::numeric_limits<std::uint16_t>::max()) {
            throw ValidationError("encode_index: string longer than 65535 bytes");
        }
        w.u16(static_cast<std::uint16_t>(s.size()));
        w.bytes(s);
    };
    for (const auto& id : index.ids) put_string(id);
    put_string(index.checkpoint_hash);
    put_string(index.null_text_tag);
    return w.take();
}

Index decode_index(std::string_view bytes, const std::string& origin) {
    detail::ByteReader r(bytes, origin);
    if (bytes.size() < 4 || r.bytes(4) != kIndexMagic) throw FormatError(origin + ": bad magic (expected \"UIDX\")");
    const auto version = r.u32();
    if (version != kIndexVersion) throw FormatError(origin + ": unsupported version " + std::to_string(version));
    Index index;
    const auto code = r.u8();
    switch (code) {
    case 0: index.mode = model::TargetMode::Original; break;
    case 1: index.mode = model::TargetMode::Sum; break;
    case 2: index.mode = model::TargetMode::Union; break;
    default: throw FormatError(origin + ": unknown mode code " + std::to_string(code));
    }
    for (auto b : r.bytes(3)) {
        if (b != '\0') throw FormatError(origin + ": nonzero reserved header bytes");
    }
    index.dim = r.u32();
    const auto count = r.u64();
    if (index.dim == 0 || count == 0) throw FormatError(origin + ": empty index");
    if (count > r.remaining() / 8 / index.dim) throw FormatError(origin + ": truncated feature matrix");
    index.features.resize(count * index.dim);
    for (auto& v : index.features) {
        v = r.f64();
        if (!std::isfinite(v)) throw FormatError(origin + ": non-finite feature");
    }
    std::unordered_set<std::string> seen;
    index.ids.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        std::string id(r.bytes(r.u16()));
        if (!seen.insert(id).second) throw FormatError(origin + ": duplicate id '" + id + "'");
        index.ids.push_back(std::move(id));
    }
    index.checkpoint_hash = std::string(r.bytes(r.u16()));
    index.null_text_tag = std::string(r.bytes(r.u16()));
    if (r.remaining() != 0) throw FormatError(origin + ": " + std::to_string(r.remaining()) + " trailing bytes");
    return index;
}

void save_index(const Index& index, const std::filesystem::path& path) {
    detail::write_file(path, encode_index(index));
}

Index load_index(const std::filesystem::path& path) {
    return decode_index(detail::read_file(path), path.string());
}

} // namespace unionret::retrieval
