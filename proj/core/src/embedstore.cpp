#include "unionret/embedstore.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "binary_io.hpp"
#include "unionret/errors.hpp"
#include "unionret/rng.hpp"

namespace unionret {

namespace detail {

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError("cannot open '" + path.string() + "' for reading");
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) {
        throw FormatError("read failure on '" + path.string() + "'");
    }
    return std::move(ss).str();
}

void write_file(const std::filesystem::path& path, std::string_view contents) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw FormatError("cannot open '" + path.string() + "' for writing");
    }
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    out.flush();
    if (!out) {
        throw FormatError("write failure on '" + path.string() + "'");
    }
}

} // namespace detail

namespace {

constexpr std::string_view kStoreMagic = "UEBS";
constexpr std::uint32_t kStoreVersion = 1;
constexpr std::uint8_t kDtypeF32 = 1;

void check_store_contents(std::size_t dim, std::span<const std::string> ids, std::span<const float> values) {
    if (dim == 0) {
        throw ValidationError("embedding store: dim must be >= 1");
    }
    if (values.size() != ids.size() * dim) {
        throw ValidationError("embedding store: " + std::to_string(ids.size()) + " ids but " +
                              std::to_string(values.size()) + " values for dim " + std::to_string(dim));
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) {
            throw ValidationError("embedding store: non-finite value in row '" + ids[i / dim] + "'");
        }
    }
}

} // namespace

EmbeddingStore::EmbeddingStore(std::size_t dim, std::vector<std::string> ids, std::vector<float> values)
    : dim_(dim), ids_(std::move(ids)), values_(std::move(values)) {
    check_store_contents(dim_, ids_, values_);
    index_.reserve(ids_.size());
    for (std::size_t i = 0; i < ids_.size(); ++i) {
        if (!index_.emplace(ids_[i], i).second) {
            throw ValidationError("embedding store: duplicate id '" + ids_[i] + "'");
        }
    }
}

std::span<const float> EmbeddingStore::row(std::size_t i) const {
    if (i >= ids_.size()) {
        throw ValidationError("embedding store: row " + std::to_string(i) + " out of range");
    }
    return std::span<const float>(values_).subspan(i * dim_, dim_);
}

std::vector<double> EmbeddingStore::row_f64(std::size_t i) const {
    auto r = row(i);
    return {r.begin(), r.end()};
}

std::optional<std::size_t> EmbeddingStore::find(std::string_view id) const {
    auto it = index_.find(std::string(id));
    if (it == index_.end()) {
        return std::nullopt;
    }
    return it->second;
}

std::size_t EmbeddingStore::index_of(std::string_view id) const {
    if (auto i = find(id)) {
        return *i;
    }
    throw ValidationError("unknown id '" + std::string(id) + "'");
}

EmbeddingStore EmbeddingStore::without(const std::set<std::string, std::less<>>& excluded) const {
    std::vector<std::string> ids;
    std::vector<float> values;
    for (std::size_t i = 0; i < ids_.size(); ++i) {
        if (excluded.contains(ids_[i])) {
            continue;
        }
        ids.push_back(ids_[i]);
        auto r = row(i);
        values.insert(values.end(), r.begin(), r.end());
    }
    return EmbeddingStore(dim_, std::move(ids), std::move(values));
}

bool operator==(const EmbeddingStore& a, const EmbeddingStore& b) {
    if (a.dim_ != b.dim_ || a.ids_ != b.ids_ || a.values_.size() != b.values_.size()) {
        return false;
    }
    // Bitwise so that -0.0 and 0.0 count as different payloads.
    return std::equal(a.values_.begin(), a.values_.end(), b.values_.begin(),
                      [](float x, float y) { return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y); });
}

NullTextEmbedding NullTextEmbedding::from_store(const EmbeddingStore& store, std::string source_tag) {
    if (store.size() != 1) {
        throw ValidationError("null-text store must hold exactly one row, found " + std::to_string(store.size()));
    }
    return {store.row_f64(0), std::move(source_tag)};
}

void Qrels::add(const std::string& query_id, const std::string& target_id) {
    if (query_id.empty() || target_id.empty()) {
        throw ValidationError("qrels: empty query or target id");
    }
    map_[query_id].insert(target_id);
}

bool Qrels::contains(std::string_view query_id) const { return map_.find(query_id) != map_.end(); }

const std::set<std::string, std::less<>>& Qrels::relevant(std::string_view query_id) const {
    auto it = map_.find(query_id);
    if (it == map_.end()) {
        throw ValidationError("qrels: no relevance judgments for query '" + std::string(query_id) + "'");
    }
    return it->second;
}

std::string encode_store(std::span<const std::string> ids, std::span<const float> values, std::size_t dim) {
    check_store_contents(dim, ids, values);
    if (dim > kMaxStoreDim) {
        throw ValidationError("embedding store: dim " + std::to_string(dim) + " exceeds 65535");
    }
    if (ids.size() >= kMaxStoreCount) {
        throw ValidationError("embedding store: count exceeds 2^48");
    }
    std::set<std::string_view> seen;
    for (const auto& id : ids) {
        if (!seen.insert(id).second) {
            throw ValidationError("embedding store: duplicate id '" + id + "'");
        }
        if (id.size() > 0xFFFF) {
            throw ValidationError("embedding store: id longer than 65535 bytes");
        }
    }

    detail::ByteWriter w;
    w.bytes(kStoreMagic);
    w.u32(kStoreVersion);
    w.u32(static_cast<std::uint32_t>(dim));
    w.u64(ids.size());
    w.u8(kDtypeF32);
    w.zeros(7);
    for (float v : values) {
        w.f32(v);
    }
    for (const auto& id : ids) {
        w.u16(static_cast<std::uint16_t>(id.size()));
        w.bytes(id);
    }
    return w.take();
}

EmbeddingStore decode_store(std::string_view bytes, const std::string& origin) {
    detail::ByteReader r(bytes, origin);
    if (bytes.size() < 4 || r.bytes(4) != kStoreMagic) {
        throw FormatError(origin + ": bad magic (expected \"UEBS\")");
    }
    const auto version = r.u32();
    if (version != kStoreVersion) {
        throw FormatError(origin + ": unsupported version " + std::to_string(version));
    }
    const auto dim = r.u32();
    const auto count = r.u64();
    const auto dtype = r.u8();
    if (dtype != kDtypeF32) {
        throw FormatError(origin + ": unsupported dtype " + std::to_string(dtype));
    }
    for (auto b : r.bytes(7)) {
        if (b != '\0') {
            throw FormatError(origin + ": nonzero reserved header bytes");
        }
    }
    if (dim == 0 || dim > kMaxStoreDim) {
        throw FormatError(origin + ": dim " + std::to_string(dim) + " out of range");
    }
    if (count >= kMaxStoreCount) {
        throw FormatError(origin + ": count " + std::to_string(count) + " out of range");
    }
    // Check the payload length before allocating.
    const std::uint64_t payload_values = count * dim;
    if (payload_values > r.remaining() / 4) {
        throw FormatError(origin + ": truncated payload (header declares " + std::to_string(count) + " rows of dim " +
                          std::to_string(dim) + ")");
    }
    std::vector<float> values(payload_values);
    for (auto& v : values) {
        v = r.f32();
        if (std::isnan(v) || std::isinf(v)) {
            throw FormatError(origin + ": non-finite value in payload");
        }
    }
    std::vector<std::string> ids;
    ids.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto len = r.u16();
        ids.emplace_back(r.bytes(len));
    }
    if (r.remaining() != 0) {
        throw FormatError(origin + ": " + std::to_string(r.remaining()) + " trailing bytes");
    }
    try {
        return EmbeddingStore(dim, std::move(ids), std::move(values));
    } catch (const ValidationError& e) {
        throw FormatError(origin + ": " + e.what());
    }
}

void write_store(std::span<const std::string> ids, std::span<const float> values, std::size_t dim,
                 const std::filesystem::path& path) {
    detail::write_file(path, encode_store(ids, values, dim));
}

void write_store(const EmbeddingStore& store, const std::filesystem::path& path) {
    write_store(store.ids(), store.values(), store.dim(), path);
}

EmbeddingStore read_store(const std::filesystem::path& path) {
    return decode_store(detail::read_file(path), path.string());
}

std::string read_file(const std::filesystem::path& path) { return detail::read_file(path); }

void write_file(const std::filesystem::path& path, std::string_view contents) { detail::write_file(path, contents); }

std::vector<double> l2_normalize(std::span<const double> v) {
    double sq = 0.0;
    for (double x : v) {
        sq += x * x;
    }
    const double norm = std::sqrt(sq);
    if (!(norm > 0.0) || !std::isfinite(norm)) {
        throw ValidationError("l2_normalize: vector has zero or non-finite norm");
    }
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = v[i] / norm;
    }
    return out;
}

void validate_triplets(const TripletSet& triplets, const EmbeddingStore& images, const EmbeddingStore& texts) {
    for (std::size_t i = 0; i < triplets.size(); ++i) {
        const auto& t = triplets[i];
        auto fail = [&](const std::string& id, const char* what) {
            throw ValidationError("triplets line " + std::to_string(i + 1) + ": unresolved " + what + " id '" + id +
                                  "'");
        };
        if (!images.find(t.query_image_id)) fail(t.query_image_id, "query_image");
        if (!images.find(t.target_image_id)) fail(t.target_image_id, "target_image");
        if (t.caption_id && !texts.find(*t.caption_id)) fail(*t.caption_id, "caption");
    }
}

TripletSet parse_triplets(std::string_view text) {
    TripletSet out;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start <= text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string_view::npos) end = text.size();
        auto line = text.substr(start, end - start);
        ++line_no;
        start = end + 1;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (line.find_first_not_of(" \t") == std::string_view::npos) {
            if (end == text.size()) break;
            continue;
        }
        auto bad = [&](const std::string& why) {
            return FormatError("triplets line " + std::to_string(line_no) + ": " + why);
        };
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw bad(std::string("malformed JSON (") + e.what() + ")");
        }
        if (!j.is_object()) throw bad("expected a JSON object");
        auto required = [&](const char* key) {
            auto it = j.find(key);
            if (it == j.end() || !it->is_string() || it->get_ref<const std::string&>().empty()) {
                throw bad(std::string("missing or non-string \"") + key + "\"");
            }
            return it->get<std::string>();
        };
        TripletRecord rec;
        rec.query_image_id = required("query_image");
        rec.target_image_id = required("target_image");
        if (auto it = j.find("caption"); it != j.end() && !it->is_null()) {
            if (!it->is_string()) throw bad("\"caption\" must be a string or null");
            rec.caption_id = it->get<std::string>();
        }
        if (auto it = j.find("id"); it != j.end() && !it->is_null()) {
            if (!it->is_string()) throw bad("\"id\" must be a string");
            rec.query_id = it->get<std::string>();
        }
        out.push_back(std::move(rec));
        if (end == text.size()) break;
    }
    return out;
}

TripletSet load_triplets(const std::filesystem::path& path, const EmbeddingStore& images,
                         const EmbeddingStore& texts) {
    auto triplets = parse_triplets(detail::read_file(path));
    validate_triplets(triplets, images, texts);
    return triplets;
}

void write_triplets(const TripletSet& triplets, const std::filesystem::path& path) {
    std::string out;
    for (const auto& t : triplets) {
        nlohmann::ordered_json j;
        if (t.query_id) j["id"] = *t.query_id;
        j["query_image"] = t.query_image_id;
        j["caption"] = t.caption_id ? nlohmann::ordered_json(*t.caption_id) : nlohmann::ordered_json(nullptr);
        j["target_image"] = t.target_image_id;
        out += j.dump();
        out += '\n';
    }
    detail::write_file(path, out);
}

Qrels parse_qrels(std::string_view text) {
    Qrels q;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start < text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string_view::npos) end = text.size();
        auto line = text.substr(start, end - start);
        start = end + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string_view::npos || line.find('\t', tab + 1) != std::string_view::npos || tab == 0 ||
            tab + 1 == line.size()) {
            throw FormatError("qrels line " + std::to_string(line_no) + ": expected \"query_id<TAB>target_id\"");
        }
        q.add(std::string(line.substr(0, tab)), std::string(line.substr(tab + 1)));
    }
    return q;
}

Qrels load_qrels(const std::filesystem::path& path) { return parse_qrels(detail::read_file(path)); }

void write_qrels(const Qrels& qrels, const std::filesystem::path& path) {
    std::string out;
    for (const auto& [query, targets] : qrels.entries()) {
        for (const auto& t : targets) {
            out += query;
            out += '\t';
            out += t;
            out += '\n';
        }
    }
    detail::write_file(path, out);
}

std::string synth_id(char prefix, std::size_t i) {
    std::string digits = std::to_string(i);
    if (digits.size() < 4) digits.insert(0, 4 - digits.size(), '0');
    return std::string(1, prefix) + digits;
}

std::vector<double> synth_compose(std::span<const float> reference, std::span<const float> caption) {
    const std::size_t dim = reference.size();
    std::vector<double> u(reference.begin(), reference.end());
    double ref_norm = 0.0;
    for (double x : u) ref_norm += x * x;
    ref_norm = std::sqrt(ref_norm);
    for (double& x : u) x /= ref_norm;

    std::vector<double> w(caption.begin(), caption.end());
    double along = 0.0;
    for (std::size_t d = 0; d < dim; ++d) along += w[d] * u[d];
    double w_norm = 0.0;
    for (std::size_t d = 0; d < dim; ++d) {
        w[d] -= along * u[d];
        w_norm += w[d] * w[d];
    }
    w_norm = std::sqrt(w_norm);
    for (double& x : w) x /= w_norm;

    const double c = std::cos(kSynthRotation);
    const double s = std::sin(kSynthRotation);
    std::vector<double> out(dim);
    for (std::size_t d = 0; d < dim; ++d) {
        out[d] = ref_norm * (c * u[d] + s * w[d]);
    }
    return out;
}

SynthDataset synth_dataset(const SynthParams& p) {
    if (p.n_queries < 1 || p.n_queries > p.pool_size) {
        throw ValidationError("synth: need 1 <= n_queries <= pool_size");
    }
    if (p.dim < 2 || p.dim > kMaxStoreDim) {
        throw ValidationError("synth: dim must be in [2, 65535]");
    }
    if (!(p.noise >= 0.0) || !std::isfinite(p.noise)) {
        throw ValidationError("synth: noise must be finite and >= 0");
    }

    Rng rng(p.seed);
    const std::size_t dim = p.dim;
    auto gaussian_row = [&](double scale) {
        std::vector<float> v(dim);
        for (auto& x : v) x = static_cast<float>(scale * rng.normal());
        return v;
    };
    auto norm_of = [](const std::vector<float>& v) {
        double s = 0.0;
        for (float x : v) s += double(x) * double(x);
        return std::sqrt(s);
    };

    std::vector<std::vector<float>> refs(p.n_queries);
    std::vector<std::vector<float>> captions(p.n_queries);
    for (std::size_t i = 0; i < p.n_queries; ++i) {
        refs[i] = gaussian_row(1.0);
        captions[i] = gaussian_row(1.0);
        // Resample the (probability-zero) degenerate cases where the rotation is undefined.
        while (norm_of(refs[i]) == 0.0) refs[i] = gaussian_row(1.0);
        while (true) {
            auto composed = synth_compose(refs[i], captions[i]);
            if (std::all_of(composed.begin(), composed.end(), [](double x) { return std::isfinite(x); })) break;
            captions[i] = gaussian_row(1.0);
        }
    }

    std::vector<std::string> image_ids;
    std::vector<float> image_values;
    image_ids.reserve(p.pool_size + p.n_queries);
    for (std::size_t j = 0; j < p.pool_size; ++j) {
        image_ids.push_back(synth_id('t', j));
        if (j < p.n_queries) {
            auto target = synth_compose(refs[j], captions[j]);
            for (double x : target) {
                image_values.push_back(static_cast<float>(x + p.noise * rng.normal()));
            }
        } else {
            auto distractor = gaussian_row(1.0);
            image_values.insert(image_values.end(), distractor.begin(), distractor.end());
        }
    }
    for (std::size_t i = 0; i < p.n_queries; ++i) {
        image_ids.push_back(synth_id('q', i));
        image_values.insert(image_values.end(), refs[i].begin(), refs[i].end());
    }

    std::vector<std::string> text_ids;
    std::vector<float> text_values;
    for (std::size_t i = 0; i < p.n_queries; ++i) {
        text_ids.push_back(synth_id('c', i));
        text_values.insert(text_values.end(), captions[i].begin(), captions[i].end());
    }

    auto null_row = gaussian_row(kSynthNullScale);

    SynthDataset out;
    out.images = EmbeddingStore(dim, std::move(image_ids), std::move(image_values));
    out.texts = EmbeddingStore(dim, std::move(text_ids), std::move(text_values));
    out.null_text = NullTextEmbedding{std::vector<double>(null_row.begin(), null_row.end()), "synthetic"};
    for (std::size_t i = 0; i < p.n_queries; ++i) {
        out.triplets.push_back({synth_id('q', i), synth_id('c', i), synth_id('t', i), std::nullopt});
        out.qrels.add(synth_id('q', i), synth_id('t', i));
    }
    return out;
}

} // namespace unionret
