#include "unionret/checkpoint.hpp"

#include <cmath>
#include <cstdio>

#include "binary_io.hpp"
#include "unionret/errors.hpp"

namespace unionret::model {

namespace {
constexpr std::string_view kMagic = "UNCK";
}

std::string encode_checkpoint(const ModelParams& params, const ModelConfig& config,
                              std::optional<TargetMode> target_mode) {
    config.validate();
    if (params.parameter_count() != parameter_count(config)) {
        throw ValidationError("checkpoint: parameters do not match config");
    }
    nlohmann::json header = config.to_json();
    if (target_mode) header["target_mode"] = std::string(to_string(*target_mode));
    const std::string blob = header.dump();

    detail::ByteWriter w;
    w.bytes(kMagic);
    w.u32(kCheckpointVersion);
    w.u32(static_cast<std::uint32_t>(blob.size()));
    w.bytes(blob);
    w.u64(params.parameter_count());
    for (const auto& p : params.named()) {
        for (double v : p.tensor.data()) {
            if (!std::isfinite(v)) throw ValidationError("checkpoint: non-finite value in '" + p.name + "'");
            w.f64(v);
        }
    }
    return w.take();
}

Checkpoint decode_checkpoint(std::string_view bytes, const std::string& origin) {
    detail::ByteReader r(bytes, origin);
    if (bytes.size() < 4 || r.bytes(4) != kMagic) throw FormatError(origin + ": bad magic (expected \"UNCK\")");
    const auto version = r.u32();
    if (version != kCheckpointVersion) {
        throw FormatError(origin + ": unsupported checkpoint version " + std::to_string(version));
    }
    const auto blob_len = r.u32();
    const auto blob = r.bytes(blob_len);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(blob);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(origin + ": malformed config blob (" + e.what() + ")");
    }

    Checkpoint ck;
    ck.config = ModelConfig::from_json(header);
    try {
        ck.config.validate();
    } catch (const ValidationError& e) {
        throw FormatError(origin + ": " + e.what());
    }
    if (auto it = header.find("target_mode"); it != header.end()) {
        ck.target_mode = parse_target_mode(it->get<std::string>());
    }

    const auto count = r.u64();
    const auto expected = parameter_count(ck.config);
    if (count != expected) {
        throw FormatError(origin + ": parameter count " + std::to_string(count) + " disagrees with config (" +
                          std::to_string(expected) + ")");
    }
    if (r.remaining() != count * 8) {
        throw FormatError(origin + ": parameter blob is " + std::to_string(r.remaining()) + " bytes, expected " +
                          std::to_string(count * 8));
    }
    ck.params = allocate_params(ck.config);
    for (auto& p : ck.params.named()) {
        for (auto& v : p.tensor.data()) {
            v = r.f64();
            if (!std::isfinite(v)) throw FormatError(origin + ": non-finite value in '" + p.name + "'");
        }
    }
    return ck;
}

void save_checkpoint(const ModelParams& params, const ModelConfig& config, const std::filesystem::path& path,
                     std::optional<TargetMode> target_mode) {
    detail::write_file(path, encode_checkpoint(params, config, target_mode));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(detail::read_file(path), path.string());
}

std::string fnv1a_hex(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

} // namespace unionret::model
