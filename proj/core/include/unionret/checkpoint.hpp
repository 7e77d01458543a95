#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

#include "unionret/model.hpp"

namespace unionret::model {

// Checkpoint file layout (little-endian):
//   "UNCK" · u32 version = 1 · u32 n · n bytes UTF-8 JSON (ModelConfig fields,
//   plus "target_mode" when the trainer recorded one) · u64 value count ·
//   value count × f64 in ModelParams::named() order.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    ModelConfig config;
    ModelParams params;
    std::optional<TargetMode> target_mode;
};

std::string encode_checkpoint(const ModelParams& params, const ModelConfig& config,
                              std::optional<TargetMode> target_mode = std::nullopt);
Checkpoint decode_checkpoint(std::string_view bytes, const std::string& origin = "checkpoint");

void save_checkpoint(const ModelParams& params, const ModelConfig& config, const std::filesystem::path& path,
                     std::optional<TargetMode> target_mode = std::nullopt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// 64-bit FNV-1a of the bytes, as 16 lowercase hex digits.
std::string fnv1a_hex(std::string_view bytes);

} // namespace unionret::model
