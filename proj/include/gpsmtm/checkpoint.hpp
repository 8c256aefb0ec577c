#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gpsmtm/core_types.hpp"
#include "gpsmtm/model.hpp"

namespace gpsmtm {

inline constexpr char kCheckpointMagic[4] = {'G', 'M', 'T', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    ModelConfig config;
    PoiVocab vocab;
    NormStats stats;
    ParamSet<float> params;
};

/// Layout: magic "GMTM", u32 LE version, u32 LE header length, UTF-8 JSON
/// header (config, vocabulary, norm stats, tensor manifest with byte offsets
/// relative to the payload), little-endian f32 payloads in manifest order, and
/// finally a u64 LE FNV-1a checksum of every preceding byte.
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);

/// Validates everything before returning; throws FormatError on any defect.
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

/// Header JSON only (for inspection); validates framing but not payloads.
nlohmann::json read_checkpoint_header(const std::filesystem::path& path);

/// Written to a temporary sibling and renamed into place.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace gpsmtm
