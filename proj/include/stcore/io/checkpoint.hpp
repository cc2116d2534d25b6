#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "stcore/model.hpp"

namespace stcore::io {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// RTFS layout, all little-endian:
///   "RTFS" | u32 version | u32 n + n bytes of key=value lines |
///   u32 count | count x (u16 len, name, u8 dtype, u8 rank, u64 dims[rank], u64 offset) |
///   f32 payload | u32 CRC-32 of everything before it.
/// Offsets are relative to the start of the payload.
std::vector<std::uint8_t> serialize_checkpoint(const RtformerNet& net);
RtformerNet deserialize_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const RtformerNet& net);
RtformerNet load_checkpoint(const std::filesystem::path& path);

/// Reads a config file of key=value lines ('#' starts a comment).
RtformerConfig read_config_file(const std::filesystem::path& path);

}  // namespace stcore::io
