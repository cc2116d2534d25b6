#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "stcore/model.hpp"
#include "stcore/tensor.hpp"

namespace stcore::io {

/// Decoded IDX array. Unsigned-byte payloads keep their raw 0..255 values.
struct IdxArray {
  std::uint8_t dtype = 0x08;  // 0x08 u8 or 0x0D f32 (big-endian on disk)
  Shape dims;
  std::vector<float> values;
};

/// Throws FormatError with the byte offset on bad magic, unsupported dtype
/// or a truncated payload.
IdxArray parse_idx(std::span<const std::uint8_t> bytes);
IdxArray read_idx(const std::filesystem::path& path);

/// [N,H,W] or [N,C,H,W] file -> [B,C,H,W] in [0,1] (u8 divided by 255).
Tensor idx_images(const IdxArray& a);
Tensor load_idx(const std::filesystem::path& path);
/// Rank-1 u8 file -> class indices.
std::vector<std::int64_t> load_idx_labels(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_idx_u8(const Shape& dims, std::span<const std::uint8_t> values);

enum class Encoding { Direct, Rate };

Encoding parse_encoding(const std::string& name);
std::string encoding_name(Encoding e);

/// [B,C,H,W] in [0,1] -> [T,B,C,H,W]. Direct repeats the frame; Rate draws
/// Bernoulli(pixel) spikes from Rng(seed) in row-major output order.
Tensor encode_spikes(const Tensor& images, std::int64_t T, Encoding scheme, std::uint64_t seed = 0);

/// IDX image/label pair -> Dataset with the given encoding.
Dataset load_idx_dataset(const std::filesystem::path& images, const std::filesystem::path& labels, std::int64_t T,
                         Encoding scheme, std::uint64_t seed);

}  // namespace stcore::io
