#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "stcore/model.hpp"
#include "stcore/tensor.hpp"

namespace stcore::io {

inline constexpr std::uint32_t kEventsVersion = 1;

struct EventRecord {
  std::uint32_t t = 0;  // microseconds
  std::uint16_t x = 0;
  std::uint16_t y = 0;
  std::uint8_t polarity = 0;

  bool operator==(const EventRecord&) const = default;
};

/// RTEV stream. Header: "RTEV", u32 version, u16 width, u16 height,
/// u32 duration_us (0 = up to the last timestamp). Records are 9 bytes each.
struct EventStream {
  std::uint16_t width = 0;
  std::uint16_t height = 0;
  std::uint32_t duration_us = 0;
  std::vector<EventRecord> records;

  /// Throws FormatError naming the first offending record index.
  void validate() const;
};

std::vector<std::uint8_t> encode_events(const EventStream& stream);
EventStream decode_events(const std::vector<std::uint8_t>& bytes);
void write_events(const std::filesystem::path& path, const EventStream& stream);
EventStream read_events(const std::filesystem::path& path);

/// Bins into T uniform windows over [0, duration): presence per
/// (polarity, y, x), giving [T, 1, 2, H, W].
Tensor bin_events(const EventStream& stream, std::int64_t T);
Tensor load_events(const std::filesystem::path& path, std::int64_t T);

struct ToyEventOptions {
  std::int64_t classes = 4;
  std::int64_t samples_per_class = 100;
  std::uint16_t size = 16;  // square sensor
  std::uint32_t duration_us = 100'000;
  std::uint64_t seed = 0;
};

/// One moving-bar stream. The label is the motion direction: class c moves
/// at angle 2*pi*c/classes, so class 0 moves right (+x).
EventStream toy_moving_bar(std::int64_t label, std::int64_t classes, std::uint16_t size, std::uint32_t duration_us,
                           std::uint64_t seed);

/// Writes classes * samples_per_class .rtev files plus manifest.csv
/// (file,label) into `dir`. Returns the file names in manifest order.
std::vector<std::string> gen_toy_events(const std::filesystem::path& dir, const ToyEventOptions& opts);

/// Reads manifest.csv in `dir` and bins every stream into a Dataset.
Dataset load_event_dataset(const std::filesystem::path& dir, std::int64_t T);

/// In-memory equivalent of gen_toy_events + load_event_dataset.
Dataset toy_event_dataset(const ToyEventOptions& opts, std::int64_t T);

}  // namespace stcore::io
