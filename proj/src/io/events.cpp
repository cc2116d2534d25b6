#include "stcore/io/events.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <tuple>

#include <fmt/format.h>

#include "stcore/error.hpp"
#include "stcore/io/file.hpp"
#include "stcore/random.hpp"

namespace stcore::io {

void EventStream::validate() const {
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (i > 0 && r.t < records[i - 1].t) {
      throw FormatError(fmt::format("event {}: timestamp {} precedes {}", i, r.t, records[i - 1].t));
    }
    if (r.x >= width || r.y >= height) {
      throw FormatError(fmt::format("event {}: ({}, {}) outside {}x{} sensor", i, r.x, r.y, width, height));
    }
    if (r.polarity > 1) throw FormatError(fmt::format("event {}: polarity {} not in {{0,1}}", i, r.polarity));
    if (duration_us > 0 && r.t >= duration_us) {
      throw FormatError(fmt::format("event {}: timestamp {} beyond duration {}", i, r.t, duration_us));
    }
  }
}

std::vector<std::uint8_t> encode_events(const EventStream& stream) {
  stream.validate();
  ByteWriter w;
  w.str("RTEV");
  w.u32(kEventsVersion);
  w.u16(stream.width);
  w.u16(stream.height);
  w.u32(stream.duration_us);
  for (const auto& r : stream.records) {
    w.u32(r.t);
    w.u16(r.x);
    w.u16(r.y);
    w.u8(r.polarity);
  }
  return std::move(w.buffer());
}

EventStream decode_events(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes, "events");
  if (r.str(4) != "RTEV") throw FormatError("events: bad magic at byte offset 0");
  const auto version = r.u32();
  if (version != kEventsVersion) {
    throw FormatError(fmt::format("events: unsupported version {} (expected {})", version, kEventsVersion));
  }
  EventStream s;
  s.width = r.u16();
  s.height = r.u16();
  s.duration_us = r.u32();
  if (r.remaining() % 9 != 0) {
    throw FormatError(fmt::format("events: truncated record at byte offset {}", r.offset() + r.remaining() / 9 * 9));
  }
  s.records.resize(r.remaining() / 9);
  for (auto& e : s.records) {
    e.t = r.u32();
    e.x = r.u16();
    e.y = r.u16();
    e.polarity = r.u8();
  }
  s.validate();
  return s;
}

void write_events(const std::filesystem::path& path, const EventStream& stream) {
  write_file_atomic(path, encode_events(stream));
}

EventStream read_events(const std::filesystem::path& path) { return decode_events(read_file(path)); }

Tensor bin_events(const EventStream& stream, std::int64_t T) {
  if (T < 1) throw ValueError("bin_events: T must be >= 1");
  stream.validate();
  const std::int64_t H = stream.height, W = stream.width;
  Tensor out = Tensor::zeros({T, 1, 2, H, W});
  if (stream.records.empty()) return out;
  const std::uint64_t span =
      stream.duration_us > 0 ? stream.duration_us : static_cast<std::uint64_t>(stream.records.back().t) + 1;
  auto d = out.mutable_data();
  for (const auto& e : stream.records) {
    const auto t = static_cast<std::int64_t>(static_cast<std::uint64_t>(e.t) * static_cast<std::uint64_t>(T) / span);
    d[static_cast<std::size_t>(((t * 2 + e.polarity) * H + e.y) * W + e.x)] = 1.0f;
  }
  return out;
}

Tensor load_events(const std::filesystem::path& path, std::int64_t T) { return bin_events(read_events(path), T); }

EventStream toy_moving_bar(std::int64_t label, std::int64_t classes, std::uint16_t size, std::uint32_t duration_us,
                           std::uint64_t seed) {
  if (classes < 1 || label < 0 || label >= classes) throw ValueError("toy_moving_bar: label outside [0, classes)");
  if (size < 4) throw ValueError("toy_moving_bar: sensor must be at least 4 pixels wide");
  constexpr int kFrames = 24;
  if (duration_us < kFrames) throw ValueError("toy_moving_bar: duration too short");
  Rng rng(seed);
  const double theta = 2.0 * std::numbers::pi * static_cast<double>(label) / static_cast<double>(classes);
  const double ux = std::cos(theta), uy = std::sin(theta);
  const double px = -uy, py = ux;
  const double s = size;
  const double length = rng.uniform(0.35, 0.6) * s;
  const double thick = rng.uniform(1.2, 2.4);
  const double travel = rng.uniform(0.5, 0.7) * s;
  const double shift = rng.uniform(-0.15, 0.15) * s;
  const double lag = rng.uniform(-0.08, 0.08) * s;
  const double cx0 = (s - 1) / 2 + px * shift + ux * (lag - travel / 2);
  const double cy0 = (s - 1) / 2 + py * shift + uy * (lag - travel / 2);

  auto covered = [&](int f, int x, int y) {
    const double a = travel * f / (kFrames - 1);
    const double dx = x - (cx0 + ux * a), dy = y - (cy0 + uy * a);
    return std::abs(dx * ux + dy * uy) <= thick / 2 && std::abs(dx * px + dy * py) <= length / 2;
  };

  EventStream out;
  out.width = out.height = size;
  out.duration_us = duration_us;
  const std::uint32_t frame_us = duration_us / kFrames;
  for (int f = 0; f < kFrames; ++f) {
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const bool now = covered(f, x, y);
        const bool before = f > 0 && covered(f - 1, x, y);
        if (now == before) continue;
        const auto t = static_cast<std::uint32_t>(f * frame_us + rng.below(frame_us));
        out.records.push_back(
            {t, static_cast<std::uint16_t>(x), static_cast<std::uint16_t>(y), static_cast<std::uint8_t>(now)});
      }
  }
  std::sort(out.records.begin(), out.records.end(), [](const EventRecord& a, const EventRecord& b) {
    return std::tie(a.t, a.y, a.x, a.polarity) < std::tie(b.t, b.y, b.x, b.polarity);
  });
  return out;
}

namespace {

std::uint64_t sample_seed(std::uint64_t seed, std::int64_t label, std::int64_t i) {
  // splitmix64 over (seed, label, i) keeps streams independent of generation order
  std::uint64_t z = seed * 0x9E3779B97F4A7C15ull + static_cast<std::uint64_t>(label) * 0xBF58476D1CE4E5B9ull +
                    static_cast<std::uint64_t>(i) * 0x94D049BB133111EBull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace

std::vector<std::string> gen_toy_events(const std::filesystem::path& dir, const ToyEventOptions& o) {
  std::filesystem::create_directories(dir);
  std::vector<std::string> files;
  std::string manifest = "file,label\n";
  for (std::int64_t i = 0; i < o.samples_per_class; ++i) {
    for (std::int64_t c = 0; c < o.classes; ++c) {
      const std::string name = fmt::format("c{}_{:05}.rtev", c, i);
      write_events(dir / name, toy_moving_bar(c, o.classes, o.size, o.duration_us, sample_seed(o.seed, c, i)));
      manifest += fmt::format("{},{}\n", name, c);
      files.push_back(name);
    }
  }
  write_text_atomic(dir / "manifest.csv", manifest);
  return files;
}

Dataset load_event_dataset(const std::filesystem::path& dir, std::int64_t T) {
  std::ifstream in(dir / "manifest.csv");
  if (!in) throw Error("cannot open " + (dir / "manifest.csv").string());
  std::string line;
  std::getline(in, line);
  if (line != "file,label") throw FormatError("manifest.csv: expected header 'file,label'");
  Dataset ds;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto comma = line.rfind(',');
    if (comma == std::string::npos) throw FormatError(fmt::format("manifest.csv line {}: missing label", lineno));
    std::int64_t label = 0;
    try {
      label = std::stoll(line.substr(comma + 1));
    } catch (const std::exception&) {
      throw FormatError(fmt::format("manifest.csv line {}: bad label", lineno));
    }
    ds.append(load_events(dir / line.substr(0, comma), T), label);
  }
  return ds;
}

Dataset toy_event_dataset(const ToyEventOptions& o, std::int64_t T) {
  Dataset ds;
  for (std::int64_t i = 0; i < o.samples_per_class; ++i) {
    for (std::int64_t c = 0; c < o.classes; ++c) {
      ds.append(bin_events(toy_moving_bar(c, o.classes, o.size, o.duration_us, sample_seed(o.seed, c, i)), T), c);
    }
  }
  return ds;
}

}  // namespace stcore::io
