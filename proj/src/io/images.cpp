#include "stcore/io/images.hpp"

#include <bit>

#include <fmt/format.h>

#include "stcore/error.hpp"
#include "stcore/io/file.hpp"
#include "stcore/random.hpp"

namespace stcore::io {

namespace {

std::uint32_t be32(std::span<const std::uint8_t> b, std::size_t at) {
  return (static_cast<std::uint32_t>(b[at]) << 24) | (static_cast<std::uint32_t>(b[at + 1]) << 16) |
         (static_cast<std::uint32_t>(b[at + 2]) << 8) | b[at + 3];
}

}  // namespace

IdxArray parse_idx(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw FormatError(fmt::format("idx: truncated header at byte offset {}", bytes.size()));
  if (bytes[0] != 0 || bytes[1] != 0) throw FormatError("idx: bad magic at byte offset 0");
  IdxArray a;
  a.dtype = bytes[2];
  if (a.dtype != 0x08 && a.dtype != 0x0D) {
    throw FormatError(fmt::format("idx: unsupported dtype 0x{:02X} at byte offset 2", a.dtype));
  }
  const std::size_t rank = bytes[3];
  if (rank == 0) throw FormatError("idx: zero-rank array at byte offset 3");
  std::size_t at = 4;
  std::size_t n = 1;
  for (std::size_t i = 0; i < rank; ++i, at += 4) {
    if (bytes.size() < at + 4) throw FormatError(fmt::format("idx: truncated dimension at byte offset {}", at));
    const auto d = be32(bytes, at);
    a.dims.push_back(d);
    n *= d;
  }
  const std::size_t width = a.dtype == 0x08 ? 1 : 4;
  if (bytes.size() - at < n * width) {
    throw FormatError(fmt::format("idx: payload truncated at byte offset {} ({} of {} bytes present)", bytes.size(),
                                  bytes.size() - at, n * width));
  }
  a.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    a.values[i] = a.dtype == 0x08 ? static_cast<float>(bytes[at + i]) : std::bit_cast<float>(be32(bytes, at + 4 * i));
  }
  return a;
}

IdxArray read_idx(const std::filesystem::path& path) { return parse_idx(read_file(path)); }

Tensor idx_images(const IdxArray& a) {
  Shape s = a.dims;
  if (s.size() == 3) s.insert(s.begin() + 1, 1);
  if (s.size() != 4) throw FormatError(fmt::format("idx: image file needs rank 3 or 4, got {}", a.dims.size()));
  std::vector<float> v = a.values;
  if (a.dtype == 0x08) {
    for (auto& x : v) x /= 255.0f;
  }
  return Tensor(std::move(s), std::move(v));
}

Tensor load_idx(const std::filesystem::path& path) { return idx_images(read_idx(path)); }

std::vector<std::int64_t> load_idx_labels(const std::filesystem::path& path) {
  const IdxArray a = read_idx(path);
  if (a.dims.size() != 1 || a.dtype != 0x08) throw FormatError("idx: label file must be rank-1 unsigned bytes");
  return {a.values.begin(), a.values.end()};
}

std::vector<std::uint8_t> encode_idx_u8(const Shape& dims, std::span<const std::uint8_t> values) {
  std::vector<std::uint8_t> out{0, 0, 0x08, static_cast<std::uint8_t>(dims.size())};
  for (auto d : dims) {
    const auto u = static_cast<std::uint32_t>(d);
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(u >> s));
  }
  if (static_cast<std::int64_t>(values.size()) != shape_numel(dims)) throw ShapeError("encode_idx_u8: size mismatch");
  out.insert(out.end(), values.begin(), values.end());
  return out;
}

Encoding parse_encoding(const std::string& name) {
  if (name == "direct") return Encoding::Direct;
  if (name == "rate") return Encoding::Rate;
  throw ValueError("unknown encoding '" + name + "' (direct or rate)");
}

std::string encoding_name(Encoding e) { return e == Encoding::Direct ? "direct" : "rate"; }

Tensor encode_spikes(const Tensor& images, std::int64_t T, Encoding scheme, std::uint64_t seed) {
  if (images.rank() != 4) throw ShapeError("encode_spikes expects [B,C,H,W], got " + shape_str(images.shape()));
  if (T < 1) throw ValueError("encode_spikes: T must be >= 1");
  const auto src = images.data();
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (!(src[i] >= 0.0f && src[i] <= 1.0f)) {
      throw ValueError(fmt::format("encode_spikes: value {} at flat index {} outside [0, 1]", src[i], i));
    }
  }
  Shape s = images.shape();
  s.insert(s.begin(), T);
  std::vector<float> out;
  out.reserve(src.size() * static_cast<std::size_t>(T));
  Rng rng(seed);
  for (std::int64_t t = 0; t < T; ++t) {
    if (scheme == Encoding::Direct) {
      out.insert(out.end(), src.begin(), src.end());
    } else {
      for (float p : src) out.push_back(rng.bernoulli(p) ? 1.0f : 0.0f);
    }
  }
  return Tensor(std::move(s), std::move(out));
}

Dataset load_idx_dataset(const std::filesystem::path& images, const std::filesystem::path& labels, std::int64_t T,
                         Encoding scheme, std::uint64_t seed) {
  const Tensor img = load_idx(images);
  const auto lab = load_idx_labels(labels);
  if (static_cast<std::int64_t>(lab.size()) != img.dim(0)) {
    throw FormatError(fmt::format("idx: {} images but {} labels", img.dim(0), lab.size()));
  }
  const Tensor spikes = encode_spikes(img, T, scheme, seed);
  Dataset ds;
  ds.T = T;
  ds.C = img.dim(1);
  ds.H = img.dim(2);
  ds.W = img.dim(3);
  const std::int64_t per = ds.C * ds.H * ds.W, B = img.dim(0);
  ds.data.resize(static_cast<std::size_t>(B * T * per));
  const auto d = spikes.data();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t t = 0; t < T; ++t) {
      std::copy_n(d.begin() + (t * B + b) * per, per, ds.data.begin() + (b * T + t) * per);
    }
  ds.labels = lab;
  return ds;
}

}  // namespace stcore::io
