#include "stcore/io/checkpoint.hpp"

#include <fstream>
#include <map>
#include <set>

#include <fmt/format.h>

#include "stcore/error.hpp"
#include "stcore/io/file.hpp"

namespace stcore::io {

namespace {

constexpr std::uint8_t kDtypeF32 = 1;

bool is_unfused_only(const std::string& name) {
  return name.find(".branch") != std::string::npos || name.find(".tsbn.") != std::string::npos;
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const RtformerNet& net) {
  std::string cfg;
  for (const auto& [k, v] : net.config().to_records()) cfg += k + "=" + v + "\n";
  cfg += fmt::format("fused={}\n", net.fused() ? 1 : 0);
  cfg += fmt::format("stats={}\n", net.layers_missing_stats().empty() ? 1 : 0);
  cfg += "mode=" + mode_name(net.mode()) + "\n";

  const auto tensors = net.named_tensors();
  ByteWriter w;
  w.str("RTFS");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(cfg.size()));
  w.str(cfg);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.str(name);
    w.u8(kDtypeF32);
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) w.u64(static_cast<std::uint64_t>(d));
    w.u64(offset);
    offset += static_cast<std::uint64_t>(t.numel()) * 4;
  }
  for (const auto& [name, t] : tensors) {
    for (float v : t.data()) w.f32(v);
  }
  w.u32(crc32(w.buffer()));
  return std::move(w.buffer());
}

RtformerNet deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "checkpoint");
  if (r.str(4) != "RTFS") throw FormatError("checkpoint: bad magic at byte offset 0");
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError(fmt::format("checkpoint: version {} not supported (expected {})", version, kCheckpointVersion));
  }
  if (bytes.size() < 12) throw FormatError("checkpoint: truncated before CRC");
  const auto body = bytes.first(bytes.size() - 4);
  ByteReader tail(bytes.last(4), "checkpoint");
  const auto stored = tail.u32();
  const auto actual = crc32(body);
  if (stored != actual) {
    throw FormatError(fmt::format("checkpoint: CRC mismatch (stored {:08x}, computed {:08x})", stored, actual));
  }
  r = ByteReader(body, "checkpoint");
  r.take(8);

  const std::string cfg = r.str(r.u32());
  std::vector<std::pair<std::string, std::string>> records;
  bool fused = false, stats = false;
  std::string mode = "train";
  std::size_t pos = 0;
  while (pos < cfg.size()) {
    const auto nl = cfg.find('\n', pos);
    const std::string line = cfg.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
    pos = nl == std::string::npos ? cfg.size() : nl + 1;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("checkpoint: config line without '=': " + line);
    const std::string k = line.substr(0, eq), v = line.substr(eq + 1);
    if (k == "fused") fused = v == "1";
    else if (k == "stats") stats = v == "1";
    else if (k == "mode") mode = v;
    else records.emplace_back(k, v);
  }
  const RtformerConfig config = RtformerConfig::from_records(records);

  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  const auto count = r.u32();
  std::vector<Entry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.name = r.str(r.u16());
    const auto at = r.offset();
    if (r.u8() != kDtypeF32) throw FormatError(fmt::format("checkpoint: tensor '{}' has unknown dtype at byte offset {}", e.name, at));
    const auto rank = r.u8();
    for (int d = 0; d < rank; ++d) e.shape.push_back(static_cast<std::int64_t>(r.u64()));
    e.offset = r.u64();
    if (fused && is_unfused_only(e.name)) {
      throw FormatError("checkpoint: fused file carries unfused tensor '" + e.name + "'");
    }
    entries.push_back(std::move(e));
  }
  const auto payload = body.subspan(r.offset());

  RtformerNet net = fused ? RtformerNet::build_fused_shell(config) : RtformerNet::build(config);
  std::set<std::string> expected;
  for (const auto& [name, t] : net.named_tensors()) expected.insert(name);
  std::set<std::string> seen;
  for (const auto& e : entries) {
    if (!expected.count(e.name)) throw FormatError("checkpoint: unexpected tensor '" + e.name + "'");
    if (!seen.insert(e.name).second) throw FormatError("checkpoint: duplicate tensor '" + e.name + "'");
    const auto n = static_cast<std::uint64_t>(shape_numel(e.shape));
    if (e.offset > payload.size() || n * 4 > payload.size() - e.offset) {
      throw FormatError(fmt::format("checkpoint: tensor '{}' overruns the payload", e.name));
    }
    ByteReader pr(payload.subspan(e.offset, n * 4), "checkpoint payload");
    std::vector<float> v(n);
    for (auto& x : v) x = pr.f32();
    net.assign(e.name, Tensor(e.shape, std::move(v)));
  }
  for (const auto& name : expected) {
    if (!seen.count(name)) throw FormatError("checkpoint: missing tensor '" + name + "'");
  }
  if (!fused) {
    net.set_stats_ready(stats);
    if (mode == "infer") net.set_mode(NetMode::Infer);
  }
  return net;
}

void save_checkpoint(const std::filesystem::path& path, const RtformerNet& net) {
  write_file_atomic(path, serialize_checkpoint(net));
}

RtformerNet load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return deserialize_checkpoint(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

RtformerConfig read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  auto trim = [](std::string s) {
    const auto a = s.find_first_not_of(" \t\r");
    const auto b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string{} : s.substr(a, b - a + 1);
  };
  std::vector<std::pair<std::string, std::string>> records;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(fmt::format("{}:{}: expected key=value", path.string(), lineno));
    records.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return RtformerConfig::from_records(records);
}

}  // namespace stcore::io
