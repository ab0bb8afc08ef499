#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "marmo/imgcore.hpp"
#include "marmo/textio.hpp"

namespace fs = std::filesystem;

namespace marmo {

namespace {

std::vector<char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw FormatError("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// key=value lines, '#' comments.
std::map<std::string, std::string> read_keyvalues(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw FormatError("cannot open " + p.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    const auto t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string_view::npos) throw FormatError(p.string() + ": expected key=value, got '" + std::string(t) + "'");
    kv[std::string(trim(t.substr(0, eq)))] = std::string(trim(t.substr(eq + 1)));
  }
  return kv;
}

const std::string& need(const std::map<std::string, std::string>& kv, const std::string& key, const fs::path& p) {
  const auto it = kv.find(key);
  if (it == kv.end()) throw FormatError(p.string() + ": missing key '" + key + "'");
  return it->second;
}

template <std::size_t N>
std::array<double, N> parse_doubles(const std::string& s, const fs::path& p) {
  const auto parts = split_ws(s);
  if (parts.size() != N) throw FormatError(p.string() + ": expected " + std::to_string(N) + " values in '" + s + "'");
  std::array<double, N> out{};
  for (std::size_t i = 0; i < N; ++i) out[i] = parse_double(parts[i]);
  return out;
}

fs::path meta_path(const fs::path& pgm) {
  fs::path m = pgm;
  m.replace_extension(".meta");
  return m;
}

}  // namespace

void write_tile(const Tile2D& tile, const fs::path& pgm_path) {
  if (tile.width <= 0 || tile.height <= 0 || tile.pixels.size() != static_cast<std::size_t>(tile.width) * tile.height) {
    throw InvalidArgument("write_tile: inconsistent tile extent");
  }
  {
    std::ofstream out(pgm_path, std::ios::binary);
    if (!out) throw FormatError("cannot write " + pgm_path.string());
    out << "P5\n" << tile.width << ' ' << tile.height << "\n65535\n";
    std::vector<unsigned char> buf(tile.pixels.size() * 2);
    for (std::size_t i = 0; i < tile.pixels.size(); ++i) {
      buf[2 * i] = static_cast<unsigned char>(tile.pixels[i] >> 8);
      buf[2 * i + 1] = static_cast<unsigned char>(tile.pixels[i] & 0xff);
    }
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  }
  std::ofstream meta(meta_path(pgm_path));
  if (!meta) throw FormatError("cannot write " + meta_path(pgm_path).string());
  meta << "channel=" << channel_name(tile.channel) << '\n'
       << "offset_um=" << format_double(tile.world_offset_um[0]) << ' ' << format_double(tile.world_offset_um[1]) << ' '
       << format_double(tile.world_offset_um[2]) << '\n'
       << "pitch_um=" << format_double(tile.pixel_pitch_um) << '\n'
       << "index=" << tile.index << '\n';
}

Tile2D read_tile(const fs::path& pgm_path) {
  const auto bytes = slurp(pgm_path);
  // Header: magic, width, height, maxval separated by whitespace; '#' comments.
  std::size_t pos = 0;
  auto next_token = [&]() -> std::string {
    while (pos < bytes.size()) {
      if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw FormatError(pgm_path.string() + ": malformed PGM header");
    return std::string(bytes.data() + start, pos - start);
  };
  if (next_token() != "P5") throw FormatError(pgm_path.string() + ": not a binary PGM (P5)");
  const long w = parse_int(next_token());
  const long h = parse_int(next_token());
  const long maxval = parse_int(next_token());
  if (w <= 0 || h <= 0) throw FormatError(pgm_path.string() + ": non-positive extent");
  if (maxval != 65535) throw FormatError(pgm_path.string() + ": maxval must be 65535");
  if (pos >= bytes.size()) throw FormatError(pgm_path.string() + ": dimension mismatch, no payload");
  ++pos;  // single whitespace after maxval
  const std::size_t expected = static_cast<std::size_t>(w) * h * 2;
  if (bytes.size() - pos != expected) {
    throw FormatError(pgm_path.string() + ": dimension mismatch, payload has " + std::to_string(bytes.size() - pos) +
                      " bytes, header implies " + std::to_string(expected));
  }

  const auto kv = read_keyvalues(meta_path(pgm_path));
  const auto mp = meta_path(pgm_path);
  Tile2D t(static_cast<int>(w), static_cast<int>(h), parse_channel(need(kv, "channel", mp)));
  for (std::size_t i = 0; i < t.pixels.size(); ++i) {
    const auto hi = static_cast<unsigned char>(bytes[pos + 2 * i]);
    const auto lo = static_cast<unsigned char>(bytes[pos + 2 * i + 1]);
    t.pixels[i] = static_cast<std::uint16_t>((hi << 8) | lo);
  }
  t.world_offset_um = parse_doubles<3>(need(kv, "offset_um", mp), mp);
  t.pixel_pitch_um = parse_double(need(kv, "pitch_um", mp));
  if (!(t.pixel_pitch_um > 0.0)) throw FormatError(mp.string() + ": pitch_um must be positive");
  t.index = static_cast<int>(parse_int(need(kv, "index", mp)));
  return t;
}

fs::path stack_prefix(const fs::path& p) {
  if (p.extension() == ".hdr" || p.extension() == ".raw") {
    fs::path q = p;
    q.replace_extension();
    return q;
  }
  return p;
}

void write_stack(const Stack3D& st, const fs::path& prefix_in, StorageType type) {
  const auto prefix = stack_prefix(prefix_in);
  if (st.data.size() != static_cast<std::size_t>(st.dims[0]) * st.dims[1] * st.dims[2] || st.data.empty()) {
    throw InvalidArgument("write_stack: data length does not match dims");
  }
  fs::path hdr = prefix, raw = prefix;
  hdr += ".hdr";
  raw += ".raw";
  {
    std::ofstream h(hdr);
    if (!h) throw FormatError("cannot write " + hdr.string());
    h << "dims=" << st.dims[0] << ' ' << st.dims[1] << ' ' << st.dims[2] << '\n'
      << "voxel_um=" << format_double(st.voxel_um[0]) << ' ' << format_double(st.voxel_um[1]) << ' '
      << format_double(st.voxel_um[2]) << '\n'
      << "dtype=" << (type == StorageType::U16 ? "u16" : type == StorageType::F32 ? "f32" : "f64") << '\n'
      << "channel=" << channel_name(st.channel) << '\n';
  }
  std::vector<unsigned char> buf;
  if (type == StorageType::U16) {
    buf.resize(st.size() * 2);
    for (std::size_t i = 0; i < st.size(); ++i) {
      const std::uint16_t v = to_u16(st.data[i]);
      buf[2 * i] = static_cast<unsigned char>(v & 0xff);
      buf[2 * i + 1] = static_cast<unsigned char>(v >> 8);
    }
  } else if (type == StorageType::F32) {
    buf.resize(st.size() * 4);
    for (std::size_t i = 0; i < st.size(); ++i) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(st.data[i]));
      for (int b = 0; b < 4; ++b) buf[4 * i + b] = static_cast<unsigned char>((bits >> (8 * b)) & 0xff);
    }
  } else {
    buf.resize(st.size() * 8);
    for (std::size_t i = 0; i < st.size(); ++i) {
      const auto bits = std::bit_cast<std::uint64_t>(st.data[i]);
      for (int b = 0; b < 8; ++b) buf[8 * i + b] = static_cast<unsigned char>((bits >> (8 * b)) & 0xff);
    }
  }
  std::ofstream r(raw, std::ios::binary);
  if (!r) throw FormatError("cannot write " + raw.string());
  r.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

Stack3D read_stack(const fs::path& prefix_in) {
  const auto prefix = stack_prefix(prefix_in);
  fs::path hdr = prefix, raw = prefix;
  hdr += ".hdr";
  raw += ".raw";
  const auto kv = read_keyvalues(hdr);
  const auto parts = split_ws(need(kv, "dims", hdr));
  if (parts.size() != 3) throw FormatError(hdr.string() + ": dims needs three values");
  std::array<int, 3> dims{};
  for (int a = 0; a < 3; ++a) {
    const long d = parse_int(parts[a]);
    if (d <= 0) throw FormatError(hdr.string() + ": dims must be positive");
    dims[a] = static_cast<int>(d);
  }
  const auto voxel = parse_doubles<3>(need(kv, "voxel_um", hdr), hdr);
  for (double v : voxel)
    if (!(v > 0.0)) throw FormatError(hdr.string() + ": voxel_um must be positive");
  const auto& dtype = need(kv, "dtype", hdr);
  if (dtype != "u16" && dtype != "f32" && dtype != "f64") throw FormatError(hdr.string() + ": unknown dtype '" + dtype + "'");
  const Channel ch = parse_channel(need(kv, "channel", hdr));

  const auto bytes = slurp(raw);
  const std::size_t n = static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  const std::size_t width = dtype == "u16" ? 2 : dtype == "f32" ? 4 : 8;
  if (bytes.size() != n * width) {
    throw FormatError(raw.string() + ": payload has " + std::to_string(bytes.size()) + " bytes, header implies " +
                      std::to_string(n * width));
  }
  Stack3D st(dims, voxel, ch);
  const auto* b = reinterpret_cast<const unsigned char*>(bytes.data());
  if (width == 2) {
    for (std::size_t i = 0; i < n; ++i) st.data[i] = static_cast<double>(b[2 * i] | (b[2 * i + 1] << 8));
  } else if (width == 4) {
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits = 0;
      for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(b[4 * i + k]) << (8 * k);
      st.data[i] = static_cast<double>(std::bit_cast<float>(bits));
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      std::uint64_t bits = 0;
      for (int k = 0; k < 8; ++k) bits |= static_cast<std::uint64_t>(b[8 * i + k]) << (8 * k);
      st.data[i] = std::bit_cast<double>(bits);
    }
  }
  return st;
}

}  // namespace marmo
