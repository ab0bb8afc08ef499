// Small text helpers shared by the line-oriented file formats.
#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace marmo {

std::string_view trim(std::string_view s);
std::vector<std::string> split_ws(std::string_view s);

/// Strict parses; throw FormatError on trailing garbage.
double parse_double(std::string_view s);
long parse_int(std::string_view s);

/// Shortest representation that parses back to the same double.
std::string format_double(double v);

/// 64-bit FNV-1a over a byte range (content fingerprints, seed splitting).
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 1469598103934665603ULL);

}  // namespace marmo
