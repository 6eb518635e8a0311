#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

// Small text helpers shared by the file formats.
namespace namseg::text {

// Shortest representation that parses back to the same double.
std::string format_double(double v);
// Fixed number of decimals, for CSV reports.
std::string format_fixed(double v, int decimals);

std::string_view trim(std::string_view s);
std::vector<std::string> split(std::string_view s, char sep);

// Strict parsers: the whole string must be consumed. Throw FormatError.
double parse_double(std::string_view s);
std::uint64_t parse_u64(std::string_view s);
std::vector<std::size_t> parse_size_list(std::string_view s);
std::string join_sizes(const std::vector<std::size_t>& values);

std::string zero_pad(std::size_t value, int width);

}  // namespace namseg::text
