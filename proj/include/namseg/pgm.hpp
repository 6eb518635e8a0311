#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "namseg/pixels.hpp"
#include "namseg/tensor.hpp"

namespace namseg {

enum class PgmEncoding { ascii /* P2 */, binary /* P5 */ };

// Reads P2 or P5 (maxval 1..65535, 16-bit samples big-endian) into a
// [1,H,W] tensor scaled to [0,1]. Throws FormatError on malformed input.
Tensor read_pgm(const std::filesystem::path& path);
Tensor parse_pgm(std::string_view bytes);

// Writes maxval 65535; values are clamped to [0,1] and rounded to the
// nearest 1/65535.
void write_pgm(const Tensor& image, const std::filesystem::path& path,
               PgmEncoding encoding = PgmEncoding::binary);
std::string encode_pgm(const Tensor& image, PgmEncoding encoding = PgmEncoding::binary);

// Plain PBM (P1) bitmap of a binary mask.
void write_pbm(const BinaryMask& mask, const std::filesystem::path& path);

}  // namespace namseg
