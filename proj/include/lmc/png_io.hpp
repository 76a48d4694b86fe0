#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "lmc/bin2img.hpp"

namespace lmc {

// Lossless 8-bit RGB PNG (no alpha). pad_bytes travels in the manifest, not
// in the image, so emitted files are standard PNGs.
std::vector<uint8_t> encode_png(const RgbImageGrid& grid);

// Accepts only 8-bit RGB; anything else is UnsupportedFormat. Malformed or
// truncated data is DecodeError. The returned grid has pad_bytes = 0.
RgbImageGrid decode_png(const std::vector<uint8_t>& data);

void write_png_file(const std::filesystem::path& path, const RgbImageGrid& grid);
RgbImageGrid read_png_file(const std::filesystem::path& path);

}  // namespace lmc
