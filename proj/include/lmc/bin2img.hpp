#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lmc/tensor.hpp"

namespace lmc {

struct ByteSample {
    std::vector<uint8_t> bytes;
    std::string source_id;
    std::optional<int> label;  // class index in [0,26)
};

// Row-major grid of RGB byte triples. pad_bytes counts the zero bytes that
// packing appended; stripping them from the flattened triple stream recovers
// the original byte sequence exactly.
struct RgbImageGrid {
    int64_t height = 0;
    int64_t width = 0;
    std::vector<uint8_t> pixels;  // 3 * height * width, r,g,b interleaved
    int64_t pad_bytes = 0;
};

// Normalized (3,224,224) float tensor with every element in [0,1].
struct ImageTensor {
    Tensor data;
};

inline constexpr int64_t kImageSide = 224;

// Packs bytes 3 at a time into a near-square RGB grid:
// width = ceil(sqrt(ceil(len/3))), height = ceil(pixel_count / width).
RgbImageGrid bytes_to_grid(const ByteSample& sample);

// Exact inverse of bytes_to_grid up to the recorded padding.
std::vector<uint8_t> grid_to_bytes(const RgbImageGrid& grid);

// Bilinear resize to 224x224 (half-pixel centers, align-corners disabled),
// then divide by 255. Channel 0 is red.
ImageTensor grid_to_tensor(const RgbImageGrid& grid);

}  // namespace lmc
