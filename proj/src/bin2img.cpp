#include "lmc/bin2img.hpp"

#include <cmath>

#include "lmc/errors.hpp"

namespace lmc {

RgbImageGrid bytes_to_grid(const ByteSample& sample) {
    const auto& bytes = sample.bytes;
    if (bytes.empty()) throw InvalidInput("bytes_to_grid: empty byte sequence");
    int64_t n = static_cast<int64_t>(bytes.size());
    int64_t pixel_count = (n + 2) / 3;
    int64_t width = static_cast<int64_t>(std::ceil(std::sqrt(static_cast<double>(pixel_count))));
    while (width * width < pixel_count) ++width;  // guard against fp rounding
    int64_t height = (pixel_count + width - 1) / width;
    RgbImageGrid grid;
    grid.width = width;
    grid.height = height;
    grid.pixels.assign(static_cast<size_t>(3 * width * height), 0);
    std::copy(bytes.begin(), bytes.end(), grid.pixels.begin());
    grid.pad_bytes = 3 * width * height - n;
    return grid;
}

std::vector<uint8_t> grid_to_bytes(const RgbImageGrid& grid) {
    int64_t total = 3 * grid.height * grid.width;
    if (static_cast<int64_t>(grid.pixels.size()) != total)
        throw CorruptGrid("grid_to_bytes: pixel buffer does not match grid extents");
    if (grid.pad_bytes >= total)
        throw CorruptGrid("grid_to_bytes: pad_bytes not smaller than total byte count");
    if (grid.pad_bytes < 0) throw CorruptGrid("grid_to_bytes: negative pad_bytes");
    return {grid.pixels.begin(), grid.pixels.begin() + (total - grid.pad_bytes)};
}

namespace {

// Bilinear sample of one channel at half-pixel-center coordinates.
inline float sample_bilinear(const uint8_t* pixels, int64_t h, int64_t w, int channel, double sy,
                             double sx) {
    auto clampi = [](int64_t v, int64_t hi) { return v < 0 ? 0 : (v > hi ? hi : v); };
    int64_t y0 = clampi(static_cast<int64_t>(std::floor(sy)), h - 1);
    int64_t x0 = clampi(static_cast<int64_t>(std::floor(sx)), w - 1);
    int64_t y1 = clampi(y0 + 1, h - 1);
    int64_t x1 = clampi(x0 + 1, w - 1);
    double fy = sy - std::floor(sy);
    double fx = sx - std::floor(sx);
    if (sy < 0) fy = 0;
    if (sx < 0) fx = 0;
    auto px = [&](int64_t y, int64_t x) {
        return static_cast<double>(pixels[(y * w + x) * 3 + channel]);
    };
    double top = px(y0, x0) * (1 - fx) + px(y0, x1) * fx;
    double bot = px(y1, x0) * (1 - fx) + px(y1, x1) * fx;
    return static_cast<float>(top * (1 - fy) + bot * fy);
}

}  // namespace

ImageTensor grid_to_tensor(const RgbImageGrid& grid) {
    if (grid.height <= 0 || grid.width <= 0 || grid.pixels.empty())
        throw InvalidInput("grid_to_tensor: empty grid");
    ImageTensor out;
    out.data = Tensor({3, kImageSide, kImageSide});
    double sh = static_cast<double>(grid.height) / kImageSide;
    double sw = static_cast<double>(grid.width) / kImageSide;
    for (int c = 0; c < 3; ++c) {
        float* dst = out.data.data.data() + c * kImageSide * kImageSide;
        for (int64_t i = 0; i < kImageSide; ++i) {
            double sy = (static_cast<double>(i) + 0.5) * sh - 0.5;
            for (int64_t j = 0; j < kImageSide; ++j) {
                double sx = (static_cast<double>(j) + 0.5) * sw - 0.5;
                dst[i * kImageSide + j] =
                    sample_bilinear(grid.pixels.data(), grid.height, grid.width, c, sy, sx) /
                    255.0f;
            }
        }
    }
    return out;
}

}  // namespace lmc
