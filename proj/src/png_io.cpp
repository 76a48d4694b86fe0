#include "lmc/png_io.hpp"

#include <png.h>

#include <csetjmp>
#include <cstring>
#include <fstream>

#include "lmc/errors.hpp"

namespace lmc {

namespace {

struct ReadState {
    const uint8_t* data;
    size_t size;
    size_t pos;
};

void read_fn(png_structp png, png_bytep out, png_size_t count) {
    auto* st = static_cast<ReadState*>(png_get_io_ptr(png));
    if (st->pos + count > st->size) png_error(png, "unexpected end of PNG stream");
    std::memcpy(out, st->data + st->pos, count);
    st->pos += count;
}

void write_fn(png_structp png, png_bytep data, png_size_t count) {
    auto* out = static_cast<std::vector<uint8_t>*>(png_get_io_ptr(png));
    out->insert(out->end(), data, data + count);
}

void flush_fn(png_structp) {}

}  // namespace

std::vector<uint8_t> encode_png(const RgbImageGrid& grid) {
    if (grid.height <= 0 || grid.width <= 0 ||
        static_cast<int64_t>(grid.pixels.size()) != 3 * grid.height * grid.width)
        throw InvalidInput("encode_png: invalid grid");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("encode_png: libpng init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("encode_png: libpng info init failed");
    }
    std::vector<uint8_t> out;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("encode_png: libpng write failed");
    }
    png_set_write_fn(png, &out, write_fn, flush_fn);
    png_set_IHDR(png, info, static_cast<png_uint_32>(grid.width),
                 static_cast<png_uint_32>(grid.height), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(static_cast<size_t>(grid.height));
    for (int64_t r = 0; r < grid.height; ++r)
        rows[static_cast<size_t>(r)] =
            const_cast<png_bytep>(grid.pixels.data() + r * grid.width * 3);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    return out;
}

RgbImageGrid decode_png(const std::vector<uint8_t>& data) {
    if (data.size() < 8 || png_sig_cmp(data.data(), 0, 8) != 0)
        throw DecodeError("decode_png: not a PNG stream");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("decode_png: libpng init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("decode_png: libpng info init failed");
    }
    ReadState st{data.data(), data.size(), 0};
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DecodeError("decode_png: malformed or truncated PNG");
    }
    png_set_read_fn(png, &st, read_fn);
    png_read_info(png, info);
    int bit_depth = png_get_bit_depth(png, info);
    int color_type = png_get_color_type(png, info);
    if (bit_depth != 8 || color_type != PNG_COLOR_TYPE_RGB) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw UnsupportedFormat("decode_png: only 8-bit RGB PNGs are supported");
    }
    png_uint_32 w = png_get_image_width(png, info);
    png_uint_32 h = png_get_image_height(png, info);
    RgbImageGrid grid;
    grid.width = static_cast<int64_t>(w);
    grid.height = static_cast<int64_t>(h);
    grid.pixels.assign(static_cast<size_t>(3) * w * h, 0);
    std::vector<png_bytep> rows(h);
    for (png_uint_32 r = 0; r < h; ++r) rows[r] = grid.pixels.data() + static_cast<size_t>(r) * w * 3;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return grid;
}

void write_png_file(const std::filesystem::path& path, const RgbImageGrid& grid) {
    auto bytes = encode_png(grid);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("write_png_file: cannot open " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write_png_file: write failed for " + path.string());
}

RgbImageGrid read_png_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("read_png_file: cannot open " + path.string());
    std::vector<uint8_t> data((std::istreambuf_iterator<char>(in)),
                              std::istreambuf_iterator<char>());
    return decode_png(data);
}

}  // namespace lmc
