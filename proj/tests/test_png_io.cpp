#include <doctest.h>
#include <zlib.h>

#include <cstring>
#include <random>

#include "lmc/bin2img.hpp"
#include "lmc/errors.hpp"
#include "lmc/png_io.hpp"

using namespace lmc;

namespace {

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v >> 24));
    out.push_back(static_cast<uint8_t>(v >> 16));
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v));
}

void put_chunk(std::vector<uint8_t>& out, const char type[4],
               const std::vector<uint8_t>& payload) {
    put_u32(out, static_cast<uint32_t>(payload.size()));
    std::vector<uint8_t> body(type, type + 4);
    body.insert(body.end(), payload.begin(), payload.end());
    out.insert(out.end(), body.begin(), body.end());
    put_u32(out, static_cast<uint32_t>(crc32(0, body.data(), static_cast<uInt>(body.size()))));
}

// Minimal hand-rolled PNG: 1x1, 16-bit grayscale. Valid file, unsupported
// pixel format for this codec.
std::vector<uint8_t> gray16_png() {
    std::vector<uint8_t> out{137, 80, 78, 71, 13, 10, 26, 10};
    std::vector<uint8_t> ihdr;
    put_u32(ihdr, 1);
    put_u32(ihdr, 1);
    ihdr.insert(ihdr.end(), {16, 0, 0, 0, 0});  // depth 16, type 0 (gray)
    put_chunk(out, "IHDR", ihdr);
    std::vector<uint8_t> raw{0, 0xAB, 0xCD};  // filter byte + one 16-bit sample
    std::vector<uint8_t> idat(compressBound(static_cast<uLong>(raw.size())));
    uLongf dest_len = static_cast<uLongf>(idat.size());
    REQUIRE(compress(idat.data(), &dest_len, raw.data(), static_cast<uLong>(raw.size())) == Z_OK);
    idat.resize(dest_len);
    put_chunk(out, "IDAT", idat);
    put_chunk(out, "IEND", {});
    return out;
}

}  // namespace

TEST_CASE("png encode/decode is a lossless round trip") {
    std::mt19937_64 rng(77);
    std::uniform_int_distribution<int> byte_dist(0, 255);
    std::uniform_int_distribution<int> len_dist(1, 900);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<uint8_t> bytes(static_cast<size_t>(len_dist(rng)));
        for (auto& b : bytes) b = static_cast<uint8_t>(byte_dist(rng));
        RgbImageGrid g = bytes_to_grid(ByteSample{bytes, "t", std::nullopt});
        RgbImageGrid back = decode_png(encode_png(g));
        CHECK(back.height == g.height);
        CHECK(back.width == g.width);
        CHECK(back.pixels == g.pixels);
        CHECK(back.pad_bytes == 0);  // pad travels in the manifest, not the PNG
    }
}

TEST_CASE("decode rejects truncated data") {
    RgbImageGrid g = bytes_to_grid(ByteSample{{1, 2, 3, 4, 5, 6}, "t", std::nullopt});
    std::vector<uint8_t> png = encode_png(g);
    png.resize(png.size() / 2);
    CHECK_THROWS_AS(decode_png(png), DecodeError);
}

TEST_CASE("decode rejects garbage") {
    std::vector<uint8_t> junk(64, 0x42);
    CHECK_THROWS_AS(decode_png(junk), DecodeError);
}

TEST_CASE("decode rejects a 16-bit grayscale PNG as unsupported") {
    CHECK_THROWS_AS(decode_png(gray16_png()), UnsupportedFormat);
}
