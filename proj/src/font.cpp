#include <array>
#include <bit>
#include <cstdint>
#include <string>

#include "kdlt/errors.hpp"
#include "kdlt/synthdata.hpp"

namespace kdlt::data::font {

namespace {

// Lowercase letters and digits rasterized once from DejaVu Sans Mono Bold at
// 14 px and thresholded at half intensity, in alphabet order a-z then 0-9.
constexpr std::array<std::array<std::uint8_t, kGlyphHeight>, 36> kGlyphs{{
    {{0x00, 0x00, 0x00, 0x00, 0x3C, 0x06, 0x03, 0x3F, 0x63, 0x67, 0x67, 0x3F, 0x00, 0x00, 0x00, 0x00}},  // a
    {{0x00, 0x60, 0x60, 0x60, 0x7E, 0x76, 0x63, 0x63, 0x63, 0x63, 0x76, 0x7E, 0x00, 0x00, 0x00, 0x00}},  // b
    {{0x00, 0x00, 0x00, 0x00, 0x1E, 0x30, 0x60, 0x60, 0x60, 0x60, 0x30, 0x1E, 0x00, 0x00, 0x00, 0x00}},  // c
    {{0x00, 0x06, 0x06, 0x06, 0x3E, 0x66, 0x66, 0x66, 0x66, 0x66, 0x66, 0x3E, 0x00, 0x00, 0x00, 0x00}},  // d
    {{0x00, 0x00, 0x00, 0x00, 0x3C, 0x66, 0x63, 0x7F, 0x60, 0x60, 0x70, 0x3E, 0x00, 0x00, 0x00, 0x00}},  // e
    {{0x00, 0x0E, 0x18, 0x18, 0x7E, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x00, 0x00, 0x00, 0x00}},  // f
    {{0x00, 0x00, 0x00, 0x00, 0x3F, 0x67, 0x67, 0x67, 0x67, 0x67, 0x67, 0x3E, 0x06, 0x06, 0x3C, 0x00}},  // g
    {{0x00, 0x60, 0x60, 0x60, 0x7E, 0x76, 0x66, 0x66, 0x66, 0x66, 0x66, 0x66, 0x00, 0x00, 0x00, 0x00}},  // h
    {{0x00, 0x18, 0x18, 0x00, 0x38, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x7F, 0x00, 0x00, 0x00, 0x00}},  // i
    {{0x00, 0x0C, 0x0C, 0x00, 0x3C, 0x0C, 0x0C, 0x0C, 0x0C, 0x0C, 0x0C, 0x0C, 0x0C, 0x1C, 0x78, 0x00}},  // j
    {{0x00, 0x60, 0x60, 0x60, 0x67, 0x6E, 0x7C, 0x78, 0x7C, 0x66, 0x66, 0x63, 0x00, 0x00, 0x00, 0x00}},  // k
    {{0x00, 0x78, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x0E, 0x00, 0x00, 0x00, 0x00}},  // l
    {{0x00, 0x00, 0x00, 0x00, 0x7E, 0x5B, 0x5B, 0x5B, 0x5B, 0x5B, 0x5B, 0x5B, 0x00, 0x00, 0x00, 0x00}},  // m
    {{0x00, 0x00, 0x00, 0x00, 0x7E, 0x76, 0x66, 0x66, 0x66, 0x66, 0x66, 0x66, 0x00, 0x00, 0x00, 0x00}},  // n
    {{0x00, 0x00, 0x00, 0x00, 0x3C, 0x66, 0x63, 0x63, 0x63, 0x63, 0x66, 0x3C, 0x00, 0x00, 0x00, 0x00}},  // o
    {{0x00, 0x00, 0x00, 0x00, 0x7E, 0x76, 0x63, 0x63, 0x63, 0x63, 0x76, 0x7E, 0x60, 0x60, 0x60, 0x00}},  // p
    {{0x00, 0x00, 0x00, 0x00, 0x3E, 0x66, 0x66, 0x66, 0x66, 0x66, 0x66, 0x3E, 0x06, 0x06, 0x06, 0x00}},  // q
    {{0x00, 0x00, 0x00, 0x00, 0x3F, 0x39, 0x30, 0x30, 0x30, 0x30, 0x30, 0x30, 0x00, 0x00, 0x00, 0x00}},  // r
    {{0x00, 0x00, 0x00, 0x00, 0x3C, 0x62, 0x60, 0x7C, 0x1E, 0x06, 0x46, 0x3C, 0x00, 0x00, 0x00, 0x00}},  // s
    {{0x00, 0x00, 0x18, 0x18, 0x7E, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x1E, 0x00, 0x00, 0x00, 0x00}},  // t
    {{0x00, 0x00, 0x00, 0x00, 0x66, 0x66, 0x66, 0x66, 0x66, 0x66, 0x66, 0x3E, 0x00, 0x00, 0x00, 0x00}},  // u
    {{0x00, 0x00, 0x00, 0x00, 0x63, 0x66, 0x66, 0x26, 0x36, 0x3C, 0x1C, 0x1C, 0x00, 0x00, 0x00, 0x00}},  // v
    {{0x00, 0x00, 0x00, 0x00, 0xC1, 0xC1, 0xDB, 0x5B, 0x5F, 0x76, 0x76, 0x66, 0x00, 0x00, 0x00, 0x00}},  // w
    {{0x00, 0x00, 0x00, 0x00, 0x66, 0x36, 0x3C, 0x18, 0x1C, 0x3C, 0x76, 0x67, 0x00, 0x00, 0x00, 0x00}},  // x
    {{0x00, 0x00, 0x00, 0x00, 0x63, 0x67, 0x66, 0x36, 0x3E, 0x3C, 0x1C, 0x18, 0x18, 0x18, 0x70, 0x00}},  // y
    {{0x00, 0x00, 0x00, 0x00, 0x7E, 0x06, 0x0E, 0x1C, 0x38, 0x38, 0x70, 0x7E, 0x00, 0x00, 0x00, 0x00}},  // z
    {{0x00, 0x00, 0x3C, 0x36, 0x66, 0x66, 0x6B, 0x6B, 0x66, 0x66, 0x36, 0x3C, 0x00, 0x00, 0x00, 0x00}},  // 0
    {{0x00, 0x00, 0x3C, 0x1C, 0x0C, 0x0C, 0x0C, 0x0C, 0x0C, 0x0C, 0x0C, 0x7F, 0x00, 0x00, 0x00, 0x00}},  // 1
    {{0x00, 0x00, 0x3C, 0x46, 0x06, 0x06, 0x0E, 0x0C, 0x18, 0x30, 0x60, 0x7E, 0x00, 0x00, 0x00, 0x00}},  // 2
    {{0x00, 0x00, 0x3C, 0x46, 0x06, 0x06, 0x1C, 0x06, 0x06, 0x02, 0x46, 0x3C, 0x00, 0x00, 0x00, 0x00}},  // 3
    {{0x00, 0x00, 0x0E, 0x1E, 0x1E, 0x36, 0x66, 0x66, 0x7F, 0x06, 0x06, 0x06, 0x00, 0x00, 0x00, 0x00}},  // 4
    {{0x00, 0x00, 0x7E, 0x60, 0x60, 0x7C, 0x46, 0x06, 0x06, 0x06, 0x46, 0x3C, 0x00, 0x00, 0x00, 0x00}},  // 5
    {{0x00, 0x00, 0x1C, 0x32, 0x60, 0x7C, 0x76, 0x63, 0x63, 0x63, 0x36, 0x1C, 0x00, 0x00, 0x00, 0x00}},  // 6
    {{0x00, 0x00, 0x7E, 0x06, 0x06, 0x0E, 0x0C, 0x0C, 0x18, 0x18, 0x38, 0x30, 0x00, 0x00, 0x00, 0x00}},  // 7
    {{0x00, 0x00, 0x3C, 0x66, 0x66, 0x66, 0x3C, 0x66, 0x62, 0x62, 0x66, 0x3C, 0x00, 0x00, 0x00, 0x00}},  // 8
    {{0x00, 0x00, 0x3C, 0x66, 0x66, 0x66, 0x67, 0x67, 0x3E, 0x06, 0x06, 0x3C, 0x00, 0x00, 0x00, 0x00}},  // 9
}};

int glyph_slot(char c) {
    if (c >= 'a' && c <= 'z') return c - 'a';
    if (c >= '0' && c <= '9') return 26 + (c - '0');
    throw ContractError(std::string("no glyph for character '") + c + "'");
}

}  // namespace

const std::array<std::uint8_t, kGlyphHeight>& glyph(char c) { return kGlyphs[static_cast<std::size_t>(glyph_slot(c))]; }

int ink_pixels(char c) {
    int n = 0;
    for (std::uint8_t row : glyph(c)) n += std::popcount(row);
    return n;
}

}  // namespace kdlt::data::font
