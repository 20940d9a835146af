#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace logodiffuser::glyphkit {

enum class Layout { Horizontal, Vertical, Diagonal };

const char* to_string(Layout layout) noexcept;
Layout parse_layout(std::string_view name);

/// Pixels at or above this intensity count as ink when deriving a mask.
inline constexpr float ink_threshold = 0.5f;

/// Grayscale canvas (0 = background, 1 = ink) with its binary ink mask.
/// Both grids are row-major, `width * height` long.
struct GlyphImage {
    int width = 0;
    int height = 0;
    std::vector<float> pixels;
    std::vector<std::uint8_t> mask;
    std::string text;
    Layout layout = Layout::Horizontal;
    /// Non-fatal notes, e.g. code points replaced by the fallback glyph.
    std::vector<std::string> warnings;

    float pixel(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
    bool ink(int x, int y) const { return mask[static_cast<std::size_t>(y) * width + x] != 0; }
    std::size_t mask_count() const;
    std::uint64_t checksum() const;
};

struct Glyph {
    int width = 0;
    std::vector<std::uint8_t> bits;  // height * width, row-major, 0/1
};

/// Fixed-height bitmap font keyed by code point.
class BitmapFont {
public:
    BitmapFont(int height, Glyph fallback);

    /// The embedded 8x8 ASCII font (U+0020..U+007E).
    static const BitmapFont& builtin();

    void add(char32_t codepoint, Glyph glyph);
    int height() const noexcept { return height_; }
    bool contains(char32_t codepoint) const { return glyphs_.count(codepoint) != 0; }
    /// Returns the fallback glyph when the code point is absent.
    const Glyph& lookup(char32_t codepoint) const;
    const Glyph& fallback() const noexcept { return fallback_; }

private:
    int height_;
    Glyph fallback_;
    std::map<char32_t, Glyph> glyphs_;
};

struct Canvas {
    int width = 128;
    int height = 128;
    /// Canvas sides must be multiples of this (the model's patch size).
    int patch = 8;
};

/// Binary rendering of `text` (UTF-8), each font pixel drawn as a
/// `scale` x `scale` block. The run is centered on the canvas; Diagonal
/// places each glyph one advance right and one advance down from the last.
GlyphImage rasterize_text(std::string_view text, const BitmapFont& font, Layout layout, Canvas canvas,
                          int scale = 2);

/// Decodes PBM (P1) or PGM (P2/P5) data. Values are normalized to [0,1]
/// with higher values meaning ink, and the canvas is padded with background
/// on the right/bottom to the next multiple of `patch`.
GlyphImage parse_glyph_bitmap(std::string_view bytes, int patch = 8);
GlyphImage load_glyph_bitmap(const std::filesystem::path& path, int patch = 8);

/// Fraction of mask cells set in each patch, row-major over patches.
std::vector<double> glyph_mask_patches(const GlyphImage& g, int patch);

/// ASCII PGM (P2) with maxval 255.
std::string format_pgm(int width, int height, const std::vector<std::uint8_t>& values);
void write_pgm(const std::filesystem::path& path, int width, int height, const std::vector<std::uint8_t>& values);
/// Mask as PGM P2: ink cells 255, background 0.
void write_mask_pgm(const std::filesystem::path& path, const GlyphImage& g);
/// Pixels in [0,1] quantized with round(255 * v).
std::vector<std::uint8_t> quantize(const std::vector<float>& pixels);
std::vector<std::uint8_t> quantize(const std::vector<double>& pixels);

}  // namespace logodiffuser::glyphkit
