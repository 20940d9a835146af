#include "logodiffuser/glyphkit.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "logodiffuser/error.hpp"
#include "logodiffuser/hash.hpp"
#include "logodiffuser/tensor_file.hpp"
#include "logodiffuser/utf8.hpp"

namespace logodiffuser::glyphkit {

namespace {
#include "builtin_font.inc"

Glyph glyph_from_rows(const unsigned char rows[8]) {
    Glyph g;
    g.width = 8;
    g.bits.resize(64);
    for (int y = 0; y < 8; ++y) {
        for (int x = 0; x < 8; ++x) {
            g.bits[static_cast<std::size_t>(y * 8 + x)] = (rows[y] >> x) & 1u;
        }
    }
    return g;
}

BitmapFont make_builtin() {
    BitmapFont font(8, glyph_from_rows(font8x8_fallback));
    for (char32_t c = 0x20; c <= 0x7E; ++c) {
        font.add(c, glyph_from_rows(font8x8_basic[c - 0x20]));
    }
    return font;
}

std::string codepoint_label(char32_t c) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "U+%04X", static_cast<unsigned>(c));
    return buf;
}

int round_up(int v, int m) { return (v + m - 1) / m * m; }

}  // namespace

const char* to_string(Layout layout) noexcept {
    switch (layout) {
        case Layout::Horizontal: return "horizontal";
        case Layout::Vertical: return "vertical";
        case Layout::Diagonal: return "diagonal";
    }
    return "?";
}

Layout parse_layout(std::string_view name) {
    std::string lower(name);
    std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
    if (lower == "horizontal") return Layout::Horizontal;
    if (lower == "vertical") return Layout::Vertical;
    if (lower == "diagonal") return Layout::Diagonal;
    throw Error(Errc::InvalidArgument, "unknown layout '" + std::string(name) + "'");
}

std::size_t GlyphImage::mask_count() const {
    return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

std::uint64_t GlyphImage::checksum() const {
    Fnv1a h;
    h.update_value(width).update_value(height);
    h.update_span(std::span<const float>(pixels));
    h.update_span(std::span<const std::uint8_t>(mask));
    return h.digest();
}

BitmapFont::BitmapFont(int height, Glyph fallback) : height_(height), fallback_(std::move(fallback)) {
    if (height_ <= 0 || fallback_.width <= 0 ||
        fallback_.bits.size() != static_cast<std::size_t>(height_ * fallback_.width)) {
        throw Error(Errc::InvalidArgument, "fallback glyph does not match font height");
    }
}

const BitmapFont& BitmapFont::builtin() {
    static const BitmapFont font = make_builtin();
    return font;
}

void BitmapFont::add(char32_t codepoint, Glyph glyph) {
    if (glyph.width <= 0 || glyph.bits.size() != static_cast<std::size_t>(height_ * glyph.width)) {
        throw Error(Errc::InvalidArgument, "glyph " + codepoint_label(codepoint) + " does not match font height");
    }
    glyphs_[codepoint] = std::move(glyph);
}

const Glyph& BitmapFont::lookup(char32_t codepoint) const {
    auto it = glyphs_.find(codepoint);
    return it == glyphs_.end() ? fallback_ : it->second;
}

GlyphImage rasterize_text(std::string_view text, const BitmapFont& font, Layout layout, Canvas canvas, int scale) {
    if (canvas.patch <= 0 || canvas.width <= 0 || canvas.height <= 0 || canvas.width % canvas.patch != 0 ||
        canvas.height % canvas.patch != 0) {
        throw Error(Errc::InvalidArgument, "canvas must be a positive multiple of the patch size");
    }
    if (scale <= 0) {
        throw Error(Errc::InvalidArgument, "scale must be positive");
    }
    const std::u32string cps = decode_utf8(text);
    if (cps.empty()) {
        throw Error(Errc::InvalidArgument, "text must be nonempty");
    }

    GlyphImage img;
    img.width = canvas.width;
    img.height = canvas.height;
    img.text = std::string(text);
    img.layout = layout;
    img.pixels.assign(static_cast<std::size_t>(canvas.width) * canvas.height, 0.0f);
    img.mask.assign(img.pixels.size(), 0);

    std::vector<const Glyph*> glyphs;
    for (char32_t c : cps) {
        if (!font.contains(c)) {
            img.warnings.push_back("code point " + codepoint_label(c) + " not in font; fallback glyph substituted");
        }
        glyphs.push_back(&font.lookup(c));
    }

    const int gh = font.height() * scale;
    int run_w = 0;
    int run_h = 0;
    int max_w = 0;
    for (const Glyph* g : glyphs) {
        run_w += g->width * scale;
        max_w = std::max(max_w, g->width * scale);
    }
    const int n = static_cast<int>(glyphs.size());
    switch (layout) {
        case Layout::Horizontal: run_h = gh; break;
        case Layout::Vertical:
            run_w = max_w;
            run_h = n * gh;
            break;
        case Layout::Diagonal: run_h = n * gh; break;
    }
    if (run_w > canvas.width || run_h > canvas.height) {
        throw Error(Errc::TextOverflow, "rendered run " + std::to_string(run_w) + "x" + std::to_string(run_h) +
                                            " exceeds canvas " + std::to_string(canvas.width) + "x" +
                                            std::to_string(canvas.height));
    }

    int pen_x = (canvas.width - run_w) / 2;
    int pen_y = (canvas.height - run_h) / 2;
    for (const Glyph* g : glyphs) {
        const int gw = g->width * scale;
        const int gx = layout == Layout::Vertical ? pen_x + (run_w - gw) / 2 : pen_x;
        for (int y = 0; y < font.height(); ++y) {
            for (int x = 0; x < g->width; ++x) {
                if (!g->bits[static_cast<std::size_t>(y * g->width + x)]) continue;
                for (int dy = 0; dy < scale; ++dy) {
                    for (int dx = 0; dx < scale; ++dx) {
                        const auto idx = static_cast<std::size_t>(pen_y + y * scale + dy) * canvas.width +
                                         static_cast<std::size_t>(gx + x * scale + dx);
                        img.pixels[idx] = 1.0f;
                        img.mask[idx] = 1;
                    }
                }
            }
        }
        switch (layout) {
            case Layout::Horizontal: pen_x += gw; break;
            case Layout::Vertical: pen_y += gh; break;
            case Layout::Diagonal:
                pen_x += gw;
                pen_y += gh;
                break;
        }
    }
    if (img.mask_count() == 0) {
        throw Error(Errc::InvalidArgument, "text renders no ink");
    }
    return img;
}

namespace {

class NetpbmReader {
public:
    explicit NetpbmReader(std::string_view bytes) : bytes_(bytes) {}

    void skip_space_and_comments() {
        while (pos_ < bytes_.size()) {
            const char c = bytes_[pos_];
            if (c == '#') {
                while (pos_ < bytes_.size() && bytes_[pos_] != '\n' && bytes_[pos_] != '\r') ++pos_;
            } else if (std::isspace(static_cast<unsigned char>(c))) {
                ++pos_;
            } else {
                return;
            }
        }
    }

    long long header_int(const char* what) {
        skip_space_and_comments();
        long long v = 0;
        const char* begin = bytes_.data() + pos_;
        const char* end = bytes_.data() + bytes_.size();
        auto [ptr, ec] = std::from_chars(begin, end, v);
        if (ec != std::errc{} || ptr == begin || v < 0) {
            throw Error(Errc::MalformedHeader, std::string("expected ") + what);
        }
        pos_ += static_cast<std::size_t>(ptr - begin);
        if (pos_ < bytes_.size() && !std::isspace(static_cast<unsigned char>(bytes_[pos_])) && bytes_[pos_] != '#') {
            throw Error(Errc::MalformedHeader, std::string("garbage after ") + what);
        }
        return v;
    }

    std::string_view take(std::size_t n) {
        if (pos_ + n > bytes_.size()) {
            throw Error(Errc::MalformedHeader, "raster truncated");
        }
        auto s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    bool at_end() const { return pos_ >= bytes_.size(); }
    char peek() const { return bytes_[pos_]; }
    void advance() { ++pos_; }

private:
    std::string_view bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

GlyphImage parse_glyph_bitmap(std::string_view bytes, int patch) {
    if (patch <= 0) {
        throw Error(Errc::InvalidArgument, "patch must be positive");
    }
    if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '1' && bytes[1] != '2' && bytes[1] != '5')) {
        throw Error(Errc::MalformedHeader, "expected magic P1, P2 or P5");
    }
    const char kind = bytes[1];
    NetpbmReader r(bytes.substr(2));
    if (!r.at_end() && !std::isspace(static_cast<unsigned char>(r.peek())) && r.peek() != '#') {
        throw Error(Errc::MalformedHeader, "magic not followed by whitespace");
    }
    const long long w = r.header_int("width");
    const long long h = r.header_int("height");
    long long maxval = 1;
    if (kind != '1') {
        maxval = r.header_int("maxval");
        if (maxval < 1 || maxval > 65535) {
            throw Error(Errc::MalformedHeader, "maxval out of range");
        }
    }
    if (w == 0 || h == 0) {
        throw Error(Errc::DimensionZero, "image has zero width or height");
    }
    if (w > (1 << 16) || h > (1 << 16)) {
        throw Error(Errc::MalformedHeader, "image dimensions too large");
    }

    const auto count = static_cast<std::size_t>(w * h);
    std::vector<float> raw(count);
    if (kind == '1') {
        for (std::size_t i = 0; i < count; ++i) {
            r.skip_space_and_comments();
            if (r.at_end()) throw Error(Errc::MalformedHeader, "raster truncated");
            const char c = r.peek();
            if (c != '0' && c != '1') throw Error(Errc::MalformedHeader, "bad P1 raster character");
            raw[i] = c == '1' ? 1.0f : 0.0f;
            r.advance();
        }
    } else if (kind == '2') {
        for (std::size_t i = 0; i < count; ++i) {
            const long long v = r.header_int("raster value");
            if (v > maxval) throw Error(Errc::MalformedHeader, "raster value exceeds maxval");
            raw[i] = static_cast<float>(static_cast<double>(v) / static_cast<double>(maxval));
        }
    } else {
        // exactly one whitespace byte separates maxval from binary data
        if (r.at_end() || !std::isspace(static_cast<unsigned char>(r.peek()))) {
            throw Error(Errc::MalformedHeader, "missing separator before P5 raster");
        }
        r.advance();
        const std::size_t bps = maxval < 256 ? 1 : 2;
        const std::string_view data = r.take(count * bps);
        for (std::size_t i = 0; i < count; ++i) {
            unsigned v = static_cast<unsigned char>(data[i * bps]);
            if (bps == 2) v = (v << 8) | static_cast<unsigned char>(data[i * bps + 1]);
            if (v > maxval) throw Error(Errc::MalformedHeader, "raster value exceeds maxval");
            raw[i] = static_cast<float>(static_cast<double>(v) / static_cast<double>(maxval));
        }
    }

    GlyphImage img;
    img.width = round_up(static_cast<int>(w), patch);
    img.height = round_up(static_cast<int>(h), patch);
    img.pixels.assign(static_cast<std::size_t>(img.width) * img.height, 0.0f);
    img.mask.assign(img.pixels.size(), 0);
    for (long long y = 0; y < h; ++y) {
        for (long long x = 0; x < w; ++x) {
            const float v = raw[static_cast<std::size_t>(y * w + x)];
            const auto idx = static_cast<std::size_t>(y) * img.width + static_cast<std::size_t>(x);
            img.pixels[idx] = v;
            img.mask[idx] = v >= ink_threshold ? 1 : 0;
        }
    }
    return img;
}

GlyphImage load_glyph_bitmap(const std::filesystem::path& path, int patch) {
    return parse_glyph_bitmap(read_file(path), patch);
}

std::vector<double> glyph_mask_patches(const GlyphImage& g, int patch) {
    if (patch <= 0 || g.width % patch != 0 || g.height % patch != 0) {
        throw Error(Errc::ShapeMismatch, "image dimensions not divisible by patch");
    }
    const int gx = g.width / patch;
    const int gy = g.height / patch;
    std::vector<double> out(static_cast<std::size_t>(gx * gy));
    const double area = static_cast<double>(patch) * patch;
    for (int py = 0; py < gy; ++py) {
        for (int px = 0; px < gx; ++px) {
            long long count = 0;
            for (int y = 0; y < patch; ++y) {
                for (int x = 0; x < patch; ++x) {
                    count += g.ink(px * patch + x, py * patch + y) ? 1 : 0;
                }
            }
            out[static_cast<std::size_t>(py * gx + px)] = static_cast<double>(count) / area;
        }
    }
    return out;
}

std::string format_pgm(int width, int height, const std::vector<std::uint8_t>& values) {
    if (width <= 0 || height <= 0 || values.size() != static_cast<std::size_t>(width) * height) {
        throw Error(Errc::ShapeMismatch, "PGM value count does not match dimensions");
    }
    std::ostringstream out;
    out << "P2\n" << width << ' ' << height << "\n255\n";
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            out << (x ? " " : "") << static_cast<int>(values[static_cast<std::size_t>(y) * width + x]);
        }
        out << '\n';
    }
    return out.str();
}

void write_pgm(const std::filesystem::path& path, int width, int height, const std::vector<std::uint8_t>& values) {
    write_file(path, format_pgm(width, height, values));
}

void write_mask_pgm(const std::filesystem::path& path, const GlyphImage& g) {
    std::vector<std::uint8_t> v(g.mask.size());
    std::transform(g.mask.begin(), g.mask.end(), v.begin(), [](std::uint8_t m) { return m ? 255 : 0; });
    write_pgm(path, g.width, g.height, v);
}

namespace {
template <class T>
std::vector<std::uint8_t> quantize_impl(const std::vector<T>& pixels) {
    std::vector<std::uint8_t> out(pixels.size());
    for (std::size_t i = 0; i < pixels.size(); ++i) {
        const double v = std::clamp(static_cast<double>(pixels[i]), 0.0, 1.0);
        out[i] = static_cast<std::uint8_t>(std::lround(255.0 * v));
    }
    return out;
}
}  // namespace

std::vector<std::uint8_t> quantize(const std::vector<float>& pixels) { return quantize_impl(pixels); }
std::vector<std::uint8_t> quantize(const std::vector<double>& pixels) { return quantize_impl(pixels); }

}  // namespace logodiffuser::glyphkit
