#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <fstream>
#include <sstream>

#include "logodiffuser/error.hpp"
#include "logodiffuser/hash.hpp"
#include "logodiffuser/tensor_file.hpp"
#include "logodiffuser/utf8.hpp"

namespace logodiffuser {

const char* to_string(Errc code) noexcept {
    switch (code) {
        case Errc::InvalidArgument: return "InvalidArgument";
        case Errc::TextOverflow: return "TextOverflow";
        case Errc::MalformedHeader: return "MalformedHeader";
        case Errc::DimensionZero: return "DimensionZero";
        case Errc::ShapeMismatch: return "ShapeMismatch";
        case Errc::NonFiniteActivation: return "NonFiniteActivation";
        case Errc::TraceMismatch: return "TraceMismatch";
        case Errc::EmptyTrace: return "EmptyTrace";
        case Errc::ModeMismatch: return "ModeMismatch";
        case Errc::FewerThanTwoLayers: return "FewerThanTwoLayers";
        case Errc::IndexOutOfRange: return "IndexOutOfRange";
        case Errc::ZeroRowMass: return "ZeroRowMass";
        case Errc::DuplicateCell: return "DuplicateCell";
        case Errc::EmptyWord: return "EmptyWord";
        case Errc::ConfigError: return "ConfigError";
        case Errc::IoError: return "IoError";
    }
    return "Unknown";
}

std::string hex64(std::uint64_t v) {
    std::array<char, 17> buf{};
    auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + 16, v, 16);
    std::string s(buf.data(), ptr);
    return std::string(16 - s.size(), '0') + s;
}

// --- UTF-8 -----------------------------------------------------------------

std::u32string decode_utf8(std::string_view s) {
    std::u32string out;
    out.reserve(s.size());
    std::size_t i = 0;
    while (i < s.size()) {
        const auto b0 = static_cast<unsigned char>(s[i]);
        int len = 0;
        char32_t cp = 0;
        if (b0 < 0x80) {
            len = 1;
            cp = b0;
        } else if ((b0 & 0xE0) == 0xC0) {
            len = 2;
            cp = b0 & 0x1F;
        } else if ((b0 & 0xF0) == 0xE0) {
            len = 3;
            cp = b0 & 0x0F;
        } else if ((b0 & 0xF8) == 0xF0) {
            len = 4;
            cp = b0 & 0x07;
        }
        bool ok = len > 0 && i + len <= s.size();
        for (int k = 1; ok && k < len; ++k) {
            const auto b = static_cast<unsigned char>(s[i + k]);
            if ((b & 0xC0) != 0x80) {
                ok = false;
            } else {
                cp = (cp << 6) | (b & 0x3F);
            }
        }
        // reject overlong forms, surrogates and out-of-range values
        static constexpr char32_t min_for_len[] = {0, 0, 0x80, 0x800, 0x10000};
        if (ok && (cp < min_for_len[len] || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF))) {
            ok = false;
        }
        if (!ok) {
            out.push_back(U'�');
            ++i;
            continue;
        }
        out.push_back(cp);
        i += static_cast<std::size_t>(len);
    }
    return out;
}

std::string encode_utf8(std::u32string_view s) {
    std::string out;
    for (char32_t c : s) {
        if (c < 0x80) {
            out.push_back(static_cast<char>(c));
        } else if (c < 0x800) {
            out.push_back(static_cast<char>(0xC0 | (c >> 6)));
            out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
        } else if (c < 0x10000) {
            out.push_back(static_cast<char>(0xE0 | (c >> 12)));
            out.push_back(static_cast<char>(0x80 | ((c >> 6) & 0x3F)));
            out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
        } else {
            out.push_back(static_cast<char>(0xF0 | (c >> 18)));
            out.push_back(static_cast<char>(0x80 | ((c >> 12) & 0x3F)));
            out.push_back(static_cast<char>(0x80 | ((c >> 6) & 0x3F)));
            out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
        }
    }
    return out;
}

bool is_unicode_space(char32_t c) noexcept {
    switch (c) {
        case 0x09: case 0x0A: case 0x0B: case 0x0C: case 0x0D: case 0x20:
        case 0x85: case 0xA0: case 0x1680: case 0x2028: case 0x2029:
        case 0x202F: case 0x205F: case 0x3000:
            return true;
        default:
            return c >= 0x2000 && c <= 0x200A;
    }
}

std::u32string trim(std::u32string_view s) {
    std::size_t b = 0;
    std::size_t e = s.size();
    while (b < e && is_unicode_space(s[b])) ++b;
    while (e > b && is_unicode_space(s[e - 1])) --e;
    return std::u32string(s.substr(b, e - b));
}

// --- tensor file -------------------------------------------------------------

std::size_t dtype_size(DType t) noexcept {
    switch (t) {
        case DType::F32: return 4;
        case DType::F64: return 8;
        case DType::I32: return 4;
        case DType::U8: return 1;
    }
    return 0;
}

const char* dtype_name(DType t) noexcept {
    switch (t) {
        case DType::F32: return "f32";
        case DType::F64: return "f64";
        case DType::I32: return "i32";
        case DType::U8: return "u8";
    }
    return "?";
}

namespace {

DType parse_dtype(std::string_view s) {
    if (s == "f32") return DType::F32;
    if (s == "f64") return DType::F64;
    if (s == "i32") return DType::I32;
    if (s == "u8") return DType::U8;
    throw Error(Errc::MalformedHeader, "unknown dtype '" + std::string(s) + "'");
}

// Flips each element between host and little-endian order (no-op on LE hosts).
void to_little_endian(std::vector<std::byte>& bytes, std::size_t elem) {
    if constexpr (std::endian::native == std::endian::big) {
        for (std::size_t i = 0; i + elem <= bytes.size(); i += elem) {
            std::reverse(bytes.begin() + i, bytes.begin() + i + elem);
        }
    } else {
        (void)bytes;
        (void)elem;
    }
}

std::size_t parse_size(std::string_view s) {
    std::size_t v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size()) {
        throw Error(Errc::MalformedHeader, "bad integer '" + std::string(s) + "'");
    }
    return v;
}

}  // namespace

std::size_t TensorEntry::element_count() const noexcept {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

void TensorFile::add_raw(TensorEntry entry) {
    for (const auto& t : tensors_) {
        if (t.name == entry.name) {
            throw Error(Errc::InvalidArgument, "duplicate tensor '" + entry.name + "'");
        }
    }
    tensors_.push_back(std::move(entry));
}

bool TensorFile::contains(std::string_view name) const noexcept {
    for (const auto& t : tensors_) {
        if (t.name == name) return true;
    }
    return false;
}

const TensorEntry& TensorFile::find(std::string_view name) const {
    for (const auto& t : tensors_) {
        if (t.name == name) return t;
    }
    throw Error(Errc::MalformedHeader, "missing tensor '" + std::string(name) + "'");
}

const std::string& TensorFile::meta_at(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) {
        throw Error(Errc::MalformedHeader, "missing meta key '" + key + "'");
    }
    return it->second;
}

std::string TensorFile::serialize() const {
    std::ostringstream head;
    head << "LDTF 1\n";
    for (const auto& [k, v] : meta) {
        if (k.empty() || k.find_first_of(" \t\n") != std::string::npos || v.find('\n') != std::string::npos) {
            throw Error(Errc::InvalidArgument, "meta entry '" + k + "' is not representable");
        }
        head << "meta " << k << ' ' << v << '\n';
    }
    std::size_t offset = 0;
    for (const auto& t : tensors_) {
        head << "tensor " << t.name << ' ' << dtype_name(t.dtype) << ' ';
        if (t.shape.empty()) {
            head << "scalar";
        }
        for (std::size_t i = 0; i < t.shape.size(); ++i) {
            head << (i ? "x" : "") << t.shape[i];
        }
        head << ' ' << offset << ' ' << t.bytes.size() << '\n';
        offset += t.bytes.size();
    }
    head << "end\n";
    std::string out = head.str();
    out.reserve(out.size() + offset);
    for (const auto& t : tensors_) {
        std::vector<std::byte> le = t.bytes;
        to_little_endian(le, dtype_size(t.dtype));
        out.append(reinterpret_cast<const char*>(le.data()), le.size());
    }
    return out;
}

TensorFile TensorFile::parse(std::string_view bytes) {
    TensorFile f;
    std::size_t pos = 0;
    auto next_line = [&]() -> std::string_view {
        auto nl = bytes.find('\n', pos);
        if (nl == std::string_view::npos) {
            throw Error(Errc::MalformedHeader, "unterminated header");
        }
        auto line = bytes.substr(pos, nl - pos);
        pos = nl + 1;
        return line;
    };
    if (next_line() != "LDTF 1") {
        throw Error(Errc::MalformedHeader, "not an LDTF 1 file");
    }
    struct Pending {
        TensorEntry entry;
        std::size_t offset;
        std::size_t nbytes;
    };
    std::vector<Pending> pending;
    for (;;) {
        std::string_view line = next_line();
        if (line == "end") break;
        std::istringstream ls{std::string(line)};
        std::string kind;
        ls >> kind;
        if (kind == "meta") {
            std::string key;
            ls >> key;
            std::string value;
            std::getline(ls, value);
            if (!value.empty() && value.front() == ' ') value.erase(0, 1);
            f.meta[key] = value;
        } else if (kind == "tensor") {
            std::string name, dtype, shape, off, nb;
            if (!(ls >> name >> dtype >> shape >> off >> nb)) {
                throw Error(Errc::MalformedHeader, "bad tensor line '" + std::string(line) + "'");
            }
            Pending p;
            p.entry.name = name;
            p.entry.dtype = parse_dtype(dtype);
            if (shape != "scalar") {
                std::size_t start = 0;
                while (start <= shape.size()) {
                    auto x = shape.find('x', start);
                    if (x == std::string::npos) x = shape.size();
                    p.entry.shape.push_back(parse_size(std::string_view(shape).substr(start, x - start)));
                    start = x + 1;
                }
            }
            p.offset = parse_size(off);
            p.nbytes = parse_size(nb);
            if (p.nbytes != p.entry.element_count() * dtype_size(p.entry.dtype)) {
                throw Error(Errc::MalformedHeader, "tensor '" + name + "' byte count disagrees with shape");
            }
            pending.push_back(std::move(p));
        } else {
            throw Error(Errc::MalformedHeader, "unknown header line '" + std::string(line) + "'");
        }
    }
    const std::string_view payload = bytes.substr(pos);
    for (auto& p : pending) {
        if (p.offset + p.nbytes > payload.size()) {
            throw Error(Errc::MalformedHeader, "tensor '" + p.entry.name + "' runs past end of file");
        }
        p.entry.bytes.resize(p.nbytes);
        std::memcpy(p.entry.bytes.data(), payload.data() + p.offset, p.nbytes);
        to_little_endian(p.entry.bytes, dtype_size(p.entry.dtype));
        f.add_raw(std::move(p.entry));
    }
    return f;
}

void TensorFile::save(const std::filesystem::path& path) const { write_file(path, serialize()); }

TensorFile TensorFile::load(const std::filesystem::path& path) { return parse(read_file(path)); }

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error(Errc::IoError, "cannot open '" + path.string() + "' for reading");
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view content) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error(Errc::IoError, "cannot open '" + path.string() + "' for writing");
    }
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) {
        throw Error(Errc::IoError, "write failed for '" + path.string() + "'");
    }
}

}  // namespace logodiffuser
