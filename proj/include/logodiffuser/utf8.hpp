#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace logodiffuser {

// Malformed sequences decode to U+FFFD, one per offending byte.
std::u32string decode_utf8(std::string_view s);
std::string encode_utf8(std::u32string_view s);

// Strips Unicode White_Space code points from both ends.
std::u32string trim(std::u32string_view s);
bool is_unicode_space(char32_t c) noexcept;

}  // namespace logodiffuser
