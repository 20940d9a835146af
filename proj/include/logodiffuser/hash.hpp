#pragma once

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <span>
#include <string_view>
#include <type_traits>

namespace logodiffuser {

/// 64-bit FNV-1a. Used for every checksum and for the prompt-word hash, so
/// results are identical on every platform.
class Fnv1a {
public:
    static constexpr std::uint64_t offset_basis = 0xcbf29ce484222325ULL;
    static constexpr std::uint64_t prime = 0x100000001b3ULL;

    Fnv1a& update(const void* data, std::size_t size) noexcept {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < size; ++i) {
            state_ ^= p[i];
            state_ *= prime;
        }
        return *this;
    }

    Fnv1a& update(std::string_view s) noexcept {
        // length prefix keeps ("ab","c") distinct from ("a","bc")
        update_value(static_cast<std::uint64_t>(s.size()));
        return update(s.data(), s.size());
    }

    template <class T>
        requires std::is_arithmetic_v<T>
    Fnv1a& update_value(T v) noexcept {
        return update(&v, sizeof(T));
    }

    template <class T>
        requires std::is_arithmetic_v<T>
    Fnv1a& update_span(std::span<const T> values) noexcept {
        return update(values.data(), values.size_bytes());
    }

    std::uint64_t digest() const noexcept { return state_; }

private:
    std::uint64_t state_ = offset_basis;
};

inline std::uint64_t fnv1a64(std::string_view s) noexcept {
    std::uint64_t h = Fnv1a::offset_basis;
    for (unsigned char c : s) {
        h ^= c;
        h *= Fnv1a::prime;
    }
    return h;
}

std::string hex64(std::uint64_t v);

}  // namespace logodiffuser
