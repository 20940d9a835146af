#pragma once

// Flat tensor container shared by weight checkpoints, attention traces,
// injection plans and score vectors.
//
// Layout:
//
//   LDTF 1\n
//   meta <key> <value...>\n                       (zero or more)
//   tensor <name> <dtype> <d0>x<d1>x... <offset> <nbytes>\n   (zero or more)
//   end\n
//   <payload>
//
// dtype is one of f32, f64, i32, u8. Offsets are relative to the first
// payload byte; the payload is little-endian regardless of host order.
// A rank-0 shape is written as "scalar".

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace logodiffuser {

enum class DType { F32, F64, I32, U8 };

std::size_t dtype_size(DType t) noexcept;
const char* dtype_name(DType t) noexcept;

template <class T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::F32; }
template <>
constexpr DType dtype_of<double>() { return DType::F64; }
template <>
constexpr DType dtype_of<std::int32_t>() { return DType::I32; }
template <>
constexpr DType dtype_of<std::uint8_t>() { return DType::U8; }

struct TensorEntry {
    std::string name;
    DType dtype = DType::F32;
    std::vector<std::size_t> shape;
    std::vector<std::byte> bytes;  // host byte order in memory

    std::size_t element_count() const noexcept;
};

class TensorFile {
public:
    std::map<std::string, std::string> meta;

    template <class T>
    void add(std::string name, std::span<const T> values, std::vector<std::size_t> shape);

    template <class T>
    std::vector<T> get(std::string_view name) const;

    bool contains(std::string_view name) const noexcept;
    const TensorEntry& find(std::string_view name) const;
    const std::vector<TensorEntry>& tensors() const noexcept { return tensors_; }

    const std::string& meta_at(const std::string& key) const;

    std::string serialize() const;
    static TensorFile parse(std::string_view bytes);

    void save(const std::filesystem::path& path) const;
    static TensorFile load(const std::filesystem::path& path);

private:
    void add_raw(TensorEntry entry);

    std::vector<TensorEntry> tensors_;
};

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view content);

}  // namespace logodiffuser

#include "logodiffuser/tensor_file_impl.hpp"
