#pragma once

#include <cstring>
#include <functional>
#include <numeric>

#include "logodiffuser/error.hpp"

namespace logodiffuser {

template <class T>
void TensorFile::add(std::string name, std::span<const T> values, std::vector<std::size_t> shape) {
    const std::size_t expected =
        std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    if (expected != values.size()) {
        throw Error(Errc::ShapeMismatch, "tensor '" + name + "' shape does not match value count");
    }
    TensorEntry e;
    e.name = std::move(name);
    e.dtype = dtype_of<T>();
    e.shape = std::move(shape);
    e.bytes.resize(values.size_bytes());
    if (!values.empty()) {
        std::memcpy(e.bytes.data(), values.data(), values.size_bytes());
    }
    add_raw(std::move(e));
}

template <class T>
std::vector<T> TensorFile::get(std::string_view name) const {
    const TensorEntry& e = find(name);
    if (e.dtype != dtype_of<T>()) {
        throw Error(Errc::MalformedHeader, "tensor '" + e.name + "' has dtype " + dtype_name(e.dtype));
    }
    std::vector<T> out(e.bytes.size() / sizeof(T));
    if (!out.empty()) {
        std::memcpy(out.data(), e.bytes.data(), e.bytes.size());
    }
    return out;
}

}  // namespace logodiffuser
