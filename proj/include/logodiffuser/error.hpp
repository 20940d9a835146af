#pragma once

#include <stdexcept>
#include <string>

namespace logodiffuser {

enum class Errc {
    InvalidArgument,
    TextOverflow,
    MalformedHeader,
    DimensionZero,
    ShapeMismatch,
    NonFiniteActivation,
    TraceMismatch,
    EmptyTrace,
    ModeMismatch,
    FewerThanTwoLayers,
    IndexOutOfRange,
    ZeroRowMass,
    DuplicateCell,
    EmptyWord,
    ConfigError,
    IoError,
};

const char* to_string(Errc code) noexcept;

// Every failure in the library surfaces as this type; `code()` is stable and
// is what the CLI maps onto exit codes and manifest error records.
class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    Errc code() const noexcept { return code_; }

private:
    Errc code_;
};

}  // namespace logodiffuser
