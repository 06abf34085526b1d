#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace klora {

enum class ErrorKind {
    Format,       // malformed container, manifest or header
    Data,         // non-finite values in a tensor
    Shape,        // dimension mismatch
    Argument,     // invalid parameter value
    Pairing,      // layers cannot be matched or paired
    Degenerate,   // e.g. all-zero style model
    Io,           // filesystem failures
    UnsupportedVersion,
    State,        // API misuse
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

    // True for problems caused by the caller's inputs rather than by this library.
    bool is_input_error() const noexcept { return kind_ != ErrorKind::State; }

private:
    ErrorKind kind_;
};

}  // namespace klora
