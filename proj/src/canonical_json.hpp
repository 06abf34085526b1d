#pragma once

#include <string>

#include "json.hpp"

namespace klora::detail {

/// Deterministic rendering: keys sorted (std::map order), two-space indent, doubles
/// printed with 17 significant digits. Arrays holding only scalars, or only arrays of
/// scalars, stay on one line.
std::string canonical_dump(const nlohmann::json& value);

}  // namespace klora::detail
