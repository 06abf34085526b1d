#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "klora/engine.hpp"

namespace klora {

inline constexpr std::string_view kManifestFormatVersion = "1";

using Run = std::pair<Source, std::size_t>;

std::vector<Run> run_length_encode(std::span<const Source> row);
std::vector<Source> run_length_decode(std::span<const Run> runs);

enum class SwitchKind { Never, AlwaysStyle, AtStep };

/// Where a row flips from content to style. Empty for rows that are not a content
/// prefix followed by a style suffix (random or subset rows, for example).
struct SwitchStep {
    SwitchKind kind = SwitchKind::Never;
    std::size_t step = 0;

    bool operator==(const SwitchStep&) const = default;
};

std::optional<SwitchStep> switch_step_of(std::span<const Source> row);

/// Canonical manifest text: sorted keys, two-space indent, doubles as %.17g.
std::string manifest_to_string(const SelectionSchedule& schedule);
SelectionSchedule manifest_from_string(std::string_view text);

void write_manifest(const SelectionSchedule& schedule, const std::filesystem::path& path);
SelectionSchedule read_manifest(const std::filesystem::path& path);

}  // namespace klora
