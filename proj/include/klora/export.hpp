#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "klora/engine.hpp"
#include "klora/safetensors.hpp"

namespace klora {

/// Tensors for one denoising step: every layer's factors copied verbatim from the
/// model the grid selects, named in the content model's convention. Off cells are omitted.
std::vector<TensorBlob> merged_step_tensors(const LoraModel& content, const LoraModel& style,
                                            const SelectionSchedule& schedule, std::size_t step);

void export_merged_lora(const LoraModel& content, const LoraModel& style, const SelectionSchedule& schedule,
                        std::size_t step, const std::filesystem::path& path);

/// Steps whose column differs from the previous step (always includes step 0).
std::vector<std::size_t> boundary_steps(const SelectionSchedule& schedule);

enum class HeatmapFormat { Svg, Ppm };

HeatmapFormat parse_heatmap_format(const std::string& text);

inline constexpr const char* kContentColor = "#3B6FB5";
inline constexpr const char* kStyleColor = "#4CAF50";
inline constexpr const char* kOffColor = "#D0D0D0";

/// Steps run down the vertical axis, layers across; each cell is `cell` pixels square.
std::string render_svg(const SelectionSchedule& schedule, std::size_t cell = 4);
std::vector<std::byte> render_ppm(const SelectionSchedule& schedule, std::size_t cell = 4);

void render_heatmap(const SelectionSchedule& schedule, const std::filesystem::path& path, HeatmapFormat format,
                    std::size_t cell = 4);

}  // namespace klora
