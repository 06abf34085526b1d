#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "klora/safetensors.hpp"
#include "klora/tensor.hpp"

namespace klora {

enum class ScaleMode { Linear, Modular, None };

/// Which LoRA a layer uses at a step. `Off` only appears in layer-subset masks.
enum class Source : std::uint8_t { Content, Style, Off };

enum class SelectionMode { TopK, Fixed, Random, Subset, TopKNoScale };

/// How fixed selection reads "scale > 1". EarlyContent: S <= 1 picks content, so content
/// owns the early steps. Literal: S > 1 picks content.
enum class FixedReading { EarlyContent, Literal };

enum class SoloPolicy { SoloPass, Drop };

std::string_view to_string(ScaleMode mode) noexcept;
std::string_view to_string(SelectionMode mode) noexcept;
std::string_view to_string(FixedReading reading) noexcept;
std::string_view to_string(SoloPolicy policy) noexcept;
char source_symbol(Source source) noexcept;

ScaleMode parse_scale_mode(std::string_view text);
SelectionMode parse_selection_mode(std::string_view text);
FixedReading parse_fixed_reading(std::string_view text);
SoloPolicy parse_solo_policy(std::string_view text);
Source parse_source_symbol(std::string_view text);

struct ScheduleParams {
    int total_steps = 50;
    double alpha = 1.5;
    double beta = 0.5;
    ScaleMode scale_mode = ScaleMode::Linear;
    double alpha_prime = 1.5;
    double beta_prime = 1.3;
    std::optional<std::size_t> k_override;
    bool apply_lora_alpha = true;

    /// Throws Argument when the parameters cannot produce a schedule.
    void validate() const;
    bool operator==(const ScheduleParams&) const = default;
};

struct LayerImportance {
    std::string base_module;
    double s_content = 0.0;
    double s_style = 0.0;
    std::size_t k_used = 0;
    std::size_t rank_content = 0;
    std::size_t rank_style = 0;

    bool operator==(const LayerImportance&) const = default;
};

struct GammaFactor {
    double value = 1.0;
    double content_total = 0.0;
    double style_total = 0.0;

    bool operator==(const GammaFactor&) const = default;
};

struct ModeSettings {
    SelectionMode kind = SelectionMode::TopK;
    std::optional<std::uint64_t> seed;
    std::optional<double> p_content;
    std::optional<double> fraction;
    std::optional<FixedReading> fixed_reading;

    bool operator==(const ModeSettings&) const = default;
};

struct SourceFile {
    std::string path;
    std::string sha256;

    bool operator==(const SourceFile&) const = default;
};

/// Dense [layer × step] grid of sources.
class SelectionGrid {
public:
    SelectionGrid() = default;
    SelectionGrid(std::size_t layers, std::size_t steps, Source fill = Source::Content);

    std::size_t layers() const noexcept { return layers_; }
    std::size_t steps() const noexcept { return steps_; }

    Source at(std::size_t layer, std::size_t step) const noexcept { return cells_[layer * steps_ + step]; }
    void set(std::size_t layer, std::size_t step, Source s) noexcept { cells_[layer * steps_ + step] = s; }
    std::span<const Source> row(std::size_t layer) const noexcept {
        return std::span<const Source>(cells_).subspan(layer * steps_, steps_);
    }
    std::size_t count(Source s) const noexcept;

    bool operator==(const SelectionGrid&) const = default;

private:
    std::size_t layers_ = 0;
    std::size_t steps_ = 0;
    std::vector<Source> cells_;
};

struct SelectionSchedule {
    std::vector<std::string> layer_order;
    SelectionGrid grid;
    ScheduleParams params;
    std::optional<GammaFactor> gamma;
    /// Top-K scores for matched layers, in layer_order order.
    std::vector<LayerImportance> importances;
    ModeSettings mode;
    SoloPolicy solo_policy = SoloPolicy::SoloPass;
    /// Layers present in only one input, with the source they were pinned to.
    std::vector<std::pair<std::string, Source>> solo_layers;
    std::optional<SourceFile> content_source;
    std::optional<SourceFile> style_source;
    /// Free-form JSON object text describing the producing invocation; echoed verbatim.
    std::string run_config;

    const LayerImportance* importance(std::string_view base_module) const;
    std::optional<std::size_t> layer_index(std::string_view base_module) const;

    bool operator==(const SelectionSchedule&) const = default;
};

struct EngineOptions {
    SoloPolicy solo_policy = SoloPolicy::SoloPass;
    /// Worker threads for per-layer scoring; 0 picks hardware concurrency capped by KLORA_THREADS.
    unsigned threads = 0;
};

unsigned resolve_thread_count(unsigned requested);

/// up · down, scaled by alpha/rank when requested and the layer carries alpha.
DenseMatrix reconstruct_delta(const LoraLayer& layer, bool apply_lora_alpha);

/// K = r_c · r_s (or the override), clamped to the element count.
std::size_t choose_k(std::size_t rank_content, std::size_t rank_style, std::size_t elements,
                     std::optional<std::size_t> k_override);

LayerImportance layer_importance(const LoraLayer& content, const LoraLayer& style, const ScheduleParams& params);

/// Base modules present in both models, in content order.
std::vector<std::string> matched_layers(const LoraModel& content, const LoraModel& style);

GammaFactor compute_gamma(const LoraModel& content, const LoraModel& style, std::span<const std::string> matched,
                          bool apply_lora_alpha, const EngineOptions& options = {});

/// Style multiplier at a denoising step, with x = step / (T - 1) the completed fraction.
double scale_at(int step_index, const ScheduleParams& params);

double effective_style_score(const LayerImportance& importance, const GammaFactor& gamma, double scale);

Source select_layer(double s_content, double s_style_effective) noexcept;

SelectionSchedule build_schedule(const LoraModel& content, const LoraModel& style, const ScheduleParams& params,
                                 const EngineOptions& options = {});

/// Top-K comparison without gamma or the timestep scale.
SelectionSchedule build_topk_noscale_schedule(const LoraModel& content, const LoraModel& style,
                                              const ScheduleParams& params, const EngineOptions& options = {});

SelectionSchedule build_fixed_schedule(const ScheduleParams& params, std::span<const std::string> layers,
                                       FixedReading reading = FixedReading::EarlyContent);

SelectionSchedule build_random_schedule(const ScheduleParams& params, std::span<const std::string> layers,
                                        std::uint64_t seed, double p_content = 1.0 / 3.0);

/// Per step, ceil(fraction · L) layers are active (Content) and the rest Off.
SelectionSchedule build_subset_schedule(const ScheduleParams& params, std::span<const std::string> layers,
                                        double fraction, std::uint64_t seed);

std::size_t subset_size(double fraction, std::size_t layer_count);

std::vector<std::pair<std::size_t, SelectionSchedule>> k_sweep(const LoraModel& content, const LoraModel& style,
                                                               const ScheduleParams& params,
                                                               std::span<const std::size_t> k_values,
                                                               const EngineOptions& options = {});

/// Union of layer names for weight-free ablations: content order, then style-only layers.
std::vector<std::string> union_layers(const LoraModel& content, const LoraModel* style);

}  // namespace klora
