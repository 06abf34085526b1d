#pragma once

#include <array>
#include <cstddef>
#include <cstdint>

#include "klora/safetensors.hpp"

namespace klora {

/// Fixed 64-bin log10 histogram of |delta| elements over [1e-8, 1e2). Values below the
/// range land in bin 0, values above in bin 63; exact zeros are counted separately.
struct MagnitudeHistogram {
    static constexpr std::size_t kBins = 64;
    static constexpr double kLogLow = -8.0;
    static constexpr double kLogHigh = 2.0;

    std::array<std::uint64_t, kBins> counts{};
    std::uint64_t zeros = 0;
    std::uint64_t total = 0;

    static double bin_lower(std::size_t bin) noexcept;
    static double bin_upper(std::size_t bin) noexcept;
    static std::size_t bin_of(double magnitude) noexcept;

    void add(float value) noexcept;
};

MagnitudeHistogram magnitude_histogram(const LoraModel& model, bool apply_lora_alpha);

}  // namespace klora
