#include "klora/analysis.hpp"

#include <algorithm>
#include <cmath>

#include "klora/engine.hpp"

namespace klora {

double MagnitudeHistogram::bin_lower(std::size_t bin) noexcept {
    return std::pow(10.0, kLogLow + (kLogHigh - kLogLow) * static_cast<double>(bin) / kBins);
}

double MagnitudeHistogram::bin_upper(std::size_t bin) noexcept {
    return bin_lower(bin + 1);
}

std::size_t MagnitudeHistogram::bin_of(double magnitude) noexcept {
    const double pos = (std::log10(magnitude) - kLogLow) / (kLogHigh - kLogLow) * kBins;
    if (!(pos > 0.0)) return 0;
    return std::min<std::size_t>(kBins - 1, static_cast<std::size_t>(pos));
}

void MagnitudeHistogram::add(float value) noexcept {
    ++total;
    const double mag = std::fabs(static_cast<double>(value));
    if (mag == 0.0) {
        ++zeros;
        return;
    }
    ++counts[bin_of(mag)];
}

MagnitudeHistogram magnitude_histogram(const LoraModel& model, bool apply_lora_alpha) {
    MagnitudeHistogram h;
    for (const auto& layer : model.layers()) {
        const DenseMatrix delta = reconstruct_delta(layer, apply_lora_alpha);
        for (float v : delta.values()) h.add(v);
    }
    return h;
}

}  // namespace klora
