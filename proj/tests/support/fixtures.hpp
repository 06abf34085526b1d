#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "klora/engine.hpp"
#include "klora/safetensors.hpp"
#include "klora/tensor.hpp"

namespace klora::testing {

namespace fs = std::filesystem;

// Uniform in [lo, hi) from the top 53 bits, so fixtures are the same on every platform.
inline double uniform(std::mt19937_64& gen, double lo = -1.0, double hi = 1.0) {
    return lo + (hi - lo) * (static_cast<double>(gen() >> 11) * 0x1.0p-53);
}

inline std::size_t uniform_int(std::mt19937_64& gen, std::size_t lo, std::size_t hi) {
    return lo + static_cast<std::size_t>(gen() % (hi - lo + 1));
}

inline DenseMatrix random_matrix(std::mt19937_64& gen, std::size_t rows, std::size_t cols, double scale = 1.0) {
    std::vector<float> data(rows * cols);
    for (auto& v : data) v = static_cast<float>(scale * uniform(gen));
    return DenseMatrix(rows, cols, std::move(data));
}

// ---- oracles (independent of the library's kernels) ----

inline std::vector<double> naive_matmul(const DenseMatrix& b, const DenseMatrix& a) {
    std::vector<double> out(b.rows() * a.cols(), 0.0);
    for (std::size_t i = 0; i < b.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < b.cols(); ++k) s += static_cast<double>(b(i, k)) * a(k, j);
            out[i * a.cols() + j] = s;
        }
    }
    return out;
}

inline double sort_topk_oracle(const DenseMatrix& m, std::size_t k) {
    std::vector<double> mags;
    for (float v : m.values()) mags.push_back(std::fabs(static_cast<double>(v)));
    std::sort(mags.begin(), mags.end(), std::greater<>());
    double s = 0.0;
    for (std::size_t i = 0; i < std::min(k, mags.size()); ++i) s += mags[i];
    return s;
}

inline double loop_abs_sum_oracle(const DenseMatrix& m) {
    double s = 0.0;
    for (std::size_t r = 0; r < m.rows(); ++r) {
        for (std::size_t c = 0; c < m.cols(); ++c) s += std::fabs(static_cast<double>(m(r, c)));
    }
    return s;
}

// ---- synthetic LoRA models ----

struct LayerSpec {
    std::string name;
    std::size_t out = 32;
    std::size_t in = 32;
    std::size_t rank = 4;
    std::optional<float> alpha;
    double scale = 0.1;
};

inline LoraLayer random_layer(std::mt19937_64& gen, const LayerSpec& spec) {
    LoraLayer l;
    l.base_module = spec.name;
    l.down = random_matrix(gen, spec.rank, spec.in, spec.scale);
    l.up = random_matrix(gen, spec.out, spec.rank, spec.scale);
    l.rank = spec.rank;
    l.alpha = spec.alpha;
    return l;
}

inline LoraModel random_model(std::uint64_t seed, const std::vector<LayerSpec>& specs,
                              NamingConvention conv = NamingConvention::UpDown) {
    std::mt19937_64 gen(seed);
    std::vector<LoraLayer> layers;
    for (const auto& s : specs) layers.push_back(random_layer(gen, s));
    return LoraModel(std::move(layers), conv);
}

/// Multiplies every tensor, alpha scalars included, by c.
inline LoraModel scaled_model(const LoraModel& m, float c) {
    std::vector<LoraLayer> layers = m.layers();
    for (auto& l : layers) {
        for (auto& v : l.down.values()) v *= c;
        for (auto& v : l.up.values()) v *= c;
        if (l.alpha) *l.alpha *= c;
    }
    LoraModel out(std::move(layers), m.convention());
    out.metadata = m.metadata;
    return out;
}

inline LoraModel make_model(std::vector<LoraLayer> layers, NamingConvention conv = NamingConvention::UpDown) {
    return LoraModel(std::move(layers), conv);
}

inline LoraLayer layer_from(std::string name, DenseMatrix up, DenseMatrix down, std::optional<float> alpha = {}) {
    LoraLayer l;
    l.base_module = std::move(name);
    l.rank = down.rows();
    l.up = std::move(up);
    l.down = std::move(down);
    l.alpha = alpha;
    return l;
}

// ---- brute-force schedule oracle ----

/// Evaluates the selection rule cell by cell from scratch: delta via the naive product,
/// scores via full sorting, gamma via element loops. Shares no code path with the engine
/// beyond the LoraModel container.
inline std::vector<std::vector<char>> brute_force_grid(const LoraModel& content, const LoraModel& style,
                                                       const ScheduleParams& p) {
    auto delta = [&](const LoraLayer& l) {
        auto prod = naive_matmul(l.up, l.down);
        std::vector<float> out(prod.size());
        const double f = (p.apply_lora_alpha && l.alpha) ? static_cast<double>(*l.alpha) / l.rank : 1.0;
        for (std::size_t i = 0; i < prod.size(); ++i) {
            out[i] = static_cast<float>(static_cast<double>(static_cast<float>(prod[i])) * f);
        }
        return DenseMatrix(l.up.rows(), l.down.cols(), std::move(out));
    };
    double ct = 0.0;
    double st = 0.0;
    std::vector<std::pair<double, double>> scores;
    for (const auto& lc : content.layers()) {
        const auto* ls = style.find(lc.base_module);
        if (!ls) continue;
        const auto dc = delta(lc);
        const auto ds = delta(*ls);
        ct += loop_abs_sum_oracle(dc);
        st += loop_abs_sum_oracle(ds);
        std::size_t k = p.k_override ? *p.k_override : lc.rank * ls->rank;
        k = std::min(k, dc.size());
        scores.emplace_back(sort_topk_oracle(dc, k), sort_topk_oracle(ds, k));
    }
    const double gamma = ct / st;
    std::vector<std::vector<char>> grid;
    for (const auto& [sc, ss] : scores) {
        std::vector<char> row;
        for (int t = 0; t < p.total_steps; ++t) {
            const double x = static_cast<double>(t) / (p.total_steps - 1);
            double scale = 1.0;
            if (p.scale_mode == ScaleMode::Linear) scale = p.alpha * x + p.beta;
            if (p.scale_mode == ScaleMode::Modular) {
                scale = std::fmod(p.alpha_prime * x + p.beta_prime, p.alpha);
                if (scale == 0.0) scale = p.alpha;
            }
            row.push_back(sc >= ss * gamma * scale ? 'C' : 'S');
        }
        grid.push_back(std::move(row));
    }
    return grid;
}

inline std::vector<std::vector<char>> grid_chars(const SelectionSchedule& s) {
    std::vector<std::vector<char>> out;
    for (std::size_t l = 0; l < s.grid.layers(); ++l) {
        std::vector<char> row;
        for (auto src : s.grid.row(l)) row.push_back(source_symbol(src));
        out.push_back(std::move(row));
    }
    return out;
}

// ---- filesystem ----

class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::uint64_t counter = 0;
        path_ = fs::temp_directory_path() /
                ("klora_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(++counter));
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& name) const { return path_ / name; }

private:
    fs::path path_;
};

inline std::string read_text(const fs::path& p) {
    const auto bytes = read_file_bytes(p);
    return std::string(reinterpret_cast<const char*>(bytes.data()), bytes.size());
}

inline std::vector<std::byte> f32_bytes(std::initializer_list<float> values) {
    return encode_from_f32(std::vector<float>(values), DType::F32);
}

}  // namespace klora::testing
