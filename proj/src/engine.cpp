#include "klora/engine.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <random>
#include <set>
#include <thread>

#include "klora/error.hpp"

namespace klora {

std::string_view to_string(ScaleMode mode) noexcept {
    switch (mode) {
    case ScaleMode::Linear: return "linear";
    case ScaleMode::Modular: return "modular";
    case ScaleMode::None: return "none";
    }
    return "?";
}

std::string_view to_string(SelectionMode mode) noexcept {
    switch (mode) {
    case SelectionMode::TopK: return "topk";
    case SelectionMode::Fixed: return "fixed";
    case SelectionMode::Random: return "random";
    case SelectionMode::Subset: return "subset";
    case SelectionMode::TopKNoScale: return "noscale";
    }
    return "?";
}

std::string_view to_string(FixedReading reading) noexcept {
    return reading == FixedReading::EarlyContent ? "early-content" : "literal";
}

std::string_view to_string(SoloPolicy policy) noexcept {
    return policy == SoloPolicy::SoloPass ? "solo-pass" : "drop";
}

char source_symbol(Source source) noexcept {
    switch (source) {
    case Source::Content: return 'C';
    case Source::Style: return 'S';
    case Source::Off: return 'N';
    }
    return '?';
}

namespace {

template <typename Enum, std::size_t N>
Enum parse_enum(std::string_view text, const std::pair<std::string_view, Enum> (&table)[N], std::string_view what) {
    for (const auto& [name, value] : table) {
        if (name == text) return value;
    }
    throw Error(ErrorKind::Argument, "unknown " + std::string(what) + " '" + std::string(text) + "'");
}

}  // namespace

ScaleMode parse_scale_mode(std::string_view text) {
    static constexpr std::pair<std::string_view, ScaleMode> table[] = {
        {"linear", ScaleMode::Linear}, {"modular", ScaleMode::Modular}, {"none", ScaleMode::None}};
    return parse_enum(text, table, "scale mode");
}

SelectionMode parse_selection_mode(std::string_view text) {
    static constexpr std::pair<std::string_view, SelectionMode> table[] = {
        {"topk", SelectionMode::TopK},       {"fixed", SelectionMode::Fixed},
        {"random", SelectionMode::Random},   {"subset", SelectionMode::Subset},
        {"noscale", SelectionMode::TopKNoScale}};
    return parse_enum(text, table, "selection mode");
}

FixedReading parse_fixed_reading(std::string_view text) {
    static constexpr std::pair<std::string_view, FixedReading> table[] = {
        {"early-content", FixedReading::EarlyContent}, {"literal", FixedReading::Literal}};
    return parse_enum(text, table, "fixed-selection reading");
}

SoloPolicy parse_solo_policy(std::string_view text) {
    static constexpr std::pair<std::string_view, SoloPolicy> table[] = {
        {"solo-pass", SoloPolicy::SoloPass}, {"drop", SoloPolicy::Drop}};
    return parse_enum(text, table, "solo policy");
}

Source parse_source_symbol(std::string_view text) {
    static constexpr std::pair<std::string_view, Source> table[] = {
        {"C", Source::Content}, {"S", Source::Style}, {"N", Source::Off}};
    return parse_enum(text, table, "grid symbol");
}

void ScheduleParams::validate() const {
    if (total_steps < 2) {
        throw Error(ErrorKind::Argument, "total_steps must be at least 2");
    }
    for (double v : {alpha, beta, alpha_prime, beta_prime}) {
        if (!std::isfinite(v)) throw Error(ErrorKind::Argument, "scale parameters must be finite");
    }
    if (scale_mode == ScaleMode::Linear) {
        if (!(alpha + beta > 0.0) || beta < 0.0) {
            throw Error(ErrorKind::Argument, "linear scale needs beta >= 0 and alpha + beta > 0");
        }
    }
    if (scale_mode == ScaleMode::Modular && !(alpha > 0.0)) {
        throw Error(ErrorKind::Argument, "modular scale needs alpha > 0");
    }
    if (k_override && *k_override == 0) {
        throw Error(ErrorKind::Argument, "k override must be at least 1");
    }
}

SelectionGrid::SelectionGrid(std::size_t layers, std::size_t steps, Source fill)
    : layers_(layers), steps_(steps), cells_(layers * steps, fill) {}

std::size_t SelectionGrid::count(Source s) const noexcept {
    return static_cast<std::size_t>(std::count(cells_.begin(), cells_.end(), s));
}

const LayerImportance* SelectionSchedule::importance(std::string_view base_module) const {
    for (const auto& imp : importances) {
        if (imp.base_module == base_module) return &imp;
    }
    return nullptr;
}

std::optional<std::size_t> SelectionSchedule::layer_index(std::string_view base_module) const {
    for (std::size_t i = 0; i < layer_order.size(); ++i) {
        if (layer_order[i] == base_module) return i;
    }
    return std::nullopt;
}

unsigned resolve_thread_count(unsigned requested) {
    unsigned n = requested ? requested : std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("KLORA_THREADS")) {
        char* end = nullptr;
        const long cap = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && cap > 0) {
            n = std::min<unsigned>(n, static_cast<unsigned>(cap));
        }
    }
    return n;
}

DenseMatrix reconstruct_delta(const LoraLayer& layer, bool apply_lora_alpha) {
    DenseMatrix delta = matmul(layer.up, layer.down, layer.base_module);
    if (apply_lora_alpha && layer.alpha) {
        const double factor = static_cast<double>(*layer.alpha) / static_cast<double>(layer.rank);
        for (float& v : delta.values()) {
            v = static_cast<float>(static_cast<double>(v) * factor);
        }
    }
    return delta;
}

std::size_t choose_k(std::size_t rank_content, std::size_t rank_style, std::size_t elements,
                     std::optional<std::size_t> k_override) {
    const std::size_t k = k_override ? *k_override : rank_content * rank_style;
    return std::max<std::size_t>(1, std::min(k, elements));
}

namespace {

void require_same_shape(const DenseMatrix& dc, const DenseMatrix& ds, const std::string& name) {
    if (dc.rows() != ds.rows() || dc.cols() != ds.cols()) {
        throw Error(ErrorKind::Pairing, "layer '" + name + "': content delta " + dc.shape_string() +
                                            " and style delta " + ds.shape_string() + " differ in shape");
    }
}

struct PairStats {
    double abs_content = 0.0;
    double abs_style = 0.0;
    std::vector<double> topk_content;
    std::vector<double> topk_style;
    std::vector<std::size_t> k_used;
    std::size_t rank_content = 0;
    std::size_t rank_style = 0;
};

/// Runs `job(i)` for i in [0, n) on up to `threads` workers. The first failure by index
/// is rethrown after all workers finish.
template <typename Job>
void parallel_for(std::size_t n, unsigned threads, Job&& job) {
    std::vector<std::exception_ptr> failures(n);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
            try {
                job(i);
            } catch (...) {
                failures[i] = std::current_exception();
            }
        }
    };
    const unsigned workers = static_cast<unsigned>(std::min<std::size_t>(std::max(1u, threads), n));
    if (workers <= 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        pool.reserve(workers);
        for (unsigned w = 0; w < workers; ++w) pool.emplace_back(worker);
    }
    for (auto& f : failures) {
        if (f) std::rethrow_exception(f);
    }
}

std::vector<PairStats> score_pairs(const LoraModel& content, const LoraModel& style,
                                   std::span<const std::string> matched, bool apply_lora_alpha,
                                   std::span<const std::optional<std::size_t>> k_choices, unsigned threads) {
    std::vector<PairStats> stats(matched.size());
    parallel_for(matched.size(), resolve_thread_count(threads), [&](std::size_t i) {
        const LoraLayer* lc = content.find(matched[i]);
        const LoraLayer* ls = style.find(matched[i]);
        if (!lc || !ls) {
            throw Error(ErrorKind::Pairing, "layer '" + matched[i] + "' is missing from one of the models");
        }
        const DenseMatrix dc = reconstruct_delta(*lc, apply_lora_alpha);
        const DenseMatrix ds = reconstruct_delta(*ls, apply_lora_alpha);
        require_same_shape(dc, ds, matched[i]);
        PairStats& s = stats[i];
        s.rank_content = lc->rank;
        s.rank_style = ls->rank;
        s.abs_content = abs_sum(dc);
        s.abs_style = abs_sum(ds);
        for (const auto& choice : k_choices) {
            const std::size_t k = choose_k(lc->rank, ls->rank, dc.size(), choice);
            s.k_used.push_back(k);
            s.topk_content.push_back(topk_abs_sum(dc, k));
            s.topk_style.push_back(topk_abs_sum(ds, k));
        }
    });
    return stats;
}

GammaFactor gamma_from_stats(const std::vector<PairStats>& stats) {
    GammaFactor g;
    for (const auto& s : stats) {
        g.content_total += s.abs_content;
        g.style_total += s.abs_style;
    }
    if (!(g.style_total > 0.0)) {
        throw Error(ErrorKind::Degenerate, "style model has zero total magnitude over the matched layers");
    }
    g.value = g.content_total / g.style_total;
    return g;
}

std::string key_listing(const LoraModel& model) {
    std::string out;
    std::size_t shown = 0;
    for (const auto& l : model.layers()) {
        if (shown == 8) {
            out += ", ... (" + std::to_string(model.size()) + " total)";
            break;
        }
        out += (shown ? ", " : "") + l.base_module;
        ++shown;
    }
    return out.empty() ? "<none>" : out;
}

std::vector<std::string> require_matched(const LoraModel& content, const LoraModel& style) {
    auto matched = matched_layers(content, style);
    if (matched.empty()) {
        throw Error(ErrorKind::Pairing, "no layers in common; content has {" + key_listing(content) +
                                            "}, style has {" + key_listing(style) + "}");
    }
    return matched;
}

/// Lays out rows for matched and solo layers and fills matched rows via `decide(imp, step)`.
template <typename Decide>
SelectionSchedule assemble(const LoraModel& content, const LoraModel& style, const ScheduleParams& params,
                           const EngineOptions& options, std::vector<LayerImportance> importances,
                           const GammaFactor& gamma, SelectionMode kind, Decide&& decide) {
    SelectionSchedule sched;
    sched.params = params;
    sched.gamma = gamma;
    sched.mode.kind = kind;
    sched.solo_policy = options.solo_policy;
    if (!content.source_path.empty() || !content.sha256.empty()) {
        sched.content_source = SourceFile{content.source_path, content.sha256};
    }
    if (!style.source_path.empty() || !style.sha256.empty()) {
        sched.style_source = SourceFile{style.source_path, style.sha256};
    }

    struct Row {
        const LayerImportance* imp;
        Source solo;
    };
    std::vector<Row> rows;
    std::size_t next_imp = 0;
    for (const auto& layer : content.layers()) {
        if (style.find(layer.base_module)) {
            rows.push_back({&importances[next_imp++], Source::Content});
            sched.layer_order.push_back(layer.base_module);
        } else if (options.solo_policy == SoloPolicy::SoloPass) {
            rows.push_back({nullptr, Source::Content});
            sched.layer_order.push_back(layer.base_module);
            sched.solo_layers.emplace_back(layer.base_module, Source::Content);
        }
    }
    if (options.solo_policy == SoloPolicy::SoloPass) {
        for (const auto& layer : style.layers()) {
            if (!content.find(layer.base_module)) {
                rows.push_back({nullptr, Source::Style});
                sched.layer_order.push_back(layer.base_module);
                sched.solo_layers.emplace_back(layer.base_module, Source::Style);
            }
        }
    }

    const auto steps = static_cast<std::size_t>(params.total_steps);
    sched.grid = SelectionGrid(rows.size(), steps);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        for (std::size_t t = 0; t < steps; ++t) {
            sched.grid.set(r, t, rows[r].imp ? decide(*rows[r].imp, t) : rows[r].solo);
        }
    }
    sched.importances = std::move(importances);
    return sched;
}

std::vector<LayerImportance> importances_from(std::span<const std::string> matched,
                                              const std::vector<PairStats>& stats, std::size_t k_index) {
    std::vector<LayerImportance> out;
    out.reserve(matched.size());
    for (std::size_t i = 0; i < matched.size(); ++i) {
        const auto& s = stats[i];
        out.push_back({matched[i], s.topk_content[k_index], s.topk_style[k_index], s.k_used[k_index],
                       s.rank_content, s.rank_style});
    }
    return out;
}

SelectionSchedule topk_schedule(const LoraModel& content, const LoraModel& style, const ScheduleParams& params,
                                const EngineOptions& options, std::span<const std::string> matched,
                                const std::vector<PairStats>& stats, std::size_t k_index, const GammaFactor& gamma) {
    std::vector<double> scales(static_cast<std::size_t>(params.total_steps));
    for (std::size_t t = 0; t < scales.size(); ++t) scales[t] = scale_at(static_cast<int>(t), params);
    return assemble(content, style, params, options, importances_from(matched, stats, k_index), gamma,
                    SelectionMode::TopK, [&](const LayerImportance& imp, std::size_t t) {
                        return select_layer(imp.s_content, effective_style_score(imp, gamma, scales[t]));
                    });
}

}  // namespace

LayerImportance layer_importance(const LoraLayer& content, const LoraLayer& style, const ScheduleParams& params) {
    const DenseMatrix dc = reconstruct_delta(content, params.apply_lora_alpha);
    const DenseMatrix ds = reconstruct_delta(style, params.apply_lora_alpha);
    require_same_shape(dc, ds, content.base_module);
    const std::size_t k = choose_k(content.rank, style.rank, dc.size(), params.k_override);
    return {content.base_module, topk_abs_sum(dc, k), topk_abs_sum(ds, k), k, content.rank, style.rank};
}

std::vector<std::string> matched_layers(const LoraModel& content, const LoraModel& style) {
    std::vector<std::string> out;
    for (const auto& layer : content.layers()) {
        if (style.find(layer.base_module)) out.push_back(layer.base_module);
    }
    return out;
}

GammaFactor compute_gamma(const LoraModel& content, const LoraModel& style, std::span<const std::string> matched,
                          bool apply_lora_alpha, const EngineOptions& options) {
    if (matched.empty()) {
        throw Error(ErrorKind::Pairing, "compute_gamma needs at least one matched layer");
    }
    return gamma_from_stats(score_pairs(content, style, matched, apply_lora_alpha, {}, options.threads));
}

double scale_at(int step_index, const ScheduleParams& params) {
    if (params.total_steps < 2 || step_index < 0 || step_index >= params.total_steps) {
        throw Error(ErrorKind::Argument, "step " + std::to_string(step_index) + " outside [0, " +
                                             std::to_string(params.total_steps - 1) + "]");
    }
    const double x = static_cast<double>(step_index) / static_cast<double>(params.total_steps - 1);
    switch (params.scale_mode) {
    case ScaleMode::Linear:
        return params.alpha * x + params.beta;
    case ScaleMode::Modular: {
        const double s = std::fmod(params.alpha_prime * x + params.beta_prime, params.alpha);
        return s == 0.0 ? params.alpha : s;
    }
    case ScaleMode::None:
        return 1.0;
    }
    return 1.0;
}

double effective_style_score(const LayerImportance& importance, const GammaFactor& gamma, double scale) {
    if (!std::isfinite(scale) || scale < 0.0) {
        throw Error(ErrorKind::Argument, "style scale must be finite and non-negative");
    }
    return importance.s_style * gamma.value * scale;
}

Source select_layer(double s_content, double s_style_effective) noexcept {
    return s_content >= s_style_effective ? Source::Content : Source::Style;
}

SelectionSchedule build_schedule(const LoraModel& content, const LoraModel& style, const ScheduleParams& params,
                                 const EngineOptions& options) {
    params.validate();
    const auto matched = require_matched(content, style);
    const std::optional<std::size_t> choice[] = {params.k_override};
    const auto stats = score_pairs(content, style, matched, params.apply_lora_alpha, choice, options.threads);
    return topk_schedule(content, style, params, options, matched, stats, 0, gamma_from_stats(stats));
}

SelectionSchedule build_topk_noscale_schedule(const LoraModel& content, const LoraModel& style,
                                              const ScheduleParams& params, const EngineOptions& options) {
    params.validate();
    const auto matched = require_matched(content, style);
    const std::optional<std::size_t> choice[] = {params.k_override};
    const auto stats = score_pairs(content, style, matched, params.apply_lora_alpha, choice, options.threads);
    // gamma is recorded for reference but not applied.
    return assemble(content, style, params, options, importances_from(matched, stats, 0), gamma_from_stats(stats),
                    SelectionMode::TopKNoScale, [](const LayerImportance& imp, std::size_t) {
                        return select_layer(imp.s_content, imp.s_style);
                    });
}

namespace {

SelectionSchedule weightless_schedule(const ScheduleParams& params, std::span<const std::string> layers,
                                      SelectionMode kind) {
    params.validate();
    SelectionSchedule sched;
    sched.params = params;
    sched.mode.kind = kind;
    sched.layer_order.assign(layers.begin(), layers.end());
    sched.grid = SelectionGrid(layers.size(), static_cast<std::size_t>(params.total_steps));
    return sched;
}

/// Uniform double in [0, 1) from the top 53 bits; identical on every platform.
double unit_draw(std::mt19937_64& gen) {
    return static_cast<double>(gen() >> 11) * 0x1.0p-53;
}

}  // namespace

SelectionSchedule build_fixed_schedule(const ScheduleParams& params, std::span<const std::string> layers,
                                       FixedReading reading) {
    if (params.scale_mode != ScaleMode::Linear) {
        throw Error(ErrorKind::Argument, "fixed selection requires the linear scale");
    }
    auto sched = weightless_schedule(params, layers, SelectionMode::Fixed);
    sched.mode.fixed_reading = reading;
    for (std::size_t t = 0; t < sched.grid.steps(); ++t) {
        const bool above_one = scale_at(static_cast<int>(t), params) > 1.0;
        const bool content = reading == FixedReading::EarlyContent ? !above_one : above_one;
        for (std::size_t l = 0; l < layers.size(); ++l) {
            sched.grid.set(l, t, content ? Source::Content : Source::Style);
        }
    }
    return sched;
}

SelectionSchedule build_random_schedule(const ScheduleParams& params, std::span<const std::string> layers,
                                        std::uint64_t seed, double p_content) {
    if (!(p_content >= 0.0 && p_content <= 1.0)) {
        throw Error(ErrorKind::Argument, "p_content must lie in [0, 1]");
    }
    auto sched = weightless_schedule(params, layers, SelectionMode::Random);
    sched.mode.seed = seed;
    sched.mode.p_content = p_content;
    std::mt19937_64 gen(seed);
    for (std::size_t l = 0; l < sched.grid.layers(); ++l) {
        for (std::size_t t = 0; t < sched.grid.steps(); ++t) {
            sched.grid.set(l, t, unit_draw(gen) < p_content ? Source::Content : Source::Style);
        }
    }
    return sched;
}

std::size_t subset_size(double fraction, std::size_t layer_count) {
    // 1e-9 slack: 0.3 * 10 evaluates to 3.0000000000000004 and must give 3.
    const double exact = fraction * static_cast<double>(layer_count);
    const auto n = static_cast<std::size_t>(std::max(0.0, std::ceil(exact - 1e-9)));
    return std::min(n, layer_count);
}

SelectionSchedule build_subset_schedule(const ScheduleParams& params, std::span<const std::string> layers,
                                        double fraction, std::uint64_t seed) {
    if (!(fraction >= 0.0 && fraction <= 1.0)) {
        throw Error(ErrorKind::Argument, "fraction must lie in [0, 1]");
    }
    auto sched = weightless_schedule(params, layers, SelectionMode::Subset);
    sched.mode.seed = seed;
    sched.mode.fraction = fraction;
    const std::size_t total = layers.size();
    const std::size_t active = subset_size(fraction, total);
    std::mt19937_64 gen(seed);
    std::vector<std::size_t> perm(total);
    for (std::size_t t = 0; t < sched.grid.steps(); ++t) {
        for (std::size_t i = 0; i < total; ++i) perm[i] = i;
        for (std::size_t i = 0; i < active; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(gen() % (total - i));
            std::swap(perm[i], perm[j]);
        }
        for (std::size_t l = 0; l < total; ++l) sched.grid.set(l, t, Source::Off);
        for (std::size_t i = 0; i < active; ++i) sched.grid.set(perm[i], t, Source::Content);
    }
    return sched;
}

std::vector<std::pair<std::size_t, SelectionSchedule>> k_sweep(const LoraModel& content, const LoraModel& style,
                                                               const ScheduleParams& params,
                                                               std::span<const std::size_t> k_values,
                                                               const EngineOptions& options) {
    if (k_values.empty()) {
        throw Error(ErrorKind::Argument, "k sweep needs at least one k value");
    }
    params.validate();
    std::vector<std::optional<std::size_t>> choices;
    for (std::size_t k : k_values) {
        if (k == 0) throw Error(ErrorKind::Argument, "k values must be positive");
        choices.emplace_back(k);
    }
    const auto matched = require_matched(content, style);
    const auto stats = score_pairs(content, style, matched, params.apply_lora_alpha, choices, options.threads);
    const GammaFactor gamma = gamma_from_stats(stats);
    std::vector<std::pair<std::size_t, SelectionSchedule>> out;
    for (std::size_t i = 0; i < k_values.size(); ++i) {
        ScheduleParams p = params;
        p.k_override = k_values[i];
        out.emplace_back(k_values[i], topk_schedule(content, style, p, options, matched, stats, i, gamma));
    }
    return out;
}

std::vector<std::string> union_layers(const LoraModel& content, const LoraModel* style) {
    std::vector<std::string> out;
    for (const auto& l : content.layers()) out.push_back(l.base_module);
    if (style) {
        for (const auto& l : style->layers()) {
            if (!content.find(l.base_module)) out.push_back(l.base_module);
        }
    }
    return out;
}

}  // namespace klora
