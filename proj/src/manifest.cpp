#include "klora/manifest.hpp"

#include <fstream>
#include <sstream>

#include "canonical_json.hpp"
#include "klora/error.hpp"
#include "klora/safetensors.hpp"

namespace klora {

using nlohmann::json;

std::vector<Run> run_length_encode(std::span<const Source> row) {
    std::vector<Run> runs;
    for (Source s : row) {
        if (!runs.empty() && runs.back().first == s) {
            ++runs.back().second;
        } else {
            runs.emplace_back(s, 1);
        }
    }
    return runs;
}

std::vector<Source> run_length_decode(std::span<const Run> runs) {
    std::vector<Source> row;
    for (const auto& [s, n] : runs) row.insert(row.end(), n, s);
    return row;
}

std::optional<SwitchStep> switch_step_of(std::span<const Source> row) {
    std::size_t content = 0;
    while (content < row.size() && row[content] == Source::Content) ++content;
    for (std::size_t t = content; t < row.size(); ++t) {
        if (row[t] != Source::Style) return std::nullopt;
    }
    if (content == row.size()) return SwitchStep{SwitchKind::Never, 0};
    if (content == 0) return SwitchStep{SwitchKind::AlwaysStyle, 0};
    return SwitchStep{SwitchKind::AtStep, content};
}

namespace {

[[noreturn]] void bad_manifest(const std::string& what) {
    throw Error(ErrorKind::Format, "manifest: " + what);
}

json source_json(const std::optional<SourceFile>& src) {
    if (!src) return nullptr;
    return {{"path", src->path}, {"sha256", src->sha256}};
}

template <typename T>
json optional_json(const std::optional<T>& v) {
    return v ? json(*v) : json(nullptr);
}

json switch_json(std::span<const Source> row) {
    const auto sw = switch_step_of(row);
    if (!sw) return nullptr;
    switch (sw->kind) {
    case SwitchKind::Never: return "never";
    case SwitchKind::AlwaysStyle: return "always_style";
    case SwitchKind::AtStep: return sw->step;
    }
    return nullptr;
}

std::string solo_name(Source s) {
    return s == Source::Content ? "content" : "style";
}

const json& field(const json& obj, const char* key) {
    if (!obj.is_object()) bad_manifest(std::string("expected an object holding '") + key + "'");
    const auto it = obj.find(key);
    if (it == obj.end()) bad_manifest(std::string("missing field '") + key + "'");
    return *it;
}

template <typename T>
T get_as(const json& obj, const char* key) {
    try {
        return field(obj, key).get<T>();
    } catch (const json::exception&) {
        bad_manifest(std::string("field '") + key + "' has the wrong type");
    }
}

template <typename T>
std::optional<T> get_optional(const json& obj, const char* key) {
    const json& v = field(obj, key);
    if (v.is_null()) return std::nullopt;
    return get_as<T>(obj, key);
}

std::optional<SourceFile> read_source(const json& v) {
    if (v.is_null()) return std::nullopt;
    return SourceFile{get_as<std::string>(v, "path"), get_as<std::string>(v, "sha256")};
}

}  // namespace

std::string manifest_to_string(const SelectionSchedule& s) {
    const auto& p = s.params;
    json params = {
        {"total_steps", p.total_steps},
        {"alpha", p.alpha},
        {"beta", p.beta},
        {"scale_mode", to_string(p.scale_mode)},
        {"alpha_prime", p.alpha_prime},
        {"beta_prime", p.beta_prime},
        {"k_override", optional_json(p.k_override)},
        {"apply_lora_alpha", p.apply_lora_alpha},
    };
    json mode_params = {
        {"seed", optional_json(s.mode.seed)},
        {"p_content", optional_json(s.mode.p_content)},
        {"fraction", optional_json(s.mode.fraction)},
        {"fixed_reading",
         s.mode.fixed_reading ? json(std::string(to_string(*s.mode.fixed_reading))) : json(nullptr)},
    };

    json layers = json::array();
    json grid = json::array();
    for (std::size_t l = 0; l < s.layer_order.size(); ++l) {
        const std::string& name = s.layer_order[l];
        const auto row = s.grid.row(l);
        json entry = {{"base_module", name}, {"switch_step", switch_json(row)}, {"solo", nullptr},
                      {"s_content", nullptr}, {"s_style", nullptr}, {"k_used", nullptr},
                      {"rank_content", nullptr}, {"rank_style", nullptr}};
        if (const auto* imp = s.importance(name)) {
            entry["s_content"] = imp->s_content;
            entry["s_style"] = imp->s_style;
            entry["k_used"] = imp->k_used;
            entry["rank_content"] = imp->rank_content;
            entry["rank_style"] = imp->rank_style;
        }
        for (const auto& [solo, src] : s.solo_layers) {
            if (solo == name) entry["solo"] = solo_name(src);
        }
        layers.push_back(std::move(entry));

        json runs = json::array();
        for (const auto& [src, n] : run_length_encode(row)) {
            runs.push_back({std::string(1, source_symbol(src)), n});
        }
        grid.push_back(std::move(runs));
    }

    json doc = {
        {"format_version", kManifestFormatVersion},
        {"content_source", source_json(s.content_source)},
        {"style_source", source_json(s.style_source)},
        {"params", std::move(params)},
        {"mode", to_string(s.mode.kind)},
        {"mode_params", std::move(mode_params)},
        {"solo_policy", to_string(s.solo_policy)},
        {"gamma", s.gamma ? json{{"value", s.gamma->value},
                                 {"content_total", s.gamma->content_total},
                                 {"style_total", s.gamma->style_total}}
                          : json(nullptr)},
        {"layers", std::move(layers)},
        {"grid", std::move(grid)},
        {"run_config", s.run_config.empty() ? json(nullptr) : json::parse(s.run_config)},
    };
    return detail::canonical_dump(doc);
}

SelectionSchedule manifest_from_string(std::string_view text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::exception& e) {
        bad_manifest(std::string("truncated or malformed JSON: ") + e.what());
    }
    if (!doc.is_object()) bad_manifest("top level is not an object");
    const json& version = field(doc, "format_version");
    if (!version.is_string() || version.get<std::string>() != kManifestFormatVersion) {
        throw Error(ErrorKind::UnsupportedVersion,
                    "manifest format_version " + version.dump() + " is not supported (expected \"1\")");
    }

    SelectionSchedule s;
    try {
        const json& p = field(doc, "params");
        s.params.total_steps = get_as<int>(p, "total_steps");
        s.params.alpha = get_as<double>(p, "alpha");
        s.params.beta = get_as<double>(p, "beta");
        s.params.scale_mode = parse_scale_mode(get_as<std::string>(p, "scale_mode"));
        s.params.alpha_prime = get_as<double>(p, "alpha_prime");
        s.params.beta_prime = get_as<double>(p, "beta_prime");
        s.params.k_override = get_optional<std::size_t>(p, "k_override");
        s.params.apply_lora_alpha = get_as<bool>(p, "apply_lora_alpha");

        s.mode.kind = parse_selection_mode(get_as<std::string>(doc, "mode"));
        const json& mp = field(doc, "mode_params");
        s.mode.seed = get_optional<std::uint64_t>(mp, "seed");
        s.mode.p_content = get_optional<double>(mp, "p_content");
        s.mode.fraction = get_optional<double>(mp, "fraction");
        if (auto r = get_optional<std::string>(mp, "fixed_reading")) s.mode.fixed_reading = parse_fixed_reading(*r);
        s.solo_policy = parse_solo_policy(get_as<std::string>(doc, "solo_policy"));
    } catch (const Error& e) {
        if (e.kind() == ErrorKind::Argument) bad_manifest(e.what());
        throw;
    }

    s.content_source = read_source(field(doc, "content_source"));
    s.style_source = read_source(field(doc, "style_source"));
    if (const json& g = field(doc, "gamma"); !g.is_null()) {
        s.gamma = GammaFactor{get_as<double>(g, "value"), get_as<double>(g, "content_total"),
                              get_as<double>(g, "style_total")};
    }
    if (const json& rc = field(doc, "run_config"); !rc.is_null()) s.run_config = rc.dump();

    const json& layers = field(doc, "layers");
    const json& grid = field(doc, "grid");
    if (!layers.is_array() || !grid.is_array() || layers.size() != grid.size()) {
        bad_manifest("layers and grid must be arrays of equal length");
    }
    if (s.params.total_steps < 1) bad_manifest("total_steps must be positive");
    const auto steps = static_cast<std::size_t>(s.params.total_steps);
    s.grid = SelectionGrid(layers.size(), steps);
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const json& entry = layers[l];
        const auto name = get_as<std::string>(entry, "base_module");
        s.layer_order.push_back(name);

        std::vector<Run> runs;
        if (!grid[l].is_array()) bad_manifest("grid row for '" + name + "' is not an array");
        for (const auto& run : grid[l]) {
            if (!run.is_array() || run.size() != 2 || !run[0].is_string() || !run[1].is_number_unsigned() ||
                run[1].get<std::size_t>() == 0) {
                bad_manifest("grid row for '" + name + "' holds a malformed run");
            }
            try {
                runs.emplace_back(parse_source_symbol(run[0].get<std::string>()), run[1].get<std::size_t>());
            } catch (const Error&) {
                bad_manifest("grid row for '" + name + "' holds an unknown symbol");
            }
        }
        const auto row = run_length_decode(runs);
        if (row.size() != steps) {
            bad_manifest("grid row for '" + name + "' decodes to " + std::to_string(row.size()) +
                         " cells, expected " + std::to_string(steps));
        }
        for (std::size_t t = 0; t < steps; ++t) s.grid.set(l, t, row[t]);

        const json& sw = field(entry, "switch_step");
        if (!sw.is_null() && sw != switch_json(row)) {
            bad_manifest("switch_step for '" + name + "' disagrees with its grid row");
        }
        if (const json& solo = field(entry, "solo"); !solo.is_null()) {
            const auto which = solo.get<std::string>();
            if (which != "content" && which != "style") bad_manifest("unknown solo source '" + which + "'");
            s.solo_layers.emplace_back(name, which == "content" ? Source::Content : Source::Style);
        }
        if (!field(entry, "s_content").is_null()) {
            s.importances.push_back({name, get_as<double>(entry, "s_content"), get_as<double>(entry, "s_style"),
                                     get_as<std::size_t>(entry, "k_used"), get_as<std::size_t>(entry, "rank_content"),
                                     get_as<std::size_t>(entry, "rank_style")});
        }
    }
    return s;
}

void write_manifest(const SelectionSchedule& schedule, const std::filesystem::path& path) {
    write_file_atomic(path, manifest_to_string(schedule));
}

SelectionSchedule read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::Io, "cannot open manifest '" + path.string() + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return manifest_from_string(buf.str());
}

}  // namespace klora
