#include "klora/cli.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <memory>
#include <ostream>

#include "CLI11.hpp"
#include "canonical_json.hpp"
#include "klora/analysis.hpp"
#include "klora/digest.hpp"
#include "klora/engine.hpp"
#include "klora/error.hpp"
#include "klora/export.hpp"
#include "klora/manifest.hpp"
#include "klora/safetensors.hpp"

namespace klora::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct CliConfig {
    std::string subcommand;
    std::string content_path;
    std::string style_path;
    int steps = 50;
    double alpha = 1.5;
    double beta = 0.5;
    double alpha_prime = 1.5;
    double beta_prime = 1.3;
    std::string scale_mode = "linear";
    std::string selection_mode = "topk";
    std::optional<std::size_t> k_override;
    std::optional<std::uint64_t> seed;
    double p_content = 1.0 / 3.0;
    std::optional<double> fraction;
    std::vector<std::size_t> k_values;
    std::string fixed_reading = "early-content";
    std::string solo_policy = "solo-pass";
    bool no_lora_alpha = false;
    bool json_report = false;

    std::string output;
    std::string manifest;
    std::string out_dir;
    std::optional<std::size_t> step;
    bool boundaries_only = false;
    std::string heatmap;
    std::string heatmap_format;
    std::size_t cell_size = 4;

    ScheduleParams params() const {
        for (double v : {alpha, beta, alpha_prime, beta_prime, p_content}) {
            if (!std::isfinite(v)) throw Error(ErrorKind::Argument, "numeric flags must be finite");
        }
        ScheduleParams p;
        p.total_steps = steps;
        p.alpha = alpha;
        p.beta = beta;
        p.alpha_prime = alpha_prime;
        p.beta_prime = beta_prime;
        p.scale_mode = parse_scale_mode(scale_mode);
        p.k_override = k_override;
        p.apply_lora_alpha = !no_lora_alpha;
        p.validate();
        return p;
    }

    EngineOptions engine() const { return {parse_solo_policy(solo_policy), 0}; }

    /// The inputs and parameters that determine the result; output locations are excluded.
    std::string echo() const {
        json j = {
            {"subcommand", subcommand},
            {"content", content_path},
            {"style", style_path.empty() ? json(nullptr) : json(style_path)},
            {"steps", steps},
            {"alpha", alpha},
            {"beta", beta},
            {"alpha_prime", alpha_prime},
            {"beta_prime", beta_prime},
            {"scale_mode", scale_mode},
            {"selection_mode", selection_mode},
            {"k_override", k_override ? json(*k_override) : json(nullptr)},
            {"seed", seed ? json(*seed) : json(nullptr)},
            {"p_content", p_content},
            {"fraction", fraction ? json(*fraction) : json(nullptr)},
            {"k_values", k_values},
            {"fixed_reading", fixed_reading},
            {"solo_policy", solo_policy},
            {"apply_lora_alpha", !no_lora_alpha},
        };
        return j.dump();
    }
};

void add_weight_flags(CLI::App* cmd, CliConfig& c, bool style_required) {
    cmd->add_option("--content", c.content_path, "Content LoRA (.safetensors)")->required();
    auto* style = cmd->add_option("--style", c.style_path, "Style LoRA (.safetensors)");
    if (style_required) style->required();
    cmd->add_option("--steps", c.steps, "Number of denoising steps")->capture_default_str();
    cmd->add_option("--alpha", c.alpha, "Scale slope alpha")->capture_default_str();
    cmd->add_option("--beta", c.beta, "Scale offset beta")->capture_default_str();
    cmd->add_option("--alpha-prime", c.alpha_prime, "Modular scale slope")->capture_default_str();
    cmd->add_option("--beta-prime", c.beta_prime, "Modular scale offset")->capture_default_str();
    cmd->add_option("--scale-mode", c.scale_mode, "linear | modular | none")
        ->check(CLI::IsMember({"linear", "modular", "none"}))
        ->capture_default_str();
    cmd->add_option("--k", c.k_override, "Override K for every layer")->check(CLI::PositiveNumber);
    cmd->add_flag("--no-lora-alpha", c.no_lora_alpha, "Do not apply alpha/rank before scoring");
    cmd->add_option("--solo-policy", c.solo_policy, "Layers present in one model: solo-pass | drop")
        ->check(CLI::IsMember({"solo-pass", "drop"}))
        ->capture_default_str();
    cmd->add_flag("--json", c.json_report, "Machine-readable report on stdout");
}

void add_heatmap_flags(CLI::App* cmd, CliConfig& c) {
    cmd->add_option("--heatmap", c.heatmap, "Also render the schedule to this path");
    cmd->add_option("--heatmap-format", c.heatmap_format, "svg | ppm (default: from extension)")
        ->check(CLI::IsMember({"svg", "ppm"}));
    cmd->add_option("--cell-size", c.cell_size, "Heatmap cell size in pixels")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
}

HeatmapFormat heatmap_format_for(const std::string& path, const std::string& explicit_format) {
    if (!explicit_format.empty()) return parse_heatmap_format(explicit_format);
    return fs::path(path).extension() == ".ppm" ? HeatmapFormat::Ppm : HeatmapFormat::Svg;
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

json schedule_summary(const SelectionSchedule& s) {
    json layers = json::array();
    for (std::size_t l = 0; l < s.layer_order.size(); ++l) {
        const auto sw = switch_step_of(s.grid.row(l));
        json sw_json = nullptr;
        if (sw) {
            sw_json = sw->kind == SwitchKind::Never         ? json("never")
                      : sw->kind == SwitchKind::AlwaysStyle ? json("always_style")
                                                            : json(sw->step);
        }
        layers.push_back({{"base_module", s.layer_order[l]}, {"switch_step", sw_json}});
    }
    return {{"layers", s.layer_order.size()},
            {"steps", s.grid.steps()},
            {"content_cells", s.grid.count(Source::Content)},
            {"style_cells", s.grid.count(Source::Style)},
            {"off_cells", s.grid.count(Source::Off)},
            {"switches", std::move(layers)}};
}

void print_schedule_summary(const SelectionSchedule& s, std::ostream& out) {
    out << "layers " << s.layer_order.size() << " steps " << s.grid.steps() << " content_cells "
        << s.grid.count(Source::Content) << " style_cells " << s.grid.count(Source::Style);
    if (const auto off = s.grid.count(Source::Off)) out << " off_cells " << off;
    out << "\n";
    if (s.gamma) out << "gamma " << fmt(s.gamma->value) << "\n";
}

void warn_all(const LoraModel& m, std::ostream& err) {
    for (const auto& w : m.warnings) err << "warning: " << m.source_path << ": " << w << "\n";
}

void emit_outputs(const SelectionSchedule& sched, const CliConfig& c, std::ostream& out) {
    write_manifest(sched, c.output);
    if (!c.json_report) out << "wrote manifest " << c.output << "\n";
    if (!c.heatmap.empty()) {
        render_heatmap(sched, c.heatmap, heatmap_format_for(c.heatmap, c.heatmap_format), c.cell_size);
        if (!c.json_report) out << "wrote heatmap " << c.heatmap << "\n";
    }
}

int cmd_analyze(const CliConfig& c, std::ostream& out, std::ostream& err) {
    const auto params = c.params();
    const LoraModel content = parse_file(c.content_path);
    const LoraModel style = parse_file(c.style_path);
    warn_all(content, err);
    warn_all(style, err);
    const auto sched = build_schedule(content, style, params, c.engine());
    const auto hc = magnitude_histogram(content, params.apply_lora_alpha);
    const auto hs = magnitude_histogram(style, params.apply_lora_alpha);
    const GammaFactor& g = *sched.gamma;

    if (c.json_report) {
        json layers = json::array();
        for (const auto& imp : sched.importances) {
            layers.push_back({{"base_module", imp.base_module},
                              {"rank_content", imp.rank_content},
                              {"rank_style", imp.rank_style},
                              {"k", imp.k_used},
                              {"s_content", imp.s_content},
                              {"s_style", imp.s_style},
                              {"s_style_gamma", imp.s_style * g.value}});
        }
        auto hist_json = [](const MagnitudeHistogram& h) {
            return json{{"log10_low", MagnitudeHistogram::kLogLow},
                        {"log10_high", MagnitudeHistogram::kLogHigh},
                        {"zeros", h.zeros},
                        {"total", h.total},
                        {"counts", h.counts}};
        };
        json solo = json::array();
        for (const auto& [name, src] : sched.solo_layers) {
            solo.push_back({{"base_module", name}, {"source", src == Source::Content ? "content" : "style"}});
        }
        json report = {{"content", {{"path", c.content_path}, {"sha256", content.sha256}, {"layers", content.size()}}},
                       {"style", {{"path", c.style_path}, {"sha256", style.sha256}, {"layers", style.size()}}},
                       {"gamma", {{"value", g.value}, {"content_total", g.content_total}, {"style_total", g.style_total}}},
                       {"layers", std::move(layers)},
                       {"solo_layers", std::move(solo)},
                       {"histograms", {{"content", hist_json(hc)}, {"style", hist_json(hs)}}}};
        out << detail::canonical_dump(report);
        return 0;
    }

    out << "content " << c.content_path << " layers " << content.size() << " convention "
        << convention_name(content.convention()) << " sha256 " << content.sha256 << "\n";
    out << "style " << c.style_path << " layers " << style.size() << " convention "
        << convention_name(style.convention()) << " sha256 " << style.sha256 << "\n";
    out << "gamma " << fmt(g.value) << " content_total " << fmt(g.content_total) << " style_total "
        << fmt(g.style_total) << "\n";
    for (const auto& imp : sched.importances) {
        out << "layer " << imp.base_module << " rank_c " << imp.rank_content << " rank_s " << imp.rank_style << " k "
            << imp.k_used << " s_content " << fmt(imp.s_content) << " s_style " << fmt(imp.s_style)
            << " s_style_gamma " << fmt(imp.s_style * g.value) << "\n";
    }
    for (const auto& [name, src] : sched.solo_layers) {
        out << "solo " << name << " " << (src == Source::Content ? "content" : "style") << "\n";
    }
    auto print_hist = [&](const char* which, const MagnitudeHistogram& h) {
        out << "histogram " << which << " total " << h.total << " zeros " << h.zeros << "\n";
        for (std::size_t b = 0; b < MagnitudeHistogram::kBins; ++b) {
            out << "bin " << which << " " << b << " " << fmt(MagnitudeHistogram::bin_lower(b)) << " "
                << fmt(MagnitudeHistogram::bin_upper(b)) << " " << h.counts[b] << "\n";
        }
    };
    print_hist("content", hc);
    print_hist("style", hs);
    return 0;
}

int cmd_schedule(const CliConfig& c, std::ostream& out, std::ostream& err) {
    const auto params = c.params();
    const LoraModel content = parse_file(c.content_path);
    const LoraModel style = parse_file(c.style_path);
    warn_all(content, err);
    warn_all(style, err);
    auto sched = build_schedule(content, style, params, c.engine());
    sched.run_config = c.echo();
    emit_outputs(sched, c, out);
    if (c.json_report) {
        out << detail::canonical_dump(schedule_summary(sched));
    } else {
        print_schedule_summary(sched, out);
    }
    return 0;
}

void attach_sources(SelectionSchedule& s, const LoraModel& content, const LoraModel* style) {
    s.content_source = SourceFile{content.source_path, content.sha256};
    if (style) s.style_source = SourceFile{style->source_path, style->sha256};
}

int cmd_ablate(const CliConfig& c, std::ostream& out, std::ostream& err) {
    const auto params = c.params();
    const SelectionMode mode = parse_selection_mode(c.selection_mode);
    const LoraModel content = parse_file(c.content_path);
    warn_all(content, err);
    std::unique_ptr<LoraModel> style;
    if (!c.style_path.empty()) {
        style = std::make_unique<LoraModel>(parse_file(c.style_path));
        warn_all(*style, err);
    } else if (mode != SelectionMode::Subset) {
        throw Error(ErrorKind::Argument, "--style is required for ablation mode " + c.selection_mode);
    }
    const EngineOptions opts = c.engine();
    const std::uint64_t seed = c.seed.value_or(0);

    std::vector<std::pair<std::string, SelectionSchedule>> results;
    switch (mode) {
    case SelectionMode::TopK:
        results.emplace_back(c.output, build_schedule(content, *style, params, opts));
        break;
    case SelectionMode::TopKNoScale:
        results.emplace_back(c.output, build_topk_noscale_schedule(content, *style, params, opts));
        break;
    case SelectionMode::Fixed: {
        auto s = build_fixed_schedule(params, matched_layers(content, *style), parse_fixed_reading(c.fixed_reading));
        attach_sources(s, content, style.get());
        results.emplace_back(c.output, std::move(s));
        break;
    }
    case SelectionMode::Random: {
        auto s = build_random_schedule(params, matched_layers(content, *style), seed, c.p_content);
        attach_sources(s, content, style.get());
        results.emplace_back(c.output, std::move(s));
        break;
    }
    case SelectionMode::Subset: {
        if (!c.fraction) throw Error(ErrorKind::Argument, "--fraction is required for subset mode");
        auto s = build_subset_schedule(params, union_layers(content, nullptr), *c.fraction, seed);
        attach_sources(s, content, nullptr);
        results.emplace_back(c.output, std::move(s));
        break;
    }
    }
    if (results.empty()) throw Error(ErrorKind::State, "no schedule produced");

    json report = json::array();
    for (auto& [path, sched] : results) {
        sched.run_config = c.echo();
        CliConfig per = c;
        per.output = path;
        emit_outputs(sched, per, out);
        if (c.json_report) {
            auto summary = schedule_summary(sched);
            summary["mode"] = to_string(sched.mode.kind);
            report.push_back(std::move(summary));
        } else {
            out << "mode " << to_string(sched.mode.kind) << "\n";
            print_schedule_summary(sched, out);
        }
    }
    if (c.json_report) out << detail::canonical_dump(report);
    return 0;
}

std::string sweep_path(const std::string& output, std::size_t k) {
    fs::path p(output);
    const std::string ext = p.has_extension() ? p.extension().string() : ".json";
    p.replace_extension();
    return p.string() + ".k" + std::to_string(k) + ext;
}

int cmd_ksweep(const CliConfig& c, std::ostream& out, std::ostream& err) {
    if (c.k_values.empty()) throw Error(ErrorKind::Argument, "--k-values is required for ksweep mode");
    const auto params = c.params();
    const LoraModel content = parse_file(c.content_path);
    const LoraModel style = parse_file(c.style_path);
    warn_all(content, err);
    warn_all(style, err);
    auto sweep = k_sweep(content, style, params, c.k_values, c.engine());
    json report = json::array();
    for (auto& [k, sched] : sweep) {
        sched.run_config = c.echo();
        CliConfig per = c;
        per.output = sweep_path(c.output, k);
        per.heatmap = c.heatmap.empty() ? "" : sweep_path(c.heatmap, k);
        emit_outputs(sched, per, out);
        if (c.json_report) {
            report.push_back({{"k", k},
                              {"manifest", per.output},
                              {"content_cells", sched.grid.count(Source::Content)},
                              {"style_cells", sched.grid.count(Source::Style)}});
        } else {
            out << "k " << k << " content_cells " << sched.grid.count(Source::Content) << " style_cells "
                << sched.grid.count(Source::Style) << "\n";
        }
    }
    if (c.json_report) out << detail::canonical_dump(report);
    return 0;
}

LoraModel load_checked(const std::string& flag_path, const std::optional<SourceFile>& recorded, const char* which) {
    std::string path = flag_path;
    if (path.empty()) {
        if (!recorded) return LoraModel{};
        path = recorded->path;
    }
    LoraModel m = parse_file(path);
    if (recorded && !recorded->sha256.empty() && recorded->sha256 != m.sha256) {
        throw Error(ErrorKind::Argument, std::string(which) + " file '" + path +
                                             "' does not match the manifest digest (expected " + recorded->sha256 +
                                             ", got " + m.sha256 + ")");
    }
    return m;
}

int cmd_merge(const CliConfig& c, std::ostream& out, std::ostream& err) {
    const SelectionSchedule sched = read_manifest(c.manifest);
    const LoraModel content = load_checked(c.content_path, sched.content_source, "content");
    const LoraModel style = load_checked(c.style_path, sched.style_source, "style");
    warn_all(content, err);
    warn_all(style, err);

    std::vector<std::size_t> steps;
    if (c.step) {
        steps.push_back(*c.step);
    } else if (c.boundaries_only) {
        steps = boundary_steps(sched);
    } else {
        for (std::size_t t = 0; t < sched.grid.steps(); ++t) steps.push_back(t);
    }
    std::error_code ec;
    fs::create_directories(c.out_dir, ec);
    if (ec) throw Error(ErrorKind::Io, "cannot create output directory '" + c.out_dir + "'");
    for (std::size_t t : steps) {
        char name[64];
        std::snprintf(name, sizeof name, "step_%03zu.safetensors", t);
        const fs::path path = fs::path(c.out_dir) / name;
        export_merged_lora(content, style, sched, t, path);
        out << "wrote " << path.string() << "\n";
    }
    return 0;
}

int cmd_heatmap(const CliConfig& c, std::ostream& out) {
    const SelectionSchedule sched = read_manifest(c.manifest);
    render_heatmap(sched, c.output, heatmap_format_for(c.output, c.heatmap_format), c.cell_size);
    out << "wrote heatmap " << c.output << " (" << sched.grid.layers() << " layers x " << sched.grid.steps()
        << " steps)\n";
    return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CliConfig c;
    CLI::App app{"klora: per-layer, per-step selection between a content LoRA and a style LoRA"};
    app.name(args.empty() ? "klora" : fs::path(args.front()).filename().string());
    app.require_subcommand(1);

    auto* analyze = app.add_subcommand("analyze", "Print Top-K scores, gamma, K and magnitude histograms");
    add_weight_flags(analyze, c, true);

    auto* schedule = app.add_subcommand("schedule", "Build the selection schedule and write a manifest");
    add_weight_flags(schedule, c, true);
    schedule->add_option("-o,--output", c.output, "Manifest path (.json)")->required();
    add_heatmap_flags(schedule, c);

    auto* merge = app.add_subcommand("merge", "Write per-step merged LoRA checkpoints from a manifest");
    merge->add_option("--manifest", c.manifest, "Manifest produced by schedule or ablate")->required();
    merge->add_option("--content", c.content_path, "Content LoRA (default: path recorded in the manifest)");
    merge->add_option("--style", c.style_path, "Style LoRA (default: path recorded in the manifest)");
    merge->add_option("--out-dir", c.out_dir, "Directory for step_NNN.safetensors files")->required();
    auto* step_opt = merge->add_option("--step", c.step, "Export a single step");
    merge->add_flag("--boundaries-only", c.boundaries_only, "Only export steps where the selection changes")
        ->excludes(step_opt);

    auto* heatmap = app.add_subcommand("heatmap", "Render a manifest's grid as SVG or PPM");
    heatmap->add_option("--manifest", c.manifest, "Manifest path")->required();
    heatmap->add_option("-o,--output", c.output, "Image path")->required();
    heatmap->add_option("--format", c.heatmap_format, "svg | ppm (default: from extension)")
        ->check(CLI::IsMember({"svg", "ppm"}));
    heatmap->add_option("--cell-size", c.cell_size, "Cell size in pixels")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();

    auto* ablate = app.add_subcommand("ablate", "Ablation schedules: fixed, random, subset, noscale, ksweep");
    add_weight_flags(ablate, c, false);
    ablate->add_option("--mode", c.selection_mode, "fixed | random | subset | noscale | ksweep")
        ->required()
        ->check(CLI::IsMember({"fixed", "random", "subset", "noscale", "ksweep"}));
    ablate->add_option("-o,--output", c.output, "Manifest path (ksweep inserts .k<K> before the extension)")
        ->required();
    ablate->add_option("--seed", c.seed, "Seed for random and subset modes (default 0)");
    ablate->add_option("--p-content", c.p_content, "Random mode: probability of picking content")
        ->check(CLI::Range(0.0, 1.0))
        ->capture_default_str();
    ablate->add_option("--fraction", c.fraction, "Subset mode: fraction of layers active per step")
        ->check(CLI::Range(0.0, 1.0));
    ablate->add_option("--k-values", c.k_values, "ksweep mode: K values")->delimiter(',');
    ablate->add_option("--fixed-reading", c.fixed_reading, "Fixed mode: early-content | literal")
        ->check(CLI::IsMember({"early-content", "literal"}))
        ->capture_default_str();
    add_heatmap_flags(ablate, c);

    std::vector<const char*> argv;
    argv.reserve(args.size() + 1);
    if (args.empty()) argv.push_back("klora");
    for (const auto& a : args) argv.push_back(a.c_str());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 2;
    }

    try {
        if (analyze->parsed()) {
            c.subcommand = "analyze";
            return cmd_analyze(c, out, err);
        }
        if (schedule->parsed()) {
            c.subcommand = "schedule";
            return cmd_schedule(c, out, err);
        }
        if (merge->parsed()) {
            c.subcommand = "merge";
            return cmd_merge(c, out, err);
        }
        if (heatmap->parsed()) {
            c.subcommand = "heatmap";
            return cmd_heatmap(c, out);
        }
        if (ablate->parsed()) {
            c.subcommand = "ablate";
            if (c.selection_mode == "ksweep") return cmd_ksweep(c, out, err);
            return cmd_ablate(c, out, err);
        }
    } catch (const Error& e) {
        err << "error: " << to_string(e.kind()) << ": " << e.what() << "\n";
        return e.is_input_error() ? 2 : 1;
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << "\n";
        return 1;
    }
    err << "error: no subcommand\n";
    return 2;
}

}  // namespace klora::cli
